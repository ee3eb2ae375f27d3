use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Index of one tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Running statistics are stored here too but never receive gradients.
    pub trainable: bool,
}

/// Ordered collection of a model's tensors. Declaration order is the
/// serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// He-normal initialisation for a weight with the given fan-in.
    pub fn add_he<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| normal.sample(rng) as f32).collect();
        self.add(name, Tensor::from_vec(shape, data), true)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Largest absolute trainable value.
    pub fn max_abs_trainable(&self) -> f32 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .fold(0.0f32, |m, e| m.max(e.value.max_abs()))
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, value) in updates {
            self.entries[id.0].value = value;
        }
    }

    /// Appends every tensor as little-endian `f32` in declaration order.
    pub fn write_le(&self, out: &mut Vec<u8>) {
        for e in &self.entries {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    /// Overwrites every tensor from `bytes`, returning the number of bytes
    /// consumed, or `None` if `bytes` is too short.
    pub fn read_le(&mut self, bytes: &[u8]) -> Option<usize> {
        let needed = self.scalar_count() * 4;
        if bytes.len() < needed {
            return None;
        }
        let mut offset = 0;
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                let chunk: [u8; 4] = bytes[offset..offset + 4].try_into().ok()?;
                *v = f32::from_le_bytes(chunk);
                offset += 4;
            }
        }
        Some(offset)
    }
}

/// Per-graph view of a [`ParamSet`]: creates one leaf per tensor on first
/// use and collects running-statistic updates produced in training mode.
pub struct Binding<'p> {
    params: &'p ParamSet,
    learn: bool,
    leaves: Vec<Option<Var>>,
    updates: Vec<(ParamId, Tensor)>,
}

impl<'p> Binding<'p> {
    /// `learn` controls whether the parameters receive gradients.
    pub fn new(params: &'p ParamSet, learn: bool) -> Self {
        Binding {
            params,
            learn,
            leaves: vec![None; params.len()],
            updates: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let entry = &self.params.entries()[id.0];
        let v = g.leaf(entry.value.clone(), self.learn && entry.trainable);
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn push_update(&mut self, id: ParamId, value: Tensor) {
        self.updates.push((id, value));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates)
    }

    /// Gradients for every tensor, `None` where unused or not trainable.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.leaves
            .iter()
            .map(|leaf| leaf.and_then(|v| g.grad(v).cloned()))
            .collect()
    }
}
