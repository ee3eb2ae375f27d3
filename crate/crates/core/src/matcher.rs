//! Pairwise attribute matcher: one binary "same value?" network per label,
//! trained on image pairs with a cross-entropy objective.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Adam, BatchNorm2d, Binding, Conv2d, Dense, Graph, ParamSet, Phase, Tensor, Var};
use crate::training::Dataset;
use crate::types::{FaceCrop, LabelVector, CROP_SIZE};

/// Clamp applied to predicted probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

const STRIDES: [usize; 5] = [2, 1, 1, 2, 2];

/// Per-label agreement: ground truth in `{0, 1}` or predictions in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgreementVector(pub Vec<f64>);

impl AgreementVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `b[m] = 1` where the labels agree and `0` where they differ.
pub fn agreement_vector(l: &LabelVector, other: &LabelVector) -> Result<AgreementVector> {
    if l.len() != other.len() {
        return Err(Error::Contract(format!(
            "label vectors differ in length ({} vs {})",
            l.len(),
            other.len()
        )));
    }
    Ok(AgreementVector(
        l.0.iter().zip(&other.0).map(|(a, b)| if a == b { 1.0 } else { 0.0 }).collect(),
    ))
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `−bᵀlog b̂ − (1−b)ᵀlog(1−b̂)` summed over components.
pub fn cross_entropy(b: &[f64], b_hat: &[f64]) -> Result<f64> {
    if b.len() != b_hat.len() {
        return Err(Error::Contract("agreement vectors differ in length".into()));
    }
    Ok(b.iter()
        .zip(b_hat)
        .map(|(&y, &p)| {
            let p = clamp_prob(p);
            -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
        })
        .sum())
}

/// Derivative of [`cross_entropy`] with respect to `b̂`; zero where the
/// clamp is active.
pub fn cross_entropy_grad(b: &[f64], b_hat: &[f64]) -> Result<Vec<f64>> {
    if b.len() != b_hat.len() {
        return Err(Error::Contract("agreement vectors differ in length".into()));
    }
    Ok(b.iter()
        .zip(b_hat)
        .map(|(&y, &p)| {
            if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                0.0
            } else {
                -y / p + (1.0 - y) / (1.0 - p)
            }
        })
        .collect())
}

/// Batch mean of [`cross_entropy`].
pub fn cross_entropy_batch(b: &[AgreementVector], b_hat: &[AgreementVector]) -> Result<f64> {
    if b.len() != b_hat.len() || b.is_empty() {
        return Err(Error::Contract("batch sizes differ or are zero".into()));
    }
    let mut total = 0.0;
    for (y, p) in b.iter().zip(b_hat) {
        total += cross_entropy(&y.0, &p.0)?;
    }
    Ok(total / b.len() as f64)
}

/// Layer widths of one binary matcher. The default follows the reference
/// design: 16, 64, 128, 64, 64 kernels and a 128-unit dense layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatcherArch {
    pub widths: [usize; 5],
    pub dense: usize,
    pub dropout: f32,
    pub momentum: f32,
}

impl Default for MatcherArch {
    fn default() -> Self {
        MatcherArch {
            widths: [16, 64, 128, 64, 64],
            dense: 128,
            dropout: 0.25,
            momentum: 0.8,
        }
    }
}

impl MatcherArch {
    /// Every width divided by `factor` (at least 1).
    pub fn scaled_down(factor: usize) -> Self {
        let base = Self::default();
        MatcherArch {
            widths: base.widths.map(|w| (w / factor).max(1)),
            dense: (base.dense / factor).max(1),
            ..base
        }
    }

    fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.dense == 0 {
            return Err(Error::Config("matcher widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        let side = STRIDES.iter().fold(CROP_SIZE, |s, &st| crate::nn::conv_out(s, 3, st, 1));
        self.widths[4] * side * side
    }
}

/// One binary matcher for a single label.
#[derive(Clone, Debug)]
struct PairMatcher {
    params: ParamSet,
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm2d>,
    hidden: Dense,
    out: Dense,
    arch: MatcherArch,
}

impl PairMatcher {
    fn new(arch: MatcherArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut convs = Vec::with_capacity(5);
        let mut norms = Vec::with_capacity(5);
        let mut in_c = 6;
        for (i, (&w, &stride)) in arch.widths.iter().zip(&STRIDES).enumerate() {
            convs.push(Conv2d::new(&mut ps, &format!("conv{i}"), in_c, w, 3, stride, 1, &mut rng));
            norms.push(BatchNorm2d::new(&mut ps, &format!("bn{i}"), w, arch.momentum));
            in_c = w;
        }
        let hidden = Dense::new(&mut ps, "dense0", arch.flat_features(), arch.dense, &mut rng);
        let out = Dense::new(&mut ps, "dense1", arch.dense, 1, &mut rng);
        PairMatcher {
            params: ps,
            convs,
            norms,
            hidden,
            out,
            arch,
        }
    }

    /// `x` is `[N, 6, 64, 64]`; returns `[N, 1]` probabilities.
    fn forward<R: Rng>(&self, g: &mut Graph, bind: &mut Binding, x: Var, phase: &mut Phase<R>) -> Var {
        let train = phase.is_train();
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(g, bind, h);
            h = norm.forward(g, bind, h, train);
            h = g.leaky_relu(h, 0.2);
            if let Phase::Train(rng) = phase {
                if self.arch.dropout > 0.0 {
                    h = g.dropout(h, self.arch.dropout, &mut **rng);
                }
            }
        }
        let n = g.shape(h)[0];
        let h = g.reshape(h, &[n, self.arch.flat_features()]);
        let h = self.hidden.forward(g, bind, h);
        let h = g.relu(h);
        let h = self.out.forward(g, bind, h);
        g.sigmoid(h)
    }
}

/// `t` independent binary matchers whose outputs are concatenated in label order.
#[derive(Clone, Debug)]
pub struct MatcherModel {
    arch: MatcherArch,
    heads: Vec<PairMatcher>,
}

/// Stacks `(a, b)` pairs into a `[N, 6, 64, 64]` batch.
pub fn pair_tensor(pairs: &[(&FaceCrop, &FaceCrop)]) -> Tensor {
    let plane = CROP_SIZE * CROP_SIZE * 3;
    let mut data = Vec::with_capacity(pairs.len() * plane * 2);
    for (a, b) in pairs {
        data.extend(a.to_chw());
        data.extend(b.to_chw());
    }
    Tensor::from_vec(&[pairs.len(), 6, CROP_SIZE, CROP_SIZE], data)
}

impl MatcherModel {
    pub fn new(arch: MatcherArch, t: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if !(1..=8).contains(&t) {
            return Err(Error::Config(format!("label count t must be in 1..=8, got {t}")));
        }
        let heads = (0..t).map(|m| PairMatcher::new(arch, head_seed(seed, m))).collect();
        Ok(MatcherModel { arch, heads })
    }

    pub fn t(&self) -> usize {
        self.heads.len()
    }

    pub fn arch(&self) -> MatcherArch {
        self.arch
    }

    /// Parameters of the matcher for label `m`.
    pub fn head_params(&self, m: usize) -> &ParamSet {
        &self.heads[m].params
    }

    pub fn predict(&self, a: &FaceCrop, b: &FaceCrop) -> AgreementVector {
        self.predict_batch(&[(a, b)]).pop().expect("one pair in, one out")
    }

    pub fn predict_batch(&self, pairs: &[(&FaceCrop, &FaceCrop)]) -> Vec<AgreementVector> {
        if pairs.is_empty() {
            return Vec::new();
        }
        let input = pair_tensor(pairs);
        let mut g = Graph::new();
        let x = g.input(input);
        let y = self.graph_forward(&mut g, x);
        let t = self.t();
        g.value(y)
            .data()
            .chunks(t)
            .map(|row| AgreementVector(row.iter().map(|&p| clamp_prob(p as f64)).collect()))
            .collect()
    }

    /// Inference-mode forward inside a caller's graph with frozen weights;
    /// gradients still reach `x`. Returns `[N, t]`.
    pub(crate) fn graph_forward(&self, g: &mut Graph, x: Var) -> Var {
        let outs: Vec<Var> = self
            .heads
            .iter()
            .map(|h| {
                let mut bind = Binding::new(&h.params, false);
                h.forward(g, &mut bind, x, &mut Phase::<ChaCha8Rng>::Eval)
            })
            .collect();
        g.concat(&outs, 1)
    }

    fn header(&self) -> Vec<u32> {
        let mut h: Vec<u32> = self.arch.widths.iter().map(|&w| w as u32).collect();
        h.push(self.arch.dense as u32);
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params: Vec<&ParamSet> = self.heads.iter().map(|h| &h.params).collect();
        checkpoint::encode(checkpoint::MAGIC_MATCHER, self.t(), &[], &self.header(), &params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_bytes())
    }

    /// Loads a matcher; `expected_t` rejects checkpoints trained for another label count.
    pub fn load(path: &Path, expected_t: Option<usize>) -> Result<Self> {
        let raw = checkpoint::read(path, checkpoint::MAGIC_MATCHER, false)?;
        checkpoint::check_t(path, raw.t, expected_t)?;
        if raw.header.len() != 6 {
            return Err(Error::checkpoint(path, "malformed matcher architecture header"));
        }
        let h = &raw.header;
        let arch = MatcherArch {
            widths: [h[0], h[1], h[2], h[3], h[4]].map(|w| w as usize),
            dense: h[5] as usize,
            ..MatcherArch::default()
        };
        let mut model =
            MatcherModel::new(arch, raw.t, 0).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        let mut params: Vec<&mut ParamSet> = model.heads.iter_mut().map(|h| &mut h.params).collect();
        checkpoint::load_params(path, &raw.payload, &mut params)?;
        Ok(model)
    }
}

fn head_seed(seed: u64, m: usize) -> u64 {
    seed.wrapping_add((m as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Phase-1 hyperparameters. The defaults train a quarter-width matcher,
/// which fits a CPU budget; [`Phase1Config::full_size`] keeps every width.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase1Config {
    pub arch: MatcherArch,
    pub t: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Defaults to `dataset.len() / batch_size`.
    pub steps_per_epoch: Option<usize>,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Phase1Config {
            arch: MatcherArch::scaled_down(4),
            t: 4,
            epochs: 32,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            steps_per_epoch: None,
        }
    }
}

impl Phase1Config {
    pub fn full_size() -> Self {
        Phase1Config {
            arch: MatcherArch::default(),
            epochs: 5,
            learning_rate: 1e-4,
            ..Phase1Config::default()
        }
    }
}

/// Draws balanced agree/disagree pairs for one label.
#[derive(Clone, Debug)]
pub struct PairSampler {
    label: usize,
    values: Vec<u32>,
    groups: BTreeMap<u32, Vec<usize>>,
}

impl PairSampler {
    pub fn new(dataset: &Dataset, label: usize) -> Result<Self> {
        if label >= dataset.t() {
            return Err(Error::Config(format!("label {label} out of range for t={}", dataset.t())));
        }
        let values: Vec<u32> = dataset.samples().iter().map(|s| s.labels.0[label]).collect();
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &v) in values.iter().enumerate() {
            groups.entry(v).or_default().push(i);
        }
        if groups.len() < 2 {
            return Err(Error::Config(format!(
                "label {label} has a single category; disagreeing pairs cannot be sampled"
            )));
        }
        if groups.values().all(|g| g.len() < 2) {
            return Err(Error::Config(format!("label {label} has no category with two samples")));
        }
        Ok(PairSampler { label, values, groups })
    }

    pub fn label(&self) -> usize {
        self.label
    }

    /// `(i, j, agree)` triples; the first half agree, the second half disagree.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<(usize, usize, bool)> {
        let n = self.values.len();
        let agree_count = count.div_ceil(2);
        let mut out = Vec::with_capacity(count);
        while out.len() < agree_count {
            let i = rng.random_range(0..n);
            let group = &self.groups[&self.values[i]];
            if group.len() < 2 {
                continue;
            }
            let j = loop {
                let j = group[rng.random_range(0..group.len())];
                if j != i {
                    break j;
                }
            };
            out.push((i, j, true));
        }
        while out.len() < count {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if self.values[i] != self.values[j] {
                out.push((i, j, false));
            }
        }
        out
    }
}

/// Trains each label's matcher independently on balanced pairs.
pub fn train_phase1(dataset: &Dataset, config: &Phase1Config) -> Result<MatcherModel> {
    train_phase1_logged(dataset, config).map(|(m, _)| m)
}

/// Mean training cross-entropy of one label head over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase1Epoch {
    pub label: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// `label,epoch,loss` rows.
pub fn phase1_history_csv(history: &[Phase1Epoch]) -> String {
    let mut out = String::from("label,epoch,loss\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.label, h.epoch, h.loss));
    }
    out
}

/// [`train_phase1`] that also returns the per-epoch losses.
pub fn train_phase1_logged(dataset: &Dataset, config: &Phase1Config) -> Result<(MatcherModel, Vec<Phase1Epoch>)> {
    if config.t != dataset.t() {
        return Err(Error::Config(format!(
            "configuration has t={}, dataset has t={}",
            config.t,
            dataset.t()
        )));
    }
    if config.batch_size < 2 {
        return Err(Error::Config("phase-1 batch size must be at least 2".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    let samplers = (0..config.t).map(|m| PairSampler::new(dataset, m)).collect::<Result<Vec<_>>>()?;
    let mut model = MatcherModel::new(config.arch, config.t, config.seed)?;
    let steps = config.steps_per_epoch.unwrap_or(dataset.len() / config.batch_size).max(1);
    let mut history = Vec::with_capacity(config.t * config.epochs);
    for (m, sampler) in samplers.iter().enumerate() {
        let head = &mut model.heads[m];
        let mut rng = ChaCha8Rng::seed_from_u64(head_seed(config.seed ^ 0x5EED, m));
        let mut adam = Adam::new(&head.params, config.learning_rate, 0.9, 0.999);
        for epoch in 0..config.epochs {
            let mut epoch_loss = 0.0;
            for _ in 0..steps {
                let pairs = sampler.sample(config.batch_size, &mut rng);
                let crops: Vec<(&FaceCrop, &FaceCrop)> = pairs
                    .iter()
                    .map(|&(i, j, _)| (&dataset.get(i).crop, &dataset.get(j).crop))
                    .collect();
                let targets: Vec<f64> = pairs.iter().map(|&(_, _, a)| if a { 1.0 } else { 0.0 }).collect();
                let (loss, grads, updates) = {
                    let mut g = Graph::new();
                    let mut bind = Binding::new(&head.params, true);
                    let x = g.input(pair_tensor(&crops));
                    let y = head.forward(&mut g, &mut bind, x, &mut Phase::Train(&mut rng));
                    let preds: Vec<f64> = g.value(y).data().iter().map(|&p| p as f64).collect();
                    let n = preds.len() as f64;
                    let loss = cross_entropy(&targets, &preds)? / n;
                    let local: Vec<f32> =
                        cross_entropy_grad(&targets, &preds)?.iter().map(|d| (d / n) as f32).collect();
                    let l = g.custom_scalar(&[y], loss as f32, vec![Tensor::from_vec(&[preds.len(), 1], local)]);
                    g.backward(l);
                    (loss, bind.grads(&g), bind.take_updates())
                };
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        term: format!("cross_entropy[label {m}]"),
                        step: Some(adam.steps_taken() as usize),
                    });
                }
                adam.step(&mut head.params, &grads);
                head.params.apply_updates(updates);
                epoch_loss += loss;
            }
            let loss = epoch_loss / steps as f64;
            info!("phase1 label {m} epoch {epoch}: loss {loss:.4}");
            history.push(Phase1Epoch { label: m, epoch, loss });
        }
    }
    Ok((model, history))
}

/// Per-label accuracy (threshold 0.5) on `pairs_per_label` balanced pairs.
pub fn pair_accuracy(model: &MatcherModel, dataset: &Dataset, pairs_per_label: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(model.t());
    for m in 0..model.t() {
        let sampler = PairSampler::new(dataset, m)?;
        let pairs = sampler.sample(pairs_per_label, &mut rng);
        let mut correct = 0usize;
        for chunk in pairs.chunks(32) {
            let crops: Vec<(&FaceCrop, &FaceCrop)> =
                chunk.iter().map(|&(i, j, _)| (&dataset.get(i).crop, &dataset.get(j).crop)).collect();
            let input = pair_tensor(&crops);
            let mut g = Graph::new();
            let x = g.input(input);
            let head = &model.heads[m];
            let mut bind = Binding::new(&head.params, false);
            let y = head.forward(&mut g, &mut bind, x, &mut Phase::<ChaCha8Rng>::Eval);
            for (&p, &(_, _, agree)) in g.value(y).data().iter().zip(chunk) {
                if (p >= 0.5) == agree {
                    correct += 1;
                }
            }
        }
        out.push(correct as f64 / pairs.len().max(1) as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_output(model: &mut MatcherModel) {
        for h in &mut model.heads {
            let (w, b) = (h.out.weight, h.out.bias);
            h.params.get_mut(w).data_mut().fill(0.0);
            h.params.get_mut(b).data_mut().fill(0.0);
        }
    }

    fn tiny() -> MatcherArch {
        MatcherArch::scaled_down(8)
    }

    #[test]
    fn agreement_examples() {
        let a = LabelVector(vec![3, 1, 0, 2]);
        let b = LabelVector(vec![3, 0, 0, 1]);
        assert_eq!(agreement_vector(&a, &b).unwrap().0, vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(agreement_vector(&a, &a).unwrap().0, vec![1.0; 4]);
        let c = LabelVector(vec![0, 2, 1, 0]);
        assert_eq!(agreement_vector(&a, &c).unwrap().0, vec![0.0; 4]);
        assert!(agreement_vector(&a, &LabelVector(vec![1])).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((cross_entropy(&[1.0], &[0.5]).unwrap() - ln2).abs() < 1e-12);
        assert!((cross_entropy(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2.0 * ln2).abs() < 1e-12);
        let perfect = cross_entropy(&[1.0, 0.0], &[1.0 - PROB_EPS, PROB_EPS]).unwrap();
        assert!(perfect <= 2.0 * -(1.0 - PROB_EPS).ln() + 1e-15);
        // Exact 0/1 predictions are clamped rather than producing infinities.
        let clamped = cross_entropy(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!(clamped <= 3.0 * -(1.0 - PROB_EPS).ln() + 1e-15);
        assert!(cross_entropy(&[0.0, 1.0], &[1.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn cross_entropy_gradient_matches_central_differences() {
        for &p in &[0.2, 0.5, 0.8] {
            for &y in &[0.0, 1.0] {
                let h = 1e-6;
                let fd = (cross_entropy(&[y], &[p + h]).unwrap() - cross_entropy(&[y], &[p - h]).unwrap()) / (2.0 * h);
                let an = cross_entropy_grad(&[y], &[p]).unwrap()[0];
                assert!((fd - an).abs() / an.abs() < 1e-4, "p={p} y={y}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn zeroed_output_layer_predicts_one_half() {
        for t in [4, 5] {
            let mut model = MatcherModel::new(tiny(), t, 3).unwrap();
            zero_output(&mut model);
            let a = FaceCrop::filled(0.3);
            let b = FaceCrop::filled(0.9);
            let p = model.predict(&a, &b);
            assert_eq!(p.len(), t);
            assert!(p.0.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn predictions_lie_strictly_inside_unit_interval() {
        let model = MatcherModel::new(tiny(), 5, 1).unwrap();
        let a = FaceCrop::filled(0.0);
        let b = FaceCrop::filled(1.0);
        for v in model.predict(&a, &b).0 {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn heads_are_independently_initialised() {
        let model = MatcherModel::new(tiny(), 4, 9).unwrap();
        assert_ne!(model.head_params(0), model.head_params(1));
    }

    #[test]
    fn byte_round_trip_preserves_predictions() {
        let model = MatcherModel::new(tiny(), 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("da.bin");
        model.save(&path).unwrap();
        let back = MatcherModel::load(&path, Some(4)).unwrap();
        let a = FaceCrop::filled(0.2);
        let b = FaceCrop::filled(0.7);
        assert_eq!(model.predict(&a, &b), back.predict(&a, &b));
        assert!(matches!(MatcherModel::load(&path, Some(5)), Err(Error::Checkpoint { .. })));
    }
}
