//! The generator pair (encoder and decoder U-Nets), the patch-level critic,
//! and the noise-channel input assembly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, Graph, ParamSet, Tensor, Var};
use crate::types::{FaceCrop, CROP_SIZE};

const LEAK: f32 = 0.2;

/// Shape of a U-shaped encoder/decoder: `depth` pooling levels with widths
/// `base_width · 2^level`, a bottleneck at the deepest width, and skip
/// concatenation on the way up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetArch {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl UNetArch {
    pub const fn encoder(base_width: usize, depth: usize) -> Self {
        UNetArch {
            in_channels: 4,
            base_width,
            depth,
        }
    }

    pub const fn decoder(base_width: usize, depth: usize) -> Self {
        UNetArch {
            in_channels: 3,
            base_width,
            depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.depth == 0 {
            return Err(Error::Config("U-Net width and depth must be positive".into()));
        }
        if CROP_SIZE >> self.depth == 0 || CROP_SIZE % (1 << self.depth) != 0 {
            return Err(Error::Config(format!("U-Net depth {} too large for 64x64 inputs", self.depth)));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

impl Default for UNetArch {
    /// Four levels, 64 → 128 → 256 → 512 channels, 4-channel input.
    fn default() -> Self {
        UNetArch::encoder(64, 4)
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    first: Conv2d,
    second: Conv2d,
}

impl DoubleConv {
    fn new<R: Rng>(ps: &mut ParamSet, name: &str, in_c: usize, out_c: usize, rng: &mut R) -> Self {
        DoubleConv {
            first: Conv2d::new(ps, &format!("{name}.0"), in_c, out_c, 3, 1, 1, rng),
            second: Conv2d::new(ps, &format!("{name}.1"), out_c, out_c, 3, 1, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, bind: &mut Binding, x: Var) -> Var {
        let h = self.first.forward(g, bind, x);
        let h = g.leaky_relu(h, LEAK);
        let h = self.second.forward(g, bind, h);
        g.leaky_relu(h, LEAK)
    }
}

/// U-shaped image-to-image network ending in a sigmoid, so outputs lie in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct UNet {
    arch: UNetArch,
    params: ParamSet,
    down: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up: Vec<DoubleConv>,
    head: Conv2d,
}

impl UNet {
    pub fn new(arch: UNetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut down = Vec::with_capacity(arch.depth);
        let mut in_c = arch.in_channels;
        for level in 0..arch.depth {
            down.push(DoubleConv::new(&mut ps, &format!("down{level}"), in_c, arch.width(level), &mut rng));
            in_c = arch.width(level);
        }
        let deepest = arch.width(arch.depth - 1);
        let bottleneck = DoubleConv::new(&mut ps, "bottleneck", deepest, deepest, &mut rng);
        let mut up = Vec::with_capacity(arch.depth);
        let mut below = deepest;
        for level in (0..arch.depth).rev() {
            let w = arch.width(level);
            up.push(DoubleConv::new(&mut ps, &format!("up{level}"), below + w, w, &mut rng));
            below = w;
        }
        let head = Conv2d::new(&mut ps, "head", arch.base_width, 3, 1, 1, 0, &mut rng);
        Ok(UNet {
            arch,
            params: ps,
            down,
            bottleneck,
            up,
            head,
        })
    }

    pub fn arch(&self) -> UNetArch {
        self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `x` is `[N, in_channels, 64, 64]`; returns `[N, 3, 64, 64]` in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, x: Var) -> Var {
        let mut skips = Vec::with_capacity(self.arch.depth);
        let mut h = x;
        for block in &self.down {
            let s = block.forward(g, bind, h);
            skips.push(s);
            h = g.max_pool2(s);
        }
        h = self.bottleneck.forward(g, bind, h);
        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let upsampled = g.upsample2(h);
            let joined = g.concat(&[upsampled, skip], 1);
            h = block.forward(g, bind, joined);
        }
        let out = self.head.forward(g, bind, h);
        g.sigmoid(out)
    }

    /// Inference on a batch tensor.
    pub fn run(&self, input: &Tensor) -> Result<Tensor> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.arch.in_channels || shape[2] != CROP_SIZE || shape[3] != CROP_SIZE {
            return Err(Error::Contract(format!(
                "U-Net expects [N,{},64,64], got {shape:?}",
                self.arch.in_channels
            )));
        }
        let mut g = Graph::new();
        let mut bind = Binding::new(&self.params, false);
        let x = g.input(input.clone());
        let y = self.forward(&mut g, &mut bind, x);
        Ok(g.value(y).clone())
    }
}

/// Builds the 4-channel encoder input `[4, 64, 64]`: the crop's RGB planes
/// followed by i.i.d. uniform noise drawn from `seed`.
pub fn assemble_encoder_input(crop: &FaceCrop, seed: u64) -> Tensor {
    let mut data = crop.to_chw();
    data.reserve(CROP_SIZE * CROP_SIZE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.extend((0..CROP_SIZE * CROP_SIZE).map(|_| rng.random::<f32>()));
    Tensor::from_vec(&[4, CROP_SIZE, CROP_SIZE], data)
}

/// Produces the de-identified face for each crop, using `seeds[i]` for the
/// noise channel of item `i`.
pub fn encode(encoder: &UNet, crops: &[&FaceCrop], seeds: &[u64]) -> Result<Vec<FaceCrop>> {
    if crops.len() != seeds.len() {
        return Err(Error::Contract("one noise seed per crop".into()));
    }
    if crops.is_empty() {
        return Ok(Vec::new());
    }
    let items: Vec<Tensor> = crops.iter().zip(seeds).map(|(c, &s)| assemble_encoder_input(c, s)).collect();
    let out = encoder.run(&Tensor::stack(&items))?;
    FaceCrop::from_batch_tensor(&out)
}

/// Reconstructs the original face from a de-identified one.
pub fn decode(decoder: &UNet, faces: &[&FaceCrop]) -> Result<Vec<FaceCrop>> {
    if faces.is_empty() {
        return Ok(Vec::new());
    }
    let out = decoder.run(&FaceCrop::batch_tensor(faces))?;
    FaceCrop::from_batch_tensor(&out)
}

/// Patch critic shape: `layers` stride-2 4×4 convolutions with widths
/// `base_width · 2^i`, then a 3×3 single-channel score layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CriticArch {
    pub base_width: usize,
    pub layers: usize,
}

impl Default for CriticArch {
    fn default() -> Self {
        CriticArch {
            base_width: 64,
            layers: 4,
        }
    }
}

impl CriticArch {
    /// Side of the score grid for a 64×64 input.
    pub fn grid_side(&self) -> usize {
        (0..self.layers).fold(CROP_SIZE, |s, _| crate::nn::conv_out(s, 4, 2, 1))
    }
}

/// Patch-level critic: scores a grid of overlapping patches and averages
/// them into one unbounded real per image.
#[derive(Clone, Debug)]
pub struct Critic {
    arch: CriticArch,
    params: ParamSet,
    convs: Vec<Conv2d>,
    score: Conv2d,
}

impl Critic {
    pub fn new(arch: CriticArch, seed: u64) -> Result<Self> {
        if arch.base_width == 0 || arch.layers == 0 || arch.layers > 5 {
            return Err(Error::Config(format!("unsupported critic shape {arch:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut convs = Vec::with_capacity(arch.layers);
        let mut in_c = 3;
        for i in 0..arch.layers {
            let w = arch.base_width << i;
            convs.push(Conv2d::new(&mut ps, &format!("patch{i}"), in_c, w, 4, 2, 1, &mut rng));
            in_c = w;
        }
        let score = Conv2d::new(&mut ps, "score", in_c, 1, 3, 1, 1, &mut rng);
        Ok(Critic {
            arch,
            params: ps,
            convs,
            score,
        })
    }

    pub fn arch(&self) -> CriticArch {
        self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Score grid `[N, 1, s, s]` for `[N, 3, 64, 64]` inputs.
    pub fn grid(&self, g: &mut Graph, bind: &mut Binding, x: Var) -> Var {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, bind, h);
            h = g.leaky_relu(h, LEAK);
        }
        self.score.forward(g, bind, h)
    }

    /// Per-image mean patch score, shape `[N]`.
    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, x: Var) -> Var {
        let grid = self.grid(g, bind, x);
        g.mean_per_item(grid)
    }

    pub fn criticize(&self, crops: &[&FaceCrop]) -> Vec<f32> {
        if crops.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new();
        let mut bind = Binding::new(&self.params, false);
        let x = g.input(FaceCrop::batch_tensor(crops));
        let y = self.forward(&mut g, &mut bind, x);
        g.value(y).data().to_vec()
    }

    /// Clamps every critic parameter into `[-delta, delta]`.
    pub fn clip_weights(&mut self, delta: f32) -> Result<()> {
        clip_params(&mut self.params, delta)
    }

    pub fn max_abs_weight(&self) -> f32 {
        self.params.max_abs_trainable()
    }
}

pub(crate) fn clip_params(params: &mut ParamSet, delta: f32) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Config(format!("clipping bound must be positive, got {delta}")));
    }
    for e in params.entries_mut().iter_mut().filter(|e| e.trainable) {
        for v in e.value.data_mut() {
            *v = v.clamp(-delta, delta);
        }
    }
    Ok(())
}

/// Converts a batch of crops plus per-item seeds into an encoder batch.
pub(crate) fn encoder_batch(crops: &[&FaceCrop], seeds: &[u64]) -> Tensor {
    let items: Vec<Tensor> = crops.iter().zip(seeds).map(|(c, &s)| assemble_encoder_input(c, s)).collect();
    Tensor::stack(&items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::CROP_LEN;

    fn tiny_unet(in_c: usize) -> UNet {
        let arch = UNetArch {
            in_channels: in_c,
            base_width: 4,
            depth: 4,
        };
        UNet::new(arch, 3).unwrap()
    }

    fn crop(seed: u64) -> FaceCrop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FaceCrop::from_hwc((0..CROP_LEN).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn noise_channel_is_seeded() {
        let c = crop(1);
        let a = assemble_encoder_input(&c, 5);
        let b = assemble_encoder_input(&c, 5);
        let d = assemble_encoder_input(&c, 6);
        assert_eq!(a, b);
        let plane = CROP_SIZE * CROP_SIZE;
        assert_eq!(&a.data()[..3 * plane], &d.data()[..3 * plane]);
        assert_ne!(&a.data()[3 * plane..], &d.data()[3 * plane..]);
        assert_eq!(&a.data()[..3 * plane], c.to_chw().as_slice());
        let mean = a.data()[3 * plane..].iter().sum::<f32>() / plane as f32;
        assert!((0.45..=0.55).contains(&mean), "noise mean {mean}");
    }

    #[test]
    fn untrained_generators_produce_bounded_outputs() {
        let enc = tiny_unet(4);
        let dec = tiny_unet(3);
        let crops = [crop(1), crop(2), crop(3)];
        let refs: Vec<&FaceCrop> = crops.iter().collect();
        let a = encode(&enc, &refs, &[1, 2, 3]).unwrap();
        assert_eq!(a.len(), 3);
        let r = decode(&dec, &a.iter().collect::<Vec<_>>()).unwrap();
        for c in a.iter().chain(&r) {
            assert_eq!(c.hwc().len(), CROP_LEN);
            assert!(c.hwc().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(encode(&enc, &refs, &[1, 2, 3]).unwrap(), a);
    }

    #[test]
    fn batch_items_are_independent() {
        let enc = tiny_unet(4);
        let (c1, c2, c3) = (crop(1), crop(2), crop(3));
        let both = encode(&enc, &[&c1, &c2], &[7, 8]).unwrap();
        let other = encode(&enc, &[&c1, &c3], &[7, 9]).unwrap();
        let alone = encode(&enc, &[&c1], &[7]).unwrap();
        assert_eq!(both[0], alone[0]);
        assert_eq!(other[0], alone[0]);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let enc = tiny_unet(4);
        assert!(enc.run(&Tensor::zeros(&[1, 3, 64, 64])).is_err());
        assert!(UNet::new(UNetArch::encoder(4, 7), 0).is_err());
    }

    #[test]
    fn critic_grid_is_four_by_four() {
        let arch = CriticArch {
            base_width: 4,
            layers: 4,
        };
        assert_eq!(arch.grid_side(), 4);
        let critic = Critic::new(arch, 1).unwrap();
        let mut g = Graph::new();
        let mut bind = Binding::new(critic.params(), false);
        let x = g.input(FaceCrop::batch_tensor(&[&crop(1), &crop(2)]));
        let grid = critic.grid(&mut g, &mut bind, x);
        assert_eq!(g.shape(grid), &[2, 1, 4, 4]);
    }

    #[test]
    fn zeroed_critic_scores_zero() {
        let mut critic = Critic::new(CriticArch { base_width: 4, layers: 4 }, 1).unwrap();
        for e in critic.params_mut().entries_mut() {
            e.value = Tensor::zeros(e.value.shape());
        }
        let scores = critic.criticize(&[&crop(1), &FaceCrop::filled(1.0)]);
        assert_eq!(scores, vec![0.0, 0.0]);
    }

    #[test]
    fn clipping_is_a_clamp_and_idempotent() {
        let mut critic = Critic::new(CriticArch { base_width: 4, layers: 4 }, 1).unwrap();
        critic.params_mut().entries_mut()[0].value.data_mut()[0] = 0.5;
        critic.clip_weights(0.01).unwrap();
        assert_eq!(critic.params().entries()[0].value.data()[0], 0.01);
        assert!(critic.max_abs_weight() <= 0.01);
        let once = critic.params().clone();
        critic.clip_weights(0.01).unwrap();
        assert_eq!(critic.params(), &once);
        assert!(critic.clip_weights(0.0).is_err());
        assert!(critic.clip_weights(-1.0).is_err());
    }

    #[test]
    fn clipping_leaves_small_weights_alone() {
        let mut critic = Critic::new(CriticArch { base_width: 4, layers: 4 }, 2).unwrap();
        critic.clip_weights(0.01).unwrap();
        let before = critic.params().clone();
        critic.clip_weights(0.02).unwrap();
        assert_eq!(critic.params(), &before);
    }
}
