//! Phase 2: the encoder/decoder pair is trained against the patch critic
//! while the phase-1 matcher, frozen, judges attribute agreement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use super::models::Generator;
use crate::error::{Error, Result};
use crate::losses::{
    chi_square, chi_square_grad, loss_ano_grad, loss_ano_with, loss_con, loss_div, AnoSign, LossTerms, LossWeights,
    TERM_NAMES,
};
use crate::matcher::{AgreementVector, MatcherModel};
use crate::networks::{encoder_batch, Critic, CriticArch, UNetArch};
use crate::nn::{Adam, Binding, Graph, Tensor};
use crate::types::{histogram, histogram_backward, FaceCrop, SignVector, CROP_SIZE};

/// Phase-2 hyperparameters. The defaults are the reduced-width desk-scale
/// configuration; [`TrainConfig::full_size`] restores the wide networks.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    /// Generator steps per epoch; `None` means `dataset.len() / batch_size`.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub critic_steps_per_gen_step: usize,
    pub lr_generator: f32,
    pub lr_critic: f32,
    pub sign_vector: SignVector,
    pub encoder_arch: UNetArch,
    pub decoder_arch: UNetArch,
    pub critic_arch: CriticArch,
    pub histogram_bins: usize,
    pub ano_sign: AnoSign,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            epochs: 30,
            batch_size: 8,
            steps_per_epoch: Some(10),
            seed: 0,
            critic_steps_per_gen_step: 5,
            lr_generator: 1e-3,
            lr_critic: 1e-3,
            sign_vector: SignVector::equal_soft(4),
            encoder_arch: UNetArch::encoder(8, 2),
            decoder_arch: UNetArch::decoder(8, 2),
            critic_arch: CriticArch {
                base_width: 8,
                layers: 4,
            },
            histogram_bins: 16,
            ano_sign: AnoSign::Corrected,
        }
    }
}

impl TrainConfig {
    pub fn full_size() -> Self {
        TrainConfig {
            encoder_arch: UNetArch::encoder(64, 4),
            decoder_arch: UNetArch::decoder(64, 4),
            critic_arch: CriticArch::default(),
            steps_per_epoch: None,
            lr_generator: 2e-4,
            lr_critic: 2e-4,
            ..TrainConfig::default()
        }
    }

    pub fn t(&self) -> usize {
        self.sign_vector.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size < 4 {
            return Err(Error::Config(format!(
                "batch_size must be at least 4, got {}",
                self.batch_size
            )));
        }
        if self.critic_steps_per_gen_step == 0 {
            return Err(Error::Config("critic_steps_per_gen_step must be at least 1".into()));
        }
        for (name, lr) in [("lr_generator", self.lr_generator), ("lr_critic", self.lr_critic)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.histogram_bins < 2 {
            return Err(Error::Config("histogram_bins must be at least 2".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        self.encoder_arch.validate()?;
        self.decoder_arch.validate()
    }
}

/// One anchor crop with the partners its loss terms pair it with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub index: usize,
    /// Another frame of the same subject and sequence.
    pub same_sequence: usize,
    /// A frame from a different sequence of the same subject, when the
    /// subject has one.
    pub cross_sequence: Option<usize>,
}

/// Tracklet-aware sampler for phase-2 batches.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    /// Sequences with at least two frames, as dataset positions.
    sequences: Vec<Vec<usize>>,
    /// For each dataset position, the position of its sequence in `sequences`.
    seq_of: Vec<Option<usize>>,
    /// Per subject, indices into `sequences`.
    by_subject: BTreeMap<u32, Vec<usize>>,
    subject_of: Vec<u32>,
    anchors: Vec<usize>,
}

impl BatchSampler {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let mut sequences = Vec::new();
        let mut seq_of = vec![None; dataset.len()];
        let mut by_subject: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for ((subject, sequence), members) in dataset.sequences() {
            if members.len() < 2 {
                warn!("subject {subject} sequence {sequence} has a single frame; it is not used as an anchor");
                continue;
            }
            for &m in &members {
                seq_of[m] = Some(sequences.len());
            }
            by_subject.entry(subject).or_default().push(sequences.len());
            sequences.push(members);
        }
        if sequences.is_empty() {
            return Err(Error::Config("phase 2 needs at least one sequence with two frames".into()));
        }
        let mut any_cross = false;
        for (subject, seqs) in &by_subject {
            if seqs.len() < 2 {
                warn!("subject {subject} has a single sequence; it is excluded from diversity pairs");
            } else {
                any_cross = true;
            }
        }
        if !any_cross {
            return Err(Error::Config(
                "phase 2 needs at least one subject with two sequences".into(),
            ));
        }
        let anchors = (0..dataset.len()).filter(|&i| seq_of[i].is_some()).collect();
        Ok(BatchSampler {
            sequences,
            seq_of,
            by_subject,
            subject_of: dataset.samples().iter().map(|s| s.index.subject).collect(),
            anchors,
        })
    }

    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<BatchItem> {
        (0..batch_size)
            .map(|_| {
                let index = *self.anchors.choose(rng).expect("anchors are non-empty");
                let seq = self.seq_of[index].expect("anchors belong to a sequence");
                let members = &self.sequences[seq];
                let same_sequence = loop {
                    let j = *members.choose(rng).expect("sequence has frames");
                    if j != index {
                        break j;
                    }
                };
                let others: Vec<usize> = self.by_subject[&self.subject_of[index]]
                    .iter()
                    .copied()
                    .filter(|&s| s != seq)
                    .collect();
                let cross_sequence = others
                    .choose(rng)
                    .map(|&s| *self.sequences[s].choose(rng).expect("sequence has frames"));
                BatchItem {
                    index,
                    same_sequence,
                    cross_sequence,
                }
            })
            .collect()
    }
}

/// Draws one batch; builds a [`BatchSampler`] on every call, so loops
/// should keep their own sampler.
pub fn sample_batch<R: Rng>(dataset: &Dataset, config: &TrainConfig, rng: &mut R) -> Result<Vec<BatchItem>> {
    Ok(BatchSampler::new(dataset)?.sample(config.batch_size, rng))
}

/// Per-epoch means of every loss term. Epoch 0 is an evaluation of the
/// untrained models on a probe batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub terms: LossTerms,
    pub total: f64,
    /// Critic objective `L_adv1`.
    pub critic: f64,
    /// Largest critic weight magnitude seen after any clip in the epoch.
    pub critic_max_abs_weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// Values of one term across epochs; `name` is a term name, `L_total`,
    /// `L_adv1` or `critic_max_abs_weight`.
    pub fn series(&self, name: &str) -> Option<Vec<f64>> {
        let pick = |r: &EpochRecord| -> Option<f64> {
            match name {
                "L_total" => Some(r.total),
                "L_adv1" => Some(r.critic),
                "critic_max_abs_weight" => Some(r.critic_max_abs_weight),
                _ => TERM_NAMES.iter().position(|n| *n == name).map(|i| r.terms.values()[i]),
            }
        };
        self.records.iter().map(pick).collect()
    }

    /// `epoch,term,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,term,value\n");
        for r in &self.records {
            for (name, v) in TERM_NAMES.iter().zip(r.terms.values()) {
                writeln!(out, "{},{name},{v}", r.epoch).expect("writing to a string");
            }
            writeln!(out, "{},L_total,{}", r.epoch, r.total).expect("writing to a string");
            writeln!(out, "{},L_adv1,{}", r.epoch, r.critic).expect("writing to a string");
            writeln!(out, "{},critic_max_abs_weight,{}", r.epoch, r.critic_max_abs_weight)
                .expect("writing to a string");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Progress notifications from [`train_phase2_observed`].
#[derive(Clone, Debug, PartialEq)]
pub enum StepEvent {
    Critic {
        step: usize,
        loss: f64,
        max_abs_weight: f64,
    },
    Generator {
        step: usize,
        terms: LossTerms,
    },
}

pub struct Phase2Output {
    pub generator: Generator,
    pub critic: Critic,
    pub history: History,
}

/// Models at initialisation for `config`, before any training step.
pub fn initial_models(config: &TrainConfig) -> Result<(Generator, Critic)> {
    let generator = Generator::new(config.encoder_arch, config.decoder_arch, config.sign_vector.clone(), config.seed)?;
    let critic = Critic::new(config.critic_arch, config.seed ^ 0xC217_1C00)?;
    Ok((generator, critic))
}

pub fn train_phase2(dataset: &Dataset, matcher: &MatcherModel, config: &TrainConfig) -> Result<Phase2Output> {
    train_phase2_observed(dataset, matcher, config, &mut |_| {})
}

/// [`train_phase2`] with a callback after every critic and generator step.
pub fn train_phase2_observed(
    dataset: &Dataset,
    matcher: &MatcherModel,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<Phase2Output> {
    config.validate()?;
    if matcher.t() != config.t() || dataset.t() != config.t() {
        return Err(Error::Config(format!(
            "label counts disagree: sign vector t={}, matcher t={}, dataset t={}",
            config.t(),
            matcher.t(),
            dataset.t()
        )));
    }
    let sampler = BatchSampler::new(dataset)?;
    let (generator, critic) = initial_models(config)?;
    let mut trainer = Trainer {
        dataset,
        matcher,
        config,
        gen_adam: (
            Adam::new(generator.encoder.params(), config.lr_generator, 0.5, 0.999),
            Adam::new(generator.decoder.params(), config.lr_generator, 0.5, 0.999),
        ),
        critic_adam: Adam::new(critic.params(), config.lr_critic, 0.5, 0.999),
        generator,
        critic,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E0B_E000);
    let mut history = History::default();

    let probe = sampler.sample(config.batch_size, &mut probe_rng);
    let critic0 = trainer.critic_step(&probe, &mut probe_rng, false)?;
    let terms0 = trainer.generator_step(&probe, &mut probe_rng, false, 0)?;
    history.records.push(EpochRecord {
        epoch: 0,
        terms: terms0,
        total: weighted(&terms0, &config.weights),
        critic: critic0,
        critic_max_abs_weight: trainer.critic.max_abs_weight() as f64,
    });
    info!("phase2 epoch 0 (untrained): {terms0}");

    let steps = config.steps_per_epoch.unwrap_or(dataset.len() / config.batch_size).max(1);
    let mut gen_step = 0;
    let mut critic_step = 0;
    for epoch in 1..=config.epochs {
        let mut sum = [0.0f64; 6];
        let mut critic_sum = 0.0;
        let mut max_w = 0.0f64;
        for _ in 0..steps {
            for _ in 0..config.critic_steps_per_gen_step {
                let batch = sampler.sample(config.batch_size, &mut rng);
                let loss = trainer.critic_step(&batch, &mut rng, true)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        term: "L_adv1".into(),
                        step: Some(critic_step),
                    });
                }
                let w = trainer.critic.max_abs_weight() as f64;
                max_w = max_w.max(w);
                critic_sum += loss;
                observer(&StepEvent::Critic {
                    step: critic_step,
                    loss,
                    max_abs_weight: w,
                });
                critic_step += 1;
            }
            let batch = sampler.sample(config.batch_size, &mut rng);
            let terms = trainer.generator_step(&batch, &mut rng, true, gen_step)?;
            for (s, v) in sum.iter_mut().zip(terms.values()) {
                *s += v;
            }
            observer(&StepEvent::Generator { step: gen_step, terms });
            gen_step += 1;
        }
        let n = steps as f64;
        let terms = LossTerms {
            mse: sum[0] / n,
            adv: sum[1] / n,
            ano: sum[2] / n,
            con: sum[3] / n,
            div: sum[4] / n,
            dis: sum[5] / n,
        };
        let record = EpochRecord {
            epoch,
            terms,
            total: weighted(&terms, &config.weights),
            critic: critic_sum / (n * config.critic_steps_per_gen_step as f64),
            critic_max_abs_weight: max_w,
        };
        info!(
            "phase2 epoch {epoch}: {terms} L_adv1={:.5} max|w|={:.4}",
            record.critic, record.critic_max_abs_weight
        );
        history.records.push(record);
    }
    Ok(Phase2Output {
        generator: trainer.generator,
        critic: trainer.critic,
        history,
    })
}

fn weighted(terms: &LossTerms, w: &LossWeights) -> f64 {
    terms.values().iter().zip(w.named()).map(|(v, (_, k))| v * k).sum()
}

struct Trainer<'a> {
    dataset: &'a Dataset,
    matcher: &'a MatcherModel,
    config: &'a TrainConfig,
    generator: Generator,
    critic: Critic,
    gen_adam: (Adam, Adam),
    critic_adam: Adam,
}

fn hwc_to_chw(hwc: &[f64]) -> Vec<f32> {
    let plane = CROP_SIZE * CROP_SIZE;
    let mut out = vec![0.0f32; plane * 3];
    for (p, px) in hwc.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + p] = px[c] as f32;
        }
    }
    out
}

impl Trainer<'_> {
    fn crops(&self, idx: impl Iterator<Item = usize>) -> Vec<&FaceCrop> {
        idx.map(|i| &self.dataset.get(i).crop).collect()
    }

    /// One clipped critic update (`update = false` only evaluates).
    fn critic_step(&mut self, batch: &[BatchItem], rng: &mut ChaCha8Rng, update: bool) -> Result<f64> {
        let xs = self.crops(batch.iter().map(|b| b.index));
        let seeds: Vec<u64> = xs.iter().map(|_| rng.random()).collect();
        let a = self.generator.encoder.run(&encoder_batch(&xs, &seeds))?;
        let r = self.generator.decoder.run(&a)?;
        let x = FaceCrop::batch_tensor(&xs);
        let n = xs.len();
        let mut data = x.into_vec();
        data.extend_from_slice(a.data());
        data.extend_from_slice(r.data());
        let all = Tensor::from_vec(&[3 * n, 3, CROP_SIZE, CROP_SIZE], data);

        let mut g = Graph::new();
        let mut bind = Binding::new(self.critic.params(), update);
        let input = g.input(all);
        let scores = self.critic.forward(&mut g, &mut bind, input);
        let s: Vec<f64> = g.value(scores).data().iter().map(|&v| v as f64).collect();
        let loss = crate::losses::loss_adv_critic(&s[..n], &s[n..2 * n], &s[2 * n..])?;
        if !update {
            return Ok(loss);
        }
        let nf = n as f32;
        let local: Vec<f32> = (0..3 * n).map(|i| if i < n { -2.0 / nf } else { 1.0 / nf }).collect();
        let l = g.custom_scalar(&[scores], loss as f32, vec![Tensor::from_vec(&[3 * n], local)]);
        g.backward(l);
        let grads = bind.grads(&g);
        drop(bind);
        self.critic_adam.step(self.critic.params_mut(), &grads);
        self.critic.clip_weights(self.config.weights.delta_gp as f32)?;
        Ok(loss)
    }

    /// One joint encoder/decoder update on the weighted objective.
    fn generator_step(
        &mut self,
        batch: &[BatchItem],
        rng: &mut ChaCha8Rng,
        update: bool,
        step: usize,
    ) -> Result<LossTerms> {
        let n = batch.len();
        let cross: Vec<(usize, usize)> = batch
            .iter()
            .enumerate()
            .filter_map(|(k, b)| b.cross_sequence.map(|q| (k, q)))
            .collect();
        let m = cross.len();
        let xs = self.crops(batch.iter().map(|b| b.index));
        let mut inputs = xs.clone();
        inputs.extend(self.crops(batch.iter().map(|b| b.same_sequence)));
        inputs.extend(self.crops(cross.iter().map(|&(_, q)| q)));
        let seeds: Vec<u64> = inputs.iter().map(|_| rng.random()).collect();
        let cfg = self.config;
        let w = cfg.weights;

        let mut g = Graph::new();
        let mut enc_bind = Binding::new(self.generator.encoder.params(), update);
        let mut dec_bind = Binding::new(self.generator.decoder.params(), update);
        let mut critic_bind = Binding::new(self.critic.params(), false);

        let enc_in = g.input(encoder_batch(&inputs, &seeds));
        let a_all = self.generator.encoder.forward(&mut g, &mut enc_bind, enc_in);
        let a = g.gather(a_all, &(0..n).collect::<Vec<_>>());
        let a_same = g.gather(a_all, &(n..2 * n).collect::<Vec<_>>());
        let r = self.generator.decoder.forward(&mut g, &mut dec_bind, a);
        let x = g.input(FaceCrop::batch_tensor(&xs));

        // L_mse: mean squared error over every pixel of the batch.
        let (xv, rv) = (g.value(x).data(), g.value(r).data());
        let count = xv.len() as f64;
        let mse = xv.iter().zip(rv).map(|(&p, &q)| (q as f64 - p as f64).powi(2)).sum::<f64>() / count;
        let mse_grad: Vec<f32> = xv.iter().zip(rv).map(|(&p, &q)| (2.0 * (q as f64 - p as f64) / count) as f32).collect();
        let mse_node = g.custom_scalar(&[r], mse as f32, vec![Tensor::from_vec(g.shape(r), mse_grad)]);

        // L_adv2 through the frozen critic.
        let sa = self.critic.forward(&mut g, &mut critic_bind, a);
        let sr = self.critic.forward(&mut g, &mut critic_bind, r);
        let ma = g.mean_all(sa);
        let mr = g.mean_all(sr);
        let adv_node = g.combine(&[(ma, -1.0), (mr, -1.0)]);
        let adv = g.value(adv_node).item() as f64;

        // Matcher pairs: (x, a) rows, then (a, a_same), then (a, a_cross).
        let mut pair_blocks = vec![g.concat(&[x, a], 1), g.concat(&[a, a_same], 1)];
        if m > 0 {
            let anchors = g.gather(a, &cross.iter().map(|&(k, _)| k).collect::<Vec<_>>());
            let partners = g.gather(a_all, &(2 * n..2 * n + m).collect::<Vec<_>>());
            pair_blocks.push(g.concat(&[anchors, partners], 1));
        }
        let pairs = g.concat(&pair_blocks, 0);
        let d = self.matcher.graph_forward(&mut g, pairs);
        let t = cfg.t();
        let rows: Vec<AgreementVector> = g
            .value(d)
            .data()
            .chunks(t)
            .map(|c| AgreementVector(c.iter().map(|&v| v as f64).collect()))
            .collect();
        let ano = loss_ano_with(&cfg.sign_vector, &rows[..n], cfg.ano_sign)?;
        let con = loss_con(&rows[n..2 * n])?;
        let div = if m > 0 { loss_div(&rows[2 * n..])? } else { 0.0 };
        let block_grad = |range: std::ops::Range<usize>, per_row: &[f64]| {
            let mut data = vec![0.0f32; rows.len() * t];
            for i in range {
                for (c, &v) in per_row.iter().enumerate() {
                    data[i * t + c] = v as f32;
                }
            }
            Tensor::from_vec(&[rows.len(), t], data)
        };
        let ano_node = g.custom_scalar(
            &[d],
            ano as f32,
            vec![block_grad(0..n, &loss_ano_grad(&cfg.sign_vector, n, cfg.ano_sign))],
        );
        let con_node = g.custom_scalar(&[d], con as f32, vec![block_grad(n..2 * n, &vec![-1.0 / n as f64; t])]);
        let div_grad = if m > 0 { vec![1.0 / m as f64; t] } else { vec![0.0; t] };
        let div_node = g.custom_scalar(&[d], div as f32, vec![block_grad(2 * n..2 * n + m, &div_grad)]);

        // L_dis: chi-square between colour histograms of x and a.
        let a_crops = FaceCrop::from_batch_tensor(g.value(a))?;
        let bins = cfg.histogram_bins;
        let mut dis = 0.0;
        let mut dis_grad = Vec::with_capacity(n * 3 * CROP_SIZE * CROP_SIZE);
        for (xc, ac) in xs.iter().zip(&a_crops) {
            let hx = histogram(xc, bins)?;
            let ha = histogram(ac, bins)?;
            dis += chi_square(&hx.bins, &ha.bins)? / n as f64;
            let d_bins: Vec<f64> = chi_square_grad(&hx.bins, &ha.bins)?.iter().map(|v| v / n as f64).collect();
            dis_grad.extend(hwc_to_chw(&histogram_backward(ac, bins, &d_bins)));
        }
        let dis_node = g.custom_scalar(&[a], dis as f32, vec![Tensor::from_vec(g.shape(a), dis_grad)]);

        let terms = LossTerms {
            mse,
            adv,
            ano,
            con,
            div,
            dis,
        };
        if let Some(term) = terms.first_non_finite() {
            return Err(Error::Divergence {
                term: term.to_string(),
                step: Some(step),
            });
        }
        if !update {
            return Ok(terms);
        }
        let total = g.combine(&[
            (mse_node, w.mse as f32),
            (adv_node, w.adv as f32),
            (ano_node, w.ano as f32),
            (con_node, w.con as f32),
            (div_node, w.div as f32),
            (dis_node, w.dis as f32),
        ]);
        g.backward(total);
        let enc_grads = enc_bind.grads(&g);
        let dec_grads = dec_bind.grads(&g);
        drop((enc_bind, dec_bind, critic_bind));
        self.gen_adam.0.step(self.generator.encoder.params_mut(), &enc_grads);
        self.gen_adam.1.step(self.generator.decoder.params_mut(), &dec_grads);
        Ok(terms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::MatcherArch;
    use crate::training::{generate_synthetic_dataset, SyntheticSpec};
    use std::collections::BTreeSet;

    fn toy() -> Dataset {
        let spec = SyntheticSpec {
            subjects: 6,
            sequences_per_subject: 2,
            frames_per_sequence: 3,
            ..SyntheticSpec::default()
        };
        generate_synthetic_dataset(&spec, 4).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            steps_per_epoch: Some(2),
            critic_steps_per_gen_step: 2,
            encoder_arch: UNetArch::encoder(2, 2),
            decoder_arch: UNetArch::decoder(2, 2),
            critic_arch: CriticArch {
                base_width: 2,
                layers: 3,
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_matcher() -> MatcherModel {
        MatcherModel::new(MatcherArch::scaled_down(16), 4, 1).unwrap()
    }

    #[test]
    fn batches_respect_tracklet_roles() {
        let ds = toy();
        let sampler = BatchSampler::new(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let batch = sampler.sample(8, &mut rng);
            assert_eq!(batch.len(), 8);
            for b in batch {
                let (x, s) = (ds.get(b.index).index, ds.get(b.same_sequence).index);
                assert!(x.same_sequence(&s) && x.frame != s.frame);
                let c = ds.get(b.cross_sequence.unwrap()).index;
                assert!(c.subject == x.subject && c.sequence != x.sequence);
            }
        }
    }

    #[test]
    fn every_sequence_is_covered() {
        let ds = toy();
        let sampler = BatchSampler::new(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = BTreeSet::new();
        for _ in 0..1000 {
            for b in sampler.sample(8, &mut rng) {
                let i = ds.get(b.index).index;
                seen.insert((i.subject, i.sequence));
            }
        }
        assert_eq!(seen.len(), ds.sequences().len());
    }

    #[test]
    fn single_sequence_subjects_get_no_cross_partner() {
        let ds = toy().filter_subjects(|_| true);
        let keep: Vec<_> = ds
            .samples()
            .iter()
            .filter(|s| s.index.subject != 0 || s.index.sequence == 0)
            .cloned()
            .collect();
        let ds = Dataset::new(keep, 4).unwrap();
        let sampler = BatchSampler::new(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            for b in sampler.sample(8, &mut rng) {
                if ds.get(b.index).index.subject == 0 {
                    assert!(b.cross_sequence.is_none());
                } else {
                    assert!(b.cross_sequence.is_some());
                }
            }
        }
        let solo = Dataset::new(ds.samples().iter().filter(|s| s.index.subject == 0).cloned().collect(), 4).unwrap();
        assert!(BatchSampler::new(&solo).is_err());
    }

    #[test]
    fn small_batches_are_rejected() {
        let cfg = TrainConfig {
            batch_size: 3,
            ..tiny_config()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn critic_is_clipped_after_every_step_and_matcher_is_untouched() {
        let ds = toy();
        let matcher = tiny_matcher();
        let before = matcher.to_bytes();
        let mut maxima = Vec::new();
        let out = train_phase2_observed(&ds, &matcher, &tiny_config(), &mut |e| {
            if let StepEvent::Critic { max_abs_weight, .. } = e {
                maxima.push(*max_abs_weight);
            }
        })
        .unwrap();
        assert_eq!(maxima.len(), 4);
        assert!(maxima.iter().all(|&w| w <= 0.01));
        assert_eq!(matcher.to_bytes(), before);
        assert_eq!(out.history.records.len(), 2);
        for r in &out.history.records {
            assert!(r.terms.first_non_finite().is_none());
        }
    }

    #[test]
    fn zero_weights_leave_generator_unchanged() {
        let ds = toy();
        let cfg = TrainConfig {
            weights: LossWeights {
                mse: 0.0,
                adv: 0.0,
                ano: 0.0,
                con: 0.0,
                div: 0.0,
                dis: 0.0,
                delta_gp: 0.01,
            },
            ..tiny_config()
        };
        let (g0, c0) = initial_models(&cfg).unwrap();
        let out = train_phase2(&ds, &tiny_matcher(), &cfg).unwrap();
        assert_eq!(out.generator.to_bytes(), g0.to_bytes());
        assert_ne!(out.critic.params().entries()[0].value, c0.params().entries()[0].value);
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = toy();
        let m = tiny_matcher();
        let a = train_phase2(&ds, &m, &tiny_config()).unwrap();
        let b = train_phase2(&ds, &m, &tiny_config()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.generator.to_bytes(), b.generator.to_bytes());
    }

    #[test]
    fn history_csv_lists_every_term() {
        let ds = toy();
        let out = train_phase2(&ds, &tiny_matcher(), &tiny_config()).unwrap();
        let csv = out.history.to_csv();
        assert!(csv.starts_with("epoch,term,value\n"));
        for name in TERM_NAMES {
            assert!(csv.contains(&format!("1,{name},")));
        }
        assert_eq!(out.history.series("L_mse").unwrap().len(), 2);
        assert!(out.history.series("nope").is_none());
    }

    #[test]
    fn label_count_mismatch_is_a_config_error() {
        let ds = toy();
        let m = MatcherModel::new(MatcherArch::scaled_down(16), 5, 1).unwrap();
        assert!(matches!(train_phase2(&ds, &m, &tiny_config()), Err(Error::Config(_))));
    }
}
