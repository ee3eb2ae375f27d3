//! One-parameter ablations: a base phase-2 run against a copy with one
//! weight scaled, compared on reconstruction error and training health.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use log::warn;

use super::dataset::Dataset;
use super::models::Generator;
use super::phase2::{train_phase2_observed, StepEvent, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{loss_mse, LossWeights};
use crate::matcher::MatcherModel;
use crate::types::FaceCrop;

/// Loss magnitude past which a run counts as blown up even if still finite.
/// Every term except the adversarial one is bounded by a few units, and a
/// clipped critic keeps that one small too while training is healthy.
pub const EXPLOSION_THRESHOLD: f64 = 1e3;

/// A scalable hyperparameter of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationParam {
    Mse,
    Adv,
    Ano,
    Con,
    Div,
    Dis,
    DeltaGp,
}

impl AblationParam {
    pub const ALL: [AblationParam; 7] = [
        AblationParam::Mse,
        AblationParam::Adv,
        AblationParam::Ano,
        AblationParam::Con,
        AblationParam::Div,
        AblationParam::Dis,
        AblationParam::DeltaGp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationParam::Mse => "omega_mse",
            AblationParam::Adv => "omega_adv",
            AblationParam::Ano => "omega_ano",
            AblationParam::Con => "omega_con",
            AblationParam::Div => "omega_div",
            AblationParam::Dis => "omega_dis",
            AblationParam::DeltaGp => "delta_gp",
        }
    }

    fn slot(self, w: &mut LossWeights) -> &mut f64 {
        match self {
            AblationParam::Mse => &mut w.mse,
            AblationParam::Adv => &mut w.adv,
            AblationParam::Ano => &mut w.ano,
            AblationParam::Con => &mut w.con,
            AblationParam::Div => &mut w.div,
            AblationParam::Dis => &mut w.dis,
            AblationParam::DeltaGp => &mut w.delta_gp,
        }
    }

    /// `base` with this parameter multiplied by `factor`.
    pub fn scaled(self, base: &TrainConfig, factor: f64) -> Result<TrainConfig> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::Config(format!("ablation factor must be positive, got {factor}")));
        }
        let mut cfg = base.clone();
        *self.slot(&mut cfg.weights) *= factor;
        Ok(cfg)
    }
}

impl fmt::Display for AblationParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationParam {
    type Err = Error;

    /// Accepts `omega_mse`, `ω_mse`, `delta_gp`, `δ_gp` and the like.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('ω', "omega").replace('δ', "delta");
        AblationParam::ALL.into_iter().find(|p| p.name() == norm).ok_or_else(|| {
            let names: Vec<_> = AblationParam::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown ablation parameter `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Health and quality of one phase-2 run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    /// Mean `L_mse(x, U_d(U_e(x)))` on the evaluation set; NaN when the run
    /// diverged.
    pub reconstruction_mse: f64,
    /// Final-epoch `L_total`; NaN when the run diverged.
    pub final_total: f64,
    /// The divergence error, if training stopped on a non-finite term.
    pub diverged: Option<String>,
    /// Any generator term exceeded [`EXPLOSION_THRESHOLD`] in magnitude.
    pub exploded: bool,
    /// Largest generator term magnitude seen at any step.
    pub max_abs_term: f64,
    /// Critic steps whose clipped weights exceeded the reference bound.
    pub critic_violations: usize,
    pub critic_steps: usize,
    pub max_critic_weight: f64,
}

impl RunMetrics {
    /// Divergence, explosion or a broken critic constraint.
    pub fn flagged(&self) -> bool {
        self.diverged.is_some() || self.exploded || self.critic_violations > 0
    }
}

/// Mean reconstruction error over `dataset`, noise seed = sample position.
pub fn reconstruction_mse(generator: &Generator, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::UndefinedStatistic("reconstruction error of an empty dataset".into()));
    }
    let mut total = 0.0;
    let xs: Vec<&FaceCrop> = dataset.samples().iter().map(|s| &s.crop).collect();
    for (c, chunk) in xs.chunks(64).enumerate() {
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| (c * 64 + i) as u64).collect();
        let a = generator.deidentify(chunk, &seeds)?;
        let r = generator.reconstruct(&a.iter().collect::<Vec<_>>())?;
        total += chunk.iter().zip(&r).map(|(x, r)| loss_mse(x, r)).sum::<f64>();
    }
    Ok(total / xs.len() as f64)
}

/// Trains with `config`, checking every critic step against
/// `reference_delta`. A divergence is recorded, not returned as an error.
pub fn measured_run(
    train: &Dataset,
    eval: &Dataset,
    matcher: &MatcherModel,
    config: &TrainConfig,
    reference_delta: f64,
) -> Result<(RunMetrics, Option<Generator>)> {
    let mut m = RunMetrics::default();
    let mut observer = |e: &StepEvent| match e {
        StepEvent::Critic { max_abs_weight, .. } => {
            m.critic_steps += 1;
            m.max_critic_weight = m.max_critic_weight.max(*max_abs_weight);
            if *max_abs_weight > reference_delta {
                m.critic_violations += 1;
            }
        }
        StepEvent::Generator { terms, .. } => {
            let peak = terms.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            m.max_abs_term = m.max_abs_term.max(peak);
            m.exploded |= peak > EXPLOSION_THRESHOLD;
        }
    };
    match train_phase2_observed(train, matcher, config, &mut observer) {
        Ok(out) => {
            m.final_total = out.history.records.last().map_or(f64::NAN, |r| r.total);
            m.reconstruction_mse = reconstruction_mse(&out.generator, eval)?;
            Ok((m, Some(out.generator)))
        }
        Err(e @ Error::Divergence { .. }) => {
            warn!("run diverged: {e}");
            m.diverged = Some(e.to_string());
            m.reconstruction_mse = f64::NAN;
            m.final_total = f64::NAN;
            Ok((m, None))
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub param: AblationParam,
    pub factor: f64,
    pub base: RunMetrics,
    pub ablated: RunMetrics,
}

impl AblationReport {
    /// `metric,base,ablated` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# {} x {}\nmetric,base,ablated\n", self.param, self.factor);
        let flag = |m: &RunMetrics| u8::from(m.flagged());
        let div = |m: &RunMetrics| u8::from(m.diverged.is_some());
        let rows: [(&str, String, String); 8] = [
            ("reconstruction_mse", self.base.reconstruction_mse.to_string(), self.ablated.reconstruction_mse.to_string()),
            ("final_total", self.base.final_total.to_string(), self.ablated.final_total.to_string()),
            ("diverged", div(&self.base).to_string(), div(&self.ablated).to_string()),
            ("exploded", u8::from(self.base.exploded).to_string(), u8::from(self.ablated.exploded).to_string()),
            ("max_abs_term", self.base.max_abs_term.to_string(), self.ablated.max_abs_term.to_string()),
            ("critic_violations", self.base.critic_violations.to_string(), self.ablated.critic_violations.to_string()),
            ("max_critic_weight", self.base.max_critic_weight.to_string(), self.ablated.max_critic_weight.to_string()),
            ("flagged", flag(&self.base).to_string(), flag(&self.ablated).to_string()),
        ];
        for (name, b, a) in rows {
            writeln!(out, "{name},{b},{a}").expect("writing to a string");
        }
        out
    }
}

/// Runs `base` and `base` with `param × factor` from the same seed. Critic
/// steps of both runs are checked against the base clipping bound.
pub fn ablate(
    train: &Dataset,
    eval: &Dataset,
    matcher: &MatcherModel,
    base: &TrainConfig,
    param: AblationParam,
    factor: f64,
) -> Result<AblationReport> {
    let scaled = param.scaled(base, factor)?;
    scaled.validate()?;
    let delta = base.weights.delta_gp;
    let (base_metrics, _) = measured_run(train, eval, matcher, base, delta)?;
    let (ablated, _) = measured_run(train, eval, matcher, &scaled, delta)?;
    Ok(AblationReport {
        param,
        factor,
        base: base_metrics,
        ablated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::MatcherArch;
    use crate::networks::{CriticArch, UNetArch};
    use crate::training::{generate_synthetic_dataset, SyntheticSpec};

    fn tiny() -> (Dataset, MatcherModel, TrainConfig) {
        let spec = SyntheticSpec {
            subjects: 4,
            sequences_per_subject: 2,
            frames_per_sequence: 2,
            ..SyntheticSpec::default()
        };
        let cfg = TrainConfig {
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
        };
        (
            generate_synthetic_dataset(&spec, 3).unwrap(),
            MatcherModel::new(MatcherArch::scaled_down(16), 4, 1).unwrap(),
            cfg,
        )
    }

    #[test]
    fn parameter_names() {
        assert_eq!("ω_mse".parse::<AblationParam>().unwrap(), AblationParam::Mse);
        assert_eq!("delta_gp".parse::<AblationParam>().unwrap(), AblationParam::DeltaGp);
        assert!(matches!("omega_foo".parse::<AblationParam>(), Err(Error::Config(_))));
        let base = TrainConfig::default();
        assert_eq!(AblationParam::Mse.scaled(&base, 0.1).unwrap().weights.mse, 5.0);
        assert!(AblationParam::Mse.scaled(&base, 0.0).is_err());
    }

    #[test]
    fn unit_factor_reproduces_the_base() {
        let (ds, matcher, cfg) = tiny();
        let r = ablate(&ds, &ds, &matcher, &cfg, AblationParam::Ano, 1.0).unwrap();
        assert_eq!(r.base, r.ablated);
        assert!(!r.base.flagged());
        assert_eq!(r.base.critic_steps, 4);
        assert!(r.to_csv().contains("\nreconstruction_mse,"));
    }

    #[test]
    fn looser_clipping_is_reported() {
        let (ds, matcher, cfg) = tiny();
        let r = ablate(&ds, &ds, &matcher, &cfg, AblationParam::DeltaGp, 100.0).unwrap();
        assert!(!r.base.flagged());
        assert!(r.ablated.flagged());
        assert!(r.ablated.critic_violations > 0);
    }
}
