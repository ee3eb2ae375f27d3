//! Loss terms of the de-identification objective as plain functions over
//! `f64` values, each paired with its analytic gradient where training
//! needs one. Expectations are batch means.

use std::fmt;

use crate::error::{Error, Result};
use crate::matcher::AgreementVector;
use crate::types::{FaceCrop, Histogram, SignVector};

/// Term weights of the generator objective and the critic clipping bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mse: f64,
    pub adv: f64,
    pub ano: f64,
    pub con: f64,
    pub div: f64,
    pub dis: f64,
    /// Critic weight-clipping bound.
    pub delta_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mse: 50.0,
            adv: 1.0,
            ano: 1.0,
            con: 1.0,
            div: 1.0,
            dis: 1.0,
            delta_gp: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("weight {name} must be a finite non-negative number, got {w}")));
            }
        }
        if !(self.delta_gp > 0.0) || !self.delta_gp.is_finite() {
            return Err(Error::Config(format!("delta_gp must be positive, got {}", self.delta_gp)));
        }
        Ok(())
    }

    /// Weights paired with their term names, in objective order.
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            (TERM_NAMES[0], self.mse),
            (TERM_NAMES[1], self.adv),
            (TERM_NAMES[2], self.ano),
            (TERM_NAMES[3], self.con),
            (TERM_NAMES[4], self.div),
            (TERM_NAMES[5], self.dis),
        ]
    }
}

pub const TERM_NAMES: [&str; 6] = ["L_mse", "L_adv", "L_ano", "L_con", "L_div", "L_dis"];

/// Values of the six generator terms for one step or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub mse: f64,
    pub adv: f64,
    pub ano: f64,
    pub con: f64,
    pub div: f64,
    pub dis: f64,
}

impl LossTerms {
    pub fn values(&self) -> [f64; 6] {
        [self.mse, self.adv, self.ano, self.con, self.div, self.dis]
    }

    /// Name of the first term that is NaN or infinite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.values()
            .iter()
            .zip(TERM_NAMES)
            .find(|(v, _)| !v.is_finite())
            .map(|(_, name)| name)
    }
}

impl fmt::Display for LossTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (v, name)) in self.values().iter().zip(TERM_NAMES).enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{name}={v:.5}")?;
        }
        Ok(())
    }
}

fn check_same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{what}: lengths differ ({a} vs {b})")));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean squared difference over every pixel and channel.
pub fn loss_mse(x: &FaceCrop, r: &FaceCrop) -> f64 {
    loss_mse_slices(x.hwc(), r.hwc()).expect("face crops share one shape")
}

pub fn loss_mse_slices(x: &[f32], r: &[f32]) -> Result<f64> {
    check_same_len(x.len(), r.len(), "loss_mse")?;
    if x.is_empty() {
        return Err(Error::Contract("loss_mse of empty inputs".into()));
    }
    let sum: f64 = x.iter().zip(r).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(sum / x.len() as f64)
}

/// Gradient of [`loss_mse_slices`] with respect to `r`.
pub fn loss_mse_grad(x: &[f32], r: &[f32]) -> Result<Vec<f64>> {
    check_same_len(x.len(), r.len(), "loss_mse")?;
    let n = x.len() as f64;
    Ok(x.iter().zip(r).map(|(&a, &b)| 2.0 * (b as f64 - a as f64) / n).collect())
}

/// Critic objective: `−2·mean(x) + mean(a) + mean(r)`.
pub fn loss_adv_critic(scores_x: &[f64], scores_a: &[f64], scores_r: &[f64]) -> Result<f64> {
    if scores_x.is_empty() || scores_a.is_empty() || scores_r.is_empty() {
        return Err(Error::Contract("critic loss needs non-empty score batches".into()));
    }
    Ok(-2.0 * mean(scores_x) + mean(scores_a) + mean(scores_r))
}

/// Generator adversarial term: `−mean(a) − mean(r)`.
pub fn loss_adv_gen(scores_a: &[f64], scores_r: &[f64]) -> Result<f64> {
    if scores_a.is_empty() || scores_r.is_empty() {
        return Err(Error::Contract("generator adversarial loss needs non-empty score batches".into()));
    }
    Ok(-mean(scores_a) - mean(scores_r))
}

/// Which sign convention the attribute-configuration term uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AnoSign {
    /// `−⟨s, 2d − 1⟩`: minimised when labels with `s = +1` agree and labels
    /// with `s = −1` disagree.
    #[default]
    Corrected,
    /// `⟨s, 2d − 1⟩`, the literal expression without the leading minus.
    AsPrinted,
}

impl AnoSign {
    fn factor(self) -> f64 {
        match self {
            AnoSign::Corrected => -1.0,
            AnoSign::AsPrinted => 1.0,
        }
    }
}

/// Batch mean of `−⟨s, 2d − 1⟩` over the agreement vectors `d`.
pub fn loss_ano(s: &SignVector, d: &[AgreementVector]) -> Result<f64> {
    loss_ano_with(s, d, AnoSign::Corrected)
}

pub fn loss_ano_with(s: &SignVector, d: &[AgreementVector], sign: AnoSign) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::Contract("loss_ano of an empty batch".into()));
    }
    let mut total = 0.0;
    for dv in d {
        check_same_len(s.len(), dv.len(), "loss_ano")?;
        total += s
            .values()
            .iter()
            .zip(dv.values())
            .map(|(&sm, &dm)| sm as f64 * (2.0 * dm - 1.0))
            .sum::<f64>();
    }
    Ok(sign.factor() * total / d.len() as f64)
}

/// Gradient of [`loss_ano_with`] with respect to each `d[n][m]`: it does not
/// depend on `d`, only on `s` and the batch size.
pub fn loss_ano_grad(s: &SignVector, batch: usize, sign: AnoSign) -> Vec<f64> {
    s.values().iter().map(|&sm| sign.factor() * 2.0 * sm as f64 / batch as f64).collect()
}

fn sum_components(d: &[AgreementVector]) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::Contract("empty agreement batch".into()));
    }
    Ok(d.iter().map(|v| v.values().iter().sum::<f64>()).sum::<f64>() / d.len() as f64)
}

/// Same-sequence consistency: `−⟨1, d⟩`, batch-averaged.
pub fn loss_con(d: &[AgreementVector]) -> Result<f64> {
    Ok(-sum_components(d)?)
}

/// Cross-sequence diversity: `+⟨1, d⟩`, batch-averaged.
pub fn loss_div(d: &[AgreementVector]) -> Result<f64> {
    sum_components(d)
}

/// Chi-square distance `Σ (p − q)² / (p + q)` with empty bins contributing 0.
pub fn chi_square(p: &[f64], q: &[f64]) -> Result<f64> {
    check_same_len(p.len(), q.len(), "chi_square")?;
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| if a + b > 0.0 { (a - b).powi(2) / (a + b) } else { 0.0 })
        .sum())
}

/// Gradient of [`chi_square`] with respect to `q`; by symmetry, swapping the
/// arguments gives the gradient with respect to `p`.
pub fn chi_square_grad(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    check_same_len(p.len(), q.len(), "chi_square")?;
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let s = a + b;
            if s > 0.0 {
                -(a - b) * (3.0 * a + b) / (s * s)
            } else {
                0.0
            }
        })
        .collect())
}

/// Colour-distribution term for one pair of histograms.
pub fn loss_dis(hx: &Histogram, ha: &Histogram) -> Result<f64> {
    if hx.bin_count != ha.bin_count {
        return Err(Error::Contract(format!(
            "histogram bin counts differ ({} vs {})",
            hx.bin_count, ha.bin_count
        )));
    }
    chi_square(&hx.bins, &ha.bins)
}

/// Batch mean of [`loss_dis`].
pub fn loss_dis_batch(hx: &[Histogram], ha: &[Histogram]) -> Result<f64> {
    check_same_len(hx.len(), ha.len(), "loss_dis")?;
    if hx.is_empty() {
        return Err(Error::Contract("loss_dis of an empty batch".into()));
    }
    let mut total = 0.0;
    for (a, b) in hx.iter().zip(ha) {
        total += loss_dis(a, b)?;
    }
    Ok(total / hx.len() as f64)
}

/// Weighted sum of the six terms. A non-finite term aborts with its name.
pub fn loss_total(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    if let Some(term) = terms.first_non_finite() {
        return Err(Error::Divergence {
            term: term.to_string(),
            step: None,
        });
    }
    Ok(terms
        .values()
        .iter()
        .zip(w.named())
        .map(|(v, (_, weight))| v * weight)
        .sum())
}
