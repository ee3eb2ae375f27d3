//! Separation statistics for genuine/impostor score sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Genuine and impostor similarity scores from one verification protocol.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecisionEnvironment {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl DecisionEnvironment {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        DecisionEnvironment { genuine, impostor }
    }

    pub fn len(&self) -> usize {
        self.genuine.len() + self.impostor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance.
fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// `d′ = (μ_G − μ_I) / √(σ_G² + σ_I²)` with sample moments.
pub fn decidability(env: &DecisionEnvironment) -> Result<f64> {
    if env.genuine.len() < 2 || env.impostor.len() < 2 {
        return Err(Error::UndefinedStatistic(
            "decidability needs at least two genuine and two impostor scores".into(),
        ));
    }
    let spread = (variance(&env.genuine) + variance(&env.impostor)).sqrt();
    if !(spread > 0.0) {
        return Err(Error::UndefinedStatistic("decidability with zero combined variance".into()));
    }
    Ok((mean(&env.genuine) - mean(&env.impostor)) / spread)
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Probability that a genuine score beats an impostor score, ties
/// counting one half (Mann–Whitney).
pub fn auc(env: &DecisionEnvironment) -> Result<f64> {
    let (ng, ni) = (env.genuine.len(), env.impostor.len());
    if ng == 0 || ni == 0 {
        return Err(Error::UndefinedStatistic("AUC needs genuine and impostor scores".into()));
    }
    if env.genuine.iter().chain(&env.impostor).any(|v| v.is_nan()) {
        return Err(Error::UndefinedStatistic("AUC of NaN scores".into()));
    }
    let all: Vec<f64> = env.genuine.iter().chain(&env.impostor).copied().collect();
    let r = ranks(&all);
    let rank_sum: f64 = r[..ng].iter().sum();
    let u = rank_sum - (ng * (ng + 1)) as f64 / 2.0;
    Ok(u / (ng as f64 * ni as f64))
}

/// Largest gap between the two empirical CDFs.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedStatistic("KS distance of an empty sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (−1)^{k−1} exp(−2k²λ²)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-300 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample KS statistic with its asymptotic p-value
/// `Q(D·√(n·m/(n+m)))`. Both samples need at least five values.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 5 || b.len() < 5 {
        return Err(Error::UndefinedStatistic(format!(
            "KS test needs at least five values per sample (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let d = ks_distance(a, b)?;
    let (n, m) = (a.len() as f64, b.len() as f64);
    Ok((d, kolmogorov_survival(d * (n * m / (n + m)).sqrt())))
}

/// Sample correlation coefficient.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Contract(format!("pearson: lengths differ ({} vs {})", u.len(), v.len())));
    }
    if u.len() < 2 {
        return Err(Error::UndefinedStatistic("pearson needs at least two pairs".into()));
    }
    let (mu, mv) = (mean(u), mean(v));
    let mut suv = 0.0;
    let mut suu = 0.0;
    let mut svv = 0.0;
    for (a, b) in u.iter().zip(v) {
        suv += (a - mu) * (b - mv);
        suu += (a - mu).powi(2);
        svv += (b - mv).powi(2);
    }
    if suu == 0.0 || svv == 0.0 {
        return Err(Error::UndefinedStatistic("pearson of a constant sequence".into()));
    }
    Ok((suv / (suu * svv).sqrt()).clamp(-1.0, 1.0))
}

/// Mean and sample standard deviation of `statistic` over `splits`
/// resamples, each drawing `fraction · n` values with replacement. One split
/// has standard deviation 0.
pub fn bootstrap_stat<T: Clone>(
    values: &[T],
    fraction: f64,
    splits: usize,
    seed: u64,
    statistic: impl Fn(&[T]) -> Result<f64>,
) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::UndefinedStatistic("bootstrap of an empty sample".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) || splits == 0 {
        return Err(Error::Config(format!(
            "bootstrap needs fraction in (0,1] and at least one split (got {fraction}, {splits})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = ((values.len() as f64 * fraction).round() as usize).max(1);
    let mut stats = Vec::with_capacity(splits);
    let mut sample = Vec::with_capacity(size);
    for _ in 0..splits {
        sample.clear();
        sample.extend((0..size).map(|_| values[rng.random_range(0..values.len())].clone()));
        stats.push(statistic(&sample)?);
    }
    let sd = if splits > 1 { variance(&stats).sqrt() } else { 0.0 };
    Ok((mean(&stats), sd))
}

/// Bootstrap of an environment statistic; genuine and impostor scores are
/// resampled separately so every resample keeps both sides.
pub fn bootstrap_env(
    env: &DecisionEnvironment,
    fraction: f64,
    splits: usize,
    seed: u64,
    statistic: impl Fn(&DecisionEnvironment) -> Result<f64>,
) -> Result<(f64, f64)> {
    if env.genuine.is_empty() || env.impostor.is_empty() {
        return Err(Error::UndefinedStatistic("bootstrap needs genuine and impostor scores".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) || splits == 0 {
        return Err(Error::Config(format!(
            "bootstrap needs fraction in (0,1] and at least one split (got {fraction}, {splits})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |v: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        let size = ((v.len() as f64 * fraction).round() as usize).max(1);
        (0..size).map(|_| v[rng.random_range(0..v.len())]).collect()
    };
    let mut stats = Vec::with_capacity(splits);
    for _ in 0..splits {
        let genuine = draw(&env.genuine, &mut rng);
        let impostor = draw(&env.impostor, &mut rng);
        stats.push(statistic(&DecisionEnvironment::new(genuine, impostor))?);
    }
    let sd = if splits > 1 { variance(&stats).sqrt() } else { 0.0 };
    Ok((mean(&stats), sd))
}
