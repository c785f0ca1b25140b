//! Monte Carlo experiments on the log-domain variance of `s`.
//!
//! Token log-ratios are drawn as Gaussians, `log s` is their per-sequence
//! mean, and the measured `Var[log s]` is compared with closed forms:
//!
//! | sampler         | `Var[log s]`            | inflation over `σ²/L` (or `σ²/E[L]`) |
//! |-----------------|-------------------------|--------------------------------------|
//! | iid             | `σ²/L`                  | 1                                    |
//! | equicorrelated  | `σ²(1 + (L−1)ρ)/L`      | `1 + (L−1)ρ`                         |
//! | length mixture  | `σ² E[1/L]`             | `E[1/L]·E[L]`                        |
//!
//! Samples are split into at most 100 batches, each drawn from its own RNG
//! substream. Batches run in parallel and merge in index order, so results
//! depend only on `(spec, n, seed)`. Standard errors are batch-means
//! estimates.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{substream, LabRng};

pub const MAX_BATCHES: usize = 100;
/// Smallest sample count that still yields two batches of two.
pub const MIN_SAMPLES: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SpecError {
    #[error("sigma2_log must be finite and > 0, got {0}")]
    Variance(f64),
    #[error("mu_log must be finite, got {0}")]
    Mean(f64),
    #[error("sequence lengths must be ≥ 1")]
    Length,
    #[error("correlation must lie in [0, 1), got {0}")]
    Correlation(f64),
    #[error("length distribution is empty")]
    EmptyMixture,
    #[error("length weights must be positive and sum to 1 (sum {0})")]
    Weights(f64),
    #[error("need at least {MIN_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("{0} must be finite and > 0")]
    NonPositive(&'static str),
}

pub type Result<T> = std::result::Result<T, SpecError>;

/// Generative model for one sequence of token log-ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerSpec {
    IidNormal {
        mu_log: f64,
        sigma2_log: f64,
        len: usize,
    },
    Equicorrelated {
        mu_log: f64,
        sigma2_log: f64,
        corr_rho: f64,
        len: usize,
    },
    /// `lengths` holds `(L, weight)` pairs.
    LengthMixture {
        mu_log: f64,
        sigma2_log: f64,
        lengths: Vec<(usize, f64)>,
    },
}

impl SamplerSpec {
    pub fn iid(sigma2_log: f64, len: usize) -> Self {
        Self::IidNormal {
            mu_log: 0.0,
            sigma2_log,
            len,
        }
    }

    pub fn equicorrelated(sigma2_log: f64, corr_rho: f64, len: usize) -> Self {
        Self::Equicorrelated {
            mu_log: 0.0,
            sigma2_log,
            corr_rho,
            len,
        }
    }

    pub fn mixture(sigma2_log: f64, lengths: Vec<(usize, f64)>) -> Self {
        Self::LengthMixture {
            mu_log: 0.0,
            sigma2_log,
            lengths,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::IidNormal { .. } => "iid_normal",
            Self::Equicorrelated { .. } => "equicorrelated_normal",
            Self::LengthMixture { .. } => "length_mixture",
        }
    }

    pub fn mu_log(&self) -> f64 {
        match *self {
            Self::IidNormal { mu_log, .. }
            | Self::Equicorrelated { mu_log, .. }
            | Self::LengthMixture { mu_log, .. } => mu_log,
        }
    }

    pub fn sigma2_log(&self) -> f64 {
        match *self {
            Self::IidNormal { sigma2_log, .. }
            | Self::Equicorrelated { sigma2_log, .. }
            | Self::LengthMixture { sigma2_log, .. } => sigma2_log,
        }
    }

    pub fn corr_rho(&self) -> f64 {
        match *self {
            Self::Equicorrelated { corr_rho, .. } => corr_rho,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigma2 = self.sigma2_log();
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(SpecError::Variance(sigma2));
        }
        if !self.mu_log().is_finite() {
            return Err(SpecError::Mean(self.mu_log()));
        }
        match self {
            Self::IidNormal { len, .. } if *len == 0 => Err(SpecError::Length),
            Self::Equicorrelated { len, corr_rho, .. } => {
                if *len == 0 {
                    Err(SpecError::Length)
                } else if !(0.0..1.0).contains(corr_rho) {
                    Err(SpecError::Correlation(*corr_rho))
                } else {
                    Ok(())
                }
            }
            Self::LengthMixture { lengths, .. } => validate_lengths(lengths),
            _ => Ok(()),
        }
    }

    /// `E[L]`.
    pub fn mean_len(&self) -> f64 {
        match self {
            Self::IidNormal { len, .. } | Self::Equicorrelated { len, .. } => *len as f64,
            Self::LengthMixture { lengths, .. } => lengths.iter().map(|&(l, w)| w * l as f64).sum(),
        }
    }

    /// `E[1/L]`.
    pub fn mean_inv_len(&self) -> f64 {
        match self {
            Self::IidNormal { len, .. } | Self::Equicorrelated { len, .. } => 1.0 / *len as f64,
            Self::LengthMixture { lengths, .. } => lengths.iter().map(|&(l, w)| w / l as f64).sum(),
        }
    }

    /// Reduction `Var[log s] / Var[log w]` under independent tokens of mean length.
    pub fn theoretical_factor(&self) -> f64 {
        1.0 / self.mean_len()
    }

    /// Closed-form inflation of the reduction factor over [`Self::theoretical_factor`].
    pub fn expected_inflation(&self) -> f64 {
        match self {
            Self::IidNormal { .. } => 1.0,
            Self::Equicorrelated { corr_rho, len, .. } => 1.0 + (*len as f64 - 1.0) * corr_rho,
            Self::LengthMixture { .. } => self.mean_inv_len() * self.mean_len(),
        }
    }

    /// Closed-form `Var[log s]`.
    pub fn oracle_var_log_s(&self) -> f64 {
        self.sigma2_log() * self.theoretical_factor() * self.expected_inflation()
    }

    /// `L:w;L:w` rendering of the length distribution.
    pub fn length_dist_label(&self) -> String {
        match self {
            Self::IidNormal { len, .. } | Self::Equicorrelated { len, .. } => format!("{len}:1"),
            Self::LengthMixture { lengths, .. } => lengths
                .iter()
                .map(|(l, w)| format!("{l}:{w}"))
                .collect::<Vec<_>>()
                .join(";"),
        }
    }

    fn draw_sequence(&self, rng: &mut LabRng, buf: &mut Vec<f64>) {
        buf.clear();
        let sigma = self.sigma2_log().sqrt();
        let mu = self.mu_log();
        match self {
            Self::IidNormal { len, .. } => {
                buf.extend((0..*len).map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    mu + sigma * z
                }));
            }
            Self::Equicorrelated { corr_rho, len, .. } => {
                let z0: f64 = StandardNormal.sample(rng);
                let shared = corr_rho.sqrt() * z0;
                let own = (1.0 - corr_rho).sqrt();
                buf.extend((0..*len).map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    mu + sigma * (shared + own * z)
                }));
            }
            Self::LengthMixture { lengths, .. } => {
                let len = pick_length(lengths, rng.random());
                buf.extend((0..len).map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    mu + sigma * z
                }));
            }
        }
    }
}

fn validate_lengths(lengths: &[(usize, f64)]) -> Result<()> {
    if lengths.is_empty() {
        return Err(SpecError::EmptyMixture);
    }
    if lengths.iter().any(|&(l, _)| l == 0) {
        return Err(SpecError::Length);
    }
    let sum: f64 = lengths.iter().map(|&(_, w)| w).sum();
    if lengths.iter().any(|&(_, w)| w.is_nan() || w <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(SpecError::Weights(sum));
    }
    Ok(())
}

fn pick_length(lengths: &[(usize, f64)], u: f64) -> usize {
    let mut acc = 0.0;
    for &(l, w) in lengths {
        acc += w;
        if u < acc {
            return l;
        }
    }
    lengths.last().expect("validated non-empty").0
}

/// Streaming `(count, mean, M2)` accumulator with exact pairwise merging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Chan et al. combination of two disjoint accumulators.
    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n_a = self.count as f64;
        let n_b = other.count as f64;
        let n = n_a + n_b;
        let delta = other.mean - self.mean;
        self.mean += delta * n_b / n;
        self.m2 += other.m2 + delta * delta * n_a * n_b / n;
        self.count += other.count;
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        Self {
            count: xs.len() as u64,
            mean,
            m2,
        }
    }

    /// Unbiased sample variance; NaN below two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        self.m2 / (self.count - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct BatchStats {
    tokens: Moments,
    log_s: Moments,
}

/// Mean and standard error of a per-batch statistic.
fn batch_mean_se(values: &[f64]) -> (f64, f64) {
    let m = Moments::from_slice(values);
    (m.mean, (m.variance() / values.len() as f64).sqrt())
}

fn batch_sizes(n: usize) -> Vec<usize> {
    let batches = (n / 2).clamp(1, MAX_BATCHES);
    (0..batches)
        .map(|b| n / batches + usize::from(b < n % batches))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub kind: String,
    pub mu_log: f64,
    pub sigma2_log: f64,
    pub corr_rho: f64,
    pub mean_len: f64,
    pub length_dist: String,
    pub n_samples: usize,
    pub seed: u64,
    /// Pooled variance of individual token log-ratios.
    pub var_log_w: f64,
    pub var_log_w_se: f64,
    pub var_log_s: f64,
    pub var_log_s_se: f64,
    pub mean_log_s: f64,
    /// `var_log_s / var_log_w` over all samples (ratio of pooled estimates).
    pub reduction_factor: f64,
    pub reduction_factor_se: f64,
    /// Mean over batches of the per-batch ratio.
    pub reduction_factor_batch_mean: f64,
    pub theoretical_factor: f64,
    /// `reduction_factor / theoretical_factor`.
    pub inflation: f64,
    pub inflation_se: f64,
    pub expected_inflation: f64,
    pub oracle_var_log_s: f64,
}

impl VarianceReport {
    /// Relative deviation of the measured `Var[log s]` from its closed form.
    pub fn var_log_s_rel_err(&self) -> f64 {
        (self.var_log_s / self.oracle_var_log_s - 1.0).abs()
    }

    /// Relative deviation of the measured inflation from its closed form.
    pub fn inflation_rel_err(&self) -> f64 {
        (self.inflation / self.expected_inflation - 1.0).abs()
    }
}

/// Per-sequence `log s` samples drawn from `spec`, in batch order.
pub fn sample_log_s(spec: &SamplerSpec, n: usize, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let chunks: Vec<Vec<f64>> = batch_sizes(n)
        .into_par_iter()
        .enumerate()
        .map(|(b, size)| {
            let mut rng = substream(seed, b as u64);
            let mut buf = Vec::new();
            (0..size)
                .map(|_| {
                    spec.draw_sequence(&mut rng, &mut buf);
                    buf.iter().sum::<f64>() / buf.len() as f64
                })
                .collect()
        })
        .collect();
    Ok(chunks.concat())
}

/// Draws `n` sequences from `spec` and measures `Var[log w]` and `Var[log s]`.
pub fn simulate_log_s(spec: &SamplerSpec, n: usize, seed: u64) -> Result<VarianceReport> {
    spec.validate()?;
    if n < MIN_SAMPLES {
        return Err(SpecError::TooFewSamples(n));
    }
    let batches: Vec<BatchStats> = batch_sizes(n)
        .into_par_iter()
        .enumerate()
        .map(|(b, size)| {
            let mut rng = substream(seed, b as u64);
            let mut buf = Vec::new();
            let mut stats = BatchStats::default();
            for _ in 0..size {
                spec.draw_sequence(&mut rng, &mut buf);
                let seq = Moments::from_slice(&buf);
                stats.tokens.merge(&seq);
                stats.log_s.push(seq.mean);
            }
            stats
        })
        .collect();

    let mut all = BatchStats::default();
    for b in &batches {
        all.tokens.merge(&b.tokens);
        all.log_s.merge(&b.log_s);
    }

    let theoretical = spec.theoretical_factor();
    let per_batch =
        |f: &dyn Fn(&BatchStats) -> f64| -> Vec<f64> { batches.iter().map(f).collect() };
    let (_, var_log_w_se) = batch_mean_se(&per_batch(&|b| b.tokens.variance()));
    let (_, var_log_s_se) = batch_mean_se(&per_batch(&|b| b.log_s.variance()));
    let ratios = per_batch(&|b| b.log_s.variance() / b.tokens.variance());
    let (ratio_batch_mean, ratio_se) = batch_mean_se(&ratios);

    let var_log_w = all.tokens.variance();
    let var_log_s = all.log_s.variance();
    let reduction = var_log_s / var_log_w;
    Ok(VarianceReport {
        kind: spec.kind().to_string(),
        mu_log: spec.mu_log(),
        sigma2_log: spec.sigma2_log(),
        corr_rho: spec.corr_rho(),
        mean_len: spec.mean_len(),
        length_dist: spec.length_dist_label(),
        n_samples: n,
        seed,
        var_log_w,
        var_log_w_se,
        var_log_s,
        var_log_s_se,
        mean_log_s: all.log_s.mean,
        reduction_factor: reduction,
        reduction_factor_se: ratio_se,
        reduction_factor_batch_mean: ratio_batch_mean,
        theoretical_factor: theoretical,
        inflation: reduction / theoretical,
        inflation_se: ratio_se / theoretical,
        expected_inflation: spec.expected_inflation(),
        oracle_var_log_s: spec.oracle_var_log_s(),
    })
}

/// `1 + (L−1)ρ`: variance inflation of a mean of `L` equicorrelated terms.
pub fn equicorrelated_factor(corr_rho: f64, len: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&corr_rho) {
        return Err(SpecError::Correlation(corr_rho));
    }
    if len == 0 {
        return Err(SpecError::Length);
    }
    Ok(1.0 + (len as f64 - 1.0) * corr_rho)
}

/// `E[1/L]·E[L] ≥ 1`.
pub fn jensen_factor(lengths: &[(usize, f64)]) -> Result<f64> {
    validate_lengths(lengths)?;
    let spec = SamplerSpec::mixture(1.0, lengths.to_vec());
    Ok(spec.mean_inv_len() * spec.mean_len())
}

/// Simulated inflation of `Var[log s]` over `σ²/E[L]` for mixed lengths.
///
/// The report's `expected_inflation` is the Jensen factor `E[1/L]·E[L]`.
pub fn length_mixture_inflation(
    lengths: &[(usize, f64)],
    sigma2_log: f64,
    n: usize,
    seed: u64,
) -> Result<VarianceReport> {
    simulate_log_s(&SamplerSpec::mixture(sigma2_log, lengths.to_vec()), n, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaBridgeReport {
    pub n_samples: usize,
    pub mean_log_s: f64,
    pub var_log_s: f64,
    /// Sample variance of `s = exp(log s)`.
    pub direct_var_s: f64,
    /// `exp(2·mean(log s)) · Var[log s]`.
    pub bridged_var_s: f64,
    /// `|direct − bridged| / direct`.
    pub relative_gap: f64,
}

/// First-order (delta-method) propagation of `Var[log s]` to `Var[s]`,
/// compared against the direct sample variance of `s`.
pub fn delta_bridge(log_s: &[f64]) -> Result<DeltaBridgeReport> {
    if log_s.len() < 2 {
        return Err(SpecError::TooFewSamples(log_s.len()));
    }
    let logs = Moments::from_slice(log_s);
    let s: Vec<f64> = log_s.iter().map(|x| x.exp()).collect();
    let direct = Moments::from_slice(&s).variance();
    let bridged = (2.0 * logs.mean).exp() * logs.variance();
    let relative_gap = if direct > 0.0 {
        (direct - bridged).abs() / direct
    } else {
        0.0
    };
    Ok(DeltaBridgeReport {
        n_samples: log_s.len(),
        mean_log_s: logs.mean,
        var_log_s: logs.variance(),
        direct_var_s: direct,
        bridged_var_s: bridged,
        relative_gap,
    })
}

/// `Var[e^X]` for `X ~ Normal(mu, v)`.
pub fn lognormal_variance(mu: f64, v: f64) -> f64 {
    v.exp_m1() * (2.0 * mu + v).exp()
}

/// `n` draws of `Normal(mu, v)`, split into seeded batches like the samplers.
pub fn gaussian_samples(mu: f64, v: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(SpecError::Variance(v));
    }
    let normal = Normal::new(mu, v.sqrt()).map_err(|_| SpecError::Mean(mu))?;
    let chunks: Vec<Vec<f64>> = batch_sizes(n)
        .into_par_iter()
        .enumerate()
        .map(|(b, size)| {
            let mut rng = substream(seed, b as u64);
            (0..size).map(|_| normal.sample(&mut rng)).collect()
        })
        .collect();
    Ok(chunks.concat())
}

/// `observed / (theoretical · corr_component · length_component)`: the part
/// of an observed reduction factor left unexplained by the two components.
pub fn gap_decomposition(
    observed: f64,
    theoretical: f64,
    corr_component: f64,
    length_component: f64,
) -> Result<f64> {
    for (name, x) in [
        ("observed", observed),
        ("theoretical", theoretical),
        ("corr_component", corr_component),
        ("length_component", length_component),
    ] {
        if !(x.is_finite() && x > 0.0) {
            return Err(SpecError::NonPositive(name));
        }
    }
    Ok(observed / (theoretical * corr_component * length_component))
}

/// Writes one CSV row per report (header included).
pub fn write_reports_csv<W: std::io::Write>(reports: &[VarianceReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
