//! Cross-entropy, perplexity and importance-ratio bookkeeping.
//!
//! For one response `y` scored under a new and an old policy:
//!
//! ```text
//! H        = −(1/|y|) Σ_t log π(y_t|·)
//! PPL      = exp(H)
//! log w_t  = log π_new(y_t|·) − log π_old(y_t|·)
//! log s    = (1/|y|) Σ_t log w_t
//! ΔH       = H_old − H_new
//! ```
//!
//! `s`, `PPL_old / PPL_new` and `exp(ΔH)` are the same number. The three are
//! evaluated through separate arithmetic so that [`check_equivalence`]
//! measures floating-point agreement rather than comparing a value with
//! itself.

pub mod records;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{
    PolicyError, PolicyParams, QueryId, SeqLogProb, TokenSequence, Vocabulary, EOS,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("sequence has no scored tokens")]
    DegenerateSequence,
    #[error("log-probability {value} at position {index} is not a finite value ≤ 0")]
    InvalidLogProb { index: usize, value: f64 },
    #[error("scores cover different sequences (lengths {new} vs {old})")]
    ScoreMismatch { new: usize, old: usize },
    #[error("invalid clip band: eps_low={eps_low}, eps_high={eps_high}")]
    InvalidClip { eps_low: f64, eps_high: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Likelihood summary of one sequence under one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub log_prob: SeqLogProb,
    pub length: usize,
    /// Nats per token.
    pub cross_entropy: f64,
    pub perplexity: f64,
}

impl SequenceScore {
    pub fn from_log_prob(log_prob: SeqLogProb) -> Result<Self> {
        if log_prob.is_empty() {
            return Err(MetricsError::DegenerateSequence);
        }
        if let Some((index, &value)) = log_prob
            .per_token
            .iter()
            .enumerate()
            .find(|(_, &x)| !(x.is_finite() && x <= 0.0))
        {
            return Err(MetricsError::InvalidLogProb { index, value });
        }
        let length = log_prob.len();
        let cross_entropy = -log_prob.total / length as f64;
        Ok(Self {
            perplexity: cross_entropy.exp(),
            log_prob,
            length,
            cross_entropy,
        })
    }

    pub fn from_per_token(per_token: Vec<f64>) -> Result<Self> {
        Self::from_log_prob(SeqLogProb::from_per_token(per_token))
    }
}

pub fn score(params: &PolicyParams, seq: &TokenSequence) -> Result<SequenceScore> {
    SequenceScore::from_log_prob(params.sequence_log_prob(seq)?)
}

/// Importance ratios of one sequence, new policy over old.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioBundle {
    /// `log w_t`, nats.
    pub token_log_ratios: Vec<f64>,
    /// `log ρ = Σ_t log w_t`.
    pub seq_log_ratio: f64,
    /// `log s`, the mean token log-ratio.
    pub norm_log_ratio: f64,
    pub s: f64,
    /// `H_old − H_new`, nats per token.
    pub delta_h: f64,
}

impl RatioBundle {
    pub fn len(&self) -> usize {
        self.token_log_ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_log_ratios.is_empty()
    }

    /// Token ratios `w_t`.
    pub fn token_ratios(&self) -> impl Iterator<Item = f64> + '_ {
        self.token_log_ratios.iter().map(|l| l.exp())
    }
}

pub fn ratio_bundle(new: &SequenceScore, old: &SequenceScore) -> Result<RatioBundle> {
    if new.length != old.length {
        return Err(MetricsError::ScoreMismatch {
            new: new.length,
            old: old.length,
        });
    }
    let token_log_ratios: Vec<f64> = new
        .log_prob
        .per_token
        .iter()
        .zip(&old.log_prob.per_token)
        .map(|(n, o)| n - o)
        .collect();
    let seq_log_ratio: f64 = token_log_ratios.iter().sum();
    let norm_log_ratio = seq_log_ratio / new.length as f64;
    Ok(RatioBundle {
        s: norm_log_ratio.exp(),
        delta_h: old.cross_entropy - new.cross_entropy,
        token_log_ratios,
        seq_log_ratio,
        norm_log_ratio,
    })
}

/// Disagreement between the three forms of the sequence weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub s: f64,
    pub ppl_ratio: f64,
    pub exp_delta_h: f64,
    /// `|s − PPL_old/PPL_new|`
    pub err_ppl: f64,
    /// `|s − exp(ΔH)|`
    pub err_entropy: f64,
}

impl EquivalenceReport {
    pub fn rel_err_ppl(&self) -> f64 {
        self.err_ppl / self.s
    }

    pub fn rel_err_entropy(&self) -> f64 {
        self.err_entropy / self.s
    }

    pub fn max_rel_err(&self) -> f64 {
        self.rel_err_ppl().max(self.rel_err_entropy())
    }
}

pub fn check_equivalence(
    bundle: &RatioBundle,
    new: &SequenceScore,
    old: &SequenceScore,
) -> EquivalenceReport {
    let ppl_ratio = old.perplexity / new.perplexity;
    let exp_delta_h = (old.cross_entropy - new.cross_entropy).exp();
    EquivalenceReport {
        s: bundle.s,
        ppl_ratio,
        exp_delta_h,
        err_ppl: (bundle.s - ppl_ratio).abs(),
        err_entropy: (bundle.s - exp_delta_h).abs(),
    }
}

/// Batch aggregation of equivalence errors.
///
/// `mean_*`/`max_*` average per-sequence errors; `err_of_means_*` compare
/// batch means of each form instead.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchEquivalence {
    pub count: usize,
    pub mean_err_ppl: f64,
    pub max_err_ppl: f64,
    pub mean_err_entropy: f64,
    pub max_err_entropy: f64,
    pub max_rel_err: f64,
    pub err_of_means_ppl: f64,
    pub err_of_means_entropy: f64,
}

impl BatchEquivalence {
    pub fn from_reports(reports: &[EquivalenceReport]) -> Self {
        if reports.is_empty() {
            return Self::default();
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&EquivalenceReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let max = |f: fn(&EquivalenceReport) -> f64| reports.iter().map(f).fold(0.0, f64::max);
        let mean_s = mean(|r| r.s);
        Self {
            count: reports.len(),
            mean_err_ppl: mean(|r| r.err_ppl),
            max_err_ppl: max(|r| r.err_ppl),
            mean_err_entropy: mean(|r| r.err_entropy),
            max_err_entropy: max(|r| r.err_entropy),
            max_rel_err: max(|r| r.max_rel_err()),
            err_of_means_ppl: (mean_s - mean(|r| r.ppl_ratio)).abs(),
            err_of_means_entropy: (mean_s - mean(|r| r.exp_delta_h)).abs(),
        }
    }
}

/// Clip band translated to the per-token cross-entropy change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyBand {
    /// `log(1 − ε_low)`
    pub lower: f64,
    /// `log(1 + ε_high)`
    pub upper: f64,
}

impl EntropyBand {
    /// Strictly below / above the band; edges count as inside.
    pub fn classify(&self, delta_h: f64) -> std::cmp::Ordering {
        if delta_h < self.lower {
            std::cmp::Ordering::Less
        } else if delta_h > self.upper {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    }
}

/// `s ∈ [1−ε_low, 1+ε_high]` ⇔ `ΔH ∈ [log(1−ε_low), log(1+ε_high)]`.
pub fn entropy_clip_bounds(eps_low: f64, eps_high: f64) -> Result<EntropyBand> {
    if !(0.0..1.0).contains(&eps_low) || eps_high.is_nan() || eps_high < 0.0 {
        return Err(MetricsError::InvalidClip { eps_low, eps_high });
    }
    Ok(EntropyBand {
        lower: (-eps_low).ln_1p(),
        upper: eps_high.ln_1p(),
    })
}

/// One random `(θ, θ_old, y)` check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceTrial {
    pub length: usize,
    pub report: EquivalenceReport,
}

/// Draws independent Gaussian logit tables for both policies and a response
/// with length uniform on `1..=max_len`, then checks the three forms of `s`.
pub fn random_trial<R: Rng + ?Sized>(
    vocab: Vocabulary,
    max_len: usize,
    logit_scale: f64,
    rng: &mut R,
) -> Result<EquivalenceTrial> {
    if max_len == 0 {
        return Err(PolicyError::ZeroMaxLen.into());
    }
    let new = PolicyParams::random(vocab, 1, logit_scale, rng)?;
    let old = PolicyParams::random(vocab, 1, logit_scale, rng)?;
    let len = rng.random_range(1..=max_len);
    let mut tokens: Vec<usize> = (0..len)
        .map(|_| rng.random_range(1..vocab.size()))
        .collect();
    if rng.random_bool(0.5) {
        tokens[len - 1] = EOS;
    }
    let seq = TokenSequence::new(QueryId(0), tokens, vocab)?;
    let (new, old) = (score(&new, &seq)?, score(&old, &seq)?);
    let bundle = ratio_bundle(&new, &old)?;
    Ok(EquivalenceTrial {
        length: len,
        report: check_equivalence(&bundle, &new, &old),
    })
}
