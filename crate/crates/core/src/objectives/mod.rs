//! Group-relative advantages and the clipped GSPO / GRPO surrogates.
//!
//! Both objectives use the PPO-style surrogate `min(w·Â, clip(w)·Â)` with
//! the band `[1 − ε_low, 1 + ε_high]`. GSPO applies it once per response to
//! the length-normalized ratio `s`; GRPO applies it to every token ratio
//! `w_t` and averages over the response.

mod gradient;

pub use gradient::{grpo_gradient, gspo_gradient, GroupEval, PolicyGradient};

use serde::{Deserialize, Serialize};

use crate::info_metrics::{self, EntropyBand, MetricsError};
use crate::policy::{PolicyError, QueryId, TokenSequence};

/// Groups whose reward spread falls below this get zero advantages.
pub const DEFAULT_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ObjectiveError {
    #[error("group needs at least 2 responses, got {0}")]
    GroupTooSmall(usize),
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("response {index} answers query {found:?}, group is for {expected:?}")]
    QueryMismatch {
        index: usize,
        expected: QueryId,
        found: QueryId,
    },
    #[error("invalid clip band: eps_low={eps_low}, eps_high={eps_high}")]
    InvalidClip { eps_low: f64, eps_high: f64 },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// `G` responses to one query with their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    query: QueryId,
    responses: Vec<TokenSequence>,
    rewards: Vec<f64>,
}

impl Group {
    pub fn new(query: QueryId, responses: Vec<TokenSequence>, rewards: Vec<f64>) -> Result<Self> {
        if responses.len() < 2 {
            return Err(ObjectiveError::GroupTooSmall(responses.len()));
        }
        if rewards.len() != responses.len() {
            return Err(ObjectiveError::LengthMismatch {
                what: "rewards",
                expected: responses.len(),
                got: rewards.len(),
            });
        }
        if let Some((index, r)) = responses
            .iter()
            .enumerate()
            .find(|(_, r)| r.query() != query)
        {
            return Err(ObjectiveError::QueryMismatch {
                index,
                expected: query,
                found: r.query(),
            });
        }
        Ok(Self {
            query,
            responses,
            rewards,
        })
    }

    pub fn query(&self) -> QueryId {
        self.query
    }

    pub fn responses(&self) -> &[TokenSequence] {
        &self.responses
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn size(&self) -> usize {
        self.responses.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
    pub group_mean: f64,
    /// Population standard deviation of the rewards.
    pub group_std: f64,
}

impl AdvantageSet {
    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }
}

/// `Â_i = (r_i − mean) / std` with population std; all zeros when the
/// spread is below `std_floor`.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<AdvantageSet> {
    if rewards.len() < 2 {
        return Err(ObjectiveError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let advantages = if std >= std_floor {
        rewards.iter().map(|r| (r - mean) / std).collect()
    } else {
        vec![0.0; rewards.len()]
    };
    Ok(AdvantageSet {
        advantages,
        group_mean: mean,
        group_std: std,
    })
}

/// Asymmetric clip band `[1 − eps_low, 1 + eps_high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 3e-4,
            eps_high: 4e-4,
        }
    }
}

impl ClipConfig {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eps_low) || eps_high.is_nan() || eps_high < 0.0 {
            return Err(ObjectiveError::InvalidClip { eps_low, eps_high });
        }
        Ok(Self { eps_low, eps_high })
    }

    pub fn symmetric(eps: f64) -> Result<Self> {
        Self::new(eps, eps)
    }

    pub fn lower(&self) -> f64 {
        1.0 - self.eps_low
    }

    pub fn upper(&self) -> f64 {
        1.0 + self.eps_high
    }

    pub fn clip(&self, w: f64) -> f64 {
        w.clamp(self.lower(), self.upper())
    }

    /// Which side of the band `w` lies on. Band edges count as inside.
    pub fn flag(&self, w: f64) -> ClipFlag {
        if w > self.upper() {
            ClipFlag::High
        } else if w < self.lower() {
            ClipFlag::Low
        } else {
            ClipFlag::None
        }
    }

    pub fn entropy_band(&self) -> EntropyBand {
        info_metrics::entropy_clip_bounds(self.eps_low, self.eps_high).expect("validated clip band")
    }

    /// `min(w·Â, clip(w)·Â)` for one weight.
    pub fn surrogate(&self, w: f64, advantage: f64) -> SurrogateTerm {
        let unclipped = w * advantage;
        let clipped = self.clip(w) * advantage;
        SurrogateTerm {
            value: unclipped.min(clipped),
            flag: self.flag(w),
            active: clipped < unclipped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipFlag {
    None,
    High,
    Low,
}

/// One evaluated `min(w·Â, clip(w)·Â)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateTerm {
    pub value: f64,
    /// Band side of the weight.
    pub flag: ClipFlag,
    /// The clipped branch was strictly selected, so the term is constant in θ.
    pub active: bool,
}

/// Whether clip flags are per response (GSPO) or per token (GRPO).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipLevel {
    Sequence,
    Token,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// `J`, the mean of `terms`.
    pub objective: f64,
    /// Per-response contributions before the `1/G` average.
    pub terms: Vec<f64>,
    pub level: ClipLevel,
    /// Per response or per token, according to `level`.
    pub flags: Vec<ClipFlag>,
    /// Parallel to `flags`.
    pub active: Vec<bool>,
}

impl LossReport {
    pub fn clip_stats(&self) -> ClipStats {
        ClipStats::from_flags(&self.flags)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClipStats {
    pub frac_clipped: f64,
    pub frac_high: f64,
    pub frac_low: f64,
}

impl ClipStats {
    pub fn from_flags(flags: &[ClipFlag]) -> Self {
        if flags.is_empty() {
            return Self::default();
        }
        let n = flags.len() as f64;
        let high = flags.iter().filter(|f| **f == ClipFlag::High).count();
        let low = flags.iter().filter(|f| **f == ClipFlag::Low).count();
        Self {
            frac_clipped: (high + low) as f64 / n,
            frac_high: high as f64 / n,
            frac_low: low as f64 / n,
        }
    }
}

fn check_aligned(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(ObjectiveError::LengthMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `J_GSPO = (1/G) Σ_i min(s_i Â_i, clip(s_i) Â_i)`.
pub fn gspo_objective(
    s_values: &[f64],
    adv: &AdvantageSet,
    clip: &ClipConfig,
) -> Result<LossReport> {
    check_aligned("s values", adv.len(), s_values.len())?;
    let mut terms = Vec::with_capacity(s_values.len());
    let mut flags = Vec::with_capacity(s_values.len());
    let mut active = Vec::with_capacity(s_values.len());
    for (&s, &a) in s_values.iter().zip(&adv.advantages) {
        let t = clip.surrogate(s, a);
        terms.push(t.value);
        flags.push(t.flag);
        active.push(t.active);
    }
    Ok(LossReport {
        objective: mean(&terms),
        terms,
        level: ClipLevel::Sequence,
        flags,
        active,
    })
}

/// `J_GRPO = (1/G) Σ_i (1/|y_i|) Σ_t min(w_it Â_i, clip(w_it) Â_i)`.
pub fn grpo_objective(
    token_ratios: &[Vec<f64>],
    adv: &AdvantageSet,
    clip: &ClipConfig,
) -> Result<LossReport> {
    check_aligned("token ratio lists", adv.len(), token_ratios.len())?;
    let mut terms = Vec::with_capacity(token_ratios.len());
    let mut flags = Vec::new();
    let mut active = Vec::new();
    for (ws, &a) in token_ratios.iter().zip(&adv.advantages) {
        if ws.is_empty() {
            return Err(MetricsError::DegenerateSequence.into());
        }
        let mut sum = 0.0;
        for &w in ws {
            let t = clip.surrogate(w, a);
            sum += t.value;
            flags.push(t.flag);
            active.push(t.active);
        }
        terms.push(sum / ws.len() as f64);
    }
    Ok(LossReport {
        objective: mean(&terms),
        terms,
        level: ClipLevel::Token,
        flags,
        active,
    })
}

/// Fractions of responses whose `s` leaves the clip band, by side.
pub fn clip_stats(s_values: &[f64], adv: &AdvantageSet, clip: &ClipConfig) -> Result<ClipStats> {
    Ok(gspo_objective(s_values, adv, clip)?.clip_stats())
}

/// `clip(s)` for each response: the weight after the band is enforced.
pub fn clipped_weights(s_values: &[f64], clip: &ClipConfig) -> Vec<f64> {
    s_values.iter().map(|&s| clip.clip(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng;

    fn adv(values: &[f64]) -> AdvantageSet {
        AdvantageSet {
            advantages: values.to_vec(),
            group_mean: 0.0,
            group_std: 1.0,
        }
    }

    #[test]
    fn tied_rewards_give_zero_advantages() {
        let a = group_advantages(&[0.7, 0.7, 0.7], DEFAULT_STD_FLOOR).unwrap();
        assert_eq!(a.advantages, vec![0.0; 3]);
        assert!(a.group_std < DEFAULT_STD_FLOOR);
    }

    #[test]
    fn two_point_group_is_plus_minus_one() {
        let a = group_advantages(&[0.0, 1.0], DEFAULT_STD_FLOOR).unwrap();
        assert_eq!(a.advantages, vec![-1.0, 1.0]);
        assert_eq!((a.group_mean, a.group_std), (0.5, 0.5));
    }

    #[test]
    fn four_point_group() {
        let a = group_advantages(&[1.0, 2.0, 3.0, 6.0], DEFAULT_STD_FLOOR).unwrap();
        assert_eq!(a.group_mean, 3.0);
        assert!((a.group_std - 3.5f64.sqrt()).abs() < 1e-15);
        let expected = [
            -1.0690449676496976,
            -0.5345224838248488,
            0.0,
            1.6035674514745464,
        ];
        for (x, e) in a.advantages.iter().zip(expected) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn small_group_rejected() {
        assert_eq!(
            group_advantages(&[1.0], DEFAULT_STD_FLOOR),
            Err(ObjectiveError::GroupTooSmall(1))
        );
    }

    #[test]
    fn clip_config_validation() {
        assert!(ClipConfig::new(1.0, 0.1).is_err());
        assert!(ClipConfig::new(-0.1, 0.1).is_err());
        assert!(ClipConfig::new(0.1, f64::NAN).is_err());
        assert!(ClipConfig::new(0.0, 0.0).is_ok());
        assert_eq!(ClipConfig::default(), ClipConfig::new(3e-4, 4e-4).unwrap());
    }

    #[test]
    fn gspo_examples() {
        let c = ClipConfig::new(0.1, 0.1).unwrap();
        let r = gspo_objective(&[1.0], &adv(&[2.0]), &c).unwrap();
        assert_eq!(
            (r.objective, r.flags[0], r.active[0]),
            (2.0, ClipFlag::None, false)
        );

        let r = gspo_objective(&[1.5], &adv(&[1.0]), &c).unwrap();
        assert!((r.objective - 1.1).abs() < 1e-15);
        assert_eq!((r.flags[0], r.active[0]), (ClipFlag::High, true));

        let r = gspo_objective(&[0.5], &adv(&[-1.0]), &c).unwrap();
        assert!((r.objective + 0.9).abs() < 1e-15);
        assert_eq!((r.flags[0], r.active[0]), (ClipFlag::Low, true));

        // Outside the band on the pessimistic side: flagged, yet the
        // unclipped branch is the minimum.
        let r = gspo_objective(&[0.5], &adv(&[1.0]), &c).unwrap();
        assert_eq!(
            (r.objective, r.flags[0], r.active[0]),
            (0.5, ClipFlag::Low, false)
        );

        assert!(gspo_objective(&[1.0, 1.0], &adv(&[1.0]), &c).is_err());
    }

    #[test]
    fn band_edge_is_unclipped() {
        let c = ClipConfig::new(0.25, 0.5).unwrap();
        assert_eq!(c.flag(1.5), ClipFlag::None);
        assert_eq!(c.flag(0.75), ClipFlag::None);
        assert!(!c.surrogate(1.5, 1.0).active);
    }

    #[test]
    fn grpo_examples() {
        let a = group_advantages(&[1.0, 2.0, 3.0, 6.0], DEFAULT_STD_FLOOR).unwrap();
        let ones = vec![vec![1.0; 3], vec![1.0; 5], vec![1.0], vec![1.0; 2]];
        let r = grpo_objective(&ones, &a, &ClipConfig::default()).unwrap();
        assert!(r.objective.abs() < 1e-15);

        let c = ClipConfig::symmetric(0.2).unwrap();
        let r = grpo_objective(&[vec![2.0, 0.5]], &adv(&[1.0]), &c).unwrap();
        assert!((r.objective - 0.85).abs() < 1e-15);
        assert_eq!(r.flags, vec![ClipFlag::High, ClipFlag::Low]);
        assert_eq!(r.active, vec![true, false]);
        assert_eq!(r.level, ClipLevel::Token);
    }

    #[test]
    fn grpo_without_effective_clip_is_mean_ratio() {
        let c = ClipConfig::new(0.99, f64::INFINITY).unwrap();
        let ws = vec![vec![1.3, 0.7, 2.5], vec![0.2, 4.0]];
        let a = adv(&[0.8, -1.4]);
        let r = grpo_objective(&ws, &a, &c).unwrap();
        for (i, w) in ws.iter().enumerate() {
            let expected = a.advantages[i] * w.iter().sum::<f64>() / w.len() as f64;
            assert!((r.terms[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn clip_stats_examples() {
        let c = ClipConfig::symmetric(4e-4).unwrap();
        let s = clip_stats(&[1.0; 4], &adv(&[1.0, -1.0, 1.0, -1.0]), &c).unwrap();
        assert_eq!(s, ClipStats::default());

        let s = clip_stats(&[1.001, 0.999, 1.0], &adv(&[1.0; 3]), &c).unwrap();
        assert!((s.frac_high - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.frac_low - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.frac_clipped - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn flags_match_entropy_interval() {
        let c = ClipConfig::default();
        let band = c.entropy_band();
        let mut rng = substream(21, 0);
        for _ in 0..10_000 {
            let log_s: f64 = rng.random_range(-2e-3..2e-3);
            let s = log_s.exp();
            let by_entropy = match band.classify(s.ln()) {
                std::cmp::Ordering::Less => ClipFlag::Low,
                std::cmp::Ordering::Greater => ClipFlag::High,
                std::cmp::Ordering::Equal => ClipFlag::None,
            };
            assert_eq!(c.flag(s), by_entropy);
        }
    }

    proptest! {
        #[test]
        fn standardization(rewards in prop::collection::vec(-100.0f64..100.0, 2..40)) {
            let a = group_advantages(&rewards, DEFAULT_STD_FLOOR).unwrap();
            prop_assume!(a.group_std >= 1e-6);
            let n = a.len() as f64;
            let m = a.advantages.iter().sum::<f64>() / n;
            let sd = (a.advantages.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((sd - 1.0).abs() < 1e-10);
        }

        #[test]
        fn single_token_objectives_coincide(
            s in prop::collection::vec(0.5f64..1.5, 2..10),
            seed in any::<u64>(),
            eps in 0.0f64..0.3,
        ) {
            let mut rng = substream(seed, 0);
            let a = adv(&s.iter().map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
            let c = ClipConfig::symmetric(eps).unwrap();
            let g = gspo_objective(&s, &a, &c).unwrap();
            let lists: Vec<Vec<f64>> = s.iter().map(|&x| vec![x]).collect();
            let r = grpo_objective(&lists, &a, &c).unwrap();
            prop_assert_eq!(g.objective, r.objective);
            prop_assert_eq!(g.flags, r.flags);
        }

        #[test]
        fn clipped_weight_variance_is_bounded(
            s in prop::collection::vec(0.0f64..3.0, 2..200),
            lo in 0.0f64..0.9,
            hi in 0.0f64..2.0,
        ) {
            let c = ClipConfig::new(lo, hi).unwrap();
            let w = clipped_weights(&s, &c);
            let m = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / w.len() as f64;
            prop_assert!(var <= lo.max(hi).powi(2) * (1.0 + 1e-12));
        }

        #[test]
        fn objective_is_mean_of_terms(
            s in prop::collection::vec(0.1f64..3.0, 2..30),
            seed in any::<u64>(),
        ) {
            let mut rng = substream(seed, 1);
            let a = adv(&s.iter().map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
            let r = gspo_objective(&s, &a, &ClipConfig::symmetric(0.2).unwrap()).unwrap();
            let m = r.terms.iter().sum::<f64>() / r.terms.len() as f64;
            prop_assert!((r.objective - m).abs() < 1e-12);
            let st = r.clip_stats();
            prop_assert!((st.frac_clipped - st.frac_high - st.frac_low).abs() < 1e-15);
        }
    }
}
