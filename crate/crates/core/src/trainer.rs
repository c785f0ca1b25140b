//! Instrumented GSPO / GRPO training on a synthetic reward.
//!
//! Every `inner_updates` steps the policy is frozen as `θ_old` and one group
//! of `G` responses is sampled for the next query (round-robin). Each step
//! then scores the group under the current `θ`, takes the configured
//! objective's analytic gradient, records [`StepMetrics`] and applies a plain
//! ascent step `θ ← θ + lr·∇J`. Metrics describe the policy *before* the
//! step's update, so refresh steps always see `θ = θ_old`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::info_metrics::{check_equivalence, BatchEquivalence};
use crate::objectives::{ClipConfig, Group, GroupEval, ObjectiveError, DEFAULT_STD_FLOOR};
use crate::policy::{PolicyError, PolicyParams, QueryId, TokenSequence, Vocabulary};
use crate::rng::{stream_id, substream};
use crate::variance_lab::Moments;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("diverged at step {step}: {metric} is not finite")]
    Diverged { step: usize, metric: &'static str },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    /// `scale · (occurrences of target) / |y|`.
    TargetTokenCount { target: usize, scale: f64 },
    /// `scale` if `pattern` occurs contiguously in `y`, else 0.
    PatternMatch { pattern: Vec<usize>, scale: f64 },
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self::TargetTokenCount {
            target: 3,
            scale: 1.0,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self, vocab: Vocabulary) -> Result<()> {
        let (tokens, scale): (&[usize], f64) = match self {
            Self::TargetTokenCount { target, scale } => (std::slice::from_ref(target), *scale),
            Self::PatternMatch { pattern, scale } => (pattern, *scale),
        };
        if tokens.is_empty() {
            return Err(TrainError::Config("reward pattern is empty".into()));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= vocab.size()) {
            return Err(TrainError::Config(format!(
                "reward token {t} outside vocabulary of size {}",
                vocab.size()
            )));
        }
        if !scale.is_finite() {
            return Err(TrainError::Config("reward scale must be finite".into()));
        }
        Ok(())
    }
}

pub fn compute_reward(spec: &RewardSpec, seq: &TokenSequence) -> f64 {
    match spec {
        RewardSpec::TargetTokenCount { target, scale } => {
            let hits = seq.tokens().iter().filter(|&&t| t == *target).count();
            scale * hits as f64 / seq.len() as f64
        }
        RewardSpec::PatternMatch { pattern, scale } => {
            let found = !pattern.is_empty()
                && seq
                    .tokens()
                    .windows(pattern.len())
                    .any(|w| w == pattern.as_slice());
            if found {
                *scale
            } else {
                0.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Gspo,
    Grpo,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gspo => "gspo",
            Self::Grpo => "grpo",
        })
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gspo" => Ok(Self::Gspo),
            "grpo" => Ok(Self::Grpo),
            other => Err(format!(
                "unknown algorithm {other:?} (expected gspo or grpo)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub group_size: usize,
    pub clip: ClipConfig,
    pub learning_rate: f64,
    pub total_steps: usize,
    /// Steps taken per sampled batch before `θ_old` is refreshed.
    pub inner_updates: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub query_count: usize,
    pub seed: u64,
    pub std_floor: f64,
    /// Std of the initial logits; 0 starts from the uniform policy.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Gspo,
            group_size: 8,
            clip: ClipConfig::default(),
            learning_rate: 2.0,
            total_steps: 500,
            inner_updates: 4,
            max_len: 32,
            vocab_size: 8,
            query_count: 4,
            seed: 0,
            std_floor: DEFAULT_STD_FLOOR,
            init_scale: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.group_size < 2 {
            return fail("group_size must be ≥ 2");
        }
        if self.inner_updates == 0 {
            return fail("inner_updates must be ≥ 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail("learning_rate must be finite and ≥ 0");
        }
        if self.max_len == 0 {
            return fail("max_len must be ≥ 1");
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be ≥ 2");
        }
        if self.query_count == 0 {
            return fail("query_count must be ≥ 1");
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return fail("init_scale must be finite and ≥ 0");
        }
        if self.std_floor.is_nan() || self.std_floor < 0.0 {
            return fail("std_floor must be ≥ 0");
        }
        ClipConfig::new(self.clip.eps_low, self.clip.eps_high)?;
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Ok(Vocabulary::new(self.vocab_size)?)
    }
}

/// One row of the training log. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// `θ_old` was refreshed and a new group sampled at this step.
    pub refresh: bool,
    pub query: usize,
    pub objective: f64,
    pub mean_s: f64,
    pub max_s: f64,
    pub min_s: f64,
    pub mean_delta_h: f64,
    pub eq_err_ppl_mean: f64,
    pub eq_err_ppl_max: f64,
    pub eq_err_entropy_mean: f64,
    pub eq_err_entropy_max: f64,
    pub frac_clipped: f64,
    pub frac_high: f64,
    pub frac_low: f64,
    pub mean_reward: f64,
    pub mean_ppl: f64,
    pub mean_h: f64,
    pub mean_len: f64,
    pub var_log_s: f64,
    pub var_log_w: f64,
    pub var_s: f64,
    pub var_w: f64,
    pub grad_norm: f64,
}

impl StepMetrics {
    /// Name of the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("objective", self.objective),
            ("mean_s", self.mean_s),
            ("max_s", self.max_s),
            ("min_s", self.min_s),
            ("mean_delta_h", self.mean_delta_h),
            ("eq_err_ppl_mean", self.eq_err_ppl_mean),
            ("eq_err_ppl_max", self.eq_err_ppl_max),
            ("eq_err_entropy_mean", self.eq_err_entropy_mean),
            ("eq_err_entropy_max", self.eq_err_entropy_max),
            ("frac_clipped", self.frac_clipped),
            ("frac_high", self.frac_high),
            ("frac_low", self.frac_low),
            ("mean_reward", self.mean_reward),
            ("mean_ppl", self.mean_ppl),
            ("mean_h", self.mean_h),
            ("mean_len", self.mean_len),
            ("var_log_s", self.var_log_s),
            ("var_log_w", self.var_log_w),
            ("var_s", self.var_s),
            ("var_w", self.var_w),
            ("grad_norm", self.grad_norm),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// Start / end averages over the first and last `window` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub window: usize,
    pub ppl_start: f64,
    pub ppl_end: f64,
    pub reward_start: f64,
    pub reward_end: f64,
    pub h_start: f64,
    pub h_end: f64,
    pub mean_frac_clipped: f64,
}

impl RunSummary {
    pub fn from_steps(steps: &[StepMetrics]) -> Self {
        let window = (steps.len() / 10).max(1).min(steps.len().max(1));
        let avg = |xs: &[StepMetrics], f: fn(&StepMetrics) -> f64| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().map(f).sum::<f64>() / xs.len() as f64
            }
        };
        let head = &steps[..window.min(steps.len())];
        let tail = &steps[steps.len().saturating_sub(window)..];
        Self {
            window,
            ppl_start: avg(head, |m| m.mean_ppl),
            ppl_end: avg(tail, |m| m.mean_ppl),
            reward_start: avg(head, |m| m.mean_reward),
            reward_end: avg(tail, |m| m.mean_reward),
            h_start: avg(head, |m| m.mean_h),
            h_end: avg(tail, |m| m.mean_h),
            mean_frac_clipped: avg(steps, |m| m.frac_clipped),
        }
    }
}

/// Config echo written ahead of the per-step records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config: TrainConfig,
    pub reward: RewardSpec,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub config: TrainConfig,
    pub reward: RewardSpec,
    pub steps: Vec<StepMetrics>,
    pub summary: RunSummary,
}

impl RunLog {
    pub fn header(&self) -> RunHeader {
        RunHeader {
            config: self.config.clone(),
            reward: self.reward.clone(),
            summary: self.summary.clone(),
        }
    }

    /// One JSON object per step.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for m in &self.steps {
            serde_json::to_writer(&mut out, m)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for m in &self.steps {
            w.serialize(m)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub policy: PolicyParams,
}

const INIT_STREAM: u64 = u64::MAX;

fn initial_policy(config: &TrainConfig) -> Result<PolicyParams> {
    let vocab = config.vocab()?;
    if config.init_scale == 0.0 {
        return Ok(PolicyParams::zeros(vocab, config.query_count)?);
    }
    let mut rng = substream(config.seed, INIT_STREAM);
    Ok(PolicyParams::random(
        vocab,
        config.query_count,
        config.init_scale,
        &mut rng,
    )?)
}

fn sample_group(
    old: &PolicyParams,
    config: &TrainConfig,
    reward: &RewardSpec,
    rollout: usize,
) -> Result<Group> {
    let query = QueryId(rollout % config.query_count);
    let responses = (0..config.group_size)
        .map(|i| {
            let mut rng = substream(config.seed, stream_id(rollout as u64, i as u64));
            old.sample_sequence(query, config.max_len, &mut rng)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let rewards = responses
        .iter()
        .map(|r| compute_reward(reward, r))
        .collect();
    Ok(Group::new(query, responses, rewards)?)
}

fn step_metrics(
    step: usize,
    refresh: bool,
    eval: &GroupEval<'_>,
    loss: &crate::objectives::LossReport,
    grad_norm: f64,
) -> StepMetrics {
    let g = eval.bundles.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| (0..eval.bundles.len()).map(f).sum::<f64>() / g;

    let reports: Vec<_> = eval
        .bundles
        .iter()
        .zip(eval.new_scores.iter().zip(&eval.old_scores))
        .map(|(b, (n, o))| check_equivalence(b, n, o))
        .collect();
    let eq = BatchEquivalence::from_reports(&reports);

    let s: Vec<f64> = eval.bundles.iter().map(|b| b.s).collect();
    let log_s: Vec<f64> = eval.bundles.iter().map(|b| b.norm_log_ratio).collect();
    let log_w: Vec<f64> = eval
        .bundles
        .iter()
        .flat_map(|b| b.token_log_ratios.iter().copied())
        .collect();
    let w: Vec<f64> = log_w.iter().map(|x| x.exp()).collect();
    let stats = loss.clip_stats();
    let var = |xs: &[f64]| {
        let m = Moments::from_slice(xs);
        if m.count < 2 {
            0.0
        } else {
            m.variance()
        }
    };

    StepMetrics {
        step,
        refresh,
        query: eval.group().query().0,
        objective: loss.objective,
        mean_s: s.iter().sum::<f64>() / g,
        max_s: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min_s: s.iter().copied().fold(f64::INFINITY, f64::min),
        mean_delta_h: mean(&|i| eval.bundles[i].delta_h),
        eq_err_ppl_mean: eq.mean_err_ppl,
        eq_err_ppl_max: eq.max_err_ppl,
        eq_err_entropy_mean: eq.mean_err_entropy,
        eq_err_entropy_max: eq.max_err_entropy,
        frac_clipped: stats.frac_clipped,
        frac_high: stats.frac_high,
        frac_low: stats.frac_low,
        mean_reward: eval.group().rewards().iter().sum::<f64>() / g,
        mean_ppl: mean(&|i| eval.new_scores[i].perplexity),
        mean_h: mean(&|i| eval.new_scores[i].cross_entropy),
        mean_len: mean(&|i| eval.new_scores[i].length as f64),
        var_log_s: var(&log_s),
        var_log_w: var(&log_w),
        var_s: var(&s),
        var_w: var(&w),
        grad_norm,
    }
}

/// Runs the loop and also returns the final policy.
pub fn train(config: &TrainConfig, reward: &RewardSpec) -> Result<TrainOutcome> {
    config.validate()?;
    reward.validate(config.vocab()?)?;

    let mut params = initial_policy(config)?;
    let mut old = params.clone();
    let mut group: Option<Group> = None;
    let mut steps = Vec::with_capacity(config.total_steps);

    for step in 0..config.total_steps {
        let refresh = step % config.inner_updates == 0;
        if refresh {
            old = params.clone();
            group = Some(sample_group(
                &old,
                config,
                reward,
                step / config.inner_updates,
            )?);
        }
        let group = group.as_ref().expect("sampled at step 0");

        let eval = GroupEval::new(&params, &old, group, config.std_floor)?;
        let pg = match config.algorithm {
            Algorithm::Gspo => eval.gspo(&config.clip)?,
            Algorithm::Grpo => eval.grpo(&config.clip)?,
        };
        let metrics = step_metrics(step, refresh, &eval, &pg.loss, pg.grad.norm());
        if let Some(metric) = metrics.first_non_finite() {
            return Err(TrainError::Diverged { step, metric });
        }
        steps.push(metrics);

        params.apply_gradient(&pg.grad, config.learning_rate);
        if params.logits().iter().any(|x| !x.is_finite()) {
            return Err(TrainError::Diverged {
                step,
                metric: "logits",
            });
        }
    }

    let summary = RunSummary::from_steps(&steps);
    Ok(TrainOutcome {
        log: RunLog {
            config: config.clone(),
            reward: reward.clone(),
            steps,
            summary,
        },
        policy: params,
    })
}

pub fn run_training(config: &TrainConfig, reward: &RewardSpec) -> Result<RunLog> {
    Ok(train(config, reward)?.log)
}

/// Per-step weight variances of a paired GSPO / GRPO run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub step: usize,
    pub refresh: bool,
    pub gspo_var_s: f64,
    pub gspo_var_w: f64,
    pub gspo_var_log_s: f64,
    pub gspo_var_log_w: f64,
    pub grpo_var_s: f64,
    pub grpo_var_w: f64,
    pub grpo_var_log_s: f64,
    pub grpo_var_log_w: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub gspo: TrainOutcome,
    pub grpo: TrainOutcome,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs GSPO and GRPO from the same seed and initial policy.
///
/// Within each run, `var_s` / `var_w` are measured on that step's own batch,
/// so every row compares sequence and token weights on identical samples.
pub fn compare_algorithms(config: &TrainConfig, reward: &RewardSpec) -> Result<Comparison> {
    let gspo = train(
        &TrainConfig {
            algorithm: Algorithm::Gspo,
            ..config.clone()
        },
        reward,
    )?;
    let grpo = train(
        &TrainConfig {
            algorithm: Algorithm::Grpo,
            ..config.clone()
        },
        reward,
    )?;
    let rows = gspo
        .log
        .steps
        .iter()
        .zip(&grpo.log.steps)
        .map(|(a, b)| ComparisonRow {
            step: a.step,
            refresh: a.refresh,
            gspo_var_s: a.var_s,
            gspo_var_w: a.var_w,
            gspo_var_log_s: a.var_log_s,
            gspo_var_log_w: a.var_log_w,
            grpo_var_s: b.var_s,
            grpo_var_w: b.var_w,
            grpo_var_log_s: b.var_log_s,
            grpo_var_log_w: b.var_log_w,
        })
        .collect();
    Ok(Comparison { gspo, grpo, rows })
}
