//! Analytic gradients of the clipped surrogates.
//!
//! For a response whose clipped branch is not selected,
//!
//! ```text
//! ∇ (s_i Â_i)      = Â_i · s_i · (1/|y_i|) Σ_t ∇ log π(y_it|·)        (GSPO, s_i = exp(ΔH_i))
//! ∇ (w_it Â_i)/|y_i| = Â_i · w_it · ∇ log π(y_it|·) / |y_i|          (GRPO)
//! ```
//!
//! A selected clipped branch is constant in θ and contributes nothing.
//! Advantages and the old policy are held fixed.

use crate::info_metrics::{self, RatioBundle, SequenceScore};
use crate::policy::{GradTable, PolicyParams};

use super::{
    group_advantages, grpo_objective, gspo_objective, AdvantageSet, ClipConfig, Group, LossReport,
    Result, DEFAULT_STD_FLOOR,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    /// `∇_θ J` over the logit table.
    pub grad: GradTable,
    pub loss: LossReport,
}

/// Scores and ratios of one group under the current and the frozen policy.
#[derive(Debug, Clone)]
pub struct GroupEval<'a> {
    params: &'a PolicyParams,
    group: &'a Group,
    pub advantages: AdvantageSet,
    pub new_scores: Vec<SequenceScore>,
    pub old_scores: Vec<SequenceScore>,
    pub bundles: Vec<RatioBundle>,
}

impl<'a> GroupEval<'a> {
    pub fn new(
        params: &'a PolicyParams,
        old_params: &PolicyParams,
        group: &'a Group,
        std_floor: f64,
    ) -> Result<Self> {
        let advantages = group_advantages(group.rewards(), std_floor)?;
        let mut new_scores = Vec::with_capacity(group.size());
        let mut old_scores = Vec::with_capacity(group.size());
        let mut bundles = Vec::with_capacity(group.size());
        for seq in group.responses() {
            let new = info_metrics::score(params, seq)?;
            let old = info_metrics::score(old_params, seq)?;
            bundles.push(info_metrics::ratio_bundle(&new, &old)?);
            new_scores.push(new);
            old_scores.push(old);
        }
        Ok(Self {
            params,
            group,
            advantages,
            new_scores,
            old_scores,
            bundles,
        })
    }

    pub fn group(&self) -> &Group {
        self.group
    }

    pub fn s_values(&self) -> Vec<f64> {
        self.bundles.iter().map(|b| b.s).collect()
    }

    pub fn token_ratios(&self) -> Vec<Vec<f64>> {
        self.bundles
            .iter()
            .map(|b| b.token_ratios().collect())
            .collect()
    }

    pub fn gspo(&self, clip: &ClipConfig) -> Result<PolicyGradient> {
        let loss = gspo_objective(&self.s_values(), &self.advantages, clip)?;
        let g = self.group.size() as f64;
        let mut grad = GradTable::new(self.params.vocab().size());
        for (i, seq) in self.group.responses().iter().enumerate() {
            let a = self.advantages.advantages[i];
            if loss.active[i] || a == 0.0 {
                continue;
            }
            let weight = self.bundles[i].delta_h.exp();
            let coef = weight * a / (g * seq.len() as f64);
            for (prev, next) in seq.steps() {
                self.params
                    .accumulate_step_grad(&mut grad, seq.query(), prev, next, coef)?;
            }
        }
        Ok(PolicyGradient { grad, loss })
    }

    pub fn grpo(&self, clip: &ClipConfig) -> Result<PolicyGradient> {
        let loss = grpo_objective(&self.token_ratios(), &self.advantages, clip)?;
        let g = self.group.size() as f64;
        let mut grad = GradTable::new(self.params.vocab().size());
        let mut flat = 0;
        for (i, seq) in self.group.responses().iter().enumerate() {
            let a = self.advantages.advantages[i];
            let len = seq.len() as f64;
            for ((prev, next), log_w) in seq.steps().zip(&self.bundles[i].token_log_ratios) {
                let active = loss.active[flat];
                flat += 1;
                if active || a == 0.0 {
                    continue;
                }
                let coef = log_w.exp() * a / (g * len);
                self.params
                    .accumulate_step_grad(&mut grad, seq.query(), prev, next, coef)?;
            }
        }
        Ok(PolicyGradient { grad, loss })
    }
}

/// `∇_θ J_GSPO` at `params`, with `old_params` frozen.
pub fn gspo_gradient(
    params: &PolicyParams,
    group: &Group,
    old_params: &PolicyParams,
    clip: &ClipConfig,
) -> Result<PolicyGradient> {
    GroupEval::new(params, old_params, group, DEFAULT_STD_FLOOR)?.gspo(clip)
}

/// `∇_θ J_GRPO` at `params`, with `old_params` frozen.
pub fn grpo_gradient(
    params: &PolicyParams,
    group: &Group,
    old_params: &PolicyParams,
    clip: &ClipConfig,
) -> Result<PolicyGradient> {
    GroupEval::new(params, old_params, group, DEFAULT_STD_FLOOR)?.grpo(clip)
}
