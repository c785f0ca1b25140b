//! A desk-scale laboratory for sequence-level policy optimization.
//!
//! The crate pairs a tabular autoregressive softmax policy (exact
//! log-probabilities, closed-form score gradients) with the quantities that
//! GSPO-style training is built from:
//!
//! * [`info_metrics`]: cross-entropy `H`, perplexity, token ratios `w_t`,
//!   the length-normalized ratio `s` and `ΔH`, with the identity
//!   `s = PPL_old / PPL_new = exp(ΔH)` checked through independent paths.
//! * [`objectives`]: group-relative advantages and the clipped GSPO / GRPO
//!   surrogates together with their analytic gradients.
//! * [`variance_lab`]: Monte Carlo experiments on `Var[log s]` under iid,
//!   equicorrelated and length-heterogeneous token log-ratios.
//! * [`trainer`]: an instrumented toy training loop on synthetic rewards.

pub mod info_metrics;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod variance_lab;

pub use info_metrics::{EquivalenceReport, EquivalenceTrial, RatioBundle, SequenceScore};
pub use objectives::{AdvantageSet, ClipConfig, ClipStats, Group, LossReport};
pub use policy::{PolicyParams, QueryId, TokenSequence, Vocabulary};
