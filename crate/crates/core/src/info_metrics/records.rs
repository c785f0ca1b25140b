//! External per-token log-probability logs.
//!
//! One JSON object per line:
//!
//! ```text
//! {"seq_id": 17, "tokens_len": 3, "new_logprobs": [-0.1, -2.3, -0.7], "old_logprobs": [-0.2, -2.1, -0.7]}
//! ```
//!
//! `seq_id` may be any JSON scalar; it is echoed back untouched.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::{check_equivalence, ratio_bundle, EquivalenceReport, RatioBundle, SequenceScore};

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: io: {source}")]
    Io { line: usize, source: std::io::Error },
    #[error("record {seq_id}: tokens_len={tokens_len} but new/old carry {new}/{old} values")]
    LengthMismatch {
        seq_id: serde_json::Value,
        tokens_len: usize,
        new: usize,
        old: usize,
    },
    #[error("record {seq_id}: {source}")]
    Metrics {
        seq_id: serde_json::Value,
        source: super::MetricsError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogProbRecord {
    pub seq_id: serde_json::Value,
    pub tokens_len: usize,
    pub new_logprobs: Vec<f64>,
    pub old_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordAnalysis {
    pub seq_id: serde_json::Value,
    pub bundle: RatioBundle,
    pub report: EquivalenceReport,
}

impl LogProbRecord {
    pub fn analyze(&self) -> Result<RecordAnalysis, RecordError> {
        if self.new_logprobs.len() != self.tokens_len || self.old_logprobs.len() != self.tokens_len
        {
            return Err(RecordError::LengthMismatch {
                seq_id: self.seq_id.clone(),
                tokens_len: self.tokens_len,
                new: self.new_logprobs.len(),
                old: self.old_logprobs.len(),
            });
        }
        let wrap = |source| RecordError::Metrics {
            seq_id: self.seq_id.clone(),
            source,
        };
        let new = SequenceScore::from_per_token(self.new_logprobs.clone()).map_err(wrap)?;
        let old = SequenceScore::from_per_token(self.old_logprobs.clone()).map_err(wrap)?;
        let bundle = ratio_bundle(&new, &old).map_err(wrap)?;
        let report = check_equivalence(&bundle, &new, &old);
        Ok(RecordAnalysis {
            seq_id: self.seq_id.clone(),
            bundle,
            report,
        })
    }
}

/// Parses a JSON-lines stream, skipping blank lines.
pub fn read_records<R: BufRead>(input: R) -> Result<Vec<LogProbRecord>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|source| RecordError::Io {
            line: i + 1,
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| RecordError::Json {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}
