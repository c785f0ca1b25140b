//! Plain-text policy checkpoints.
//!
//! ```text
//! gspo-lab-policy v1
//! query_count <Q>
//! vocab <V>
//! <V space-separated logits>      # Q·(V+1) lines, query-major, BOS row last
//! ```
//!
//! Values are written in shortest round-trip decimal form, so a
//! write/read cycle reproduces the table bit for bit.

use std::io::{BufRead, Write};

use super::{PolicyError, PolicyParams, Result, Vocabulary};

pub const CHECKPOINT_MAGIC: &str = "gspo-lab-policy v1";

pub fn write_checkpoint<W: Write>(params: &PolicyParams, mut out: W) -> std::io::Result<()> {
    let v = params.vocab().size();
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    writeln!(out, "query_count {}", params.query_count())?;
    writeln!(out, "vocab {v}")?;
    for row in params.logits().chunks(v) {
        let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<PolicyParams> {
    let bad = |msg: String| PolicyError::Checkpoint(msg);
    let mut lines = input.lines();
    let mut next_line = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| bad(format!("missing {what}")))?
            .map_err(|e| bad(e.to_string()))
    };

    let magic = next_line("header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(bad(format!("unrecognized header {magic:?}")));
    }
    let query_count = header_value(&next_line("query_count")?, "query_count")?;
    let vocab = Vocabulary::new(header_value(&next_line("vocab")?, "vocab")?)?;

    let rows = query_count * (vocab.size() + 1);
    let mut logits = Vec::with_capacity(rows * vocab.size());
    for r in 0..rows {
        let line = next_line(&format!("row {r}"))?;
        let before = logits.len();
        for tok in line.split_whitespace() {
            logits.push(
                tok.parse::<f64>()
                    .map_err(|e| bad(format!("row {r}: {tok:?}: {e}")))?,
            );
        }
        if logits.len() - before != vocab.size() {
            return Err(bad(format!(
                "row {r} has {} values, expected {}",
                logits.len() - before,
                vocab.size()
            )));
        }
    }
    PolicyParams::from_logits(vocab, query_count, logits)
}

fn header_value(line: &str, key: &str) -> Result<usize> {
    let mut parts = line.split_whitespace();
    match (parts.next(), parts.next(), parts.next()) {
        (Some(k), Some(v), None) if k == key => v
            .parse()
            .map_err(|_| PolicyError::Checkpoint(format!("bad {key} value {v:?}"))),
        _ => Err(PolicyError::Checkpoint(format!(
            "expected `{key} <n>`, got {line:?}"
        ))),
    }
}
