use std::path::PathBuf;

use clap::Args;
use gspo_lab::info_metrics::records::read_records;
use gspo_lab::info_metrics::{random_trial, BatchEquivalence, EquivalenceReport, EquivalenceTrial};
use gspo_lab::policy::Vocabulary;
use gspo_lab::rng::substream;
use serde::Serialize;

use crate::config::KvConfig;
use crate::error::{CliError, Result};
use crate::manifest::{csv_err, OutputDir};

/// Largest relative disagreement tolerated between the three forms of `s`.
pub const MAX_REL_ERR: f64 = 1e-10;

const KEYS: &[&str] = &[
    "seed",
    "n_triples",
    "vocab_size",
    "max_len",
    "logit_scale",
    "records",
];

#[derive(Debug, Args)]
pub struct EquivalenceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out/equivalence")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of random (θ, θ_old, y) triples.
    #[arg(long)]
    pub n_triples: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub logit_scale: Option<f64>,
    /// Analyze per-token log-probabilities from a JSONL file instead.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Perturb the perplexity path of the first check by a relative 1e-6.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Serialize)]
struct Row {
    id: String,
    length: usize,
    s: f64,
    ppl_ratio: f64,
    exp_delta_h: f64,
    err_ppl: f64,
    err_entropy: f64,
    rel_err: f64,
}

impl Row {
    fn new(id: String, length: usize, r: &EquivalenceReport) -> Self {
        Self {
            id,
            length,
            s: r.s,
            ppl_ratio: r.ppl_ratio,
            exp_delta_h: r.exp_delta_h,
            err_ppl: r.err_ppl,
            err_entropy: r.err_entropy,
            rel_err: r.max_rel_err(),
        }
    }
}

pub fn run(args: &EquivalenceArgs) -> Result<()> {
    let cfg = KvConfig::load(args.config.as_deref(), KEYS)?;
    let seed = cfg.seed(args.seed, 0)?;
    let records = match &args.records {
        Some(p) => Some(p.clone()),
        None => cfg.get::<PathBuf>("records")?,
    };

    let mut rows = match records {
        Some(path) => record_rows(&path)?,
        None => {
            let n = cfg.resolve(args.n_triples, "n_triples", 1000)?;
            let vocab = cfg.resolve(args.vocab_size, "vocab_size", 16)?;
            let max_len = cfg.resolve(args.max_len, "max_len", 64)?;
            let scale = cfg.resolve(args.logit_scale, "logit_scale", 1.0)?;
            if n == 0 {
                return Err(CliError::config("n_triples must be positive"));
            }
            if max_len == 0 || !(scale.is_finite() && scale >= 0.0) {
                return Err(CliError::config(
                    "max_len must be positive and logit_scale finite ≥ 0",
                ));
            }
            let vocab = Vocabulary::new(vocab).map_err(|e| CliError::config(e.to_string()))?;
            trial_rows(n, vocab, max_len, scale, seed)?
        }
    };
    if rows.is_empty() {
        return Err(CliError::config("no sequences to check"));
    }

    let mut reports: Vec<EquivalenceReport> = rows.iter().map(|r| r.1).collect();
    if args.inject_fault {
        let r = &mut reports[0];
        r.ppl_ratio *= 1.0 + 1e-6;
        r.err_ppl = (r.s - r.ppl_ratio).abs();
        rows[0].1 = *r;
    }
    let summary = BatchEquivalence::from_reports(&reports);

    let mut out = OutputDir::create(&args.out)?;
    out.write("triples.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        for (id, report, len) in &rows {
            csv.serialize(Row::new(id.clone(), *len, report))
                .map_err(csv_err)?;
        }
        csv.flush()
    })?;
    out.write("summary.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.serialize(summary).map_err(csv_err)?;
        csv.flush()
    })?;
    out.finish("equivalence", cfg.path(), seed)?;

    println!(
        "{} checks: mean err ppl {:e}, mean err entropy {:e}, max rel err {:e}",
        summary.count, summary.mean_err_ppl, summary.mean_err_entropy, summary.max_rel_err
    );
    if summary.max_rel_err < MAX_REL_ERR {
        Ok(())
    } else {
        Err(CliError::Threshold(format!(
            "max relative error {:e} ≥ {MAX_REL_ERR:e}",
            summary.max_rel_err
        )))
    }
}

type Checked = (String, EquivalenceReport, usize);

fn trial_rows(
    n: usize,
    vocab: Vocabulary,
    max_len: usize,
    scale: f64,
    seed: u64,
) -> Result<Vec<Checked>> {
    (0..n)
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let EquivalenceTrial { length, report } = random_trial(vocab, max_len, scale, &mut rng)
                .map_err(|e| CliError::config(e.to_string()))?;
            Ok((i.to_string(), report, length))
        })
        .collect()
}

fn record_rows(path: &std::path::Path) -> Result<Vec<Checked>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let records = read_records(std::io::BufReader::new(file))
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    records
        .iter()
        .map(|r| {
            let a = r
                .analyze()
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            let id = match &a.seq_id {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            Ok((id, a.report, a.bundle.len()))
        })
        .collect()
}
