use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use walkdir::WalkDir;

use crate::error::{CliError, Result};
use crate::manifest::{csv_err, OutputDir, RunManifest, MANIFEST_FILE};

const EQUIVALENCE_COLUMNS: &[&str] = &["id", "length", "err_ppl", "err_entropy", "rel_err"];
const VARIANCE_COLUMNS: &[&str] = &[
    "kind",
    "length_dist",
    "mean_len",
    "var_log_w",
    "var_log_s",
    "oracle_var_log_s",
    "reduction_factor",
    "theoretical_factor",
    "inflation",
    "expected_inflation",
];
const TRAJECTORY_COLUMNS: &[&str] = &[
    "step",
    "refresh",
    "mean_ppl",
    "mean_h",
    "mean_reward",
    "frac_clipped",
];

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory searched recursively for run manifests.
    pub run_dir: PathBuf,
    /// Defaults to `<run_dir>/report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SummaryRow {
    series: String,
    command: String,
    seed: u64,
    source: String,
    rows: usize,
}

pub fn run(args: &ReportArgs) -> Result<()> {
    if !args.run_dir.is_dir() {
        return Err(CliError::config(format!(
            "{} is not a directory",
            args.run_dir.display()
        )));
    }
    let out_root = args
        .out
        .clone()
        .unwrap_or_else(|| args.run_dir.join("report"));

    let mut manifests = Vec::new();
    for entry in WalkDir::new(&args.run_dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::config(e.to_string()))?;
        if entry.file_name() != MANIFEST_FILE || !entry.file_type().is_file() {
            continue;
        }
        let manifest = RunManifest::read(entry.path())?;
        if manifest.command == "report" {
            continue;
        }
        let dir = entry
            .path()
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf();
        manifests.push((dir, manifest));
    }
    if manifests.is_empty() {
        return Err(CliError::config(format!(
            "no run manifests under {}",
            args.run_dir.display()
        )));
    }

    let mut out = OutputDir::create(&out_root)?;
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut summary = Vec::new();
    for (dir, m) in &manifests {
        let base = format!("{}_seed{}", m.command, m.seed);
        let n = seen.entry(base.clone()).or_insert(0);
        *n += 1;
        let name = if *n == 1 { base } else { format!("{base}_{n}") };
        let source = dir
            .strip_prefix(&args.run_dir)
            .unwrap_or(dir)
            .display()
            .to_string();

        let series: Vec<(String, PathBuf, &[&str])> = match m.command.as_str() {
            "equivalence" => vec![(
                format!("{name}_equivalence_errors.csv"),
                dir.join("triples.csv"),
                EQUIVALENCE_COLUMNS,
            )],
            "variance" => vec![(
                format!("{name}_variance_scaling.csv"),
                dir.join("variance.csv"),
                VARIANCE_COLUMNS,
            )],
            "train" => m
                .outputs
                .iter()
                .filter_map(|o| o.strip_suffix("metrics.csv"))
                .map(|prefix| {
                    let tag = prefix.trim_end_matches('/');
                    let file = if tag.is_empty() {
                        format!("{name}_ppl_trajectory.csv")
                    } else {
                        format!("{name}_{tag}_ppl_trajectory.csv")
                    };
                    (
                        file,
                        dir.join(format!("{prefix}metrics.csv")),
                        TRAJECTORY_COLUMNS,
                    )
                })
                .collect(),
            other => {
                eprintln!("skipping manifest with unknown command `{other}` in {source}");
                continue;
            }
        };
        for (file, src, columns) in series {
            let rows = project(&src, columns, &mut out, &file)?;
            summary.push(SummaryRow {
                series: file,
                command: m.command.clone(),
                seed: m.seed,
                source: source.clone(),
                rows,
            });
        }
    }
    out.write("summary.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        for row in &summary {
            csv.serialize(row).map_err(csv_err)?;
        }
        csv.flush()
    })?;
    out.finish("report", None, 0)?;
    for row in &summary {
        println!("{} ({} rows)", row.series, row.rows);
    }
    Ok(())
}

/// Copies `columns` of `src` into `dst`, returning the number of data rows.
fn project(src: &Path, columns: &[&str], out: &mut OutputDir, dst: &str) -> Result<usize> {
    let mut reader = csv::Reader::from_path(src)
        .map_err(|e| CliError::config(format!("{}: {e}", src.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::config(format!("{}: {e}", src.display())))?
        .clone();
    let idx = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| CliError::config(format!("{}: missing column `{c}`", src.display())))
        })
        .collect::<Result<Vec<usize>>>()?;
    let records = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::config(format!("{}: {e}", src.display())))?;
    out.write(dst, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(columns).map_err(csv_err)?;
        for r in &records {
            csv.write_record(idx.iter().map(|&i| &r[i]))
                .map_err(csv_err)?;
        }
        csv.flush()
    })?;
    Ok(records.len())
}
