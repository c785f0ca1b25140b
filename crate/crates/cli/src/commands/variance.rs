use std::path::PathBuf;

use clap::Args;
use gspo_lab::variance_lab::{simulate_log_s, write_reports_csv, SamplerSpec, VarianceReport};

use crate::config::{parse_list, KvConfig};
use crate::error::{CliError, Result};
use crate::manifest::{csv_err, OutputDir};

/// Measured token log-ratio variance used by the default suite.
pub const DEFAULT_SIGMA2: f64 = 8.14e-4;

const KEYS: &[&str] = &[
    "seed",
    "n_samples",
    "mu_log",
    "sigma2_log",
    "iid_lengths",
    "equicorrelated",
    "mixtures",
    "iid_tolerance",
    "tolerance",
];

/// Suite schema:
///
/// ```text
/// iid_lengths    = 10, 100, 817          # one iid spec per length
/// equicorrelated = 0.003@817             # rho@len, comma separated
/// mixtures       = 100:0.5 900:0.5       # len:weight, mixtures split by ';'
/// ```
///
/// An empty value disables that family.
#[derive(Debug, Args)]
pub struct VarianceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out/variance")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sequences simulated per spec.
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub mu_log: Option<f64>,
    #[arg(long)]
    pub sigma2_log: Option<f64>,
    #[arg(long)]
    pub iid_lengths: Option<String>,
    #[arg(long)]
    pub equicorrelated: Option<String>,
    #[arg(long)]
    pub mixtures: Option<String>,
    /// Relative tolerance for iid specs.
    #[arg(long)]
    pub iid_tolerance: Option<f64>,
    /// Relative tolerance for correlated and mixture specs.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

struct Planned {
    spec: SamplerSpec,
    tolerance: f64,
}

pub fn run(args: &VarianceArgs) -> Result<()> {
    let cfg = KvConfig::load(args.config.as_deref(), KEYS)?;
    let seed = cfg.seed(args.seed, 0)?;
    let n = cfg.resolve(args.n_samples, "n_samples", 1_000_000)?;
    let mu = cfg.resolve(args.mu_log, "mu_log", 0.0)?;
    let sigma2 = cfg.resolve(args.sigma2_log, "sigma2_log", DEFAULT_SIGMA2)?;
    let iid_tol = cfg.resolve(args.iid_tolerance, "iid_tolerance", 0.05)?;
    let tol = cfg.resolve(args.tolerance, "tolerance", 0.10)?;
    let text = |flag: &Option<String>, key: &str, default: &str| -> String {
        flag.clone()
            .or_else(|| cfg.raw(key).map(str::to_string))
            .unwrap_or_else(|| default.to_string())
    };

    let with_mu = |spec: SamplerSpec| match spec {
        SamplerSpec::IidNormal {
            sigma2_log, len, ..
        } => SamplerSpec::IidNormal {
            mu_log: mu,
            sigma2_log,
            len,
        },
        SamplerSpec::Equicorrelated {
            sigma2_log,
            corr_rho,
            len,
            ..
        } => SamplerSpec::Equicorrelated {
            mu_log: mu,
            sigma2_log,
            corr_rho,
            len,
        },
        SamplerSpec::LengthMixture {
            sigma2_log,
            lengths,
            ..
        } => SamplerSpec::LengthMixture {
            mu_log: mu,
            sigma2_log,
            lengths,
        },
    };

    let mut plan = Vec::new();
    for len in parse_list::<usize>(
        "iid_lengths",
        &text(&args.iid_lengths, "iid_lengths", "10,100,817"),
    )? {
        plan.push(Planned {
            spec: with_mu(SamplerSpec::iid(sigma2, len)),
            tolerance: iid_tol,
        });
    }
    for item in parse_list::<String>(
        "equicorrelated",
        &text(&args.equicorrelated, "equicorrelated", "0.003@817"),
    )? {
        let (rho, len) = item.split_once('@').ok_or_else(|| {
            CliError::config(format!("equicorrelated item `{item}`: expected rho@len"))
        })?;
        let rho = rho
            .parse()
            .map_err(|e| CliError::config(format!("rho `{rho}`: {e}")))?;
        let len = len
            .parse()
            .map_err(|e| CliError::config(format!("len `{len}`: {e}")))?;
        plan.push(Planned {
            spec: with_mu(SamplerSpec::equicorrelated(sigma2, rho, len)),
            tolerance: tol,
        });
    }
    for mixture in text(&args.mixtures, "mixtures", "100:0.5 900:0.5").split(';') {
        let lengths = parse_list::<String>("mixtures", mixture)?
            .iter()
            .map(|pair| {
                let (l, w) = pair.split_once(':').ok_or_else(|| {
                    CliError::config(format!("mixture item `{pair}`: expected len:weight"))
                })?;
                let l = l
                    .parse()
                    .map_err(|e| CliError::config(format!("length `{l}`: {e}")))?;
                let w = w
                    .parse()
                    .map_err(|e| CliError::config(format!("weight `{w}`: {e}")))?;
                Ok((l, w))
            })
            .collect::<Result<Vec<(usize, f64)>>>()?;
        if !lengths.is_empty() {
            plan.push(Planned {
                spec: with_mu(SamplerSpec::mixture(sigma2, lengths)),
                tolerance: tol,
            });
        }
    }
    if plan.is_empty() {
        return Err(CliError::config("no sampler specs configured"));
    }
    for p in &plan {
        p.spec
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        if !(p.tolerance.is_finite() && p.tolerance > 0.0) {
            return Err(CliError::config("tolerances must be positive"));
        }
    }

    let reports = plan
        .iter()
        .enumerate()
        .map(|(i, p)| {
            simulate_log_s(&p.spec, n, seed.wrapping_add(i as u64))
                .map_err(|e| CliError::config(e.to_string()))
        })
        .collect::<Result<Vec<VarianceReport>>>()?;

    let mut out = OutputDir::create(&args.out)?;
    out.write("variance.csv", |w| {
        write_reports_csv(&reports, w).map_err(csv_err)
    })?;
    out.finish("variance", cfg.path(), seed)?;

    let mut failures = Vec::new();
    for (p, r) in plan.iter().zip(&reports) {
        let (e_var, e_inf) = (r.var_log_s_rel_err(), r.inflation_rel_err());
        let ok = e_var <= p.tolerance && e_inf <= p.tolerance;
        println!(
            "{:<22} {:<16} var_log_s {:.6e} (oracle {:.6e}, rel err {:.4}) inflation {:.4} (expected {:.4}, rel err {:.4}) {}",
            r.kind,
            r.length_dist,
            r.var_log_s,
            r.oracle_var_log_s,
            e_var,
            r.inflation,
            r.expected_inflation,
            e_inf,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures.push(format!("{} {}", r.kind, r.length_dist));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Threshold(format!(
            "outside tolerance: {}",
            failures.join(", ")
        )))
    }
}
