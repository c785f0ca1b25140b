use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use gspo_lab::objectives::ClipConfig;
use gspo_lab::policy::write_checkpoint;
use gspo_lab::trainer::{
    compare_algorithms, train, Algorithm, RewardSpec, TrainConfig, TrainOutcome,
};

use crate::config::{parse_list, KvConfig};
use crate::error::{CliError, Result};
use crate::manifest::{csv_err, OutputDir};

const KEYS: &[&str] = &[
    "seed",
    "algorithm",
    "compare",
    "group_size",
    "eps_low",
    "eps_high",
    "learning_rate",
    "total_steps",
    "inner_updates",
    "max_len",
    "vocab_size",
    "query_count",
    "std_floor",
    "init_scale",
    "reward",
    "reward_target",
    "reward_pattern",
    "reward_scale",
];

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out/train")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `gspo` or `grpo`.
    #[arg(long)]
    pub algorithm: Option<Algorithm>,
    /// Run both algorithms from the same seed and write a variance comparison.
    #[arg(long)]
    pub compare: bool,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub eps_low: Option<f64>,
    #[arg(long)]
    pub eps_high: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    /// Gradient steps per sampled batch.
    #[arg(long)]
    pub inner_updates: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub query_count: Option<usize>,
    #[arg(long)]
    pub std_floor: Option<f64>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// `target_token_count` or `pattern_match`.
    #[arg(long)]
    pub reward: Option<String>,
    #[arg(long)]
    pub reward_target: Option<usize>,
    /// Comma-separated token ids.
    #[arg(long)]
    pub reward_pattern: Option<String>,
    #[arg(long)]
    pub reward_scale: Option<f64>,
}

fn build(args: &TrainArgs, cfg: &KvConfig) -> Result<(TrainConfig, RewardSpec, bool)> {
    let d = TrainConfig::default();
    let clip = ClipConfig::new(
        cfg.resolve(args.eps_low, "eps_low", d.clip.eps_low)?,
        cfg.resolve(args.eps_high, "eps_high", d.clip.eps_high)?,
    )
    .map_err(|e| CliError::config(e.to_string()))?;
    let config = TrainConfig {
        algorithm: cfg.resolve(args.algorithm, "algorithm", d.algorithm)?,
        group_size: cfg.resolve(args.group_size, "group_size", d.group_size)?,
        clip,
        learning_rate: cfg.resolve(args.learning_rate, "learning_rate", d.learning_rate)?,
        total_steps: cfg.resolve(args.total_steps, "total_steps", d.total_steps)?,
        inner_updates: cfg.resolve(args.inner_updates, "inner_updates", d.inner_updates)?,
        max_len: cfg.resolve(args.max_len, "max_len", d.max_len)?,
        vocab_size: cfg.resolve(args.vocab_size, "vocab_size", d.vocab_size)?,
        query_count: cfg.resolve(args.query_count, "query_count", d.query_count)?,
        seed: cfg.seed(args.seed, d.seed)?,
        std_floor: cfg.resolve(args.std_floor, "std_floor", d.std_floor)?,
        init_scale: cfg.resolve(args.init_scale, "init_scale", d.init_scale)?,
    };
    config
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;

    let scale = cfg.resolve(args.reward_scale, "reward_scale", 1.0)?;
    let kind = cfg.resolve(
        args.reward.clone(),
        "reward",
        "target_token_count".to_string(),
    )?;
    let reward = match kind.as_str() {
        "target_token_count" => RewardSpec::TargetTokenCount {
            target: cfg.resolve(args.reward_target, "reward_target", 3)?,
            scale,
        },
        "pattern_match" => {
            let raw = args
                .reward_pattern
                .clone()
                .or_else(|| cfg.raw("reward_pattern").map(str::to_string))
                .ok_or_else(|| CliError::config("pattern_match reward needs reward_pattern"))?;
            RewardSpec::PatternMatch {
                pattern: parse_list("reward_pattern", &raw)?,
                scale,
            }
        }
        other => return Err(CliError::config(format!("unknown reward `{other}`"))),
    };
    let vocab = config
        .vocab()
        .map_err(|e| CliError::config(e.to_string()))?;
    reward
        .validate(vocab)
        .map_err(|e| CliError::config(e.to_string()))?;

    let compare = args.compare || cfg.get::<bool>("compare")?.unwrap_or(false);
    Ok((config, reward, compare))
}

fn write_outcome(out: &mut OutputDir, prefix: &str, outcome: &TrainOutcome) -> Result<()> {
    let log = &outcome.log;
    out.write(&format!("{prefix}metrics.jsonl"), |w| log.write_jsonl(w))?;
    out.write(&format!("{prefix}metrics.csv"), |w| {
        log.write_csv(w).map_err(csv_err)
    })?;
    out.write(&format!("{prefix}run_header.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &log.header())?;
        w.write_all(b"\n")
    })?;
    out.write(&format!("{prefix}policy.ckpt"), |w| {
        write_checkpoint(&outcome.policy, w)
    })
}

fn print_summary(label: &str, outcome: &TrainOutcome) {
    let s = &outcome.log.summary;
    println!(
        "{label}: reward {:.4} -> {:.4}, ppl {:.4} -> {:.4}, mean clip fraction {:.4}",
        s.reward_start, s.reward_end, s.ppl_start, s.ppl_end, s.mean_frac_clipped
    );
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let cfg = KvConfig::load(args.config.as_deref(), KEYS)?;
    let (config, reward, compare) = build(args, &cfg)?;

    if compare {
        let cmp = compare_algorithms(&config, &reward)?;
        let mut out = OutputDir::create(&args.out)?;
        write_outcome(&mut out, "gspo/", &cmp.gspo)?;
        write_outcome(&mut out, "grpo/", &cmp.grpo)?;
        out.write("comparison.csv", |w| cmp.write_csv(w).map_err(csv_err))?;
        print_summary("gspo", &cmp.gspo);
        print_summary("grpo", &cmp.grpo);
        out.finish("train", cfg.path(), config.seed)?;
    } else {
        let outcome = train(&config, &reward)?;
        let mut out = OutputDir::create(&args.out)?;
        write_outcome(&mut out, "", &outcome)?;
        print_summary(&config.algorithm.to_string(), &outcome);
        out.finish("train", cfg.path(), config.seed)?;
    }
    Ok(())
}
