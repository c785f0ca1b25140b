use clap::Args;
use gspo_lab::info_metrics::entropy_clip_bounds;

use crate::error::{CliError, Result};

#[derive(Debug, Args)]
pub struct ClipBoundsArgs {
    #[arg(long, default_value_t = 3e-4)]
    pub eps_low: f64,
    #[arg(long, default_value_t = 4e-4)]
    pub eps_high: f64,
}

pub fn run(args: &ClipBoundsArgs) -> Result<()> {
    let band = entropy_clip_bounds(args.eps_low, args.eps_high)
        .map_err(|e| CliError::config(e.to_string()))?;
    println!("eps_low     {:e}", args.eps_low);
    println!("eps_high    {:e}", args.eps_high);
    // `+ 0.0` folds −0 into 0 for ε_low = 0.
    println!(
        "delta_h     [{:.5e}, {:.5e}] nats/token",
        band.lower + 0.0,
        band.upper
    );
    println!(
        "ppl_ratio   [{:.9}, {:.9}]",
        band.lower.exp(),
        band.upper.exp()
    );
    Ok(())
}
