use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use m2ae_core::network::Mode;

/// `H×W` given as `HxW` (or a single number for a square).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub h: usize,
    pub w: usize,
}

impl std::str::FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad size `{s}`, expected HxW"));
        match s.split_once(['x', 'X', '×']) {
            Some((h, w)) => Ok(Size { h: parse(h)?, w: parse(w)? }),
            None => {
                let n = parse(s)?;
                Ok(Size { h: n, w: n })
            }
        }
    }
}

impl std::fmt::Display for Size {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

#[derive(Debug, Parser)]
#[command(name = "m2ae", version, about = "Mask- and motion-aware deblurring inference")]
pub struct Cli {
    /// Single worker thread; reports carry wall_ms = 0 so repeated runs are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Deblur one image.
    Run(RunArgs),
    /// Compare pruned and masked-dense evaluation on random networks.
    EquivCheck(EquivArgs),
    /// Analytic MAC totals without running the network.
    Flops(FlopsArgs),
    /// Median wall time of dense vs pruned evaluation.
    Bench(BenchArgs),
    /// Write a randomly initialized weight file.
    InitWeights(InitArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's mode.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Blur-probability threshold for the hard mask (config `epsilon`).
    #[arg(long)]
    pub threshold: Option<f32>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Seed for Gumbel mask sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `<stage>_mask.png` of every predictor stage.
    #[arg(long)]
    pub mask_dir: Option<PathBuf>,
    /// Directory for raw trajectory fields of every predictor stage.
    #[arg(long)]
    pub field_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EquivArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value = "32x32")]
    pub size: Size,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// A trial passes when every error is strictly below this.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also cost the pruned network with a synthetic mask of this ratio.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "512x512")]
    pub size: Size,
    #[arg(long, default_value_t = 0.1)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random weights from `--seed` when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}
