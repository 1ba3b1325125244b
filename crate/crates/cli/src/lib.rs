//! Command implementations behind the `m2ae` binary.
//!
//! Exit codes: 0 success, 1 I/O or file-format error, 2 shape, config or
//! argument error, 3 equivalence tolerance exceeded.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use m2ae_core::image::{export_field, load_image, save_image, save_mask_png};
use m2ae_core::motion::interpolate;
use m2ae_core::network::{
    analytic_ledger, init_weights, padded_dims, synthetic_masks, ForwardOptions, Mode, Network, NetworkConfig,
};
use m2ae_core::weights::{load_weights, save_weights};
use m2ae_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod args;
pub mod equiv;
pub mod report;

use args::{BenchArgs, Cli, Command, EquivArgs, FlopsArgs, InitArgs, RunArgs};
use report::{median, to_json, write_json, BenchReport, FlopsCase, FlopsReport, RunReport};

pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TOLERANCE: i32 = 3;

/// Caps worker threads when `--deterministic` is not given.
pub const THREADS_ENV: &str = "M2AE_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("{0}")]
    Usage(String),

    #[error("trial {trial} (seed {seed}) exceeds tolerance {tolerance:e}: {detail}")]
    Tolerance { trial: usize, seed: u64, tolerance: f64, detail: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_io() => EXIT_IO,
            CliError::Core(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Tolerance { .. } => EXIT_TOLERANCE,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parse, run, and map the outcome to an exit code, printing diagnostics
/// to stderr.
pub fn main_with(cli: Cli) -> i32 {
    let threads = if cli.deterministic {
        Ok(1)
    } else {
        match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
            Err(_) => Ok(0),
        }
    };
    let res = threads.and_then(|n| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
        pool.install(|| dispatch(&cli))
    });
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("m2ae: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Run(a) => cmd_run(a, cli.deterministic),
        Command::EquivCheck(a) => cmd_equiv_check(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Bench(a) => cmd_bench(a),
        Command::InitWeights(a) => cmd_init_weights(a),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<NetworkConfig> {
    Ok(match path {
        Some(p) => NetworkConfig::load(p)?,
        None => NetworkConfig::default(),
    })
}

/// Print a line to stdout; a closed pipe is not an error.
fn emit(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn cmd_run(a: &RunArgs, deterministic: bool) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(t) = a.threshold {
        cfg.epsilon = t;
    }
    cfg.validate()?;
    let store = load_weights(&a.weights)?;
    let net = Network::from_store(&store, &cfg)?;
    let img = load_image(&a.image)?;

    let t = Instant::now();
    let out = net.forward_with(&img, &ForwardOptions { seed: a.seed, ..Default::default() })?;
    let wall_ms = if deterministic { 0.0 } else { elapsed_ms(t) };

    let mut fields = Vec::new();
    if a.field_dir.is_some() {
        for s in out.stages.iter().filter(|s| s.produced) {
            fields.push((s.stage, interpolate(&s.displacements, cfg.n2, cfg.trajectory_mode)?));
        }
    }
    save_image(&out.image, &a.out)?;
    if let Some(dir) = &a.mask_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        for s in out.stages.iter().filter(|s| s.produced) {
            save_mask_png(&s.mask.hard, dir.join(format!("{}_mask.png", s.stage)))?;
        }
    }
    if let Some(dir) = &a.field_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        for (stage, traj) in &fields {
            export_field(&traj.offsets, "steps×H×W×(dx,dy)", dir.join(format!("{stage}_trajectory.f32")))?;
        }
    }
    let report = RunReport::new(cfg.mode, &out, wall_ms);
    match &a.report {
        Some(p) => write_json(&report, p)?,
        None => emit(&format!(
            "{}: {} mode, {} of {} MACs ({:.4}), {:.1} ms",
            a.out.display(),
            cfg.mode,
            report.flops.actual,
            report.flops.dense,
            report.flops.ratio,
            wall_ms
        )),
    }
    Ok(())
}

/// Outcome of an equivalence run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EquivSummary {
    pub trials: usize,
    pub worst: equiv::TrialError,
}

pub fn equiv_check(cfg: &NetworkConfig, a: &EquivArgs) -> CliResult<EquivSummary> {
    cfg.check_dims(a.size.h, a.size.w)?;
    if !(a.tolerance >= 0.0) {
        return Err(CliError::Usage(format!("tolerance must be non-negative, got {}", a.tolerance)));
    }
    let mut worst = equiv::TrialError::default();
    for k in 0..a.trials {
        let seed = equiv::trial_seed(a.seed, k);
        let e = equiv::run_trial(cfg, a.size.h, a.size.w, seed)?;
        worst = worst.max(e);
        // Strict: an error equal to the tolerance fails, so a zero
        // tolerance always fails.
        if !((e.output_abs as f64) < a.tolerance && (e.block_rel as f64) < a.tolerance) {
            return Err(CliError::Tolerance {
                trial: k,
                seed,
                tolerance: a.tolerance,
                detail: format!("output abs error {:e}, block relative error {:e}", e.output_abs, e.block_rel),
            });
        }
    }
    Ok(EquivSummary { trials: a.trials, worst })
}

pub fn cmd_equiv_check(a: &EquivArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    if a.trials == 0 {
        eprintln!("m2ae: warning: --trials 0 checks nothing");
    }
    let s = equiv_check(&cfg, a)?;
    emit(&format!(
        "{} trials at {}: max output abs error {:e}, max block relative error {:e} (tolerance {:e})",
        s.trials, a.size, s.worst.output_abs, s.worst.block_rel, a.tolerance
    ));
    Ok(())
}

pub fn flops(cfg: &NetworkConfig, height: usize, width: usize, mask_ratio: Option<f64>) -> CliResult<FlopsReport> {
    if height == 0 || width == 0 {
        return Err(CliError::Usage(format!("image dims must be positive, got {height}×{width}")));
    }
    let (ph, pw) = padded_dims(height, width);
    let dense = analytic_ledger(cfg, ph, pw, Mode::Dense, &BTreeMap::new())?;
    let pruned = match mask_ratio {
        Some(r) => {
            let masks = synthetic_masks(ph, pw, r)?;
            Some(FlopsCase::new(Mode::Pruned, Some(r), &analytic_ledger(cfg, ph, pw, Mode::Pruned, &masks)?))
        }
        None => None,
    };
    Ok(FlopsReport {
        height,
        width,
        padded: [ph, pw],
        dense_tmacs: dense.total_dense() as f64 / 1e12,
        dense: FlopsCase::new(Mode::Dense, None, &dense),
        pruned,
    })
}

pub fn cmd_flops(a: &FlopsArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    emit(&to_json(&flops(&cfg, a.height, a.width, a.mask_ratio)?));
    Ok(())
}

/// Median wall times of dense and pruned passes over one random image, with
/// a synthetic mask of `mask_ratio` at every stage. Runs alternate modes.
pub fn bench(net: &Network, h: usize, w: usize, mask_ratio: f64, repeat: usize, seed: u64) -> CliResult<BenchReport> {
    if repeat == 0 {
        return Err(CliError::Usage("--repeat must be at least 1".into()));
    }
    net.config().check_dims(h, w)?;
    let masks = synthetic_masks(h, w, mask_ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Tensor::from_fn([3, h, w], |_| rng.gen_range(0.0..1.0));
    let mut times: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for _ in 0..repeat {
        for (k, mode) in [Mode::Dense, Mode::Pruned].into_iter().enumerate() {
            let opts = ForwardOptions { mode: Some(mode), seed, mask_override: masks.clone(), trace_blocks: false };
            let t = Instant::now();
            net.forward_with(&img, &opts)?;
            times[k].push(elapsed_ms(t));
        }
    }
    let [dense_ms, pruned_ms] = times;
    let (dm, pm) = (median(&dense_ms), median(&pruned_ms));
    Ok(BenchReport {
        size: [h, w],
        mask_ratio,
        repeat,
        dense_ms,
        pruned_ms,
        dense_median_ms: dm,
        pruned_median_ms: pm,
        speedup: if pm > 0.0 { dm / pm } else { 0.0 },
    })
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let store = match &a.weights {
        Some(p) => load_weights(p)?,
        None => init_weights(&cfg, a.seed),
    };
    let net = Network::from_store(&store, &cfg)?;
    let r = bench(&net, a.size.h, a.size.w, a.mask_ratio, a.repeat, a.seed)?;
    if let Some(p) = &a.report {
        write_json(&r, p)?;
    }
    emit(&to_json(&r));
    Ok(())
}

pub fn cmd_init_weights(a: &InitArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let store = init_weights(&cfg, a.seed);
    save_weights(&store, &a.out)?;
    emit(&format!("{}: {} tensors", a.out.display(), store.len()));
    Ok(())
}
