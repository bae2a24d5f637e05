//! Command-line entry point.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;
use log::{info, warn};

use crate::config::{parse_config, ScenarioConfig};
use crate::engine::{OverlayKind, SimError};
use crate::metrics::{emit_report, prepare_output, MetricsReport};
use crate::scenario::run_scenario;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tssim", about = "Simulate time-shifted streaming overlays and write CSV reports")]
pub struct Args {
    /// Scenario file (`key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the scenario's `overlay` key.
    #[arg(long)]
    pub overlay: Option<OverlayKind>,
    /// Overrides the scenario's `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the scenario's `horizon` key, in seconds.
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
    /// Runs seeds `seed..seed+N` in parallel, one subdirectory each.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub runs: u32,
    /// Verifies engine and overlay invariants after every chunk.
    #[arg(long)]
    pub check_invariants: bool,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("TSSIM_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn load(args: &Args) -> Result<ScenarioConfig, String> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| format!("{}: {e}", args.config.display()))?;
    let mut cfg = parse_config(&text).map_err(|e| format!("{}:\n{e}", args.config.display()))?;
    if let Some(k) = args.overlay {
        cfg.overlay = k;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(h) = args.horizon {
        if !(h > 0.0) {
            return Err(format!("--horizon must be positive, got {h}"));
        }
        cfg.horizon = h;
    }
    Ok(cfg)
}

fn run_one(cfg: &ScenarioConfig, seed: u64, out: &Path, check: bool) -> Result<MetricsReport, (i32, String)> {
    prepare_output(out).map_err(|e| (EXIT_CONFIG, format!("{}: {e}", out.display())))?;
    info!("running {} overlay, seed {seed}, horizon {}s", cfg.overlay, cfg.horizon);
    let report = run_scenario(cfg, cfg.overlay, seed, check).map_err(|e| match e {
        SimError::Config(_) => (EXIT_CONFIG, e.to_string()),
        SimError::Invariant { .. } => (EXIT_INVARIANT, e.to_string()),
    })?;
    report.check().map_err(|m| (EXIT_INVARIANT, format!("report: {m}")))?;
    if cfg.overlay == OverlayKind::Mesh && report.domination_violation_rate() > cfg.domination_threshold {
        warn!(
            "seed {seed}: domination violation rate {:.4} above threshold {}",
            report.domination_violation_rate(),
            cfg.domination_threshold
        );
    }
    emit_report(&report, out).map_err(|e| (EXIT_CONFIG, format!("{}: {e}", out.display())))?;
    Ok(report)
}

/// Parses `args` (program name first), runs, and returns the exit code.
/// Diagnostics go to `err`.
pub fn run_cli<I, T>(args: I, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let cfg = match load(&args) {
        Ok(c) => c,
        Err(m) => {
            let _ = writeln!(err, "error: {m}");
            return EXIT_CONFIG;
        }
    };
    let result = if args.runs == 1 {
        run_one(&cfg, cfg.seed, &args.out, args.check_invariants).map(|_| ())
    } else {
        let seeds: Vec<u64> = (0..args.runs as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    let out = args.out.join(format!("seed-{seed}"));
                    let cfg = &cfg;
                    s.spawn(move || run_one(cfg, seed, &out, args.check_invariants))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
        });
        let mut worst = EXIT_OK;
        for (seed, r) in seeds.iter().zip(results) {
            if let Err((code, m)) = r {
                let _ = writeln!(err, "seed {seed}: {m}");
                worst = worst.max(code);
            }
        }
        if worst == EXIT_OK {
            Ok(())
        } else {
            Err((worst, String::new()))
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err((code, m)) => {
            if !m.is_empty() {
                let _ = writeln!(err, "error: {m}");
            }
            code
        }
    }
}
