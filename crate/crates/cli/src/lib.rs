//! Command-line driver: configuration, dataset ingestion and the `train`,
//! `verify`, `bench` and `inspect` subcommands.
//!
//! Exit codes: 0 success, 1 a verified property failed, 2 usage,
//! configuration or runtime error.

pub mod bench;
pub mod config;
pub mod error;
pub mod idx;
pub mod inspect;
pub mod runner;
pub mod verify;
pub mod workload;

use crate::config::{load_config, to_text, RunConfig};
use crate::error::CliError;
use clap::{Args, Parser, Subcommand};
use revsnn_core::models::Family;
use revsnn_core::{Engine, Fault};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROPERTY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "revsnn", version, about = "Reversible spiking neural network trainer")]
pub struct Cli {
    /// Output directory; overrides `run.output_dir`.
    #[arg(long, global = true, env = "REVSNN_OUT_DIR")]
    pub out_dir: Option<PathBuf>,

    /// Worker threads for data-parallel kernels and bench sweeps.
    #[arg(long, global = true, env = "REVSNN_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration file; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured model and write per-epoch metrics.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides `run.engine`.
        #[arg(long, value_parser = parse_engine)]
        engine: Option<Engine>,
        /// Overrides `run.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the invariant suite and write a JSON report.
    Verify {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides `verify.fault`: none, skip_reset or corrupt_stats.
        #[arg(long, value_parser = parse_fault)]
        fault: Option<FaultArg>,
        /// Run only these properties (comma separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Sweep depth, time steps and width for both engines and write CSV.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Print a model summary.
    Inspect {
        #[command(flatten)]
        config: ConfigArg,
        /// A published architecture instead of the configured model.
        #[arg(long)]
        preset: Option<String>,
        /// Summarize the single-stream counterpart of the configured model.
        #[arg(long)]
        counterpart: bool,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct FaultArg(pub Option<Fault>);

fn parse_engine(s: &str) -> Result<Engine, String> {
    Engine::parse(s).ok_or_else(|| format!("unknown engine `{s}` (oracle, reversible)"))
}

fn parse_fault(s: &str) -> Result<FaultArg, String> {
    if s == "none" {
        return Ok(FaultArg(None));
    }
    Fault::parse(s)
        .map(|f| FaultArg(Some(f)))
        .ok_or_else(|| format!("unknown fault `{s}` (none, skip_reset, corrupt_stats)"))
}

fn config_from(arg: &ConfigArg, out_dir: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    let mut cfg = match &arg.config {
        Some(p) => load_config(p)?,
        None => RunConfig::with_family(Family::Resnet),
    };
    if let Some(d) = out_dir {
        cfg.run.output_dir = d.clone();
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Human-readable output goes to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = write!(out, "{e}");
            return code;
        }
    };
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            EXIT_USAGE
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    match &cli.command {
        Command::Train { config, engine, epochs } => {
            let mut cfg = config_from(config, &cli.out_dir)?;
            if let Some(e) = engine {
                cfg.run.engine = *e;
            }
            if let Some(n) = epochs {
                cfg.run.epochs = *n;
            }
            train(&cfg, out)
        }
        Command::Verify { config, fault, only } => {
            let mut cfg = config_from(config, &cli.out_dir)?;
            if let Some(f) = fault {
                cfg.verify.fault = f.0;
            }
            for name in only {
                if !verify::PROPERTIES.contains(&name.as_str()) {
                    return Err(CliError::Config {
                        line: 0,
                        key: "only".into(),
                        message: format!("unknown property `{name}`"),
                    });
                }
            }
            verify_cmd(&cfg, only, out)
        }
        Command::Bench { config } => bench_cmd(&config_from(config, &cli.out_dir)?, out),
        Command::Inspect {
            config,
            preset,
            counterpart,
            json,
        } => {
            let cfg = config_from(config, &cli.out_dir)?;
            inspect_cmd(&cfg, preset.as_deref(), *counterpart, *json, out)
        }
    }
}

fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32, CliError> {
    let dir = &cfg.run.output_dir;
    ensure_dir(dir)?;
    write_file(&dir.join("config.txt"), &to_text(cfg))?;
    let (train, test) = runner::load_datasets(cfg, cfg.run.seed, cfg.run.precision)?;
    let metrics_path = dir.join("train_metrics.jsonl");
    let mut lines = String::new();
    let mut log = |rec: &runner::EpochRecord| {
        let _ = writeln!(
            out,
            "epoch {:>3}  loss {:.4}  acc {:.3}  test acc {:.3}  peak/img {:.0} B  ops {}",
            rec.train.epoch, rec.train.loss, rec.train.accuracy, rec.test_accuracy, rec.train.peak_mem_per_image, rec.train.op_count
        );
        lines.push_str(&serde_json::to_string(rec).unwrap_or_default());
        lines.push('\n');
    };
    let (outcome, mut net) = runner::train_run(cfg, cfg.model.variant, cfg.run.seed, cfg.run.epochs, &train, &test, &mut log)?;
    write_file(&metrics_path, &lines)?;
    write_file(&dir.join("train_summary.json"), &serde_json::to_string_pretty(&outcome)?)?;
    let params: Vec<Vec<f64>> = net.values().into_iter().map(|t| t.into_data()).collect();
    write_file(&dir.join("params.json"), &serde_json::to_string(&params)?)?;
    let _ = writeln!(
        out,
        "{}: {} parameters, final test accuracy {:.3}; outputs in {}",
        outcome.model,
        outcome.params,
        outcome.final_eval.accuracy,
        dir.display()
    );
    Ok(EXIT_OK)
}

fn verify_cmd(cfg: &RunConfig, only: &[String], out: &mut dyn Write) -> Result<i32, CliError> {
    let report = if only.is_empty() {
        verify::run_verify(cfg)
    } else {
        let names: Vec<&str> = only.iter().map(String::as_str).collect();
        verify::run_selected(cfg, &names)
    };
    for p in &report.properties {
        let _ = writeln!(
            out,
            "{} {:<28} [{}] {:.0} ms{}",
            if p.passed { "PASS" } else { "FAIL" },
            p.name,
            if p.kind == verify::CheckKind::Exact { "exact" } else { "qualitative" },
            p.wall_ms,
            if p.detail.is_empty() { String::new() } else { format!("  {}", p.detail) }
        );
    }
    let dir = &cfg.run.output_dir;
    ensure_dir(dir)?;
    let path = dir.join("verify_report.json");
    write_file(&path, &serde_json::to_string_pretty(&report)?)?;
    let _ = writeln!(out, "report: {}", path.display());
    Ok(if report.passed { EXIT_OK } else { EXIT_PROPERTY_FAILED })
}

fn bench_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32, CliError> {
    let rows = bench::run_sweeps(&cfg.bench, cfg.run.seed, cfg.run.precision)?;
    let summary = bench::summarize(&rows, &cfg.bench);
    let dir = &cfg.run.output_dir;
    ensure_dir(dir)?;
    bench::write_csv(&rows, &dir.join("bench.csv"))?;
    write_file(&dir.join("bench_summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    for f in &summary.fits {
        let _ = writeln!(
            out,
            "{:<7} {:<5} {:<10} slope {:>12.1} B/img per unit  R2 {:.4}  max/min {:.3}",
            f.family.name(),
            f.sweep,
            f.mode.name(),
            f.slope,
            f.r2,
            f.max_over_min
        );
    }
    for c in &summary.checks {
        let _ = writeln!(out, "{} {:<32} {:.4} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.measured, c.bound);
    }
    let _ = writeln!(out, "{} rows written to {}", rows.len(), dir.join("bench.csv").display());
    Ok(EXIT_OK)
}

fn inspect_cmd(cfg: &RunConfig, preset: Option<&str>, counterpart: bool, json: bool, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut net = match preset {
        Some(name) => inspect::build_preset(name, 100).ok_or_else(|| CliError::Config {
            line: 0,
            key: "preset".into(),
            message: format!("unknown preset `{name}` (one of {})", inspect::PRESETS.join(", ")),
        })??,
        None => {
            let (train, _) = runner::load_datasets(cfg, cfg.run.seed, cfg.run.precision)?;
            let variant = if counterpart { config::Variant::Vanilla } else { cfg.model.variant };
            runner::build_network(cfg, variant, train.image_shape(), train.num_classes, cfg.run.seed, cfg.run.precision)?
        }
    };
    let summary = inspect::summarize(&mut net)?;
    let text = if json {
        serde_json::to_string_pretty(&summary)? + "\n"
    } else {
        inspect::render(&summary)
    };
    let _ = out.write_all(text.as_bytes());
    Ok(EXIT_OK)
}
