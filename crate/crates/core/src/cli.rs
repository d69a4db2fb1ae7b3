//! Command-line surface. Exit codes: 0 success, 1 invalid input, 2 runtime
//! failure. Errors are reported as one JSON object per line on stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::accounting::CostLedger;
use crate::error::Result;
use crate::fed::{
    pruning_rows, read_metrics, run_experiment, run_pruning_phase, CsvMetricsWriter, MetricsSink, Phase,
    Trainer,
};
use crate::io::{load_dataset, Checkpoint, ExperimentConfig};
use crate::prune::{Mask, PruneMode};
use crate::verify::quick_suite;

#[derive(Debug, Parser)]
#[command(name = "zoprune", version, about = "Federated foresight pruning with backprop-free training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the pruning phase and write the mask.
    Prune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Mask file to write.
        #[arg(long)]
        out: PathBuf,
        /// Optional metrics CSV of the pruning rounds.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Prune (or load a mask), then train with seed-trick rounds.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Start from this mask instead of pruning.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "metrics.csv")]
        metrics: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
    },
    /// Reference runs: backprop FedAvg, or dense backprop-free training.
    Baseline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "fedavg")]
        kind: BaselineKind,
        #[arg(long, default_value = "metrics.csv")]
        metrics: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
    },
    /// Run the built-in oracle checks.
    Verify,
    /// Summarize metrics files.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    DataFree,
    RealData,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineKind {
    /// Backprop local SGD and model averaging, on the pruned mask.
    Fedavg,
    /// Zeroth-order training of the dense model, no pruning.
    Vanilla,
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_like(
    cfg: &ExperimentConfig,
    mask_path: Option<&Path>,
    trainer: Trainer,
    metrics: &Path,
    checkpoint: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let data = load_dataset(cfg)?;
    let arch = cfg.architecture()?;
    let mask = mask_path.map(|p| Mask::load(&arch, p)).transpose()?;
    let mut writer = CsvMetricsWriter::create(metrics)?;
    let outcome = run_experiment(cfg, &data, mask, trainer, &mut writer)?;
    writer.finish()?;
    Checkpoint {
        params: outcome.state.params.clone(),
        mask: outcome.state.mask.clone(),
    }
    .save(&arch, checkpoint)?;
    let last_acc = outcome.metrics.iter().rev().find_map(|r| r.accuracy);
    let _ = writeln!(
        out,
        "{} rounds, final accuracy {}, device flops {:.3e}, up {} bits, down {} bits",
        outcome.metrics.len(),
        last_acc.map_or("n/a".into(), |a| format!("{a:.4}")),
        outcome.ledger.flops,
        outcome.ledger.up_bits,
        outcome.ledger.down_bits
    );
    Ok(())
}

fn report(files: &[PathBuf], out: &mut dyn Write) -> Result<()> {
    let _ = writeln!(out, "file,rounds,prune_rounds,final_accuracy,best_accuracy,flops,up_bits,down_bits,peak_mem_model_bytes");
    for f in files {
        let rows = read_metrics(f)?;
        let ledger = CostLedger::replay_csv(f, None)?;
        let accs: Vec<f64> = rows.iter().filter_map(|r| r.accuracy).collect();
        let fmt = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            f.display(),
            rows.len(),
            rows.iter().filter(|r| r.phase == Phase::Prune).count(),
            fmt(accs.last().copied()),
            fmt(accs.iter().copied().reduce(f64::max)),
            ledger.flops,
            ledger.up_bits,
            ledger.down_bits,
            ledger.peak_mem_bytes
        );
    }
    Ok(())
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<bool> {
    match cli.command {
        Command::Prune {
            config,
            mode,
            out: mask_path,
            metrics,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = mode {
                cfg.prune_mode = match m {
                    ModeArg::DataFree => PruneMode::DataFree,
                    ModeArg::RealData => PruneMode::RealData,
                };
            }
            let data = load_dataset(&cfg)?;
            let arch = cfg.architecture()?;
            let (mask, log) = run_pruning_phase(&cfg, &data)?;
            mask.save(&arch, &mask_path)?;
            if let Some(path) = metrics {
                let mut w = CsvMetricsWriter::create(&path)?;
                for row in pruning_rows(&cfg, &arch, &log) {
                    w.record(&row)?;
                }
                w.finish()?;
            }
            let _ = writeln!(
                out,
                "{} pruning rounds, prunable density {:.4}, {} of {} weights kept",
                log.len(),
                mask.prunable_density(&arch),
                mask.count_ones(),
                mask.len()
            );
            Ok(true)
        }
        Command::Train {
            config,
            mask,
            metrics,
            checkpoint,
        } => {
            let cfg = load_config(&config)?;
            train_like(&cfg, mask.as_deref(), Trainer::ZerothOrder, &metrics, &checkpoint, out)?;
            Ok(true)
        }
        Command::Baseline {
            config,
            kind,
            metrics,
            checkpoint,
        } => {
            let mut cfg = load_config(&config)?;
            let trainer = match kind {
                BaselineKind::Fedavg => Trainer::FedAvg,
                BaselineKind::Vanilla => {
                    cfg.density = 1.0;
                    cfg.prune_rounds = 0;
                    Trainer::ZerothOrder
                }
            };
            train_like(&cfg, None, trainer, &metrics, &checkpoint, out)?;
            Ok(true)
        }
        Command::Verify => {
            let checks = quick_suite();
            for c in &checks {
                let _ = writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
        Command::Report { files } => {
            report(&files, out)?;
            Ok(true)
        }
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

/// Runs the CLI on `argv`, writing normal output to `out` and error lines to
/// `err`, and returns the exit code.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let _ = writeln!(err, "{}", error_line("usage", e.to_string().trim()));
            return 1;
        }
    };
    match dispatch(cli, out) {
        Ok(true) => 0,
        Ok(false) => {
            let _ = writeln!(err, "{}", error_line("verify", "one or more checks failed"));
            2
        }
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(e.kind(), &e.to_string()));
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// [`run_with`] on the process's standard streams.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}
