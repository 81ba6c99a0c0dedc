use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};
use tokenhance::experiment::{self, ExperimentConfig, SweepAxis};
use tokenhance::metrics::DecodeMode;

/// Discrete-token speech enhancement experiments.
#[derive(Debug, Parser)]
#[command(name = "tokenhance", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Overrides the data, codec and training seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train/valid/test splits and their manifests.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured model; writes a checkpoint and a JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the existing checkpoint up to `max_epochs`.
        #[arg(long)]
        resume: bool,
    },
    /// Decode the test split and write report.json / report.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of TF, BS, BSR, NAR.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<DecodeMode>>,
    },
    /// Train and evaluate both model kinds along one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `snr` or `bitrate`.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values, e.g. `-10,-5,0,5`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        values: Vec<f64>,
    },
    /// Enhance every entry of a manifest (the test split by default).
    Enhance {
        #[command(flatten)]
        common: Common,
        /// Input manifest.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn load(common: &Common) -> tokenhance::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.output {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthData { common } => {
            let cfg = load(&common)?;
            let summary = experiment::synth_data(&cfg)?;
            for (path, n) in summary.manifests.iter().zip(&summary.counts) {
                println!("{n:>6} utterances -> {}", path.display());
            }
            println!("sidecar -> {}", summary.sidecar.display());
        }
        Command::Train { common, resume } => {
            let cfg = load(&common)?;
            let out = experiment::train(&cfg, resume, |r| {
                println!(
                    "epoch {:>3} [{:?}] train {:.4} valid {:.4} lr {:.2e}",
                    r.epoch, r.mode, r.train_loss, r.valid_loss, r.lr
                );
            })?;
            println!(
                "{} epochs, best valid {:.4}; checkpoint -> {}",
                out.epochs_done,
                out.best_valid,
                out.checkpoint.display()
            );
        }
        Command::Evaluate { common, modes } => {
            let cfg = load(&common)?;
            let report = experiment::evaluate(&cfg, modes.as_deref())?;
            println!("mode  count  token_acc  seq_acc  dwer    cossim");
            for a in &report.aggregates {
                println!(
                    "{:<5} {:>5}  {:.4}     {:.4}   {:.4}  {:.4}",
                    a.mode.as_str(),
                    a.count,
                    a.token_acc,
                    a.sequence_acc,
                    a.dwer,
                    a.cossim
                );
            }
            println!("report -> {}", cfg.layout().report_json().display());
        }
        Command::Sweep { common, axis, values } => {
            let cfg = load(&common)?;
            let out = experiment::sweep(&cfg, axis, &values, |r| match &r.error {
                None => println!(
                    "{axis} {:>6} {:<3} token_acc {:.4} dwer {:.4}",
                    r.axis_value, r.model_kind, r.token_acc, r.dwer
                ),
                Some(e) => println!("{axis} {:>6} {:<3} failed: {e}", r.axis_value, r.model_kind),
            })?;
            println!("csv -> {}", out.csv.display());
            for c in &out.charts {
                println!("chart -> {}", c.display());
            }
            let failed = out.rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                bail!("{failed} of {} sweep points failed", out.rows.len());
            }
        }
        Command::Enhance { common, input } => {
            let cfg = load(&common)?;
            let out = experiment::enhance(&cfg, input.as_deref())?;
            println!("{} files -> {}", out.written.len(), cfg.layout().enhanced_dir().display());
            for (id, e) in &out.failures {
                eprintln!("{id}: {e}");
            }
            if !out.failures.is_empty() {
                bail!("{} items failed", out.failures.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .downcast_ref::<tokenhance::Error>()
                .is_some_and(tokenhance::Error::is_validation);
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
