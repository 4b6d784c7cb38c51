use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use dbraf_cli::commands::{self, CHECKPOINT_FILE};
use dbraf_cli::RunConfig;

#[derive(Parser)]
#[command(name = "dbraf", version, about = "Multivariate time-series anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training and synthetic-data seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(cfg.with_seed(self.seed))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV files.
    Synth(Common),
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Score the test series with a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Percentage of points to flag.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Train and evaluate every configured ablation row.
    Ablate(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let prov = commands::cmd_synth(&c.load()?, &c.out)?;
            println!(
                "wrote {} ({} anomalies, {:.2}% labelled)",
                c.out.display(),
                prov.anomalies.len(),
                100.0 * prov.labelled_fraction
            );
        }
        Command::Train { common, max_epochs } => {
            let mut cfg = common.load()?;
            if let Some(m) = max_epochs {
                cfg.train.max_epochs = m;
            }
            let s = commands::cmd_train(&cfg, &common.out)?;
            println!(
                "best epoch {} of {} (valid rec {:?}) in {:.1}s -> {}",
                s.best_epoch,
                s.history.len(),
                s.best_valid,
                s.seconds,
                s.checkpoint.display()
            );
        }
        Command::Eval { common, checkpoint, ratio } => {
            let mut cfg = common.load()?;
            if ratio.is_some() {
                cfg.eval.ratio = ratio;
            }
            let ck = checkpoint.unwrap_or_else(|| common.out.join(CHECKPOINT_FILE));
            let s = commands::cmd_eval(&cfg, &ck, &common.out)?;
            let r = &s.report;
            let fmt = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.4}"));
            println!(
                "PA-F1 {:.4}  F1 {:.4}  AUC-ROC {}  AUC-PR {}  ({} plots)",
                r.adjusted.f1,
                r.raw.f1,
                fmt(r.auc_roc),
                fmt(r.auc_pr),
                s.plots.len()
            );
        }
        Command::Ablate(c) => {
            let rows = commands::cmd_ablate(&c.load()?, &c.out)?;
            print!("{}", commands::format_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
