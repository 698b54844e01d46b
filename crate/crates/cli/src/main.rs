use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bvad_cli::commands::{
    cmd_eval, cmd_score, cmd_sweep_beta, cmd_synth, cmd_train, cmd_visualize,
};
use bvad_cli::{output_root, to_exit, ExperimentConfig};
use bvad_core::{ModelKind, ScoreKind};
use clap::{Args, Parser, Subcommand};

/// Train, score and evaluate autoencoder-based visual anomaly detectors.
///
/// Exit codes: 0 success, 1 other error, 2 invalid configuration,
/// 3 training aborted, 4 checkpoint version mismatch, 5 mismatched test sets.
#[derive(Parser)]
#[command(name = "bvad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output root. Falls back to $BVAD_OUT, then `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of independent runs override.
    #[arg(long)]
    runs: Option<usize>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load_or_default(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.runs {
            cfg.runs = r;
        }
        Ok(cfg)
    }

    fn root(&self, cfg: &ExperimentConfig) -> PathBuf {
        output_root(self.out.as_deref(), &cfg.output_dir)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per run and save checkpoints and logs.
    Train(#[command(flatten)] Common),
    /// Score the test split with a trained checkpoint (or a train run directory).
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score kinds; defaults to all that apply to the model.
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<ScoreKind>>,
    },
    /// Aggregate score files into the method × score report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Score CSVs or directories containing them.
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        /// Method for score files without a metadata sidecar.
        #[arg(long)]
        method: Option<ModelKind>,
    },
    /// Embed test latents with t-SNE and render reconstructions.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the synthetic fixture as an image directory tree.
    Synth(#[command(flatten)] Common),
    /// Train and evaluate a β-VAE for each β value.
    SweepBeta {
        #[command(flatten)]
        common: Common,
        /// β values; defaults to `sweep_betas` from the config.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load()?;
            let out = cmd_train(&cfg, &c.root(&cfg))?;
            println!("{}", out.run_dir.display());
        }
        Command::Score {
            common,
            checkpoint,
            kinds,
        } => {
            let cfg = common.load()?;
            let out = cmd_score(&cfg, &checkpoint, kinds.as_deref(), &common.root(&cfg))?;
            println!("{}", out.run_dir.display());
        }
        Command::Eval {
            common,
            scores,
            method,
        } => {
            let cfg = common.load()?;
            let out = cmd_eval(&scores, method, &common.root(&cfg))?;
            println!("{}", out.run_dir.display());
        }
        Command::Visualize { common, checkpoint } => {
            let cfg = common.load()?;
            cmd_visualize(&cfg, &checkpoint, &common.root(&cfg))?;
        }
        Command::Synth(c) => {
            let cfg = c.load()?;
            let target = match &c.out {
                Some(dir) => dir.clone(),
                None => bvad_cli::create_run_dir(&output_root(None, &cfg.output_dir), "synth")?,
            };
            cmd_synth(&cfg, Path::new(&target))?;
        }
        Command::SweepBeta { common, betas } => {
            let mut cfg = common.load()?;
            if let Some(b) = betas {
                cfg.sweep_betas = b;
            }
            let out = cmd_sweep_beta(&cfg, &common.root(&cfg))?;
            println!("{}", out.run_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            to_exit(&e)
        }
    }
}
