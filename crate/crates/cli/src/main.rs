use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slime4rec::config::{Precision, RunConfig};
use slime4rec::data::Split;
use slime4rec::sweep::SweepOptions;
use slime4rec_cli::{cmd_eval, cmd_prepare, cmd_sweep, cmd_train, cmd_visualize, resolve_data_root, DATA_ROOT_ENV};

#[derive(Parser)]
#[command(name = "slime4rec", version, about = "Frequency-domain sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, filter, and cache a dataset, then print its statistics.
    Prepare(Common),
    /// Train a model and save the best validation checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the validation or test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of the configured grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many new cells; rerun to resume.
        #[arg(long)]
        max_new_cells: Option<usize>,
    },
    /// Export filter amplitudes of a checkpoint.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also print a text heat map.
        #[arg(long)]
        text: bool,
    },
}

/// Flags overriding values from the config file.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Raw interaction log, relative paths resolve against the data root.
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    min_timestamp: Option<i64>,
    #[arg(long)]
    skip_bad: bool,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    noise_epsilon: Option<f64>,
    #[arg(long)]
    f32: bool,
}

impl Common {
    fn resolve(self) -> slime4rec::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(raw) = self.raw {
            cfg.data.raw = Some(raw);
            cfg.data.synth = None;
        }
        resolve_data_root(&mut cfg, self.data_root.as_deref());
        if let Some(t) = self.min_timestamp {
            cfg.data.min_timestamp = Some(t);
        }
        cfg.data.skip_bad |= self.skip_bad;
        if self.cache.is_some() {
            cfg.paths.cache = self.cache;
        }
        if let Some(dir) = self.run_dir {
            cfg.paths.run_dir = dir;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(s) = self.seed {
            cfg.model.seed = s;
        }
        if let Some(l) = self.lambda {
            cfg.model.lambda = l;
        }
        if let Some(a) = self.alpha {
            cfg.model.alpha = a;
        }
        if let Some(e) = self.noise_epsilon {
            cfg.eval.noise_epsilon = e;
        }
        if self.f32 {
            cfg.precision = Precision::F32;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> slime4rec::Result<()> {
    match cli.command {
        Command::Prepare(common) => {
            let data = cmd_prepare(&common.resolve()?)?;
            println!("{}", data.stats);
            if data.cache_hit {
                println!("cache      hit");
            }
        }
        Command::Train(common) => {
            let art = cmd_train(&common.resolve()?)?;
            println!("checkpoint {} (epoch {} of {})", art.checkpoint.display(), art.best_epoch, art.epochs_run);
            println!("log        {}", art.log.display());
            if let Some(r) = art.valid {
                println!("{}", r.to_json());
            }
        }
        Command::Eval { common, checkpoint, split, out } => {
            let report = cmd_eval(&common.resolve()?, &checkpoint, split)?;
            match out {
                Some(path) => std::fs::write(path, report.to_json())?,
                None => println!("{}", report.to_json()),
            }
        }
        Command::Sweep { common, out, max_new_cells } => {
            let s = cmd_sweep(&common.resolve()?, &out, SweepOptions { max_new_cells })?;
            println!("{} cells: {} already done, {} completed now", s.total, s.skipped, s.completed);
        }
        Command::Visualize { checkpoint, out, text } => {
            let amps = cmd_visualize(&checkpoint, &out)?;
            if text {
                print!("{}", amps.render_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
