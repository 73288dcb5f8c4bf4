//! Command implementations behind the `slime4rec` binary.
//!
//! Every command takes a fully resolved [`RunConfig`]; flag handling lives
//! in `main.rs` so the commands can be driven directly from tests.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use slime4rec::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use slime4rec::config::{Precision, RunConfig};
use slime4rec::data::Split;
use slime4rec::evaluation::RankingReport;
use slime4rec::mixer::{filter_amplitude, FilterAmplitudes};
use slime4rec::pipeline::{eval_run, prepare, resolved_model, train_run, PreparedData};
use slime4rec::sweep::{run_sweep, SweepOptions, SweepSummary};
use slime4rec::{Result, Scalar};

/// Environment variable naming the directory relative data paths resolve against.
pub const DATA_ROOT_ENV: &str = "SLIME4REC_DATA_ROOT";

pub const CHECKPOINT_FILE: &str = "checkpoint.s4r";
pub const TRAIN_LOG_FILE: &str = "train.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const CACHE_FILE: &str = "dataset.s4rdata";

/// Joins a relative raw path onto `data_root`.
pub fn resolve_data_root(config: &mut RunConfig, data_root: Option<&Path>) {
    if let (Some(root), Some(raw)) = (data_root, config.data.raw.as_ref()) {
        if raw.is_relative() {
            config.data.raw = Some(root.join(raw));
        }
    }
}

/// The dataset cache, defaulting to a file inside the run directory.
pub fn cache_path(config: &RunConfig) -> PathBuf {
    config.paths.cache.clone().unwrap_or_else(|| config.paths.run_dir.join(CACHE_FILE))
}

pub fn cmd_prepare(config: &RunConfig) -> Result<PreparedData> {
    config.validate()?;
    let data = prepare(&config.data, Some(&cache_path(config)))?;
    if data.cache_hit {
        log::info!("dataset cache hit");
    }
    Ok(data)
}

/// Paths written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub valid: Option<RankingReport>,
}

fn train_typed<T: Scalar>(config: &RunConfig, data: &PreparedData) -> Result<TrainArtifacts> {
    let dir = &config.paths.run_dir;
    std::fs::create_dir_all(dir)?;
    config.save(&dir.join(CONFIG_FILE))?;
    let log_path = dir.join(TRAIN_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path)?);
    let outcome = train_run::<T>(config, data, Some(&mut log))?;
    log.flush()?;
    let meta = CheckpointMeta {
        model: resolved_model(config, data),
        config_hash: config.hash(),
        epoch: outcome.best_epoch,
        step: outcome.steps,
    };
    let checkpoint = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &Checkpoint { meta, params: outcome.best })?;
    if let Some(report) = &outcome.best_valid {
        std::fs::write(dir.join("valid_report.json"), report.to_json())?;
    }
    Ok(TrainArtifacts {
        checkpoint,
        log: log_path,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs.len(),
        valid: outcome.best_valid,
    })
}

/// Trains on the prepared data and keeps the best validation checkpoint.
pub fn cmd_train(config: &RunConfig) -> Result<TrainArtifacts> {
    let data = cmd_prepare(config)?;
    match config.precision {
        Precision::F32 => train_typed::<f32>(config, &data),
        Precision::F64 => train_typed::<f64>(config, &data),
    }
}

fn eval_typed<T: Scalar>(config: &RunConfig, data: &PreparedData, checkpoint: &Path, split: Split) -> Result<RankingReport> {
    let ckpt = load_checkpoint::<T>(checkpoint)?;
    if ckpt.meta.config_hash != config.hash() {
        log::info!("checkpoint was trained under config {}, evaluating under {}", ckpt.meta.config_hash, config.hash());
    }
    eval_run(&ckpt.params, &ckpt.meta.model, data, split, &config.eval, &config.hash())
}

pub fn cmd_eval(config: &RunConfig, checkpoint: &Path, split: Split) -> Result<RankingReport> {
    let data = cmd_prepare(config)?;
    match config.precision {
        Precision::F32 => eval_typed::<f32>(config, &data, checkpoint, split),
        Precision::F64 => eval_typed::<f64>(config, &data, checkpoint, split),
    }
}

/// Runs the configured grid, appending to `out` and skipping finished cells.
pub fn cmd_sweep(config: &RunConfig, out: &Path, options: SweepOptions) -> Result<SweepSummary> {
    let data = cmd_prepare(config)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    match config.precision {
        Precision::F32 => run_sweep::<f32>(config, &data, out, options),
        Precision::F64 => run_sweep::<f64>(config, &data, out, options),
    }
}

/// Sidecar holding the config hash for outputs whose schema is fixed.
pub fn provenance_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".hash");
    out.with_file_name(name)
}

/// Exports `|W|` per layer, bin, and filter kind as CSV.
pub fn cmd_visualize(checkpoint: &Path, out: &Path) -> Result<FilterAmplitudes> {
    let ckpt = load_checkpoint::<f64>(checkpoint)?;
    let schedule = ckpt.meta.model.schedule()?;
    let amps = filter_amplitude(&ckpt.params.all_filters()?, &schedule)?;
    let mut w = BufWriter::new(File::create(out)?);
    amps.write_csv(&mut w)?;
    w.flush()?;
    std::fs::write(provenance_path(out), format!("{}\n", ckpt.meta.config_hash))?;
    Ok(amps)
}
