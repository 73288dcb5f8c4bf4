//! End-to-end glue: dataset preparation, training runs, and evaluation
//! driven by a [`RunConfig`].

use std::io::Write;

use crate::config::{DataConfig, EvalConfig, RunConfig};
use crate::data::{
    build_target_index, content_hash, evaluation_examples, ingest_reader, k_core_filter, load_if_fresh,
    split_leave_one_out, synth_periodic, training_examples, write_cache, DatasetStats, IngestOptions, InteractionLog,
    LogFormat, SequenceDataset, Split, SplitDataset, SynthData,
};
use crate::encoder::{ModelConfig, ModelParams};
use crate::error::{bail, Result};
use crate::evaluation::{evaluate, ModelScorer, RankingReport};
use crate::scalar::Scalar;
use crate::train::{fit, TrainOutcome};

/// Split dataset ready for training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: SplitDataset,
    pub stats: DatasetStats,
    pub cache_hit: bool,
    /// Malformed lines skipped during ingestion.
    pub skipped_lines: usize,
    /// Generator structure when the data is synthetic.
    pub synth: Option<SynthData>,
}

fn raw_and_settings(data: &DataConfig) -> Result<(Vec<u8>, String)> {
    let settings = toml::to_string(data).expect("data config serializes");
    if let Some(synth) = &data.synth {
        return Ok((toml::to_string(synth).expect("synth config serializes").into_bytes(), settings));
    }
    let Some(raw) = &data.raw else { bail!(Config, "no raw interaction file configured") };
    Ok((std::fs::read(raw)?, settings))
}

fn load_log(data: &DataConfig, raw: &[u8], synth: Option<&SynthData>) -> Result<(InteractionLog, usize)> {
    if let Some(generated) = synth {
        let log = match data.min_timestamp {
            Some(min) => generated.log.clone().since(min),
            None => generated.log.clone(),
        };
        return Ok((log, 0));
    }
    let path = data.raw.as_ref().expect("checked by caller");
    let format = match data.format {
        Some(f) => f,
        None => LogFormat::from_path(path)?,
    };
    let report = ingest_reader(raw, format, IngestOptions { skip_bad: data.skip_bad, min_timestamp: data.min_timestamp })?;
    for bad in &report.bad_lines {
        log::warn!("skipped line {}: {}", bad.line, bad.message);
    }
    Ok((report.log, report.bad_lines.len()))
}

/// Loads, filters, and splits the configured data, reusing the cache when
/// its content hash matches.
pub fn prepare(data: &DataConfig, cache: Option<&std::path::Path>) -> Result<PreparedData> {
    let (raw, settings) = raw_and_settings(data)?;
    let hash = content_hash(&raw, &settings);
    let synth = data.synth.as_ref().map(synth_periodic).transpose()?;
    if let Some(path) = cache {
        if let Some(dataset) = load_if_fresh(path, &hash)? {
            let stats = dataset.stats();
            return Ok(PreparedData { split: split_leave_one_out(dataset)?, stats, cache_hit: true, skipped_lines: 0, synth });
        }
    }
    let (log, skipped_lines) = load_log(data, &raw, synth.as_ref())?;
    let filtered = k_core_filter(&log, data.core)?;
    let dataset = SequenceDataset::from_log(&filtered)?;
    if let Some(path) = cache {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_cache(path, &dataset, &hash)?;
    }
    let stats = dataset.stats();
    Ok(PreparedData { split: split_leave_one_out(dataset)?, stats, cache_hit: false, skipped_lines, synth })
}

/// The model configuration with the vocabulary taken from the data.
pub fn resolved_model(config: &RunConfig, data: &PreparedData) -> ModelConfig {
    ModelConfig { vocab_size: data.split.dataset.vocab_size(), ..config.model.clone() }
}

pub fn train_run<T: Scalar>(config: &RunConfig, data: &PreparedData, log: Option<&mut dyn Write>) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let model = resolved_model(config, data);
    let train = training_examples(&data.split, model.max_len);
    let index = build_target_index(&train);
    let valid = evaluation_examples(&data.split, Split::Valid, model.max_len);
    fit(model, config.train.clone(), &train, &index, &valid, &config.hash(), log)
}

pub fn eval_run<T: Scalar>(
    params: &ModelParams<T>,
    model: &ModelConfig,
    data: &PreparedData,
    split: Split,
    eval: &EvalConfig,
    config_hash: &str,
) -> Result<RankingReport> {
    let examples = evaluation_examples(&data.split, split, model.max_len);
    let mut scorer = ModelScorer::new(params, model)?.with_noise(eval.noise_epsilon, eval.noise_seed)?;
    evaluate(&mut scorer, &examples, &eval.ks, eval.batch_size, config_hash)
}
