//! Interaction logs, preprocessing, splits, batching, and synthetic data.

mod cache;
mod dataset;
mod log;
mod noise;
mod synth;

pub use cache::{content_hash, load_if_fresh, read_cache, write_cache, ContentHash, CACHE_VERSION};
pub use dataset::{
    build_target_index, evaluation_examples, five_core_filter, k_core_filter, pad_truncate, split_leave_one_out,
    training_examples, DatasetStats, PaddedBatch, SequenceDataset, Split, SplitDataset, TargetIndex, TrainingExample,
    UserSplit, CORE_THRESHOLD,
};
pub use log::{ingest, ingest_reader, BadLine, IngestOptions, IngestReport, Interaction, InteractionLog, LogFormat};
pub use noise::{inject_noise, inject_noise_seeded};
pub use synth::{item_name, synth_periodic, SynthConfig, SynthData};
