//! Seeded mini-batch training with validation-based early stopping.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::data::{PaddedBatch, TargetIndex, TrainingExample};
use crate::encoder::{
    encoder_forward, last_hidden, predict_scores, BoundParams, ForwardCtx, ModelConfig, ModelParams, ITEM_EMBEDDINGS,
};
use crate::error::{bail, Error, Result};
use crate::evaluation::{evaluate, ModelScorer, RankingReport, DEFAULT_KS};
use crate::mixer::RampSchedule;
use crate::objectives::{adam_step, build_views, collect_grads, AdamState, ViewRngs};
use crate::scalar::Scalar;

/// Optimization settings outside the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    /// Validations without NDCG@10 improvement before stopping; 0 never stops.
    pub patience: usize,
    /// Build and log the contrastive term even when it carries zero weight.
    pub log_unused_clreg: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 256, lr: 0.001, eval_every: 1, patience: 10, log_unused_clreg: false }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        Ok(())
    }
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub rec_loss: f64,
    pub clreg_loss: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub valid_ndcg10: Option<f64>,
}

/// Randomness of one training step, each in its own stream.
pub struct StepRngs<'a> {
    pub dropout: &'a mut (dyn RngCore + 'static),
    pub view_a: &'a mut (dyn RngCore + 'static),
    pub view_b: &'a mut (dyn RngCore + 'static),
    pub sampling: &'a mut (dyn RngCore + 'static),
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub rec: crate::autodiff::Var,
    pub clreg: Option<crate::autodiff::Var>,
    pub total: crate::autodiff::Var,
}

/// Records `rec + lambda * clreg` for one batch. The contrastive term is
/// omitted when `lambda` is zero unless `force_clreg` asks for it, in which
/// case it is computed but detached from the total.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    batch: &PaddedBatch,
    anchors: &[usize],
    examples: &[TrainingExample],
    index: &TargetIndex,
    config: &ModelConfig,
    schedule: &RampSchedule<f64>,
    rngs: StepRngs<'_>,
    force_clreg: bool,
) -> Result<LossVars> {
    let mut ctx = ForwardCtx::train(rngs.dropout);
    let h = encoder_forward(g, bound, &batch.items, batch.len(), config, schedule, &mut ctx)?;
    let last = last_hidden(g, h)?;
    let probs = predict_scores(g, bound, last)?;
    let rec = g.rec_loss(probs, &batch.targets, config.rec_loss)?;
    let use_clreg = config.lambda > 0.0 && batch.len() >= 2;
    if !(use_clreg || force_clreg && batch.len() >= 2) {
        return Ok(LossVars { rec, clreg: None, total: rec });
    }
    let views = build_views(
        g,
        bound,
        batch,
        anchors,
        examples,
        index,
        config,
        schedule,
        ViewRngs { unsupervised: rngs.view_a, supervised: rngs.view_b, sampling: rngs.sampling },
    )?;
    let clreg = g.cl_reg(views.h_prime, views.h_s_prime, T::lit(config.temperature))?;
    let total = if use_clreg {
        let weighted = g.scale(clreg, T::lit(config.lambda));
        g.add(rec, weighted)?
    } else {
        rec
    };
    Ok(LossVars { rec, clreg: Some(clreg), total })
}

/// Stable digest of a batch's contents for diagnostics.
pub fn batch_hash(batch: &PaddedBatch) -> String {
    let mut h = Sha256::new();
    for v in batch.items.iter().chain(&batch.targets) {
        h.update((*v as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

const STREAM_SHUFFLE: u64 = 0;
const STREAM_DROPOUT: u64 = 1;
const STREAM_VIEW_A: u64 = 2;
const STREAM_VIEW_B: u64 = 3;
const STREAM_SAMPLING: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Training state: parameters, optimizer moments, and independent random
/// streams for shuffling, dropout, both views, and positive sampling.
pub struct Trainer<T> {
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    pub config: ModelConfig,
    pub settings: TrainSettings,
    pub schedule: RampSchedule<f64>,
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
    view_a: ChaCha8Rng,
    view_b: ChaCha8Rng,
    sampling: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: ModelConfig, settings: TrainSettings) -> Result<Self> {
        settings.validate()?;
        let params = ModelParams::init(&config)?;
        let schedule = config.schedule()?;
        let adam = AdamState::new(&params, settings.lr);
        let seed = config.seed;
        Ok(Self {
            params,
            adam,
            schedule,
            shuffle: stream(seed, STREAM_SHUFFLE),
            dropout: stream(seed, STREAM_DROPOUT),
            view_a: stream(seed, STREAM_VIEW_A),
            view_b: stream(seed, STREAM_VIEW_B),
            sampling: stream(seed, STREAM_SAMPLING),
            config,
            settings,
        })
    }

    /// One optimizer update on `examples[ids]`.
    pub fn step(&mut self, ids: &[usize], examples: &[TrainingExample], index: &TargetIndex) -> Result<StepLog> {
        let batch = PaddedBatch::from_examples(ids.iter().map(|&i| &examples[i]), self.config.max_len)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let rngs = StepRngs {
            dropout: &mut self.dropout,
            view_a: &mut self.view_a,
            view_b: &mut self.view_b,
            sampling: &mut self.sampling,
        };
        let loss = joint_loss(
            &mut g,
            &bound,
            &batch,
            ids,
            examples,
            index,
            &self.config,
            &self.schedule,
            rngs,
            self.settings.log_unused_clreg,
        )?;
        let value = |v| g.real(v).map(|t| t.item().to_f64_lossy());
        let log = StepLog {
            step: self.adam.step + 1,
            rec_loss: value(loss.rec)?,
            clreg_loss: loss.clreg.map(value).transpose()?,
            total: value(loss.total)?,
            lr: self.adam.lr,
            seed: self.config.seed,
        };
        if !log.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {} at step {} (lr {}, batch {})",
                log.total,
                log.step,
                self.adam.lr,
                batch_hash(&batch)
            )));
        }
        g.backward(loss.total)?;
        let mut grads = collect_grads(&g, &self.params, &bound);
        if let Some(items) = grads[ITEM_EMBEDDINGS].as_mut() {
            items[..self.config.hidden].iter_mut().for_each(|x| *x = T::zero());
        }
        adam_step(&mut self.params, &mut grads, &mut self.adam)?;
        Ok(log)
    }

    /// One shuffled pass over `examples`.
    pub fn epoch(
        &mut self,
        examples: &[TrainingExample],
        index: &TargetIndex,
        mut log: Option<&mut dyn Write>,
    ) -> Result<f64> {
        if examples.is_empty() {
            bail!(Data, "no training examples");
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut total = 0.0;
        let mut steps = 0usize;
        for ids in order.chunks(self.settings.batch_size) {
            let record = self.step(ids, examples, index)?;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&record).expect("log serializes"))?;
            }
            total += record.total;
            steps += 1;
        }
        Ok(total / steps as f64)
    }

    pub fn validate(&self, examples: &[TrainingExample], config_hash: &str) -> Result<RankingReport> {
        let mut scorer = ModelScorer::new(&self.params, &self.config)?;
        evaluate(&mut scorer, examples, &DEFAULT_KS, 256, config_hash)
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters at the best validation NDCG@10, or the final ones when
    /// validation is off.
    pub best: ModelParams<T>,
    pub best_epoch: usize,
    pub best_valid: Option<RankingReport>,
    pub final_params: ModelParams<T>,
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
}

/// Runs up to `settings.epochs` epochs, validating on `valid` and stopping
/// after `patience` validations without improvement.
pub fn fit<T: Scalar>(
    config: ModelConfig,
    settings: TrainSettings,
    train: &[TrainingExample],
    index: &TargetIndex,
    valid: &[TrainingExample],
    config_hash: &str,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::<T>::new(config, settings)?;
    let mut best: Option<(f64, usize, ModelParams<T>, RankingReport)> = None;
    let mut since_best = 0usize;
    let mut epochs = Vec::new();
    let s = trainer.settings.clone();
    for epoch in 1..=s.epochs {
        let sink = log.as_mut().map(|w| &mut **w as &mut dyn Write);
        let mean_total = trainer.epoch(train, index, sink)?;
        let mut entry = EpochLog { epoch, mean_total, valid_ndcg10: None };
        if s.eval_every > 0 && epoch % s.eval_every == 0 && !valid.is_empty() {
            let report = trainer.validate(valid, config_hash)?;
            let score = report.ndcg(10).unwrap_or(0.0);
            entry.valid_ndcg10 = Some(score);
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, epoch, trainer.params.clone(), report));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        log::info!("epoch {epoch}: loss {mean_total:.5} valid ndcg@10 {:?}", entry.valid_ndcg10);
        epochs.push(entry);
        if s.patience > 0 && since_best >= s.patience {
            break;
        }
    }
    let last_epoch = epochs.len();
    let final_params = trainer.params;
    let (best_epoch, best_params, best_valid) = match best {
        Some((_, e, p, r)) => (e, p, Some(r)),
        None => (last_epoch, final_params.clone(), None),
    };
    Ok(TrainOutcome { best: best_params, best_epoch, best_valid, final_params, epochs, steps: trainer.adam.step })
}
