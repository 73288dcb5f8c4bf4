//! Resumable hyperparameter grids.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::mixer::SlideMode;
use crate::pipeline::{eval_run, resolved_model, train_run, PreparedData};
use crate::scalar::Scalar;

/// One grid point. `epsilon` only affects evaluation, so cells differing
/// in it alone share a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub layers: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub mode: SlideMode,
    pub gamma: f64,
    pub epsilon: f64,
}

pub const KEY_COLUMNS: [&str; 7] = ["alpha", "layers", "max_len", "hidden", "mode", "gamma", "epsilon"];

impl SweepCell {
    pub fn key_fields(&self) -> [String; 7] {
        [
            self.alpha.to_string(),
            self.layers.to_string(),
            self.max_len.to_string(),
            self.hidden.to_string(),
            self.mode.number().to_string(),
            self.gamma.to_string(),
            self.epsilon.to_string(),
        ]
    }

    pub fn key(&self) -> String {
        self.key_fields().join(",")
    }

    fn model_key(&self) -> String {
        self.key_fields()[..6].join(",")
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.model.alpha = self.alpha;
        cfg.model.layers = self.layers;
        cfg.model.max_len = self.max_len;
        cfg.model.hidden = self.hidden;
        cfg.model.slide_mode = self.mode;
        cfg.model.gamma = self.gamma;
        cfg.eval.noise_epsilon = self.epsilon;
        cfg.sweep = Default::default();
        cfg
    }
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Cartesian product of every axis in declaration order, `epsilon`
/// varying fastest.
pub fn sweep_cells(base: &RunConfig) -> Vec<SweepCell> {
    let (g, m) = (&base.sweep, &base.model);
    let mut out = Vec::new();
    for alpha in axis(&g.alpha, m.alpha) {
        for layers in axis(&g.layers, m.layers) {
            for max_len in axis(&g.max_len, m.max_len) {
                for hidden in axis(&g.hidden, m.hidden) {
                    for mode in axis(&g.mode, m.slide_mode) {
                        for gamma in axis(&g.gamma, m.gamma) {
                            for epsilon in axis(&g.epsilon, base.eval.noise_epsilon) {
                                out.push(SweepCell { alpha, layers, max_len, hidden, mode, gamma, epsilon });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SweepOptions {
    /// Stop after this many newly completed cells (the rest stay pending).
    pub max_new_cells: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepSummary {
    pub total: usize,
    pub skipped: usize,
    pub completed: usize,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn completed_keys(path: &Path) -> Result<HashSet<String>> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path).map_err(csv_err)?;
    let mut keys = HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        if record.len() >= KEY_COLUMNS.len() {
            keys.insert(record.iter().take(KEY_COLUMNS.len()).collect::<Vec<_>>().join(","));
        }
    }
    Ok(keys)
}

/// Trains and evaluates every pending cell, appending one CSV row per cell
/// as soon as it finishes. Rows already present in `csv_path` are skipped.
pub fn run_sweep<T: Scalar>(base: &RunConfig, data: &PreparedData, csv_path: &Path, options: SweepOptions) -> Result<SweepSummary> {
    let cells = sweep_cells(base);
    let done = completed_keys(csv_path)?;
    let fresh = !csv_path.exists();
    let file = OpenOptions::new().create(true).append(true).open(csv_path)?;
    let mut w = csv::Writer::from_writer(file);
    let mut header_written = !fresh;
    let mut summary = SweepSummary { total: cells.len(), skipped: 0, completed: 0 };
    let mut i = 0;
    while i < cells.len() {
        let model_key = cells[i].model_key();
        let group_end = (i..cells.len()).find(|&j| cells[j].model_key() != model_key).unwrap_or(cells.len());
        let pending: Vec<&SweepCell> = cells[i..group_end].iter().filter(|c| !done.contains(&c.key())).collect();
        summary.skipped += group_end - i - pending.len();
        i = group_end;
        if pending.is_empty() {
            continue;
        }
        if options.max_new_cells.is_some_and(|m| summary.completed >= m) {
            break;
        }
        let cfg = pending[0].apply(base);
        let outcome = train_run::<T>(&cfg, data, None)?;
        let model = resolved_model(&cfg, data);
        for cell in pending {
            if options.max_new_cells.is_some_and(|m| summary.completed >= m) {
                break;
            }
            let cfg = cell.apply(base);
            let report = eval_run(&outcome.best, &model, data, Split::Test, &cfg.eval, &cfg.hash())?;
            if !header_written {
                let mut header: Vec<String> = KEY_COLUMNS.iter().map(|s| s.to_string()).collect();
                header.extend(report.csv_header());
                w.write_record(&header).map_err(csv_err)?;
                header_written = true;
            }
            let mut row: Vec<String> = cell.key_fields().to_vec();
            row.extend(report.csv_row());
            w.write_record(&row).map_err(csv_err)?;
            w.flush()?;
            summary.completed += 1;
            log::info!("sweep cell {} done: {:?}", cell.key(), report.metrics);
        }
    }
    Ok(summary)
}
