use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::log::InteractionLog;
use crate::error::{bail, Result};

/// Interactions a user or item needs to survive [`five_core_filter`].
pub const CORE_THRESHOLD: usize = 5;

/// Iteratively removes users and items with fewer than `k` interactions
/// until neither constraint removes anything.
pub fn k_core_filter(log: &InteractionLog, k: usize) -> Result<InteractionLog> {
    let mut keep = vec![true; log.records.len()];
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (r, _) in log.records.iter().zip(&keep).filter(|(_, k)| **k) {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let mut changed = false;
        for (r, kept) in log.records.iter().zip(keep.iter_mut()) {
            if *kept && (users[r.user.as_str()] < k || items[r.item.as_str()] < k) {
                *kept = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let records: Vec<_> = log.records.iter().zip(&keep).filter(|(_, k)| **k).map(|(r, _)| r.clone()).collect();
    if records.is_empty() {
        bail!(Data, "no interactions survive the {k}-core filter");
    }
    Ok(InteractionLog { records })
}

pub fn five_core_filter(log: &InteractionLog) -> Result<InteractionLog> {
    k_core_filter(log, CORE_THRESHOLD)
}

/// Chronological item sequences over dense indices. Item index 0 is the
/// padding item, so `item_ids[0]` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceDataset {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
}

impl SequenceDataset {
    /// Sorts each user's records by timestamp, keeping file order on ties.
    /// Users and items are numbered in order of first appearance.
    pub fn from_log(log: &InteractionLog) -> Result<Self> {
        if log.is_empty() {
            bail!(Data, "cannot build a dataset from an empty log");
        }
        let mut user_index: HashMap<&str, usize> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut per_user: Vec<Vec<(i64, &str)>> = Vec::new();
        for r in &log.records {
            let u = *user_index.entry(&r.user).or_insert_with(|| {
                user_ids.push(r.user.clone());
                per_user.push(Vec::new());
                user_ids.len() - 1
            });
            per_user[u].push((r.timestamp, &r.item));
        }
        let mut item_index: HashMap<&str, usize> = HashMap::new();
        let mut item_ids = vec![String::new()];
        let mut sequences = Vec::with_capacity(per_user.len());
        for mut events in per_user {
            events.sort_by_key(|(t, _)| *t);
            let seq = events
                .into_iter()
                .map(|(_, item)| {
                    *item_index.entry(item).or_insert_with(|| {
                        item_ids.push(item.to_string());
                        item_ids.len() - 1
                    })
                })
                .collect();
            sequences.push(seq);
        }
        Ok(Self { user_ids, item_ids, sequences })
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    /// Real items, excluding padding.
    pub fn num_items(&self) -> usize {
        self.item_ids.len() - 1
    }

    /// Vocabulary size including padding.
    pub fn vocab_size(&self) -> usize {
        self.item_ids.len()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.item_ids.iter().enumerate().skip(1).map(|(i, s)| (s.as_str(), i)).collect()
    }

    pub fn stats(&self) -> DatasetStats {
        let actions: usize = self.sequences.iter().map(Vec::len).sum();
        let (users, items) = (self.num_users(), self.num_items());
        let cells = (users * items) as f64;
        DatasetStats {
            users,
            items,
            actions,
            avg_length: if users == 0 { 0.0 } else { actions as f64 / users as f64 },
            sparsity: if cells == 0.0 { 0.0 } else { 1.0 - actions as f64 / cells },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub avg_length: f64,
    pub sparsity: f64,
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "users      {}", self.users)?;
        writeln!(f, "items      {}", self.items)?;
        writeln!(f, "avg length {:.2}", self.avg_length)?;
        writeln!(f, "actions    {}", self.actions)?;
        write!(f, "sparsity   {:.2}%", 100.0 * self.sparsity)
    }
}

/// Leave-one-out partition of one user's sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: usize,
    pub train: Vec<usize>,
    pub valid_target: usize,
    pub test_target: usize,
}

impl UserSplit {
    pub fn valid_input(&self) -> &[usize] {
        &self.train
    }

    pub fn test_input(&self) -> Vec<usize> {
        let mut v = self.train.clone();
        v.push(self.valid_target);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => bail!(Config, "unknown split {s:?}; expected valid or test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub dataset: SequenceDataset,
    pub users: Vec<UserSplit>,
}

/// Last item of each sequence is the test target, the one before it the
/// validation target. Sequences shorter than 3 are skipped with a warning.
pub fn split_leave_one_out(dataset: SequenceDataset) -> Result<SplitDataset> {
    let mut users = Vec::with_capacity(dataset.sequences.len());
    let mut skipped = 0usize;
    for (u, seq) in dataset.sequences.iter().enumerate() {
        if seq.len() < 3 {
            skipped += 1;
            continue;
        }
        let n = seq.len();
        users.push(UserSplit { user: u, train: seq[..n - 2].to_vec(), valid_target: seq[n - 2], test_target: seq[n - 1] });
    }
    if skipped > 0 {
        log::warn!("{skipped} user(s) with fewer than 3 interactions excluded from the split");
    }
    if users.is_empty() {
        bail!(Data, "no user has at least 3 interactions");
    }
    Ok(SplitDataset { dataset, users })
}

/// Keeps the last `n` items and left-pads with the padding index.
pub fn pad_truncate(sequence: &[usize], n: usize) -> Vec<usize> {
    let keep = sequence.len().min(n);
    let mut row = vec![0; n - keep];
    row.extend_from_slice(&sequence[sequence.len() - keep..]);
    row
}

/// One next-item prediction problem drawn from a training prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub user: usize,
    /// Padded to the model length.
    pub input: Vec<usize>,
    pub target: usize,
}

/// Every prefix of every user's training portion, predicting the item that
/// follows it.
pub fn training_examples(split: &SplitDataset, max_len: usize) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for u in &split.users {
        for t in 1..u.train.len() {
            out.push(TrainingExample { user: u.user, input: pad_truncate(&u.train[..t], max_len), target: u.train[t] });
        }
    }
    out
}

/// Evaluation rows for one split, in user order.
pub fn evaluation_examples(split: &SplitDataset, which: Split, max_len: usize) -> Vec<TrainingExample> {
    split
        .users
        .iter()
        .map(|u| match which {
            Split::Valid => TrainingExample { user: u.user, input: pad_truncate(u.valid_input(), max_len), target: u.valid_target },
            Split::Test => TrainingExample { user: u.user, input: pad_truncate(&u.test_input(), max_len), target: u.test_target },
        })
        .collect()
}

/// Training examples grouped by target item.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TargetIndex {
    pub by_target: BTreeMap<usize, Vec<usize>>,
}

impl TargetIndex {
    pub fn get(&self, target: usize) -> &[usize] {
        self.by_target.get(&target).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn build_target_index(examples: &[TrainingExample]) -> TargetIndex {
    let mut by_target: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_target.entry(e.target).or_default().push(i);
    }
    TargetIndex { by_target }
}

/// `B x N` input matrix with its targets and users.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub items: Vec<usize>,
    pub targets: Vec<usize>,
    pub users: Vec<usize>,
    pub max_len: usize,
}

impl PaddedBatch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a TrainingExample>, max_len: usize) -> Result<Self> {
        let mut batch = PaddedBatch { items: vec![], targets: vec![], users: vec![], max_len };
        for e in examples {
            if e.input.len() != max_len {
                bail!(Dimension, "example row has length {}, expected {max_len}", e.input.len());
            }
            batch.items.extend_from_slice(&e.input);
            batch.targets.push(e.target);
            batch.users.push(e.user);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}
