use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::log::{Interaction, InteractionLog};
use crate::error::{bail, Result};

/// Parameters of the periodic synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub periods: Vec<usize>,
    pub noise_rate: f64,
    /// Interactions per user.
    pub length: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { users: 200, items: 60, periods: vec![2, 5], noise_rate: 0.1, length: 30, seed: 7 }
    }
}

/// Generated log with the structure needed to predict it exactly.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub log: InteractionLog,
    /// Stream of each raw item id.
    pub item_stream: HashMap<String, usize>,
    pub periods: Vec<usize>,
    /// Per-user rotation of the round robin, indexed like the `u{k}` names.
    pub phases: Vec<usize>,
}

impl SynthData {
    /// Stream owning position `t` of user `user`.
    pub fn stream_at(&self, user: usize, t: usize) -> usize {
        (t + self.phases[user]) % self.periods.len()
    }

    /// Distance back to the previous occurrence of the clean item at
    /// position `t`: streams are interleaved round robin, so the cycle of
    /// `p_s` items in stream `s` repeats every `S · p_s` steps.
    pub fn recurrence(&self, user: usize, t: usize) -> usize {
        self.periods.len() * self.periods[self.stream_at(user, t)]
    }
}

pub fn item_name(i: usize) -> String {
    format!("i{i}")
}

/// Each user interleaves one item cycle per period. The cycle for period
/// `p` is `p` distinct items drawn from that period's pool, so with noise
/// off the next item is always the one seen `S · p` steps earlier. Each
/// user starts the round robin at a random stream so that the held-out
/// positions do not all fall on the same stream. A `noise_rate` fraction of positions is then replaced by uniform items.
pub fn synth_periodic(config: &SynthConfig) -> Result<SynthData> {
    let streams = config.periods.len();
    if streams == 0 {
        bail!(Config, "at least one period is required");
    }
    if let Some(p) = config.periods.iter().find(|&&p| p < 2) {
        bail!(Config, "periods must be at least 2, got {p}");
    }
    if !(0.0..=1.0).contains(&config.noise_rate) {
        bail!(Config, "noise rate must lie in [0, 1], got {}", config.noise_rate);
    }
    if config.users == 0 || config.length == 0 {
        bail!(Config, "users and length must be positive");
    }
    let pool = config.items / streams;
    if let Some(p) = config.periods.iter().find(|&&p| p > pool) {
        bail!(Config, "pool of {pool} items cannot host a cycle of period {p}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pools: Vec<Vec<usize>> = (0..streams).map(|s| (s * pool..(s + 1) * pool).collect()).collect();
    let mut item_stream = HashMap::new();
    for (s, members) in pools.iter().enumerate() {
        for &i in members {
            item_stream.insert(item_name(i), s);
        }
    }
    let mut records = Vec::with_capacity(config.users * config.length);
    let mut phases = Vec::with_capacity(config.users);
    for u in 0..config.users {
        let phase = rng.random_range(0..streams);
        phases.push(phase);
        let cycles: Vec<Vec<usize>> = pools
            .iter()
            .zip(&config.periods)
            .map(|(members, &p)| members.choose_multiple(&mut rng, p).copied().collect())
            .collect();
        for t in 0..config.length {
            let s = (t + phase) % streams;
            let clean = cycles[s][((t + phase) / streams) % config.periods[s]];
            let item = if rng.random::<f64>() < config.noise_rate { rng.random_range(0..config.items) } else { clean };
            records.push(Interaction { user: format!("u{u}"), item: item_name(item), timestamp: t as i64 });
        }
    }
    Ok(SynthData { log: InteractionLog { records }, item_stream, periods: config.periods.clone(), phases })
}
