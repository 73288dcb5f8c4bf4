//! Full-vocabulary ranking metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrainingExample;
use crate::encoder::{score_batch, ModelConfig, ModelParams, NoiseInjection};
use crate::error::{bail, Result};
use crate::mixer::RampSchedule;
use crate::scalar::Scalar;

pub const DEFAULT_KS: [usize; 2] = [5, 10];

/// 1-based rank of `target` among all non-excluded items, counting ties
/// against the target. Index 0 is always excluded.
pub fn rank_target(scores: &[f64], target: usize, exclusions: &[usize]) -> Result<usize> {
    if target == 0 || target >= scores.len() {
        bail!(Contract, "target {target} is padding or outside {} scores", scores.len());
    }
    if exclusions.contains(&target) {
        bail!(Contract, "target {target} is excluded from ranking");
    }
    let s = scores[target];
    let above = (1..scores.len()).filter(|&i| i != target && !exclusions.contains(&i) && scores[i] >= s).count();
    Ok(above + 1)
}

fn check_rank_k(rank: usize, k: usize) -> Result<()> {
    if k == 0 {
        bail!(Config, "K must be positive");
    }
    if rank == 0 {
        bail!(Contract, "ranks are 1-based");
    }
    Ok(())
}

pub fn hr_at_k(rank: usize, k: usize) -> Result<f64> {
    check_rank_k(rank, k)?;
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

pub fn ndcg_at_k(rank: usize, k: usize) -> Result<f64> {
    check_rank_k(rank, k)?;
    Ok(if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub metrics: Vec<KMetrics>,
    pub users: usize,
    pub config_hash: String,
}

impl RankingReport {
    pub fn hr(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.hr)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.ndcg)
    }

    /// Checks the ordering constraints every report satisfies.
    pub fn check_invariants(&self) -> Result<()> {
        for m in &self.metrics {
            if !(0.0..=1.0).contains(&m.hr) || m.ndcg < 0.0 || m.ndcg > m.hr + 1e-12 {
                bail!(Oracle, "metrics at K={} violate 0 <= NDCG <= HR <= 1", m.k);
            }
        }
        for w in self.metrics.windows(2) {
            if w[0].k < w[1].k && (w[0].hr > w[1].hr + 1e-12 || w[0].ndcg > w[1].ndcg + 1e-12) {
                bail!(Oracle, "metrics decrease from K={} to K={}", w[0].k, w[1].k);
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["users".to_string()];
        for m in &self.metrics {
            h.push(format!("hr@{}", m.k));
            h.push(format!("ndcg@{}", m.k));
        }
        h.push("config_hash".into());
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![self.users.to_string()];
        for m in &self.metrics {
            r.push(format!("{:.6}", m.hr));
            r.push(format!("{:.6}", m.ndcg));
        }
        r.push(self.config_hash.clone());
        r
    }
}

/// Anything that produces one score per vocabulary entry for each
/// `N`-length input row.
pub trait Scorer {
    fn max_len(&self) -> usize;
    fn score(&mut self, items: &[usize], batch: usize) -> Result<Vec<Vec<f64>>>;
}

/// Deterministic model scorer, optionally perturbing every layer input.
pub struct ModelScorer<'a, T> {
    pub params: &'a ModelParams<T>,
    pub config: &'a ModelConfig,
    pub schedule: RampSchedule<f64>,
    noise: Option<(f64, ChaCha8Rng)>,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(params: &'a ModelParams<T>, config: &'a ModelConfig) -> Result<Self> {
        Ok(Self { params, config, schedule: config.schedule()?, noise: None })
    }

    /// Adds `Uniform(-epsilon, epsilon)` noise drawn from a stream seeded
    /// with `seed`.
    pub fn with_noise(mut self, epsilon: f64, seed: u64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            bail!(Config, "noise epsilon must be finite and nonnegative, got {epsilon}");
        }
        self.noise = (epsilon > 0.0).then(|| (epsilon, ChaCha8Rng::seed_from_u64(seed)));
        Ok(self)
    }
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn score(&mut self, items: &[usize], batch: usize) -> Result<Vec<Vec<f64>>> {
        let noise = self.noise.as_mut().map(|(epsilon, rng)| NoiseInjection { epsilon: *epsilon, rng });
        let rows = score_batch(self.params, self.config, &self.schedule, items, batch, noise)?;
        Ok(rows.into_iter().map(|r| r.into_iter().map(Scalar::to_f64_lossy).collect()).collect())
    }
}

/// Scores every item by its training frequency.
pub struct PopularityScorer {
    pub counts: Vec<f64>,
    pub max_len: usize,
}

impl PopularityScorer {
    pub fn fit(examples: &[TrainingExample], vocab_size: usize, max_len: usize) -> Self {
        let mut counts = vec![0.0; vocab_size];
        for e in examples {
            counts[e.target] += 1.0;
        }
        Self { counts, max_len }
    }
}

impl Scorer for PopularityScorer {
    fn max_len(&self) -> usize {
        self.max_len
    }

    fn score(&mut self, _items: &[usize], batch: usize) -> Result<Vec<Vec<f64>>> {
        Ok(vec![self.counts.clone(); batch])
    }
}

/// Mean HR@K and NDCG@K of `scorer` over `examples`.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &mut S,
    examples: &[TrainingExample],
    ks: &[usize],
    batch_size: usize,
    config_hash: &str,
) -> Result<RankingReport> {
    if examples.is_empty() {
        bail!(Data, "evaluation split is empty");
    }
    if ks.is_empty() || ks.contains(&0) {
        bail!(Config, "K values must be positive");
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let n = scorer.max_len();
    let mut sums = vec![(0.0, 0.0); ks.len()];
    for chunk in examples.chunks(batch_size.max(1)) {
        let mut items = Vec::with_capacity(chunk.len() * n);
        for e in chunk {
            if e.input.len() != n {
                bail!(Dimension, "evaluation row has length {}, expected {n}", e.input.len());
            }
            items.extend_from_slice(&e.input);
        }
        let scores = scorer.score(&items, chunk.len())?;
        for (e, row) in chunk.iter().zip(&scores) {
            let rank = rank_target(row, e.target, &[])?;
            for (s, &k) in sums.iter_mut().zip(&ks) {
                s.0 += hr_at_k(rank, k)?;
                s.1 += ndcg_at_k(rank, k)?;
            }
        }
    }
    let count = examples.len() as f64;
    let metrics = ks.iter().zip(&sums).map(|(&k, s)| KMetrics { k, hr: s.0 / count, ndcg: s.1 / count }).collect();
    let report = RankingReport { metrics, users: examples.len(), config_hash: config_hash.to_string() };
    report.check_invariants()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_target(&[9.0, 0.1, 0.9, 0.3], 2, &[]).unwrap(), 1);
        assert_eq!(rank_target(&[0.0; 11], 4, &[]).unwrap(), 10);
        assert_eq!(rank_target(&[5.0, 1.0, 2.0, 3.0], 1, &[3]).unwrap(), 2);
        assert!(rank_target(&[0.0, 1.0, 2.0], 1, &[1]).is_err());
        assert!(rank_target(&[0.0, 1.0, 2.0], 0, &[]).is_err());
    }

    #[test]
    fn rank_matches_argsort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v = rng.random_range(3..30);
            let scores: Vec<f64> = (0..v).map(|_| (rng.random_range(0..8) as f64) * 0.5).collect();
            let target = rng.random_range(1..v);
            let mut order: Vec<usize> = (1..v).collect();
            // Stable sort by descending score with the target last among equals.
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then((a == target).cmp(&(b == target))));
            let oracle = order.iter().position(|&i| i == target).unwrap() + 1;
            assert_eq!(rank_target(&scores, target, &[]).unwrap(), oracle);
        }
    }

    #[test]
    fn rank_is_invariant_to_monotone_transforms() {
        let scores = [0.0, -1.0, 0.4, 2.5, 0.4, 1.1];
        let mapped: Vec<f64> = scores.iter().map(|s: &f64| s.exp() * 3.0 + 1.0).collect();
        for t in 1..6 {
            assert_eq!(rank_target(&scores, t, &[]).unwrap(), rank_target(&mapped, t, &[]).unwrap());
        }
    }

    #[test]
    fn metric_closed_forms() {
        assert_eq!((hr_at_k(1, 5).unwrap(), ndcg_at_k(1, 5).unwrap()), (1.0, 1.0));
        assert!((ndcg_at_k(2, 5).unwrap() - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!((hr_at_k(6, 5).unwrap(), ndcg_at_k(6, 5).unwrap()), (0.0, 0.0));
        assert!(matches!(hr_at_k(1, 0), Err(crate::Error::Config(_))));
    }

    struct RandomScorer(ChaCha8Rng, usize);

    impl Scorer for RandomScorer {
        fn max_len(&self) -> usize {
            1
        }
        fn score(&mut self, _items: &[usize], batch: usize) -> Result<Vec<Vec<f64>>> {
            Ok((0..batch).map(|_| (0..self.1).map(|_| self.0.random::<f64>()).collect()).collect())
        }
    }

    #[test]
    fn random_scores_hit_at_chance() {
        let examples: Vec<TrainingExample> = (0..20000).map(|i| TrainingExample { user: i, input: vec![0], target: 1 + i % 100 }).collect();
        let mut scorer = RandomScorer(ChaCha8Rng::seed_from_u64(11), 101);
        let report = evaluate(&mut scorer, &examples, &DEFAULT_KS, 512, "x").unwrap();
        assert!((report.hr(10).unwrap() - 0.10).abs() < 0.02);
        assert!(report.hr(5).unwrap() <= report.hr(10).unwrap());
    }

    #[test]
    fn popularity_and_report_formats() {
        let train: Vec<TrainingExample> = [1, 1, 2].iter().map(|&t| TrainingExample { user: 0, input: vec![0], target: t }).collect();
        let mut pop = PopularityScorer::fit(&train, 4, 1);
        let test = vec![TrainingExample { user: 0, input: vec![0], target: 1 }, TrainingExample { user: 1, input: vec![0], target: 3 }];
        let r = evaluate(&mut pop, &test, &[1, 5], 8, "abc").unwrap();
        assert_eq!(r.hr(1), Some(0.5));
        assert_eq!(r.hr(5), Some(1.0));
        assert_eq!(r.csv_header().len(), r.csv_row().len());
        let back: RankingReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(evaluate(&mut pop, &[], &[5], 8, "").is_err());
    }
}
