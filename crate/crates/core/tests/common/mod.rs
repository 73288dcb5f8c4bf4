//! Oracles and experiment drivers shared by the integration tests and the
//! acceptance binary. Each suite returns raw measurements; callers decide
//! what to assert.
#![allow(dead_code)]

use num_complex::Complex;
use num_rational::Ratio;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slime4rec::autodiff::{grad_check, ComplexTensor, GradCheckReport, Graph, RecLossForm, Tensor, Value};
use slime4rec::data::{
    build_target_index, evaluation_examples, split_leave_one_out, synth_periodic, training_examples, PaddedBatch,
    SequenceDataset, Split, SplitDataset, SynthConfig, SynthData, TargetIndex, TrainingExample,
};
use slime4rec::encoder::{BoundParams, ModelConfig, ModelParams};
use slime4rec::evaluation::{evaluate, ModelScorer, PopularityScorer, RankingReport};
use slime4rec::mixer::{build_ramp_schedule, filter_mixer_forward, DropoutCtx, MixerVars, RampSchedule, SlideMode};
use slime4rec::objectives::{cl_reg_loss, rec_loss, ContrastiveBatchViews};
use slime4rec::spectral::{circular_convolve, half_len, irfft, naive_dft, rfft};
use slime4rec::train::{fit, joint_loss, StepRngs, TrainSettings};
use slime4rec::Scalar;

pub const MODES: [SlideMode; 4] = [SlideMode::Mode1, SlideMode::Mode2, SlideMode::Mode3, SlideMode::Mode4];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------- spectral

#[derive(Debug, Default)]
pub struct SpectralSuite {
    pub cases: usize,
    pub pairs: usize,
    /// rfft against the direct DFT on the shared bins.
    pub dft_err: f64,
    pub roundtrip_err: f64,
    /// Spectrum of the circular convolution against the product of spectra.
    pub conv_spectrum_err: f64,
    /// irfft of the spectral product against the direct convolution.
    pub conv_time_err: f64,
}

/// Random `[batch, N, d]` cases with `N` spanning powers of two and
/// awkward lengths, plus convolution pairs at N = 8 and 16.
pub fn spectral_suite(seed: u64, cases: usize, pairs: usize) -> SpectralSuite {
    let mut r = rng(seed);
    let mut s = SpectralSuite { cases, pairs, ..Default::default() };
    for case in 0..cases {
        let n = match case % 4 {
            0 => 1 << r.random_range(0..8),
            _ => r.random_range(1..=100),
        };
        let (b, d) = (r.random_range(1..=3), r.random_range(1..=4));
        let x = random_tensor(&[b, n, d], &mut r);
        let spec = rfft(&x).unwrap();
        let m = half_len(n);
        for bi in 0..b {
            for c in 0..d {
                let column: Vec<f64> = (0..n).map(|t| x.data[(bi * n + t) * d + c]).collect();
                let full = naive_dft(&column);
                for (k, want) in full.iter().enumerate().take(m) {
                    let at = (bi * m + k) * d + c;
                    let got = Complex::new(spec.inner.re[at], spec.inner.im[at]);
                    s.dft_err = s.dft_err.max((got - want).norm());
                }
            }
        }
        let back = irfft(&spec, n).unwrap();
        for (a, b) in back.data.iter().zip(&x.data) {
            s.roundtrip_err = s.roundtrip_err.max((a - b).abs());
        }
    }
    for pair in 0..pairs {
        let n = if pair % 2 == 0 { 8 } else { 16 };
        let f: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let y = circular_convolve(&f, &x).unwrap();
        let col = |v: &[f64]| rfft(&Tensor::new(vec![n], v.to_vec()).unwrap()).unwrap();
        let (fs, xs, ys) = (col(&f), col(&x), col(&y));
        let mut prod = xs.clone();
        for k in 0..half_len(n) {
            let p = Complex::new(fs.inner.re[k], fs.inner.im[k]) * Complex::new(xs.inner.re[k], xs.inner.im[k]);
            prod.inner.re[k] = p.re;
            prod.inner.im[k] = p.im;
            let got = Complex::new(ys.inner.re[k], ys.inner.im[k]);
            s.conv_spectrum_err = s.conv_spectrum_err.max((got - p).norm());
        }
        let back = irfft(&prod, n).unwrap();
        for (a, b) in back.data.iter().zip(&y) {
            s.conv_time_err = s.conv_time_err.max((a - b).abs());
        }
    }
    s
}

// ---------------------------------------------------------------- windows

#[derive(Debug, Default)]
pub struct WindowSuite {
    pub configs: usize,
    /// Configurations whose static windows are not an exact partition.
    pub partition_failures: Vec<String>,
    /// Configurations with `alpha >= 1/L` whose dynamic union leaves a gap.
    pub coverage_failures: Vec<String>,
    /// `alpha = 1` configurations with a window narrower than `[0, M)`.
    pub full_range_failures: Vec<String>,
    /// Float schedules differing from the exact rational schedule.
    pub exact_mismatches: Vec<String>,
}

fn windows_of<R: slime4rec::BinRatio>(s: &RampSchedule<R>) -> Vec<(usize, usize, usize, usize)> {
    s.dynamic.iter().zip(&s.fixed).map(|(d, f)| (d.start, d.end, f.start, f.end)).collect()
}

pub fn window_suite() -> WindowSuite {
    let mut s = WindowSuite::default();
    for m in 5..=64usize {
        for layers in [1usize, 2, 4, 8] {
            for tenths in 1..=10i64 {
                for mode in MODES {
                    s.configs += 1;
                    let tag = format!("M={m} L={layers} alpha={tenths}/10 mode={}", mode.number());
                    let exact = build_ramp_schedule(m, layers, Ratio::new(tenths, 10), mode).unwrap();
                    let float = build_ramp_schedule(m, layers, tenths as f64 / 10.0, mode).unwrap();
                    if windows_of(&exact) != windows_of(&float) {
                        s.exact_mismatches.push(tag.clone());
                    }
                    let mut owners = vec![0usize; m];
                    for w in &float.fixed {
                        (w.start..w.end).for_each(|k| owners[k] += 1);
                    }
                    if owners.iter().any(|&c| c != 1) {
                        s.partition_failures.push(tag.clone());
                    }
                    // alpha >= 1/L, compared exactly
                    if tenths * layers as i64 >= 10 {
                        let covered = (0..m).all(|k| float.dynamic.iter().any(|w| w.contains(k)));
                        if !covered {
                            s.coverage_failures.push(tag.clone());
                        }
                    }
                    if tenths == 10 && float.dynamic.iter().any(|w| w.start != 0 || w.end != m) {
                        s.full_range_failures.push(tag);
                    }
                }
            }
        }
    }
    s
}

/// Largest absolute filter gradient at bins outside the layer windows,
/// plus the number of in-window bins that received a nonzero gradient (to
/// confirm the probe is live).
pub fn masked_bin_gradients(seed: u64) -> (f64, usize) {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut live = 0usize;
    for m in [5usize, 9, 16] {
        for mode in MODES {
            let n = 2 * (m - 1);
            let d = 3;
            let schedule = build_ramp_schedule(m, 2, 0.3, mode).unwrap();
            for layer in 0..2 {
                let mut g = Graph::<f64>::new();
                let h = g.leaf(random_tensor(&[2, n, d], &mut r));
                let cplx = |g: &mut Graph<f64>, r: &mut ChaCha8Rng| {
                    let re = (0..m * d).map(|_| r.random_range(-1.0..1.0)).collect();
                    let im = (0..m * d).map(|_| r.random_range(-1.0..1.0)).collect();
                    g.complex_leaf(ComplexTensor::new(vec![m, d], re, im).unwrap(), true)
                };
                let w_dynamic = cplx(&mut g, &mut r);
                let w_static = cplx(&mut g, &mut r);
                let norm_gain = g.leaf(Tensor::new(vec![d], vec![1.0; d]).unwrap());
                let norm_bias = g.leaf(Tensor::new(vec![d], vec![0.0; d]).unwrap());
                let vars = MixerVars { w_dynamic, w_static, norm_gain, norm_bias };
                let mut drop_rng = rng(0);
                let mut ctx = DropoutCtx { train: false, rng: &mut drop_rng };
                let out = filter_mixer_forward(&mut g, h, layer, &vars, &schedule, 0.5, 0.0, &mut ctx).unwrap();
                let weights = g.constant(random_tensor(&[2, n, d], &mut r));
                let weighted = g.mul(out, weights).unwrap();
                let loss = g.sum(weighted).unwrap();
                g.backward(loss).unwrap();
                for (var, window) in [(w_dynamic, schedule.dynamic[layer]), (w_static, schedule.fixed[layer])] {
                    let (gre, gim) = g.complex_grad(var).unwrap();
                    for k in 0..m {
                        let mag = (0..d).map(|c| gre[k * d + c].abs().max(gim[k * d + c].abs())).fold(0.0, f64::max);
                        if window.contains(k) {
                            live += usize::from(mag > 0.0);
                        } else {
                            worst = worst.max(mag);
                        }
                    }
                }
            }
        }
    }
    (worst, live)
}

// ---------------------------------------------------------------- gradients

pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        max_len: 8,
        hidden: 4,
        layers: 2,
        vocab_size: 12,
        alpha: 0.5,
        dropout_embed: 0.0,
        dropout_block: 0.0,
        lambda: 0.1,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn gradcheck_examples(config: &ModelConfig) -> (Vec<TrainingExample>, TargetIndex) {
    let seqs: [&[usize]; 4] = [&[3, 5, 7, 2, 9], &[1, 4, 4, 8, 10, 11, 2, 6, 3], &[6, 2], &[11, 10, 9, 8, 7, 6, 5]];
    let targets = [4, 7, 4, 7];
    let examples: Vec<TrainingExample> = seqs
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(u, (s, t))| TrainingExample { user: u, input: slime4rec::data::pad_truncate(s, config.max_len), target: t })
        .collect();
    let index = build_target_index(&examples);
    (examples, index)
}

/// Central differences over every parameter of a full model under the
/// joint objective, dropout off. Returns the report and the number of
/// complex leaves it covered.
pub fn full_model_gradcheck() -> (GradCheckReport, usize) {
    let config = gradcheck_config();
    let schedule = config.schedule().unwrap();
    let params = ModelParams::<f64>::init(&config).unwrap();
    let (examples, index) = gradcheck_examples(&config);
    let batch = PaddedBatch::from_examples(&examples, config.max_len).unwrap();
    let anchors = [0usize, 1, 2, 3];
    let leaves: Vec<Value<f64>> = params.entries.iter().map(|p| p.value.clone()).collect();
    let complex = leaves.iter().filter(|v| matches!(v, Value::Complex(_))).count();
    let report = grad_check(
        |g, vars| {
            let bound = BoundParams { vars: vars.to_vec() };
            let (mut a, mut b, mut c, mut d) = (rng(1), rng(2), rng(3), rng(4));
            let rngs = StepRngs { dropout: &mut a, view_a: &mut b, view_b: &mut c, sampling: &mut d };
            Ok(joint_loss(g, &bound, &batch, &anchors, &examples, &index, &config, &schedule, rngs, false)?.total)
        },
        &leaves,
        1e-5,
        1e-4,
    )
    .unwrap();
    (report, complex)
}

// ---------------------------------------------------------------- losses

pub fn brute_rec_loss(p: &[f64], target: usize) -> f64 {
    let mut loss = 0.0;
    for (i, &q) in p.iter().enumerate() {
        if i == 0 {
            continue;
        }
        let q = q.clamp(1e-8, 1.0 - 1e-8);
        loss -= if i == target { q.ln() } else { (1.0 - q).ln() };
    }
    loss
}

pub fn brute_cl_reg(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let z: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let rows = z.len();
    let batch = a.len();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let mut total = 0.0;
    for r in 0..rows {
        let pos = (r + batch) % rows;
        let mut denom = 0.0;
        for c in 0..rows {
            if c != r && c != pos {
                denom += (dot(z[r], z[c]) / tau).exp();
            }
        }
        total += -((dot(z[r], z[pos]) / tau).exp() / denom).ln();
    }
    total / batch as f64
}

#[derive(Debug, Default)]
pub struct LossSuite {
    pub trials: usize,
    pub rec_err: f64,
    /// Batched graph loss against the mean of brute-force rows.
    pub rec_graph_err: f64,
    pub clreg_err: f64,
    pub clreg_graph_err: f64,
    pub identical_pair: f64,
}

pub fn loss_suite(seed: u64, trials: usize) -> LossSuite {
    let mut r = rng(seed);
    let mut s = LossSuite { trials, ..Default::default() };
    let (b, v, d) = (4usize, 6usize, 5usize);
    for _ in 0..trials {
        let mut probs = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..b {
            let logits: Vec<f64> = (0..v).map(|_| r.random_range(-3.0..3.0)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            probs.push(logits.iter().map(|l| l.exp() / z).collect::<Vec<_>>());
            targets.push(r.random_range(1..v));
        }
        let mut mean = 0.0;
        for (p, &t) in probs.iter().zip(&targets) {
            let want = brute_rec_loss(p, t);
            s.rec_err = s.rec_err.max((rec_loss(p, t, RecLossForm::BinarySum).unwrap() - want).abs());
            mean += want / b as f64;
        }
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::new(vec![b, v], probs.concat()).unwrap());
        let lv = g.rec_loss(pv, &targets, RecLossForm::BinarySum).unwrap();
        s.rec_graph_err = s.rec_graph_err.max((g.real(lv).unwrap().item() - mean).abs());

        let tau = r.random_range(0.3..2.0);
        let va: Vec<Vec<f64>> = (0..b).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let vb: Vec<Vec<f64>> = (0..b).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let want = brute_cl_reg(&va, &vb, tau);
        let views = ContrastiveBatchViews {
            h_prime: Tensor::new(vec![b, d], va.concat()).unwrap(),
            h_s_prime: Tensor::new(vec![b, d], vb.concat()).unwrap(),
        };
        s.clreg_err = s.clreg_err.max((cl_reg_loss(&views, tau).unwrap() - want).abs());
        let mut g = Graph::<f64>::new();
        let a = g.constant(views.h_prime.clone());
        let bb = g.constant(views.h_s_prime.clone());
        let c = g.cl_reg(a, bb, tau).unwrap();
        s.clreg_graph_err = s.clreg_graph_err.max((g.real(c).unwrap().item() - want).abs());
    }
    let same = Tensor::new(vec![2, 3], vec![0.4, -0.2, 0.7, 0.4, -0.2, 0.7]).unwrap();
    s.identical_pair = cl_reg_loss(&ContrastiveBatchViews { h_prime: same.clone(), h_s_prime: same }, 1.0).unwrap();
    s
}

// ---------------------------------------------------------------- synthetic task

/// Sequence length of the synthetic benchmark users.
pub const SYNTH_LENGTH: usize = 20;
pub const SYNTH_BATCH: usize = 32;

pub fn benchmark_synth() -> SynthConfig {
    SynthConfig { users: 200, items: 60, periods: vec![2, 5], noise_rate: 0.1, length: SYNTH_LENGTH, seed: 7 }
}

pub struct SynthTask {
    pub data: SynthData,
    pub split: SplitDataset,
    pub train: Vec<TrainingExample>,
    pub index: TargetIndex,
    pub valid: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
    pub max_len: usize,
}

pub fn synth_task(config: &SynthConfig, max_len: usize) -> SynthTask {
    let data = synth_periodic(config).unwrap();
    let dataset = SequenceDataset::from_log(&data.log).unwrap();
    let split = split_leave_one_out(dataset).unwrap();
    let train = training_examples(&split, max_len);
    let index = build_target_index(&train);
    let valid = evaluation_examples(&split, Split::Valid, max_len);
    let test = evaluation_examples(&split, Split::Test, max_len);
    SynthTask { data, split, train, index, valid, test, max_len }
}

/// The model of the end-to-end benchmark.
pub fn benchmark_model(task: &SynthTask) -> ModelConfig {
    ModelConfig {
        max_len: 16,
        hidden: 32,
        layers: 2,
        alpha: 0.5,
        lambda: 0.1,
        vocab_size: task.split.dataset.vocab_size(),
        ..ModelConfig::default()
    }
}

pub fn benchmark_settings(epochs: usize) -> TrainSettings {
    TrainSettings { epochs, batch_size: SYNTH_BATCH, patience: 0, ..TrainSettings::default() }
}

pub struct Trained<T> {
    pub params: ModelParams<T>,
    pub config: ModelConfig,
    pub test: RankingReport,
}

pub fn train_and_test<T: Scalar>(task: &SynthTask, config: ModelConfig, settings: TrainSettings) -> Trained<T> {
    let out = fit::<T>(config.clone(), settings, &task.train, &task.index, &task.valid, "", None).unwrap();
    let mut scorer = ModelScorer::new(&out.best, &config).unwrap();
    let test = evaluate(&mut scorer, &task.test, &[1, 5, 10], 256, "").unwrap();
    Trained { params: out.best, config, test }
}

pub fn popularity_test(task: &SynthTask, vocab: usize) -> RankingReport {
    let mut scorer = PopularityScorer::fit(&task.train, vocab, task.max_len);
    evaluate(&mut scorer, &task.test, &[1, 5, 10], 256, "").unwrap()
}

pub fn hr5(report: &RankingReport) -> f64 {
    report.hr(5).unwrap()
}

/// Rolls a random generator forward so independent draws do not overlap.
pub fn burn(rng: &mut impl RngCore, n: usize) {
    (0..n).for_each(|_| {
        rng.next_u64();
    });
}
