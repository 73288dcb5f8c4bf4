//! Windowed learnable spectral filters.
//!
//! Each layer transforms its input once, filters the spectrum with a dynamic
//! filter restricted to a sliding window and a static filter restricted to
//! one block of an even partition, blends the two with `gamma`, and returns
//! to the time domain before the residual and normalization.

mod schedule;

use std::io::Write;

use rand::RngCore;
use rand_distr::{Distribution, Normal};

pub use schedule::{build_ramp_schedule, FilterWindow, RampSchedule, SlideDirection, SlideMode};

use crate::autodiff::{ComplexTensor, Graph, Var};
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::spectral::{sequence_layout, Spectrum};

/// Standard deviation of each plane at initialization.
pub const FILTER_INIT_STD: f64 = 0.02;

/// Learnable complex filters of one layer, both `[M, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterParams<T> {
    pub w_dynamic: ComplexTensor<T>,
    pub w_static: ComplexTensor<T>,
}

impl<T: Scalar> FilterParams<T> {
    pub fn init(bins: usize, hidden: usize, rng: &mut dyn RngCore) -> Self {
        Self { w_dynamic: gaussian_filter(bins, hidden, rng), w_static: gaussian_filter(bins, hidden, rng) }
    }
}

pub fn gaussian_filter<T: Scalar>(bins: usize, hidden: usize, rng: &mut dyn RngCore) -> ComplexTensor<T> {
    let normal = Normal::new(0.0, FILTER_INIT_STD).expect("valid std");
    let n = bins * hidden;
    let re = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
    let im = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
    ComplexTensor::new(vec![bins, hidden], re, im).expect("consistent shape")
}

/// Filters `x` inside `window` and zeroes every other bin.
pub fn apply_windowed_filter<T: Scalar>(x: &Spectrum<T>, window: &FilterWindow, w: &ComplexTensor<T>) -> Result<Spectrum<T>> {
    let (batch, m, d) = sequence_layout(&x.inner.shape)?;
    if w.shape != [m, d] {
        bail!(Dimension, "filter shape {:?} does not match [{m}, {d}]", w.shape);
    }
    if window.start > window.end || window.end > m {
        bail!(Contract, "window [{}, {}) outside [0, {m})", window.start, window.end);
    }
    let mut out = ComplexTensor::zeros(&x.inner.shape);
    for b in 0..batch {
        for k in window.start..window.end {
            for c in 0..d {
                let i = (b * m + k) * d + c;
                out.set(i, x.inner.get(i) * w.get(k * d + c));
            }
        }
    }
    Ok(Spectrum { inner: out, origin_length: x.origin_length })
}

/// `(1 - gamma) * dynamic + gamma * fixed`, bin by bin.
pub fn mix_spectra<T: Scalar>(dynamic: &Spectrum<T>, fixed: &Spectrum<T>, gamma: f64) -> Result<Spectrum<T>> {
    check_gamma(gamma)?;
    if dynamic.inner.shape != fixed.inner.shape || dynamic.origin_length != fixed.origin_length {
        bail!(Dimension, "spectra {:?} and {:?} differ", dynamic.inner.shape, fixed.inner.shape);
    }
    let (a, b) = (T::lit(1.0 - gamma), T::lit(gamma));
    let mut out = ComplexTensor::zeros(&dynamic.inner.shape);
    for i in 0..out.numel() {
        out.set(i, dynamic.inner.get(i) * a + fixed.inner.get(i) * b);
    }
    Ok(Spectrum { inner: out, origin_length: dynamic.origin_length })
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        bail!(Config, "gamma must lie in [0, 1], got {gamma}");
    }
    Ok(())
}

/// Graph handles for one layer's mixer parameters.
#[derive(Debug, Clone, Copy)]
pub struct MixerVars {
    pub w_dynamic: Var,
    pub w_static: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
}

/// Dropout switch threaded through a forward pass.
pub struct DropoutCtx<'a> {
    pub train: bool,
    pub rng: &'a mut dyn RngCore,
}

/// `LayerNorm(H + Dropout(irfft(mix(dynamic(X), static(X)))))` with
/// `X = rfft(H)` shared by both branches. `h` is `[B, N, d]`.
#[allow(clippy::too_many_arguments)]
pub fn filter_mixer_forward<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    layer: usize,
    vars: &MixerVars,
    schedule: &RampSchedule<f64>,
    gamma: f64,
    dropout: f64,
    ctx: &mut DropoutCtx<'_>,
) -> Result<Var> {
    check_gamma(gamma)?;
    if layer >= schedule.layers() {
        bail!(Contract, "layer {layer} outside schedule of {} layers", schedule.layers());
    }
    let (_, n, _) = sequence_layout(g.shape(h))?;
    let spectrum = g.rfft(h)?;
    let dw = schedule.dynamic[layer];
    let sw = schedule.fixed[layer];
    let dynamic = g.windowed_filter(spectrum, vars.w_dynamic, dw.start, dw.end)?;
    let fixed = g.windowed_filter(spectrum, vars.w_static, sw.start, sw.end)?;
    let dynamic = g.scale(dynamic, T::lit(1.0 - gamma));
    let fixed = g.scale(fixed, T::lit(gamma));
    let mixed = g.add(dynamic, fixed)?;
    let filtered = g.irfft(mixed, n)?;
    let filtered = g.dropout(filtered, dropout, ctx.train, &mut *ctx.rng)?;
    let residual = g.add(h, filtered)?;
    g.layer_norm(residual, vars.norm_gain, vars.norm_bias)
}

/// Kind column of the amplitude export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Dynamic,
    Static,
}

impl FilterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterKind::Dynamic => "dynamic",
            FilterKind::Static => "static",
        }
    }
}

/// Per-layer mean modulus of each filter along the hidden dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterAmplitudes {
    /// `[L][M]`, zero outside the layer's dynamic window.
    pub dynamic: Vec<Vec<f64>>,
    /// `[L][M]`, zero outside the layer's static window.
    pub fixed: Vec<Vec<f64>>,
    /// `fixed - dynamic`; positive where the static branch recovers bins the
    /// dynamic window misses.
    pub differential: Vec<Vec<f64>>,
}

fn mean_modulus<T: Scalar>(w: &ComplexTensor<T>, window: &FilterWindow, bins: usize) -> Result<Vec<f64>> {
    if w.shape.len() != 2 || w.shape[0] != bins {
        bail!(Dimension, "filter shape {:?} does not have {bins} bins", w.shape);
    }
    let d = w.shape[1];
    Ok((0..bins)
        .map(|k| {
            if !window.contains(k) || d == 0 {
                return 0.0;
            }
            (0..d).map(|c| w.get(k * d + c).norm().to_f64_lossy()).sum::<f64>() / d as f64
        })
        .collect())
}

pub fn filter_amplitude<T: Scalar>(params: &[FilterParams<T>], schedule: &RampSchedule<f64>) -> Result<FilterAmplitudes> {
    if params.len() != schedule.layers() {
        bail!(Dimension, "{} filter layers but schedule has {}", params.len(), schedule.layers());
    }
    let mut out = FilterAmplitudes { dynamic: vec![], fixed: vec![], differential: vec![] };
    for (l, p) in params.iter().enumerate() {
        let dyn_amp = mean_modulus(&p.w_dynamic, &schedule.dynamic[l], schedule.bins)?;
        let fix_amp = mean_modulus(&p.w_static, &schedule.fixed[l], schedule.bins)?;
        out.differential.push(fix_amp.iter().zip(&dyn_amp).map(|(s, d)| s - d).collect());
        out.dynamic.push(dyn_amp);
        out.fixed.push(fix_amp);
    }
    Ok(out)
}

impl FilterAmplitudes {
    /// Writes `layer,filter_kind,bin,amplitude` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| crate::Error::Io(std::io::Error::other(e));
        w.write_record(["layer", "filter_kind", "bin", "amplitude"]).map_err(csv_err)?;
        for (kind, table) in [(FilterKind::Dynamic, &self.dynamic), (FilterKind::Static, &self.fixed)] {
            for (l, row) in table.iter().enumerate() {
                for (k, a) in row.iter().enumerate() {
                    w.write_record([l.to_string(), kind.as_str().to_string(), k.to_string(), a.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Coarse text heat map, one line per (kind, layer).
    pub fn render_text(&self) -> String {
        const RAMP: &[u8] = b" .:-=+*#%@";
        let peak = self.dynamic.iter().chain(&self.fixed).flatten().copied().fold(0.0f64, f64::max);
        let mut out = String::new();
        for (name, table) in [("dynamic", &self.dynamic), ("static", &self.fixed)] {
            for (l, row) in table.iter().enumerate() {
                let cells: String = row
                    .iter()
                    .map(|&a| {
                        let level = if peak > 0.0 { ((a / peak) * (RAMP.len() - 1) as f64).round() as usize } else { 0 };
                        RAMP[level.min(RAMP.len() - 1)] as char
                    })
                    .collect();
                out.push_str(&format!("{name:>7} L{l} |{cells}|\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use num_complex::Complex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spectrum(batch: usize, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Spectrum<f64> {
        let m = n / 2 + 1;
        let len = batch * m * d;
        Spectrum {
            inner: ComplexTensor::new(
                vec![batch, m, d],
                (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            origin_length: n,
        }
    }

    #[test]
    fn full_window_identity_filter_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_spectrum(2, 8, 3, &mut rng);
        let w = ComplexTensor::ones(&[5, 3]);
        let y = apply_windowed_filter(&x, &FilterWindow { layer: 0, start: 0, end: 5 }, &w).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn disjoint_support_gives_zero() {
        let mut x = Spectrum { inner: ComplexTensor::<f64>::zeros(&[5, 2]), origin_length: 8 };
        x.inner.set(3 * 2, Complex::new(1.0, 1.0));
        x.inner.set(3 * 2 + 1, Complex::new(-2.0, 0.5));
        let w = ComplexTensor::ones(&[5, 2]);
        let y = apply_windowed_filter(&x, &FilterWindow { layer: 0, start: 0, end: 1 }, &w).unwrap();
        assert!(y.inner.re.iter().chain(&y.inner.im).all(|v| *v == 0.0));
    }

    #[test]
    fn window_filter_matches_indicator_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_spectrum(1, 14, 3, &mut rng);
        let w = gaussian_filter::<f64>(8, 3, &mut rng);
        let window = FilterWindow { layer: 0, start: 2, end: 5 };
        let y = apply_windowed_filter(&x, &window, &w).unwrap();
        for k in 0..8 {
            let indicator = if (2..5).contains(&k) { 1.0 } else { 0.0 };
            for c in 0..3 {
                let expect = x.inner.get(k * 3 + c) * w.get(k * 3 + c) * indicator;
                assert!((y.inner.get(k * 3 + c) - expect).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn window_out_of_range_is_rejected() {
        let x = Spectrum { inner: ComplexTensor::<f64>::zeros(&[5, 2]), origin_length: 8 };
        let w = ComplexTensor::ones(&[5, 2]);
        let err = apply_windowed_filter(&x, &FilterWindow { layer: 0, start: 3, end: 6 }, &w);
        assert!(matches!(err, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn mixing_endpoints_and_midpoint() {
        let one = |c: Complex<f64>| Spectrum {
            inner: ComplexTensor::from_complex(&[1], &[c]).unwrap(),
            origin_length: 1,
        };
        let (a, b) = (one(Complex::new(2.0, 0.0)), one(Complex::new(0.0, 4.0)));
        assert_eq!(mix_spectra(&a, &b, 0.0).unwrap(), a);
        assert_eq!(mix_spectra(&a, &b, 1.0).unwrap(), b);
        assert_eq!(mix_spectra(&a, &b, 0.5).unwrap().inner.get(0), Complex::new(1.0, 2.0));
        assert!(matches!(mix_spectra(&a, &b, 1.2), Err(crate::Error::Config(_))));
    }

    fn mixer_vars(g: &mut Graph<f64>, wd: ComplexTensor<f64>, ws: ComplexTensor<f64>, d: usize) -> MixerVars {
        MixerVars {
            w_dynamic: g.complex_leaf(wd, true),
            w_static: g.complex_leaf(ws, true),
            norm_gain: g.leaf(Tensor::ones(&[d]).with_grad()),
            norm_bias: g.leaf(Tensor::zeros(&[d]).with_grad()),
        }
    }

    #[test]
    fn pass_through_filter_normalizes_doubled_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (8, 4);
        let h = Tensor::from_fn(&[1, n, d], |_| rng.random_range(-1.0..1.0));
        let schedule = build_ramp_schedule(5, 2, 1.0, SlideMode::Mode4).unwrap();
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let vars = mixer_vars(&mut g, ComplexTensor::ones(&[5, d]), ComplexTensor::zeros(&[5, d]), d);
        let mut ctx = DropoutCtx { train: false, rng: &mut rng };
        let out = filter_mixer_forward(&mut g, hv, 0, &vars, &schedule, 0.0, 0.3, &mut ctx).unwrap();
        let out = g.real(out).unwrap().clone();
        let doubled = g.constant(Tensor::from_fn(&[1, n, d], |i| 2.0 * h.data[i]));
        let ln = g.layer_norm(doubled, vars.norm_gain, vars.norm_bias).unwrap();
        assert!(out.max_abs_diff(g.real(ln).unwrap()) < 1e-9);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let schedule = build_ramp_schedule(5, 2, 0.5, SlideMode::Mode4).unwrap();
        let mut g = Graph::new();
        let hv = g.constant(Tensor::zeros(&[2, 8, 3]));
        let vars = mixer_vars(&mut g, gaussian_filter(5, 3, &mut rng), gaussian_filter(5, 3, &mut rng), 3);
        let mut ctx = DropoutCtx { train: false, rng: &mut rng };
        let out = filter_mixer_forward(&mut g, hv, 1, &vars, &schedule, 0.5, 0.0, &mut ctx).unwrap();
        assert!(g.real(out).unwrap().data.iter().all(|v| *v == 0.0));
        let mut ctx = DropoutCtx { train: false, rng: &mut ChaCha8Rng::seed_from_u64(0) };
        assert!(filter_mixer_forward(&mut g, hv, 2, &vars, &schedule, 0.5, 0.0, &mut ctx).is_err());
    }

    #[test]
    fn amplitude_of_unit_filter_is_window_indicator() {
        let schedule = RampSchedule {
            bins: 8,
            dynamic: vec![FilterWindow { layer: 0, start: 2, end: 5 }],
            fixed: vec![FilterWindow { layer: 0, start: 0, end: 8 }],
            alpha: 0.375,
            beta: 1.0,
            mode: SlideMode::Mode4,
        };
        let params = vec![FilterParams { w_dynamic: ComplexTensor::<f64>::ones(&[8, 3]), w_static: ComplexTensor::zeros(&[8, 3]) }];
        let amp = filter_amplitude(&params, &schedule).unwrap();
        assert_eq!(amp.dynamic[0], vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(amp.fixed[0].iter().all(|a| *a == 0.0));
        assert_eq!(amp.differential[0][3], -1.0);
    }

    #[test]
    fn amplitude_matches_mean_modulus_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let schedule = build_ramp_schedule(9, 2, 0.3, SlideMode::Mode4).unwrap();
        let params: Vec<FilterParams<f64>> = (0..2).map(|_| FilterParams::init(9, 4, &mut rng)).collect();
        let amp = filter_amplitude(&params, &schedule).unwrap();
        for l in 0..2 {
            for k in 0..9 {
                let mut acc = 0.0;
                for c in 0..4 {
                    let z = params[l].w_static.get(k * 4 + c);
                    acc += (z.re * z.re + z.im * z.im).sqrt();
                }
                let expect = if schedule.fixed[l].contains(k) { acc / 4.0 } else { 0.0 };
                assert!((amp.fixed[l][k] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn amplitude_csv_schema() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let schedule = build_ramp_schedule(5, 2, 0.5, SlideMode::Mode4).unwrap();
        let params: Vec<FilterParams<f64>> = (0..2).map(|_| FilterParams::init(5, 2, &mut rng)).collect();
        let amp = filter_amplitude(&params, &schedule).unwrap();
        let mut buf = Vec::new();
        amp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("layer,filter_kind,bin,amplitude"));
        assert_eq!(lines.count(), 2 * 2 * 5);
        assert!(amp.render_text().lines().count() == 4);
    }
}
