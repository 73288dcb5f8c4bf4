//! Real-input discrete Fourier transforms along the sequence axis.
//!
//! Tensors are laid out `[..., N, d]`: the transform runs down each of the `d`
//! feature columns independently, and any leading dimensions are treated as a
//! batch. A 1-D tensor `[N]` is a single column. The forward transform is
//! unnormalized and the inverse carries the `1/N` factor.
//!
//! Power-of-two lengths use an iterative radix-2 kernel; every other length
//! goes through Bluestein's chirp-z reformulation on a padded power-of-two
//! transform, so all lengths are `O(N log N)`.

use num_complex::Complex;

use crate::autodiff::{ComplexTensor, Tensor};
use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// Number of non-redundant bins of a real signal of length `n`.
pub fn half_len(n: usize) -> usize {
    n / 2 + 1
}

/// Precomputed twiddles for a complex transform of fixed length.
#[derive(Debug, Clone)]
pub struct FftPlan<T> {
    n: usize,
    kind: PlanKind<T>,
}

#[derive(Debug, Clone)]
enum PlanKind<T> {
    Radix2 { twiddles: Vec<Complex<T>>, bit_reverse: Vec<usize> },
    Bluestein { chirp: Vec<Complex<T>>, kernel: Vec<Complex<T>>, inner: Box<FftPlan<T>> },
}

impl<T: Scalar> FftPlan<T> {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "transform length must be positive");
        if n.is_power_of_two() {
            return Self { n, kind: radix2_kind(n) };
        }
        let m = (2 * n - 1).next_power_of_two();
        let inner = FftPlan::new(m);
        let two_n = 2 * n as u128;
        // w_k = exp(-i pi k^2 / n); k^2 is reduced mod 2n to keep the angle small.
        let chirp: Vec<Complex<T>> = (0..n)
            .map(|k| {
                let r = (k as u128 * k as u128) % two_n;
                let angle = -T::PI() * T::lit(r as f64) / T::lit(n as f64);
                Complex::new(angle.cos(), angle.sin())
            })
            .collect();
        let mut kernel = vec![Complex::new(T::zero(), T::zero()); m];
        kernel[0] = chirp[0].conj();
        for k in 1..n {
            kernel[k] = chirp[k].conj();
            kernel[m - k] = chirp[k].conj();
        }
        inner.forward(&mut kernel);
        Self { n, kind: PlanKind::Bluestein { chirp, kernel, inner: Box::new(inner) } }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place `X_k = sum_n x_n exp(-2 pi i n k / N)`.
    pub fn forward(&self, buf: &mut [Complex<T>]) {
        assert_eq!(buf.len(), self.n, "buffer length must match plan length");
        match &self.kind {
            PlanKind::Radix2 { twiddles, bit_reverse } => radix2(buf, twiddles, bit_reverse),
            PlanKind::Bluestein { chirp, kernel, inner } => {
                let m = inner.len();
                let mut work = vec![Complex::new(T::zero(), T::zero()); m];
                for (k, w) in work.iter_mut().take(self.n).enumerate() {
                    *w = buf[k] * chirp[k];
                }
                inner.forward(&mut work);
                for (w, k) in work.iter_mut().zip(kernel) {
                    *w *= *k;
                }
                inner.inverse(&mut work);
                let scale = T::one() / T::lit(m as f64);
                for k in 0..self.n {
                    buf[k] = work[k] * chirp[k] * scale;
                }
            }
        }
    }

    /// In-place unnormalized inverse: `x_n = sum_k X_k exp(+2 pi i n k / N)`.
    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        buf.iter_mut().for_each(|c| *c = c.conj());
        self.forward(buf);
        buf.iter_mut().for_each(|c| *c = c.conj());
    }

    /// [`FftPlan::forward`] applied to `width` interleaved signals at once.
    /// `re` and `im` hold `n` rows of `width` values; row `t` is sample `t`
    /// of every signal, so each butterfly sweeps contiguous memory.
    pub fn forward_rows(&self, re: &mut [T], im: &mut [T], width: usize) {
        assert_eq!(re.len(), self.n * width, "buffer must hold n rows");
        assert_eq!(im.len(), re.len(), "planes must match");
        match &self.kind {
            PlanKind::Radix2 { twiddles, bit_reverse } => radix2_rows(re, im, width, twiddles, bit_reverse),
            PlanKind::Bluestein { chirp, kernel, inner } => {
                let m = inner.len();
                let mut wr = vec![T::zero(); m * width];
                let mut wi = vec![T::zero(); m * width];
                for k in 0..self.n {
                    let w = chirp[k];
                    for c in 0..width {
                        let (a, b) = (re[k * width + c], im[k * width + c]);
                        wr[k * width + c] = a * w.re - b * w.im;
                        wi[k * width + c] = a * w.im + b * w.re;
                    }
                }
                inner.forward_rows(&mut wr, &mut wi, width);
                for (k, w) in kernel.iter().enumerate() {
                    for c in 0..width {
                        let (a, b) = (wr[k * width + c], wi[k * width + c]);
                        wr[k * width + c] = a * w.re - b * w.im;
                        wi[k * width + c] = a * w.im + b * w.re;
                    }
                }
                wi.iter_mut().for_each(|v| *v = -*v);
                inner.forward_rows(&mut wr, &mut wi, width);
                let scale = T::one() / T::lit(m as f64);
                for k in 0..self.n {
                    let w = chirp[k];
                    for c in 0..width {
                        // conj of the inner forward completes the inverse
                        let (a, b) = (wr[k * width + c], -wi[k * width + c]);
                        re[k * width + c] = (a * w.re - b * w.im) * scale;
                        im[k * width + c] = (a * w.im + b * w.re) * scale;
                    }
                }
            }
        }
    }

    /// Row-batched counterpart of [`FftPlan::inverse`].
    pub fn inverse_rows(&self, re: &mut [T], im: &mut [T], width: usize) {
        im.iter_mut().for_each(|v| *v = -*v);
        self.forward_rows(re, im, width);
        im.iter_mut().for_each(|v| *v = -*v);
    }
}

fn radix2_kind<T: Scalar>(n: usize) -> PlanKind<T> {
    let twiddles = (0..n / 2)
        .map(|k| {
            let angle = -T::TAU() * T::lit(k as f64) / T::lit(n as f64);
            Complex::new(angle.cos(), angle.sin())
        })
        .collect();
    let bits = n.trailing_zeros();
    let bit_reverse = (0..n)
        .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
        .collect();
    PlanKind::Radix2 { twiddles, bit_reverse }
}

fn radix2<T: Scalar>(buf: &mut [Complex<T>], twiddles: &[Complex<T>], bit_reverse: &[usize]) {
    let n = buf.len();
    for (i, &j) in bit_reverse.iter().enumerate() {
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let w = twiddles[j * stride];
                let a = buf[start + j];
                let b = buf[start + j + half] * w;
                buf[start + j] = a + b;
                buf[start + j + half] = a - b;
            }
        }
        len *= 2;
    }
}

fn radix2_rows<T: Scalar>(re: &mut [T], im: &mut [T], width: usize, twiddles: &[Complex<T>], bit_reverse: &[usize]) {
    let n = bit_reverse.len();
    for (i, &j) in bit_reverse.iter().enumerate() {
        if i < j {
            for c in 0..width {
                re.swap(i * width + c, j * width + c);
                im.swap(i * width + c, j * width + c);
            }
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let w = twiddles[j * stride];
                let (lo, hi) = ((start + j) * width, (start + j + half) * width);
                let (re_lo, re_hi) = re.split_at_mut(hi);
                let (im_lo, im_hi) = im.split_at_mut(hi);
                let (ar, ai) = (&mut re_lo[lo..lo + width], &mut im_lo[lo..lo + width]);
                let (br, bi) = (&mut re_hi[..width], &mut im_hi[..width]);
                for c in 0..width {
                    let xr = br[c] * w.re - bi[c] * w.im;
                    let xi = br[c] * w.im + bi[c] * w.re;
                    br[c] = ar[c] - xr;
                    bi[c] = ai[c] - xi;
                    ar[c] += xr;
                    ai[c] += xi;
                }
            }
        }
        len *= 2;
    }
}

/// Splits a `[..., N, d]` shape into `(batch, N, d)`.
pub(crate) fn sequence_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        0 => bail!(Dimension, "cannot transform a scalar"),
        1 => Ok((1, shape[0], 1)),
        k => Ok((shape[..k - 2].iter().product(), shape[k - 2], shape[k - 1])),
    }
}

/// Forward half-spectrum of every column of a `[B, N, d]` buffer into
/// `[B, M, d]` planes.
pub(crate) fn rfft_kernel<T: Scalar>(
    plan: &FftPlan<T>,
    x: &[T],
    batch: usize,
    d: usize,
    out_re: &mut [T],
    out_im: &mut [T],
) {
    let n = plan.len();
    let m = half_len(n);
    let mut im = vec![T::zero(); n * d];
    for b in 0..batch {
        let mut re = x[b * n * d..(b + 1) * n * d].to_vec();
        im.iter_mut().for_each(|v| *v = T::zero());
        plan.forward_rows(&mut re, &mut im, d);
        out_re[b * m * d..(b + 1) * m * d].copy_from_slice(&re[..m * d]);
        out_im[b * m * d..(b + 1) * m * d].copy_from_slice(&im[..m * d]);
    }
}

/// Inverse of [`rfft_kernel`]: rebuilds the conjugate-symmetric spectrum,
/// ignoring the imaginary parts of the self-conjugate DC and Nyquist bins.
pub(crate) fn irfft_kernel<T: Scalar>(
    plan: &FftPlan<T>,
    re: &[T],
    im: &[T],
    batch: usize,
    d: usize,
    out: &mut [T],
) {
    let n = plan.len();
    let m = half_len(n);
    let scale = T::one() / T::lit(n as f64);
    let mut fr = vec![T::zero(); n * d];
    let mut fi = vec![T::zero(); n * d];
    for b in 0..batch {
        let base = b * m * d;
        fr[..m * d].copy_from_slice(&re[base..base + m * d]);
        fi[..m * d].copy_from_slice(&im[base..base + m * d]);
        fi[..d].iter_mut().for_each(|v| *v = T::zero());
        if n % 2 == 0 {
            fi[(m - 1) * d..m * d].iter_mut().for_each(|v| *v = T::zero());
        }
        for k in m..n {
            for c in 0..d {
                fr[k * d + c] = fr[(n - k) * d + c];
                fi[k * d + c] = -fi[(n - k) * d + c];
            }
        }
        plan.inverse_rows(&mut fr, &mut fi, d);
        for (o, v) in out[b * n * d..(b + 1) * n * d].iter_mut().zip(&fr) {
            *o = *v * scale;
        }
    }
}

/// Half-spectrum of a real sequence tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T> {
    /// `[..., M, d]` bins.
    pub inner: ComplexTensor<T>,
    /// Length `N` of the time-domain signal.
    pub origin_length: usize,
}

impl<T: Scalar> Spectrum<T> {
    pub fn bins(&self) -> usize {
        half_len(self.origin_length)
    }
}

fn spectrum_shape(shape: &[usize], m: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    if out.len() == 1 {
        out[0] = m;
    } else {
        let k = out.len();
        out[k - 2] = m;
    }
    out
}

/// Half-spectrum of `x` along its sequence axis.
pub fn rfft<T: Scalar>(x: &Tensor<T>) -> Result<Spectrum<T>> {
    let (batch, n, d) = sequence_layout(&x.shape)?;
    if n == 0 {
        bail!(Dimension, "sequence length must be at least 1");
    }
    let plan = FftPlan::new(n);
    let m = half_len(n);
    let mut re = vec![T::zero(); batch * m * d];
    let mut im = vec![T::zero(); batch * m * d];
    rfft_kernel(&plan, &x.data, batch, d, &mut re, &mut im);
    let inner = ComplexTensor::new(spectrum_shape(&x.shape, m), re, im)?;
    Ok(Spectrum { inner, origin_length: n })
}

/// Time-domain signal of length `n` from a half-spectrum.
pub fn irfft<T: Scalar>(spectrum: &Spectrum<T>, n: usize) -> Result<Tensor<T>> {
    if spectrum.origin_length != n {
        bail!(Contract, "spectrum was produced from length {} but {} was requested", spectrum.origin_length, n);
    }
    let (batch, m, d) = sequence_layout(&spectrum.inner.shape)?;
    if m != half_len(n) {
        bail!(Contract, "{m} bins are inconsistent with signal length {n}");
    }
    let plan = FftPlan::new(n);
    let mut out = vec![T::zero(); batch * n * d];
    irfft_kernel(&plan, &spectrum.inner.re, &spectrum.inner.im, batch, d, &mut out);
    let mut shape = spectrum.inner.shape.clone();
    let k = shape.len();
    if k == 1 {
        shape[0] = n;
    } else {
        shape[k - 2] = n;
    }
    Tensor::new(shape, out)
}

/// Direct `O(N^2)` evaluation of the full DFT.
pub fn naive_dft<T: Scalar>(x: &[T]) -> Vec<Complex<T>> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter().enumerate().fold(Complex::new(T::zero(), T::zero()), |acc, (t, &v)| {
                let r = (t * k) % n;
                let angle = -T::TAU() * T::lit(r as f64) / T::lit(n as f64);
                acc + Complex::new(angle.cos(), angle.sin()) * v
            })
        })
        .collect()
}

/// Direct periodic convolution `y[n] = sum_m f[m] x[(n - m) mod N]`.
pub fn circular_convolve<T: Scalar>(f: &[T], x: &[T]) -> Result<Vec<T>> {
    if f.len() != x.len() {
        bail!(Dimension, "kernel length {} != signal length {}", f.len(), x.len());
    }
    let n = x.len();
    Ok((0..n)
        .map(|t| (0..n).map(|m| f[m] * x[(t + n - m) % n]).sum())
        .collect())
}
