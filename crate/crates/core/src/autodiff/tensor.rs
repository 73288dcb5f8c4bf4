use num_complex::Complex;

use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// Dense row-major real array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(
                Dimension,
                "shape {:?} holds {} values but {} were given",
                shape,
                numel,
                data.len()
            );
        }
        Ok(Self { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); numel], grad: None, requires_grad: false }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::one(); numel], grad: None, requires_grad: false }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v], grad: None, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&s| s == 1)
    }

    /// Size of the trailing dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            bail!(Dimension, "gradient length {} != tensor length {}", g.len(), self.data.len());
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Complex array stored as split real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor<T> {
    pub shape: Vec<usize>,
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn new(shape: Vec<usize>, re: Vec<T>, im: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if re.len() != numel || im.len() != numel {
            bail!(
                Dimension,
                "shape {:?} holds {} values but planes have {} and {}",
                shape,
                numel,
                re.len(),
                im.len()
            );
        }
        Ok(Self { shape, re, im })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), re: vec![T::zero(); numel], im: vec![T::zero(); numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), re: vec![T::one(); numel], im: vec![T::zero(); numel] }
    }

    pub fn from_complex(shape: &[usize], values: &[Complex<T>]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|c| c.re).collect(),
            values.iter().map(|c| c.im).collect(),
        )
    }

    pub fn numel(&self) -> usize {
        self.re.len()
    }

    pub fn get(&self, i: usize) -> Complex<T> {
        Complex::new(self.re[i], self.im[i])
    }

    pub fn set(&mut self, i: usize, v: Complex<T>) {
        self.re[i] = v.re;
        self.im[i] = v.im;
    }

    pub fn to_complex(&self) -> Vec<Complex<T>> {
        self.re.iter().zip(&self.im).map(|(&r, &i)| Complex::new(r, i)).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.to_complex()
            .iter()
            .zip(other.to_complex())
            .map(|(a, b)| (*a - b).norm())
            .fold(T::zero(), T::max)
    }
}

/// Checks that `small` equals `big` or is a suffix of it, returning how many
/// times `small` repeats to fill `big`.
pub(crate) fn broadcast_repeats(big: &[usize], small: &[usize]) -> Option<usize> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return None;
    }
    Some(big[..big.len() - small.len()].iter().product())
}
