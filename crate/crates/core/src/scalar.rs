//! Numeric abstractions.
//!
//! [`Scalar`] is the floating-point element type of every tensor, transform
//! and loss. [`BinRatio`] is the narrower contract the frequency ramp schedule
//! needs: exact comparisons and half-up rounding to integer bins, which lets
//! the schedule run over `f64` in production and over exact rationals in
//! oracle checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_rational::Ratio;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Error function, needed by the exact GELU.
    fn erf(self) -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c += a * b` for an `m x k` by `k x n` product over strided views.
    /// Every index reachable through the strides must lie inside the slices.
    fn gemm_acc(dims: (usize, usize, usize), a: (&[Self], isize, isize), b: (&[Self], isize, isize), c: (&mut [Self], isize, isize));
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows > 0 && cols > 0 {
        let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
        assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "strided view exceeds its buffer");
    }
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        fn gemm_acc(dims: (usize, usize, usize), a: (&[$t], isize, isize), b: (&[$t], isize, isize), c: (&mut [$t], isize, isize)) {
            let (m, k, n) = dims;
            check_extent(a.0.len(), m, k, a.1, a.2);
            check_extent(b.0.len(), k, n, b.1, b.2);
            check_extent(c.0.len(), m, n, c.1, c.2);
            if m == 0 || n == 0 {
                return;
            }
            // SAFETY: the extents checked above keep every strided access in bounds.
            unsafe { $f(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, 1.0, c.0.as_mut_ptr(), c.1, c.2) }
        }
    };
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }

    impl_gemm!(f64, matrixmultiply::dgemm);
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }

    impl_gemm!(f32, matrixmultiply::sgemm);
}

/// Ratio arithmetic used to place filter windows on the half-spectrum.
pub trait BinRatio: Copy + PartialOrd + Debug {
    fn from_count(n: usize) -> Self;
    fn zero() -> Self;
    fn one() -> Self;
    fn add(self, rhs: Self) -> Self;
    fn sub(self, rhs: Self) -> Self;
    fn mul(self, rhs: Self) -> Self;
    fn div(self, rhs: Self) -> Self;
    /// `floor(self + 1/2)`.
    fn round_half_up(self) -> i64;
    fn to_f64(self) -> f64;
}

macro_rules! float_bin_ratio {
    ($t:ty) => {
        impl BinRatio for $t {
            fn from_count(n: usize) -> Self {
                n as $t
            }
            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn add(self, rhs: Self) -> Self {
                self + rhs
            }
            fn sub(self, rhs: Self) -> Self {
                self - rhs
            }
            fn mul(self, rhs: Self) -> Self {
                self * rhs
            }
            fn div(self, rhs: Self) -> Self {
                self / rhs
            }
            fn round_half_up(self) -> i64 {
                // Decimal ratios such as 0.1 are not representable; nudge values
                // that sit within rounding noise of a half so they agree with
                // the exact rational result.
                let tol = 1e-9 * self.abs().max(1.0) as f64;
                ((self as f64) + 0.5 + tol).floor() as i64
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

float_bin_ratio!(f64);
float_bin_ratio!(f32);

impl BinRatio for Ratio<i64> {
    fn from_count(n: usize) -> Self {
        Ratio::from_integer(n as i64)
    }
    fn zero() -> Self {
        Ratio::from_integer(0)
    }
    fn one() -> Self {
        Ratio::from_integer(1)
    }
    fn add(self, rhs: Self) -> Self {
        self + rhs
    }
    fn sub(self, rhs: Self) -> Self {
        self - rhs
    }
    fn mul(self, rhs: Self) -> Self {
        self * rhs
    }
    fn div(self, rhs: Self) -> Self {
        self / rhs
    }
    fn round_half_up(self) -> i64 {
        (self + Ratio::new(1, 2)).floor().to_integer()
    }
    fn to_f64(self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}
