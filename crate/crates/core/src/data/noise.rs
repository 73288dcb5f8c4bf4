use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// Adds `Uniform(-epsilon, epsilon)` to every element.
pub fn inject_noise<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, epsilon: f64, rng: &mut R) -> Result<Tensor<T>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        bail!(Config, "noise epsilon must be finite and nonnegative, got {epsilon}");
    }
    let mut out = x.clone();
    out.grad = None;
    if epsilon == 0.0 {
        return Ok(out);
    }
    for v in &mut out.data {
        *v += T::lit(rng.random_range(-epsilon..=epsilon));
    }
    Ok(out)
}

/// Seeded form of [`inject_noise`].
pub fn inject_noise_seeded<T: Scalar>(x: &Tensor<T>, epsilon: f64, seed: u64) -> Result<Tensor<T>> {
    inject_noise(x, epsilon, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epsilon_is_identity() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3 - 1.0);
        assert_eq!(inject_noise_seeded(&x, 0.0, 9).unwrap().data, x.data);
    }

    #[test]
    fn perturbation_is_bounded_and_reproducible() {
        let x = Tensor::from_fn(&[50, 8], |i| (i as f64).sin());
        let a = inject_noise_seeded(&x, 0.1, 3).unwrap();
        let b = inject_noise_seeded(&x, 0.1, 3).unwrap();
        assert_eq!(a.data, b.data);
        assert!(a.data.iter().zip(&x.data).all(|(p, q)| (p - q).abs() <= 0.1));
        assert!(a.data != x.data);
        assert!(inject_noise_seeded(&x, -0.1, 3).is_err());
    }
}
