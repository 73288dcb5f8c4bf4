mod common;

use proptest::prelude::*;
use slime4rec::autodiff::Tensor;
use slime4rec::spectral::{irfft, rfft};

#[test]
fn rfft_matches_direct_dft_and_inverts() {
    let s = common::spectral_suite(2024, 200, 100);
    assert!(s.dft_err < 1e-9, "dft error {}", s.dft_err);
    assert!(s.roundtrip_err < 1e-9, "round trip error {}", s.roundtrip_err);
}

#[test]
fn convolution_becomes_multiplication() {
    let s = common::spectral_suite(77, 0, 100);
    assert!(s.conv_spectrum_err < 1e-9, "{}", s.conv_spectrum_err);
    assert!(s.conv_time_err < 1e-9, "{}", s.conv_time_err);
}

/// Energy of the full spectrum rebuilt from the half spectrum.
fn half_spectrum_energy(x: &[f64]) -> f64 {
    let n = x.len();
    let s = rfft(&Tensor::new(vec![n], x.to_vec()).unwrap()).unwrap();
    let m = s.bins();
    (0..m)
        .map(|k| {
            let e = s.inner.re[k].powi(2) + s.inner.im[k].powi(2);
            let mirrored = k != 0 && !(n % 2 == 0 && k == n / 2);
            if mirrored { 2.0 * e } else { e }
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parseval(x in prop::collection::vec(-10.0f64..10.0, 1..80)) {
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq = half_spectrum_energy(&x) / x.len() as f64;
        prop_assert!((time - freq).abs() <= 1e-9 * time.max(1.0));
    }

    #[test]
    fn linearity(n in 1usize..70, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let x = common::random_tensor(&[n, 2], &mut r);
        let y = common::random_tensor(&[n, 2], &mut r);
        let mix = Tensor::new(vec![n, 2], x.data.iter().zip(&y.data).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let (sx, sy, sm) = (rfft(&x).unwrap(), rfft(&y).unwrap(), rfft(&mix).unwrap());
        for i in 0..sm.inner.re.len() {
            prop_assert!((sm.inner.re[i] - (a * sx.inner.re[i] + b * sy.inner.re[i])).abs() < 1e-9);
            prop_assert!((sm.inner.im[i] - (a * sx.inner.im[i] + b * sy.inner.im[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn round_trip_any_length(n in 1usize..300, seed in any::<u64>()) {
        let x = common::random_tensor(&[1, n, 1], &mut common::rng(seed));
        let back = irfft(&rfft(&x).unwrap(), n).unwrap();
        for (p, q) in back.data.iter().zip(&x.data) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }
}

#[test]
fn f32_transform_tracks_f64() {
    let x = common::random_tensor(&[3, 50, 4], &mut common::rng(5));
    let x32 = Tensor::new(x.shape.clone(), x.data.iter().map(|&v| v as f32).collect()).unwrap();
    let (s64, s32) = (rfft(&x).unwrap(), rfft(&x32).unwrap());
    for (a, b) in s64.inner.re.iter().zip(&s32.inner.re) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}
