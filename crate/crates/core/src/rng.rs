//! Seeded random initialization.
//!
//! All randomness flows through a `ChaCha8Rng` so that equal seeds produce
//! bit-identical parameters and datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw via Box-Muller, deterministic for a given rng state.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Kaiming fan-in scaled normal init for conv kernels shaped
/// (out_channels, in_channels/groups, kh, kw).
pub fn kaiming_conv<S: Scalar>(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<S> {
    let fan_in = (shape.c * shape.h * shape.w) as f64;
    let std = (2.0 / fan_in).sqrt();
    let data = (0..shape.numel())
        .map(|_| S::from_f64(normal(rng) * std))
        .collect();
    Tensor::from_vec(shape, data).expect("kaiming init shape")
}

pub fn uniform_tensor<S: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: Shape,
    lo: f64,
    hi: f64,
) -> Tensor<S> {
    let data = (0..shape.numel())
        .map(|_| S::from_f64(lo + (hi - lo) * rng.random::<f64>()))
        .collect();
    Tensor::from_vec(shape, data).expect("uniform init shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_equal_draws() {
        let a: Tensor<f32> = kaiming_conv(&mut seeded(7), Shape::new(8, 4, 3, 3));
        let b: Tensor<f32> = kaiming_conv(&mut seeded(7), Shape::new(8, 4, 3, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn kaiming_scale_tracks_fan_in() {
        let t: Tensor<f64> = kaiming_conv(&mut seeded(3), Shape::new(64, 64, 3, 3));
        let n = t.numel() as f64;
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / n;
        let expected = 2.0 / (64.0 * 9.0);
        assert!(
            (var / expected - 1.0).abs() < 0.1,
            "var {var} vs {expected}"
        );
    }
}
