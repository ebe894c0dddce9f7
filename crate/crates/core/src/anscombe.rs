//! Generalized Anscombe transform for Poisson-Gaussian data and its
//! algebraic inverse.
//!
//! Forward: `z = (2 / alpha) * sqrt(max(alpha * y + 3/8 alpha^2 + sigma^2, 0))`.
//! Inverse: `y = alpha * z^2 / 4 - 3/8 alpha - sigma^2 / alpha`.

use crate::error::{invalid, Result};
use crate::imaging::NoiseParams;
use crate::tensor::ImageTensor;

fn check_alpha(noise: &NoiseParams) -> Result<()> {
    noise.validate()?;
    if noise.alpha <= 0.0 {
        return invalid("generalized Anscombe transform needs alpha > 0; bypass it for pure Gaussian noise");
    }
    Ok(())
}

#[inline]
fn radicand(y: f64, alpha: f64, sigma: f64) -> f64 {
    alpha * y + 0.375 * alpha * alpha + sigma * sigma
}

#[inline]
pub(crate) fn forward_scalar(y: f64, alpha: f64, sigma: f64) -> f64 {
    (2.0 / alpha) * radicand(y, alpha, sigma).max(0.0).sqrt()
}

/// dz/dy; zero at and beyond the radicand kink.
#[inline]
pub(crate) fn forward_derivative(y: f64, alpha: f64, sigma: f64) -> f64 {
    let r = radicand(y, alpha, sigma);
    if r > 0.0 {
        1.0 / r.sqrt()
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn inverse_scalar(z: f64, alpha: f64, sigma: f64) -> f64 {
    alpha * z * z / 4.0 - 0.375 * alpha - sigma * sigma / alpha
}

#[inline]
pub(crate) fn inverse_derivative(z: f64, alpha: f64) -> f64 {
    alpha * z / 2.0
}

pub fn gat_forward(y: &ImageTensor, noise: &NoiseParams) -> Result<ImageTensor> {
    check_alpha(noise)?;
    let (a, s) = (noise.alpha, noise.sigma);
    Ok(y.map(|v| forward_scalar(v, a, s)))
}

/// Algebraic inverse. Rejects negative inputs, which the forward map never produces.
pub fn gat_inverse(z: &ImageTensor, noise: &NoiseParams) -> Result<ImageTensor> {
    check_alpha(noise)?;
    if z.data().iter().any(|&v| v < 0.0) {
        return invalid("inverse Anscombe transform needs non-negative input");
    }
    let (a, s) = (noise.alpha, noise.sigma);
    Ok(z.map(|v| inverse_scalar(v, a, s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{simulate_capture, Rng};
    use proptest::prelude::*;

    fn np(alpha: f64, sigma: f64) -> NoiseParams {
        NoiseParams::new(alpha, sigma).unwrap()
    }

    #[test]
    fn zero_input_closed_form() {
        let z = gat_forward(&ImageTensor::zeros(1, 1, 1), &np(1.0, 0.0)).unwrap();
        assert!((z.data()[0] - 2.0 * 0.375f64.sqrt()).abs() < 1e-15);
        assert!((z.data()[0] - 1.224745).abs() < 1e-6);
    }

    #[test]
    fn radicand_zero_clamps() {
        let (a, s) = (0.5, 0.1);
        let y = -(0.375 * a * a + s * s) / a;
        let z = gat_forward(&ImageTensor::scalar(y), &np(a, s)).unwrap();
        assert_eq!(z.data()[0], 0.0);
        let below = gat_forward(&ImageTensor::scalar(y - 1.0), &np(a, s)).unwrap();
        assert_eq!(below.data()[0], 0.0);
    }

    #[test]
    fn inverse_at_zero() {
        let (a, s) = (0.02, 0.01);
        let y = gat_inverse(&ImageTensor::scalar(0.0), &np(a, s)).unwrap();
        assert!((y.data()[0] - (-0.375 * a - s * s / a)).abs() < 1e-15);
    }

    #[test]
    fn inverse_contract_unit_params() {
        let n = np(1.0, 1.0);
        let z = gat_forward(&ImageTensor::scalar(0.5), &n).unwrap();
        let y = gat_inverse(&z, &n).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_rejected() {
        let n = NoiseParams::new(0.0, 0.1).unwrap();
        assert!(gat_forward(&ImageTensor::scalar(0.5), &n).is_err());
        assert!(gat_inverse(&ImageTensor::scalar(0.5), &n).is_err());
    }

    #[test]
    fn negative_inverse_input_rejected() {
        assert!(gat_inverse(&ImageTensor::scalar(-0.1), &np(0.1, 0.1)).is_err());
    }

    #[test]
    fn round_trip_random_images() {
        let n = np(0.02, 0.01);
        let mut rng = Rng::new(8);
        let y = ImageTensor::from_fn(32, 32, 3, |_, _, _| rng.uniform());
        let back = gat_inverse(&gat_forward(&y, &n).unwrap(), &n).unwrap();
        assert!(back.max_abs_diff(&y) <= 1e-12);
    }

    #[test]
    fn stabilizes_variance() {
        let n = np(0.01, 0.005);
        let x = ImageTensor::filled(64, 64, 1, 0.4);
        let base = Rng::new(77);
        let mut vals = Vec::new();
        for i in 0..25 {
            let y = simulate_capture(&x, None, &n, &mut base.derive(i)).unwrap();
            vals.extend_from_slice(gat_forward(&y, &n).unwrap().data());
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
        assert!((0.9..=1.1).contains(&sd), "std {sd}");
    }

    #[test]
    fn derivatives_match_central_differences() {
        let (a, s) = (0.03, 0.02);
        for &y in &[0.05, 0.3, 0.9] {
            let h = 1e-6;
            let fd = (forward_scalar(y + h, a, s) - forward_scalar(y - h, a, s)) / (2.0 * h);
            let an = forward_derivative(y, a, s);
            assert!(((fd - an) / an).abs() < 1e-6);
            let z = forward_scalar(y, a, s);
            let fd = (inverse_scalar(z + h, a, s) - inverse_scalar(z - h, a, s)) / (2.0 * h);
            let an = inverse_derivative(z, a);
            assert!(((fd - an) / an).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn forward_is_monotone(a in 1e-3f64..1.0, s in 0.0f64..0.5, y1 in -1.0f64..2.0, dy in 0.0f64..1.0) {
            let y2 = y1 + dy;
            prop_assert!(forward_scalar(y1, a, s) <= forward_scalar(y2, a, s));
        }

        #[test]
        fn inverse_then_forward(a in 1e-3f64..1.0, s in 0.0f64..0.5, y in 0.0f64..1.0) {
            let z = forward_scalar(y, a, s);
            let back = inverse_scalar(z, a, s);
            prop_assert!((back - y).abs() <= 1e-12 * (1.0 + s * s / a));
            let z2 = forward_scalar(back, a, s);
            prop_assert!((z2 - z).abs() <= 1e-9 * z.max(1.0));
        }
    }
}
