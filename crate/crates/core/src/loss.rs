//! Reconstruction and classification losses.

use crate::error::{invalid, Result};
use crate::tensor::ImageTensor;

pub fn mse(x: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    x.check_same_shape(reference, "mse")?;
    if x.is_empty() {
        return invalid("mse of empty tensors");
    }
    Ok(x.data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

/// PSNR in dB with unit peak. Identical images give `+inf`.
pub fn psnr(x: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    let m = mse(x, reference)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

/// Mean of the finite entries; infinite PSNRs (exact matches) are left out.
pub fn mean_finite(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn cross_entropy_value(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        ));
    }
    Ok(cross_entropy_value(logits, label))
}
