//! Procedural texture-orientation classification task.
//!
//! Class `c` of `K` is a sinusoidal grating at orientation `pi c / K` and a
//! fixed high spatial frequency, shown inside a random smooth blob over a
//! noisy low-frequency background. Class evidence therefore lives almost
//! entirely in fine detail, which is what blur and low-light noise destroy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::hqs::HqsPipeline;
use crate::imaging::Rng;
use crate::params::Parameterized;
use crate::tape::{Tape, Var};
use crate::tensor::ImageTensor;

pub const MAX_CLASSES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169,
            Split::Val => 0x0076_616c,
        }
    }
}

/// Generation parameters. Missing JSON fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyParams {
    pub classes: usize,
    pub samples: usize,
    pub size: usize,
    pub channels: usize,
    /// Grating frequency in cycles per pixel.
    pub frequency: f64,
    /// Grating amplitude range (peak deviation from the local mean).
    pub amplitude: (f64, f64),
    /// Standard deviation of the background's pixel noise.
    pub background_noise: f64,
    pub split: Split,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            classes: 8,
            samples: 1000,
            size: 64,
            channels: 1,
            frequency: 0.3,
            amplitude: (0.15, 0.3),
            background_noise: 0.02,
            split: Split::Train,
        }
    }
}

impl ToyParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > MAX_CLASSES {
            return invalid(format!(
                "class count must be in 2..={MAX_CLASSES}, got {}",
                self.classes
            ));
        }
        if self.size < 8 || self.size % 4 != 0 {
            return invalid("image size must be a multiple of 4 and at least 8");
        }
        if self.channels != 1 && self.channels != 3 {
            return invalid("channels must be 1 or 3");
        }
        if !(self.frequency > 0.0 && self.frequency < 0.5) {
            return invalid("grating frequency must lie in (0, 0.5) cycles per pixel");
        }
        let (lo, hi) = self.amplitude;
        if !(0.0 <= lo && lo <= hi && hi <= 0.5) {
            return invalid("amplitude range must satisfy 0 <= lo <= hi <= 0.5");
        }
        if self.background_noise < 0.0 {
            return invalid("background noise must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub params: ToyParams,
    pub seed: u64,
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.params.classes
    }
}

fn render(params: &ToyParams, label: usize, rng: &mut Rng) -> ImageTensor {
    let n = params.size;
    let nf = n as f64;
    let tau = std::f64::consts::TAU;
    let theta = std::f64::consts::PI * label as f64 / params.classes as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    let freq = params.frequency * rng.uniform_range(0.97, 1.03);
    let phase = rng.uniform_range(0.0, tau);
    let amp = rng.uniform_range(params.amplitude.0, params.amplitude.1);

    // Low-frequency background: a few random cosines of 1-2 cycles per image.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let (u, v) = (rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0));
            (u / nf, v / nf, rng.uniform_range(0.0, tau), rng.uniform_range(0.03, 0.08))
        })
        .collect();
    let level = rng.uniform_range(0.35, 0.65);

    // Smooth blob: union of soft disks.
    let disks: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.uniform_range(0.3, 0.7) * nf,
                rng.uniform_range(0.3, 0.7) * nf,
                rng.uniform_range(0.18, 0.3) * nf,
            )
        })
        .collect();
    let tint: Vec<f64> = (0..params.channels)
        .map(|_| if params.channels == 1 { 1.0 } else { rng.uniform_range(0.8, 1.2) })
        .collect();
    let mut img = ImageTensor::zeros(n, n, params.channels);
    for i in 0..n {
        for j in 0..n {
            let (y, x) = (i as f64, j as f64);
            let bg = level
                + waves
                    .iter()
                    .map(|&(u, v, p, a)| a * (tau * (u * x + v * y) + p).cos())
                    .sum::<f64>();
            let d = disks
                .iter()
                .map(|&(cy, cx, r)| ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / r)
                .fold(f64::INFINITY, f64::min);
            let mask = 1.0 / (1.0 + ((d - 1.0) * 8.0).exp());
            let grating = amp * (tau * freq * (x * ct + y * st) + phase).cos();
            let noise = params.background_noise * rng.normal();
            for (k, t) in tint.iter().enumerate() {
                let v = (bg + mask * grating) * t + (1.0 - mask) * noise;
                img.set(i, j, k, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Generates a balanced dataset; sample `i` has label `i mod K` and its own
/// derived random stream, so regeneration is bit-identical and order-free.
pub fn generate_dataset(params: &ToyParams, seed: u64) -> Result<ToyDataset> {
    params.validate()?;
    let base = Rng::keyed(seed, params.split.stream());
    let (images, labels) = (0..params.samples)
        .into_par_iter()
        .map(|i| {
            let label = i % params.classes;
            (render(params, label, &mut base.derive(i as u64)), label)
        })
        .unzip();
    Ok(ToyDataset {
        params: params.clone(),
        seed,
        images,
        labels,
    })
}

/// conv3x3(16) + ReLU + pool, conv3x3(32) + ReLU + pool, dense(K).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyClassifier {
    pub classes: usize,
    pub size: usize,
    pub channels: usize,
    pub conv1_w: ImageTensor,
    pub conv1_b: ImageTensor,
    pub conv2_w: ImageTensor,
    pub conv2_b: ImageTensor,
    pub dense_w: ImageTensor,
    pub dense_b: ImageTensor,
}

pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 32;

impl ToyClassifier {
    /// He-normal weights, zero biases.
    pub fn new(classes: usize, size: usize, channels: usize, seed: u64) -> Result<Self> {
        if classes < 2 || classes > MAX_CLASSES {
            return invalid(format!("class count must be in 2..={MAX_CLASSES}"));
        }
        if size < 4 || size % 4 != 0 {
            return invalid("classifier input size must be a positive multiple of 4");
        }
        let base = Rng::keyed(seed, 0x636c_6173);
        let he = |h, w, c, fan_in: usize, stream: u64| {
            let mut rng = base.derive(stream);
            let std = (2.0 / fan_in as f64).sqrt();
            ImageTensor::from_fn(h, w, c, |_, _, _| std * rng.normal())
        };
        let flat = (size / 4) * (size / 4) * CONV2_CHANNELS;
        Ok(Self {
            classes,
            size,
            channels,
            conv1_w: he(3, 3, CONV1_CHANNELS * channels, 9 * channels, 1),
            conv1_b: ImageTensor::zeros(CONV1_CHANNELS, 1, 1),
            conv2_w: he(3, 3, CONV2_CHANNELS * CONV1_CHANNELS, 9 * CONV1_CHANNELS, 2),
            conv2_b: ImageTensor::zeros(CONV2_CHANNELS, 1, 1),
            dense_w: he(classes, flat, 1, flat, 3),
            dense_b: ImageTensor::zeros(classes, 1, 1),
        })
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        if x.shape() != (self.size, self.size, self.channels) {
            return invalid(format!(
                "classifier expects {}x{}x{} input, got {:?}",
                self.size,
                self.size,
                self.channels,
                x.shape()
            ));
        }
        Ok(())
    }

    /// Records the forward pass; returns logits and the parameter leaves in
    /// [`Parameterized`] order.
    pub fn record(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.real(x))?;
        let params: Vec<Var> = [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.dense_w,
            &self.dense_b,
        ]
        .into_iter()
        .map(|t| tape.leaf(t.clone(), trainable))
        .collect();
        let h = tape.conv2d(x, params[0], params[1])?;
        let h = tape.relu(h)?;
        let h = tape.maxpool2(h)?;
        let h = tape.conv2d(h, params[2], params[3])?;
        let h = tape.relu(h)?;
        let h = tape.maxpool2(h)?;
        let logits = tape.dense(h, params[4], params[5])?;
        Ok((logits, params))
    }

    pub fn classify(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (logits, _) = self.record(&mut tape, xv, false)?;
        Ok(tape.real(logits).data().to_vec())
    }
}

impl Parameterized for ToyClassifier {
    fn param_names(&self) -> Vec<String> {
        ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "dense.weight", "dense.bias"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.conv1_w.data(),
            self.conv1_b.data(),
            self.conv2_w.data(),
            self.conv2_b.data(),
            self.dense_w.data(),
            self.dense_b.data(),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.conv1_w.data_mut(),
            self.conv1_b.data_mut(),
            self.conv2_w.data_mut(),
            self.conv2_b.data_mut(),
            self.dense_w.data_mut(),
            self.dense_b.data_mut(),
        ]
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Top-1 accuracy, optionally passing each image through `pipeline` first.
pub fn accuracy(
    classifier: &ToyClassifier,
    images: &[ImageTensor],
    labels: &[usize],
    pipeline: Option<&HqsPipeline>,
) -> Result<f64> {
    if images.len() != labels.len() {
        return invalid("image and label counts differ");
    }
    if images.is_empty() {
        return invalid("accuracy of an empty set is undefined");
    }
    let hits = images
        .par_iter()
        .zip(labels)
        .map(|(img, &label)| -> Result<usize> {
            let input = match pipeline {
                Some(p) => p.run(img)?,
                None => img.clone(),
            };
            Ok((argmax(&classifier.classify(&input)?) == label) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / images.len() as f64)
}
