//! Camera image formation: PSF blur, Poisson-Gaussian noise, clipping, and
//! noise-parameter calibration from flat gray patches.

use serde::{Deserialize, Serialize};

use crate::conv::{circ_conv, ConvMode, Kernel};
use crate::error::{invalid, Result};
use crate::tensor::ImageTensor;

/// Poisson scale `alpha` and Gaussian read-noise std `sigma`, both in
/// normalized [0, 1] intensity units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub alpha: f64,
    pub sigma: f64,
}

impl NoiseParams {
    pub fn new(alpha: f64, sigma: f64) -> Result<Self> {
        let p = Self { alpha, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn none() -> Self {
        Self {
            alpha: 0.0,
            sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.sigma.is_finite()) {
            return invalid("noise parameters must be finite");
        }
        if self.alpha < 0.0 || self.sigma < 0.0 {
            return invalid(format!(
                "noise parameters must be non-negative (alpha={}, sigma={})",
                self.alpha, self.sigma
            ));
        }
        Ok(())
    }

    /// Variance of an unclipped capture at mean intensity `mean`.
    pub fn variance_at(&self, mean: f64) -> f64 {
        self.alpha * mean + self.sigma * self.sigma
    }
}

/// One light level of a noise table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub lux: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl NoiseLevel {
    pub fn params(&self) -> NoiseParams {
        NoiseParams {
            alpha: self.alpha,
            sigma: self.sigma,
        }
    }
}

/// Calibrated noise parameters per light level. No interpolation is done.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseTable {
    pub levels: Vec<NoiseLevel>,
}

impl NoiseTable {
    pub fn at_lux(&self, lux: f64) -> Option<NoiseParams> {
        self.levels
            .iter()
            .find(|l| l.lux == lux)
            .map(NoiseLevel::params)
    }
}

/// A normalized, non-negative lens point spread function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psf {
    pub(crate) kernel: Kernel,
    pub label: String,
}

impl Psf {
    /// Validates the kernel and rescales it to unit sum.
    ///
    /// Returns the PSF and the original kernel sum so callers can report
    /// large renormalizations.
    pub fn normalized(kernel: Kernel, label: impl Into<String>) -> Result<(Self, f64)> {
        if !kernel.is_odd() {
            return invalid(format!(
                "psf dimensions must be odd, got {}x{}",
                kernel.height(),
                kernel.width()
            ));
        }
        if kernel.data().iter().any(|v| !v.is_finite()) {
            return invalid("psf contains non-finite entries");
        }
        if kernel.data().iter().any(|&v| v < 0.0) {
            return invalid("psf contains negative entries");
        }
        let sum = kernel.sum();
        if sum <= 0.0 {
            return invalid("psf sums to zero");
        }
        let mut kernel = kernel;
        for v in kernel.data_mut() {
            *v /= sum;
        }
        Ok((
            Self {
                kernel,
                label: label.into(),
            },
            sum,
        ))
    }

    pub fn identity() -> Self {
        Self {
            kernel: Kernel::identity(),
            label: "identity".into(),
        }
    }

    /// Isotropic Gaussian PSF truncated to `size x size` (odd).
    pub fn gaussian(size: usize, std: f64, label: impl Into<String>) -> Result<Self> {
        if size % 2 == 0 {
            return invalid("psf size must be odd");
        }
        if std <= 0.0 {
            return invalid("gaussian psf std must be positive");
        }
        let c = (size / 2) as f64;
        let data = (0..size * size)
            .map(|idx| {
                let (p, q) = ((idx / size) as f64 - c, (idx % size) as f64 - c);
                (-(p * p + q * q) / (2.0 * std * std)).exp()
            })
            .collect();
        Ok(Self::normalized(Kernel::new(size, size, data)?, label)?.0)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }
}

/// Per-patch statistics and the fitted noise model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCurve {
    /// `(sample mean, sample variance)` per patch.
    pub samples: Vec<(f64, f64)>,
    pub fitted: NoiseParams,
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the linear fit.
    pub residual: f64,
    /// Set when the raw slope came out negative and alpha was clamped to 0.
    pub negative_slope: bool,
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream keyed by `(seed, stream)`.
///
/// Draw `n` of a stream is a pure function of `(seed, stream, n)`, so
/// per-image streams can be consumed in any order or in parallel.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    counter: u64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::keyed(seed, 0)
    }

    pub fn keyed(seed: u64, stream: u64) -> Self {
        Self {
            seed,
            stream,
            counter: 0,
            spare: None,
        }
    }

    /// Independent sub-stream, e.g. one per image index.
    pub fn derive(&self, index: u64) -> Self {
        Self::keyed(
            mix64(self.seed ^ mix64(self.stream.wrapping_add(SPLITMIX_GAMMA))),
            index,
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let key = mix64(self.seed.wrapping_mul(SPLITMIX_GAMMA) ^ mix64(self.stream));
        let out = mix64(key ^ self.counter.wrapping_mul(SPLITMIX_GAMMA).wrapping_add(1));
        self.counter += 1;
        out
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(s) = self.spare.take() {
            return s;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * t.sin());
        r * t.cos()
    }

    /// Poisson draw: inverse-CDF search below rate 30, rounded Gaussian above.
    pub fn poisson(&mut self, rate: f64) -> f64 {
        if rate <= 0.0 {
            return 0.0;
        }
        if rate < 30.0 {
            let u = self.uniform();
            let mut k = 0u32;
            let mut p = (-rate).exp();
            let mut cdf = p;
            while u > cdf && k < 1000 {
                k += 1;
                p *= rate / k as f64;
                cdf += p;
            }
            k as f64
        } else {
            (rate + rate.sqrt() * self.normal() + 0.5).floor().max(0.0)
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Simulates a capture `clip(alpha * Poisson((k * x) / alpha) + N(0, sigma^2))`.
///
/// Every channel uses the same PSF and noise parameters. With `alpha == 0`
/// the Poisson term is the blurred image itself.
pub fn simulate_capture(
    x: &ImageTensor,
    psf: Option<&Psf>,
    noise: &NoiseParams,
    rng: &mut Rng,
) -> Result<ImageTensor> {
    noise.validate()?;
    if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return invalid("scene intensities must lie in [0, 1]");
    }
    let blurred = match psf {
        Some(p) => circ_conv(x, p.kernel(), ConvMode::Forward)?,
        None => x.clone(),
    };
    let NoiseParams { alpha, sigma } = *noise;
    Ok(blurred.map_with(|v| {
        // blur can leave tiny negative round-off
        let v = v.max(0.0);
        let shot = if alpha > 0.0 {
            alpha * rng.poisson(v / alpha)
        } else {
            v
        };
        let read = if sigma > 0.0 { sigma * rng.normal() } else { 0.0 };
        (shot + read).clamp(0.0, 1.0)
    }))
}

/// Simulates captures for a batch, image `i` drawing from stream `(seed, i)`.
pub fn simulate_batch(
    images: &[ImageTensor],
    psf: Option<&Psf>,
    noise: &NoiseParams,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    let base = Rng::new(seed);
    images
        .iter()
        .enumerate()
        .map(|(i, x)| simulate_capture(x, psf, noise, &mut base.derive(i as u64)))
        .collect()
}

fn sample_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Fits the Poisson-Gaussian model to captures of flat gray patches.
///
/// Each entry pairs the patch's true gray level with its capture. True
/// levels must lie in [0.1, 0.8]. The per-patch sample moments are first
/// regressed as `variance = alpha * mean + sigma^2`; that estimate then
/// seeds a pixel-level maximum-likelihood fit which treats values clipped
/// to 0 or 1 as censored observations. `slope`, `intercept` and `residual`
/// describe the regression, `fitted` is the likelihood optimum.
pub fn fit_noise_curve(patches: &[(f64, ImageTensor)]) -> Result<NoiseCurve> {
    if patches.len() < 3 {
        return invalid(format!(
            "noise calibration needs at least 3 patches, got {}",
            patches.len()
        ));
    }
    let mut samples = Vec::with_capacity(patches.len());
    for (truth, img) in patches {
        if !(0.1..=0.8).contains(truth) {
            return invalid(format!(
                "patch gray level {truth} outside the unclipped range [0.1, 0.8]"
            ));
        }
        if img.len() < 2 {
            return invalid("each patch needs at least two pixels");
        }
        img.ensure_finite("calibration patch")?;
        samples.push(sample_moments(img.data()));
    }
    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mx) * (s.0 - mx)).sum();
    let sxy: f64 = samples.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let residual = (samples
        .iter()
        .map(|s| {
            let r = s.1 - (slope * s.0 + intercept);
            r * r
        })
        .sum::<f64>()
        / n)
        .sqrt();
    let negative_slope = slope < 0.0;
    if negative_slope {
        log::warn!("noise fit produced a negative slope ({slope:.3e}); clamping alpha to 0");
    }
    let max_var = samples.iter().fold(0.0f64, |m, s| m.max(s.1));
    let fitted = if max_var <= NOISELESS_VARIANCE {
        NoiseParams::none()
    } else if negative_slope {
        NoiseParams {
            alpha: 0.0,
            sigma: intercept.max(0.0).sqrt(),
        }
    } else {
        let start = (
            slope.max(1e-6),
            intercept.max(0.0).sqrt().max(1e-3 * max_var.sqrt()),
        );
        likelihood::refine(patches, start)
    };
    Ok(NoiseCurve {
        samples,
        fitted,
        slope,
        intercept,
        residual,
        negative_slope,
    })
}

/// Patch variances at or below this are treated as round-off.
const NOISELESS_VARIANCE: f64 = 1e-24;

mod likelihood {
    use statrs::function::erf::erfc;
    use statrs::function::gamma::ln_gamma;

    use super::NoiseParams;
    use crate::tensor::ImageTensor;

    const WINDOW_SIGMAS: f64 = 8.0;
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

    fn norm_cdf(x: f64) -> f64 {
        0.5 * erfc(-x / std::f64::consts::SQRT_2)
    }

    /// Negative log-likelihood of clipped Poisson-Gaussian captures.
    fn nll(patches: &[(f64, ImageTensor)], alpha: f64, sigma: f64) -> f64 {
        let mut total = 0.0;
        for (truth, img) in patches {
            let rate = truth / alpha;
            let spread = 10.0 * rate.sqrt() + 20.0;
            let k_lo = (rate - spread).max(0.0).floor() as usize;
            let k_hi = (rate + spread).ceil() as usize;
            let log_pmf: Vec<f64> = (k_lo..=k_hi)
                .map(|k| {
                    let kf = k as f64;
                    kf * rate.ln() - rate - ln_gamma(kf + 1.0)
                })
                .collect();
            let pmf: Vec<f64> = log_pmf.iter().map(|l| l.exp()).collect();
            let mut censored_low = None;
            let mut censored_high = None;
            for &y in img.data() {
                let p = if y <= 0.0 {
                    *censored_low.get_or_insert_with(|| {
                        (k_lo..=k_hi)
                            .zip(&pmf)
                            .map(|(k, p)| p * norm_cdf(-alpha * k as f64 / sigma))
                            .sum::<f64>()
                    })
                } else if y >= 1.0 {
                    *censored_high.get_or_insert_with(|| {
                        (k_lo..=k_hi)
                            .zip(&pmf)
                            .map(|(k, p)| p * norm_cdf((alpha * k as f64 - 1.0) / sigma))
                            .sum::<f64>()
                    })
                } else {
                    let lo = ((y - WINDOW_SIGMAS * sigma) / alpha).floor().max(k_lo as f64) as usize;
                    let hi = ((y + WINDOW_SIGMAS * sigma) / alpha).ceil().min(k_hi as f64);
                    if hi < lo as f64 {
                        0.0
                    } else {
                        (lo..=hi as usize)
                            .map(|k| {
                                let r = (y - alpha * k as f64) / sigma;
                                pmf[k - k_lo] * (-0.5 * r * r).exp()
                            })
                            .sum::<f64>()
                            * INV_SQRT_2PI
                            / sigma
                    }
                };
                total -= p.max(1e-300).ln();
            }
        }
        total
    }

    /// Nelder-Mead over `(ln alpha, ln sigma)` starting from `start`.
    pub(super) fn refine(patches: &[(f64, ImageTensor)], start: (f64, f64)) -> NoiseParams {
        let f = |p: [f64; 2]| {
            let v = nll(patches, p[0].exp(), p[1].exp());
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };
        let x0 = [start.0.ln(), start.1.ln()];
        let mut simplex = [x0, [x0[0] + 0.1, x0[1]], [x0[0], x0[1] + 0.2]];
        let mut values = simplex.map(f);
        for _ in 0..400 {
            let mut order = [0, 1, 2];
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.map(|i| simplex[i]);
            values = order.map(|i| values[i]);
            let size = (1..3)
                .map(|i| (simplex[i][0] - simplex[0][0]).abs().max((simplex[i][1] - simplex[0][1]).abs()))
                .fold(0.0, f64::max);
            if size < 1e-5 && (values[2] - values[0]).abs() < 1e-6 {
                break;
            }
            let centroid = [
                0.5 * (simplex[0][0] + simplex[1][0]),
                0.5 * (simplex[0][1] + simplex[1][1]),
            ];
            let along = |t: f64| {
                [
                    centroid[0] + t * (simplex[2][0] - centroid[0]),
                    centroid[1] + t * (simplex[2][1] - centroid[1]),
                ]
            };
            let reflected = along(-1.0);
            let fr = f(reflected);
            if fr < values[0] {
                let expanded = along(-2.0);
                let fe = f(expanded);
                if fe < fr {
                    simplex[2] = expanded;
                    values[2] = fe;
                } else {
                    simplex[2] = reflected;
                    values[2] = fr;
                }
            } else if fr < values[1] {
                simplex[2] = reflected;
                values[2] = fr;
            } else {
                let contracted = if fr < values[2] { along(-0.5) } else { along(0.5) };
                let fc = f(contracted);
                if fc < values[2].min(fr) {
                    simplex[2] = contracted;
                    values[2] = fc;
                } else {
                    for i in 1..3 {
                        simplex[i] = [
                            0.5 * (simplex[0][0] + simplex[i][0]),
                            0.5 * (simplex[0][1] + simplex[i][1]),
                        ];
                        values[i] = f(simplex[i]);
                    }
                }
            }
        }
        let best = (0..3).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
        NoiseParams {
            alpha: simplex[best][0].exp(),
            sigma: simplex[best][1].exp(),
        }
    }
}
