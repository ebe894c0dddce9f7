//! Unrolled half-quadratic splitting with a learned per-pixel proximal network.
//!
//! Each stage computes filter responses `Cx`, maps them through the prox
//! network to get `z`, and then solves
//! `((lambda/beta) A^T A + C^T C + eps I) x = (lambda/beta) A^T y + C^T z`
//! exactly by division in the Fourier domain (all operators are circular).

use serde::{Deserialize, Serialize};

use crate::anscombe;
use crate::conv::{conv_plane_direct, ConvMode, Kernel};
use crate::error::{invalid, Error, Result};
use crate::fft;
use crate::imaging::{NoiseParams, Psf, Rng};
use crate::params::Parameterized;
use crate::tape::{conv_bank_forward, pixel_affine_forward, Tape, Var};
use crate::tensor::{ComplexField, ImageTensor};

/// Ridge added to the Fourier denominator whenever the filter bank is non-empty.
pub const RIDGE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Denoise,
    Deblur,
}

/// Prior filters `c_1..c_m`, stored as one `k x k x m` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    bank: ImageTensor,
}

impl FilterBank {
    pub fn new(bank: ImageTensor) -> Result<Self> {
        let (kh, kw, _) = bank.shape();
        if kh % 2 == 0 || kw % 2 == 0 {
            return invalid(format!("filter dimensions must be odd, got {kh}x{kw}"));
        }
        bank.ensure_finite("filter bank")?;
        Ok(Self { bank })
    }

    pub fn empty() -> Self {
        Self {
            bank: ImageTensor::zeros(1, 1, 0),
        }
    }

    /// The first `count` non-constant atoms of the orthonormal `size x size`
    /// 2D DCT-II basis, ordered by increasing frequency.
    pub fn dct(size: usize, count: usize) -> Result<Self> {
        if size % 2 == 0 || size == 0 {
            return invalid("filter size must be odd");
        }
        if count > size * size - 1 {
            return invalid(format!(
                "a {size}x{size} DCT basis has only {} non-constant atoms",
                size * size - 1
            ));
        }
        let mut freqs: Vec<(usize, usize)> = (0..size)
            .flat_map(|u| (0..size).map(move |v| (u, v)))
            .filter(|&(u, v)| u + v > 0)
            .collect();
        freqs.sort_by_key(|&(u, v)| (u + v, u));
        let n = size as f64;
        let basis = |u: usize, p: usize| {
            let a = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            a * (std::f64::consts::PI * (2 * p + 1) as f64 * u as f64 / (2.0 * n)).cos()
        };
        let bank = ImageTensor::from_fn(size, size, count, |p, q, k| {
            let (u, v) = freqs[k];
            basis(u, p) * basis(v, q)
        });
        Self::new(bank)
    }

    pub fn len(&self) -> usize {
        self.bank.channels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.bank.height(), self.bank.width())
    }

    pub fn kernel(&self, i: usize) -> Kernel {
        let (kh, kw) = self.kernel_size();
        Kernel::new(kh, kw, self.bank.plane(i).to_vec()).expect("filter plane shape")
    }

    pub fn as_tensor(&self) -> &ImageTensor {
        &self.bank
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        self.bank.data_mut()
    }
}

/// One per-pixel layer: `weight` is `out x in x 1`, `bias` is `out x 1 x 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxLayer {
    pub weight: ImageTensor,
    pub bias: ImageTensor,
}

impl ProxLayer {
    pub fn in_channels(&self) -> usize {
        self.weight.width()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.height()
    }
}

/// A stack of 1x1 convolutions with ReLU between layers (none after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxNet {
    layers: Vec<ProxLayer>,
}

impl ProxNet {
    pub fn new(layers: Vec<ProxLayer>) -> Result<Self> {
        if layers.is_empty() {
            return invalid("prox network needs at least one layer");
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.channels() != 1 || l.bias.shape() != (l.out_channels(), 1, 1) {
                return invalid(format!("prox layer {i} has malformed weight or bias"));
            }
            if i > 0 && layers[i - 1].out_channels() != l.in_channels() {
                return invalid(format!(
                    "prox layer {i} expects {} inputs but previous layer gives {}",
                    l.in_channels(),
                    layers[i - 1].out_channels()
                ));
            }
        }
        let net = Self { layers };
        if net.in_channels() != net.out_channels() {
            return invalid("prox network must map m channels back to m channels");
        }
        Ok(net)
    }

    /// Single identity layer with zero bias.
    pub fn identity(channels: usize) -> Self {
        let weight = ImageTensor::from_fn(channels, channels, 1, |i, j, _| (i == j) as u8 as f64);
        Self {
            layers: vec![ProxLayer {
                weight,
                bias: ImageTensor::zeros(channels, 1, 1),
            }],
        }
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn he_init(channels: usize, hidden: usize, layers: usize, rng: &mut Rng) -> Result<Self> {
        if layers == 0 {
            return invalid("prox network needs at least one layer");
        }
        let dims: Vec<usize> = (0..=layers)
            .map(|i| if i == 0 || i == layers { channels } else { hidden })
            .collect();
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                ProxLayer {
                    weight: ImageTensor::from_fn(fan_out, fan_in, 1, |_, _, _| std * rng.normal()),
                    bias: ImageTensor::zeros(fan_out, 1, 1),
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[ProxLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ProxLayer] {
        &mut self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.layers[self.layers.len() - 1].out_channels()
    }

    /// Applies the network to every pixel; channel groups of size `in_channels` share it.
    pub fn apply(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            cur = pixel_affine_forward(&cur, &l.weight, &l.bias)?;
            if i + 1 < self.layers.len() {
                cur = cur.map(|v| v.max(0.0));
            }
        }
        Ok(cur)
    }
}

/// One unrolled iteration. `lambda` and `beta` are stored as logarithms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HqsStage {
    pub log_lambda: f64,
    pub log_beta: f64,
    pub filters: FilterBank,
    pub prox: ProxNet,
    pub merge_colors: bool,
}

impl HqsStage {
    pub fn new(lambda: f64, beta: f64, filters: FilterBank, prox: ProxNet, merge_colors: bool) -> Result<Self> {
        if !(lambda > 0.0 && beta > 0.0) {
            return invalid("lambda and beta must be positive");
        }
        if !filters.is_empty() && prox.in_channels() != filters.len() {
            return invalid(format!(
                "prox network takes {} channels but the filter bank has {} filters",
                prox.in_channels(),
                filters.len()
            ));
        }
        Ok(Self {
            log_lambda: lambda.ln(),
            log_beta: beta.ln(),
            filters,
            prox,
            merge_colors,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp()
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    /// Data-term weight `lambda / beta` of the x-update.
    pub fn ratio(&self) -> f64 {
        (self.log_lambda - self.log_beta).exp()
    }

    fn response_channels(&self, colors: usize) -> usize {
        if self.merge_colors {
            self.filters.len()
        } else {
            self.filters.len() * colors
        }
    }
}

/// `Cx`: per-color filter responses (`color * m + i`), or summed over colors when merged.
pub fn filter_responses(stage: &HqsStage, x: &ImageTensor) -> Result<ImageTensor> {
    if stage.filters.is_empty() {
        return Ok(ImageTensor::zeros(x.height(), x.width(), 0));
    }
    conv_bank_forward(x, stage.filters.as_tensor(), stage.merge_colors)
}

/// `C^T z` for an image with `colors` channels. Merged responses are copied onto every color.
pub fn filter_adjoint(stage: &HqsStage, z: &ImageTensor, colors: usize) -> Result<ImageTensor> {
    let (h, w, zc) = z.shape();
    let m = stage.filters.len();
    if zc != stage.response_channels(colors) {
        return invalid(format!(
            "expected {} response channels, got {zc}",
            stage.response_channels(colors)
        ));
    }
    let (kh, kw) = stage.filters.kernel_size();
    let bank = stage.filters.as_tensor();
    let mut out = ImageTensor::zeros(h, w, colors);
    for color in 0..colors {
        for i in 0..m {
            let src = if stage.merge_colors { i } else { color * m + i };
            conv_plane_direct(
                z.plane(src),
                h,
                w,
                bank.plane(i),
                kh,
                kw,
                ConvMode::Adjoint,
                out.plane_mut(color),
            );
        }
    }
    Ok(out)
}

/// Applies the stage's prox network pixelwise to the filter responses.
pub fn prox_apply(stage: &HqsStage, responses: &ImageTensor) -> Result<ImageTensor> {
    let m = stage.prox.in_channels();
    if responses.channels() == 0 && stage.filters.is_empty() {
        return Ok(responses.clone());
    }
    if responses.channels() % m != 0 {
        return invalid(format!(
            "prox network takes groups of {m} channels, got {}",
            responses.channels()
        ));
    }
    stage.prox.apply(responses)
}

fn psf_spectrum(psf: Option<&Psf>, h: usize, w: usize) -> Result<ComplexField> {
    let kernel = psf.map(|p| p.kernel().clone()).unwrap_or_else(Kernel::identity);
    if kernel.height() > h || kernel.width() > w {
        return invalid("psf larger than image");
    }
    fft::fft2(&ImageTensor::new(h, w, 1, kernel.embed(h, w))?)
}

/// Exact x-update by inverse filtering.
///
/// `psf` is `None` in denoise mode (`A = I`). The result satisfies the
/// normal equations with a ridge of [`RIDGE`] when filters are present.
pub fn hqs_x_update(
    stage: &HqsStage,
    psf: Option<&Psf>,
    y: &ImageTensor,
    z: &ImageTensor,
) -> Result<ImageTensor> {
    let (h, w, colors) = y.shape();
    let m = stage.filters.len();
    if z.shape() != (h, w, stage.response_channels(colors)) && !(m == 0 && z.channels() == 0) {
        return invalid(format!(
            "z has shape {:?}, expected {:?}",
            z.shape(),
            (h, w, stage.response_channels(colors))
        ));
    }
    let n = h * w;
    let r = stage.ratio();
    let k = psf_spectrum(psf, h, w)?;
    let yf = fft::fft2(y)?;
    let mut den: Vec<f64> = (0..n)
        .map(|i| r * (k.re[i] * k.re[i] + k.im[i] * k.im[i]))
        .collect();
    let mut num = ComplexField::zeros(h, w, colors);
    for c in 0..colors {
        for i in 0..n {
            let (kr, ki) = (k.re[i], -k.im[i]);
            let (yr, yi) = (yf.re[c * n + i], yf.im[c * n + i]);
            num.re[c * n + i] = r * (kr * yr - ki * yi);
            num.im[c * n + i] = r * (kr * yi + ki * yr);
        }
    }
    if m > 0 {
        let (kh, kw) = stage.filters.kernel_size();
        if kh > h || kw > w {
            return invalid("filters larger than image");
        }
        let bank = stage.filters.as_tensor();
        let mut embedded = ImageTensor::zeros(h, w, m);
        for i in 0..m {
            crate::conv::embed_into(bank.plane(i), kh, kw, h, w, embedded.plane_mut(i));
        }
        let cf = fft::fft2(&embedded)?;
        let zf = fft::fft2(z)?;
        for i in 0..m {
            for idx in 0..n {
                let (cr, ci) = (cf.re[i * n + idx], cf.im[i * n + idx]);
                den[idx] += cr * cr + ci * ci;
            }
        }
        for d in den.iter_mut() {
            *d += RIDGE;
        }
        for c in 0..colors {
            for i in 0..m {
                let zc = if stage.merge_colors { i } else { c * m + i };
                for idx in 0..n {
                    let (cr, ci) = (cf.re[i * n + idx], -cf.im[i * n + idx]);
                    let (zr, zi) = (zf.re[zc * n + idx], zf.im[zc * n + idx]);
                    num.re[c * n + idx] += cr * zr - ci * zi;
                    num.im[c * n + idx] += cr * zi + ci * zr;
                }
            }
        }
    }
    if den.iter().any(|&d| d <= 0.0 || !d.is_finite()) {
        return Err(Error::Numerical(
            "x-update denominator has a non-positive frequency bin".into(),
        ));
    }
    for c in 0..colors {
        for idx in 0..n {
            num.re[c * n + idx] /= den[idx];
            num.im[c * n + idx] /= den[idx];
        }
    }
    fft::ifft2_real(&num)
}

/// The reconstruction unit: optional Anscombe sandwich around `N` HQS stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HqsPipeline {
    pub stages: Vec<HqsStage>,
    pub mode: Mode,
    pub psf: Option<Psf>,
    pub noise: NoiseParams,
    pub use_gat: bool,
}

/// Shape hyperparameters for building a fresh pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub mode: Mode,
    pub stages: usize,
    pub filter_count: usize,
    pub filter_size: usize,
    pub prox_layers: usize,
    pub prox_channels: usize,
    pub merge_colors: bool,
}

impl PipelineSpec {
    /// Single stage, 24 5x5 filters, 3-layer prox with 24 channels.
    pub fn default_for(mode: Mode) -> Self {
        Self {
            mode,
            stages: 1,
            filter_count: 24,
            filter_size: 5,
            prox_layers: 3,
            prox_channels: 24,
            merge_colors: mode == Mode::Deblur,
        }
    }
}

impl HqsPipeline {
    pub fn new(stages: Vec<HqsStage>, mode: Mode, psf: Option<Psf>, noise: NoiseParams) -> Result<Self> {
        noise.validate()?;
        if mode == Mode::Deblur {
            match &psf {
                None => return invalid("deblur mode needs a psf"),
                Some(p) if (p.kernel().sum() - 1.0).abs() > 1e-9 => {
                    return invalid("deblur psf must have unit DC gain")
                }
                _ => {}
            }
        }
        let psf = if mode == Mode::Denoise { None } else { psf };
        let use_gat = mode == Mode::Denoise && noise.alpha > 0.0;
        Ok(Self {
            stages,
            mode,
            psf,
            noise,
            use_gat,
        })
    }

    /// Zero stages and no transform: the identity map.
    pub fn identity() -> Self {
        Self {
            stages: Vec::new(),
            mode: Mode::Denoise,
            psf: None,
            noise: NoiseParams::none(),
            use_gat: false,
        }
    }

    /// Fresh pipeline: DCT filters, He-initialized prox, `lambda = beta = 1`.
    pub fn initialize(spec: &PipelineSpec, psf: Option<Psf>, noise: NoiseParams, seed: u64) -> Result<Self> {
        let base = Rng::new(seed);
        let stages = (0..spec.stages)
            .map(|s| {
                let mut rng = base.derive(s as u64);
                let filters = FilterBank::dct(spec.filter_size, spec.filter_count)?;
                let prox = ProxNet::he_init(spec.filter_count, spec.prox_channels, spec.prox_layers, &mut rng)?;
                HqsStage::new(1.0, 1.0, filters, prox, spec.merge_colors)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(stages, spec.mode, psf, noise)
    }

    fn operator_psf(&self) -> Option<&Psf> {
        match self.mode {
            Mode::Denoise => None,
            Mode::Deblur => self.psf.as_ref(),
        }
    }

    fn check_input(y: &ImageTensor) -> Result<()> {
        if y.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("pipeline input must lie in [0, 1]");
        }
        Ok(())
    }

    /// Reconstructs an image. The output is not clamped.
    pub fn run(&self, y: &ImageTensor) -> Result<ImageTensor> {
        Self::check_input(y)?;
        let data = if self.use_gat {
            anscombe::gat_forward(y, &self.noise)?
        } else {
            y.clone()
        };
        let mut x = data.clone();
        for stage in &self.stages {
            let responses = filter_responses(stage, &x)?;
            let z = prox_apply(stage, &responses)?;
            x = hqs_x_update(stage, self.operator_psf(), &data, &z)?;
        }
        let out = if self.use_gat {
            let (a, s) = (self.noise.alpha, self.noise.sigma);
            x.map(|v| anscombe::inverse_scalar(v.max(0.0), a, s))
        } else {
            x
        };
        out.ensure_finite("pipeline output")?;
        Ok(out)
    }

    /// Records the forward pass on a tape. Returns the output node and the
    /// parameter leaves in [`Parameterized`] order; parameters are constants
    /// unless `trainable`.
    pub fn record(&self, tape: &mut Tape, y: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let (h, w, colors) = tape.real(y).shape();
        let mut params = Vec::new();
        let data = if self.use_gat {
            tape.gat(y, self.noise.alpha, self.noise.sigma)?
        } else {
            y
        };
        let mut x = data;
        if !self.stages.is_empty() {
            let k_kernel = self
                .operator_psf()
                .map(|p| p.kernel().clone())
                .unwrap_or_else(Kernel::identity);
            let kk = tape.constant(ImageTensor::new(
                k_kernel.height(),
                k_kernel.width(),
                1,
                k_kernel.data().to_vec(),
            )?);
            let k_plane = tape.embed(kk, h, w)?;
            let k_hat = tape.fft2(k_plane)?;
            let k_abs2 = tape.abs2(k_hat)?;
            let y_hat = tape.fft2(data)?;
            let ky = tape.cmul(k_hat, y_hat, true)?;
            for stage in &self.stages {
                let log_l = tape.leaf(ImageTensor::scalar(stage.log_lambda), trainable);
                let log_b = tape.leaf(ImageTensor::scalar(stage.log_beta), trainable);
                let filt = tape.leaf(stage.filters.as_tensor().clone(), trainable);
                params.extend([log_l, log_b, filt]);
                let mut layer_vars = Vec::new();
                for l in stage.prox.layers() {
                    let wv = tape.leaf(l.weight.clone(), trainable);
                    let bv = tape.leaf(l.bias.clone(), trainable);
                    params.extend([wv, bv]);
                    layer_vars.push((wv, bv));
                }
                let diff = tape.sub(log_l, log_b)?;
                let ratio = tape.exp(diff)?;
                let mut num = tape.scale(ky, ratio)?;
                let mut den = tape.scale(k_abs2, ratio)?;
                let m = stage.filters.len();
                if m > 0 {
                    let mut z = tape.conv_bank(x, filt, stage.merge_colors)?;
                    for (i, (wv, bv)) in layer_vars.iter().enumerate() {
                        z = tape.pixel_affine(z, *wv, *bv)?;
                        if i + 1 < layer_vars.len() {
                            z = tape.relu(z)?;
                        }
                    }
                    let c_plane = tape.embed(filt, h, w)?;
                    let c_hat = tape.fft2(c_plane)?;
                    let z_hat = tape.fft2(z)?;
                    let cz = tape.cmul(c_hat, z_hat, true)?;
                    let ctz = tape.group_sum(cz, m)?;
                    num = tape.add(num, ctz)?;
                    let c_abs2 = tape.abs2(c_hat)?;
                    let c_energy = tape.group_sum(c_abs2, m)?;
                    den = tape.add(den, c_energy)?;
                    den = tape.add_const(den, RIDGE)?;
                }
                let x_hat = tape.cdiv_real(num, den)?;
                x = tape.ifft2_real(x_hat)?;
                debug_assert_eq!(tape.real(x).shape(), (h, w, colors));
            }
        }
        let out = if self.use_gat {
            tape.gat_inverse(x, self.noise.alpha, self.noise.sigma)?
        } else {
            x
        };
        Ok((out, params))
    }
}

/// Convenience wrapper matching the op name used throughout the docs.
pub fn run_pipeline(pipeline: &HqsPipeline, y: &ImageTensor) -> Result<ImageTensor> {
    pipeline.run(y)
}

impl Parameterized for HqsPipeline {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            names.push(format!("stage{s}.log_lambda"));
            names.push(format!("stage{s}.log_beta"));
            names.push(format!("stage{s}.filters"));
            for l in 0..stage.prox.layers().len() {
                names.push(format!("stage{s}.prox{l}.weight"));
                names.push(format!("stage{s}.prox{l}.bias"));
            }
        }
        names
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for stage in &self.stages {
            out.push(std::slice::from_ref(&stage.log_lambda));
            out.push(std::slice::from_ref(&stage.log_beta));
            out.push(stage.filters.as_tensor().data());
            for l in stage.prox.layers() {
                out.push(l.weight.data());
                out.push(l.bias.data());
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for stage in &mut self.stages {
            out.push(std::slice::from_mut(&mut stage.log_lambda));
            out.push(std::slice::from_mut(&mut stage.log_beta));
            out.push(stage.filters.data_mut());
            for l in stage.prox.layers_mut() {
                out.push(l.weight.data_mut());
                out.push(l.bias.data_mut());
            }
        }
        out
    }
}
