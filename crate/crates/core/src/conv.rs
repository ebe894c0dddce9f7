//! Circular (periodic) 2D convolution.
//!
//! Kernels are centered at `(kh / 2, kw / 2)`. Forward mode is convolution,
//! adjoint mode is the transpose operator (correlation). Small kernels run a
//! direct sliding window over a wrap-padded copy of each plane; kernels with
//! more than [`DIRECT_MAX_AREA`] taps go through the FFT.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fft;
use crate::tensor::{ComplexField, ImageTensor};

pub const DIRECT_MAX_AREA: usize = 25;

/// A 2D real filter kernel stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    Forward,
    Adjoint,
}

impl Kernel {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid("kernel dimensions must be non-zero");
        }
        if data.len() != height * width {
            return invalid(format!(
                "kernel data length {} does not match {}x{}",
                data.len(),
                height,
                width
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn identity() -> Self {
        Self {
            height: 1,
            width: 1,
            data: vec![1.0],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.data[p * self.width + q]
    }

    pub fn is_odd(&self) -> bool {
        self.height % 2 == 1 && self.width % 2 == 1
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    /// Places the kernel in an `h x w` plane so that its center lands on (0, 0).
    pub fn embed(&self, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        embed_into(&self.data, self.height, self.width, h, w, &mut out);
        out
    }
}

/// Circularly embeds a `kh x kw` kernel into an `h x w` plane, accumulating.
pub fn embed_into(kernel: &[f64], kh: usize, kw: usize, h: usize, w: usize, out: &mut [f64]) {
    let (ci, cj) = ((kh / 2) as isize, (kw / 2) as isize);
    for p in 0..kh {
        let r = (p as isize - ci).rem_euclid(h as isize) as usize;
        for q in 0..kw {
            let c = (q as isize - cj).rem_euclid(w as isize) as usize;
            out[r * w + c] += kernel[p * kw + q];
        }
    }
}

/// Inverse of [`embed_into`] as a linear map: gathers the kernel taps back out.
pub fn gather_from(plane: &[f64], h: usize, w: usize, kh: usize, kw: usize, out: &mut [f64]) {
    let (ci, cj) = ((kh / 2) as isize, (kw / 2) as isize);
    for p in 0..kh {
        let r = (p as isize - ci).rem_euclid(h as isize) as usize;
        for q in 0..kw {
            let c = (q as isize - cj).rem_euclid(w as isize) as usize;
            out[p * kw + q] += plane[r * w + c];
        }
    }
}

/// Wrap-pads a plane to `(h + kh - 1) x (w + kw - 1)` with the given origin offset.
fn wrap_pad(x: &[f64], h: usize, w: usize, kh: usize, kw: usize, off: (usize, usize)) -> Vec<f64> {
    let (ph, pw) = (h + kh - 1, w + kw - 1);
    let mut padded = vec![0.0; ph * pw];
    for a in 0..ph {
        let src_r = (a + h * kh - off.0) % h;
        let row = &x[src_r * w..(src_r + 1) * w];
        let dst = &mut padded[a * pw..(a + 1) * pw];
        for (b, d) in dst.iter_mut().enumerate() {
            *d = row[(b + w * kw - off.1) % w];
        }
    }
    padded
}

/// Direct circular convolution of one plane, accumulated into `out`.
#[allow(clippy::too_many_arguments)]
pub fn conv_plane_direct(
    x: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    mode: ConvMode,
    out: &mut [f64],
) {
    let (ci, cj) = (kh / 2, kw / 2);
    let pw = w + kw - 1;
    match mode {
        ConvMode::Forward => {
            let padded = wrap_pad(x, h, w, kh, kw, (kh - 1 - ci, kw - 1 - cj));
            for p in 0..kh {
                for q in 0..kw {
                    let kv = kernel[p * kw + q];
                    if kv == 0.0 {
                        continue;
                    }
                    let (dr, dc) = (kh - 1 - p, kw - 1 - q);
                    for i in 0..h {
                        let src = &padded[(i + dr) * pw + dc..(i + dr) * pw + dc + w];
                        let dst = &mut out[i * w..(i + 1) * w];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
        ConvMode::Adjoint => {
            let padded = wrap_pad(x, h, w, kh, kw, (ci, cj));
            for p in 0..kh {
                for q in 0..kw {
                    let kv = kernel[p * kw + q];
                    if kv == 0.0 {
                        continue;
                    }
                    for i in 0..h {
                        let src = &padded[(i + p) * pw + q..(i + p) * pw + q + w];
                        let dst = &mut out[i * w..(i + 1) * w];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `<conv(x, k), g>` with respect to the kernel taps, accumulated into `out`.
pub fn kernel_grad_plane(
    x: &[f64],
    g: &[f64],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    out: &mut [f64],
) {
    let (ci, cj) = (kh / 2, kw / 2);
    let pw = w + kw - 1;
    let padded = wrap_pad(x, h, w, kh, kw, (kh - 1 - ci, kw - 1 - cj));
    for p in 0..kh {
        for q in 0..kw {
            let (dr, dc) = (kh - 1 - p, kw - 1 - q);
            let mut acc = 0.0;
            for i in 0..h {
                let src = &padded[(i + dr) * pw + dc..(i + dr) * pw + dc + w];
                let gr = &g[i * w..(i + 1) * w];
                acc += src.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
            }
            out[p * kw + q] += acc;
        }
    }
}

fn conv_plane_fft(x: &[f64], h: usize, w: usize, kernel: &Kernel, mode: ConvMode) -> Result<Vec<f64>> {
    let xt = ImageTensor::new(h, w, 1, x.to_vec())?;
    let kt = ImageTensor::new(h, w, 1, kernel.embed(h, w))?;
    let xf = fft::fft2(&xt)?;
    let kf = fft::fft2(&kt)?;
    let mut prod = ComplexField::zeros(h, w, 1);
    for idx in 0..h * w {
        let (a, b) = (kf.re[idx], kf.im[idx]);
        let b = if mode == ConvMode::Adjoint { -b } else { b };
        prod.re[idx] = a * xf.re[idx] - b * xf.im[idx];
        prod.im[idx] = a * xf.im[idx] + b * xf.re[idx];
    }
    Ok(fft::ifft2_real(&prod)?.into_data())
}

/// Circular convolution of every channel of `img` with `kernel`.
pub fn circ_conv(img: &ImageTensor, kernel: &Kernel, mode: ConvMode) -> Result<ImageTensor> {
    let (h, w, _) = img.shape();
    if kernel.height() > h || kernel.width() > w {
        return invalid(format!(
            "kernel {}x{} larger than image {}x{}",
            kernel.height(),
            kernel.width(),
            h,
            w
        ));
    }
    let use_fft = kernel.height() * kernel.width() > DIRECT_MAX_AREA;
    circ_conv_with(img, kernel, mode, use_fft)
}

pub(crate) fn circ_conv_with(
    img: &ImageTensor,
    kernel: &Kernel,
    mode: ConvMode,
    use_fft: bool,
) -> Result<ImageTensor> {
    let (h, w, c) = img.shape();
    let mut out = ImageTensor::zeros(h, w, c);
    for k in 0..c {
        if use_fft {
            let res = conv_plane_fft(img.plane(k), h, w, kernel, mode)?;
            out.plane_mut(k).copy_from_slice(&res);
        } else {
            conv_plane_direct(
                img.plane(k),
                h,
                w,
                kernel.data(),
                kernel.height(),
                kernel.width(),
                mode,
                out.plane_mut(k),
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Rng;

    fn random_image(rng: &mut Rng, h: usize, w: usize, c: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.normal())
    }

    fn random_kernel(rng: &mut Rng, kh: usize, kw: usize) -> Kernel {
        Kernel::new(kh, kw, (0..kh * kw).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = Rng::new(1);
        let img = random_image(&mut rng, 5, 7, 2);
        let out = circ_conv(&img, &Kernel::identity(), ConvMode::Forward).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn impulse_reproduces_centered_kernel() {
        let mut rng = Rng::new(2);
        let k = random_kernel(&mut rng, 3, 5);
        let mut img = ImageTensor::zeros(8, 8, 1);
        img.set(4, 4, 0, 1.0);
        let out = circ_conv(&img, &k, ConvMode::Forward).unwrap();
        for p in 0..3 {
            for q in 0..5 {
                assert!((out.get(4 + p - 1, 4 + q - 2, 0) - k.get(p, q)).abs() < 1e-15);
            }
        }
        // everything else is zero
        let total: f64 = out.data().iter().map(|v| v.abs()).sum();
        let ksum: f64 = k.data().iter().map(|v| v.abs()).sum();
        assert!((total - ksum).abs() < 1e-12);
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = Rng::new(3);
        for size in 1..=5 {
            let x = random_image(&mut rng, 8, 8, 1);
            let z = random_image(&mut rng, 8, 8, 1);
            let k = random_kernel(&mut rng, size, size);
            let lhs = circ_conv(&x, &k, ConvMode::Forward).unwrap().dot(&z);
            let rhs = x.dot(&circ_conv(&z, &k, ConvMode::Adjoint).unwrap());
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn direct_and_fft_agree() {
        let mut rng = Rng::new(4);
        for &(kh, kw) in &[(1, 1), (3, 3), (5, 5), (3, 7), (7, 7), (9, 5)] {
            let x = random_image(&mut rng, 12, 10, 2);
            let k = random_kernel(&mut rng, kh, kw);
            for mode in [ConvMode::Forward, ConvMode::Adjoint] {
                let a = circ_conv_with(&x, &k, mode, false).unwrap();
                let b = circ_conv_with(&x, &k, mode, true).unwrap();
                assert!(a.max_abs_diff(&b) <= 1e-10, "{kh}x{kw} {mode:?}");
            }
        }
    }

    #[test]
    fn kernel_gradient_matches_inner_product() {
        let mut rng = Rng::new(5);
        let x = random_image(&mut rng, 6, 7, 1);
        let g = random_image(&mut rng, 6, 7, 1);
        let k = random_kernel(&mut rng, 3, 5);
        let mut grad = vec![0.0; 15];
        kernel_grad_plane(x.plane(0), g.plane(0), 6, 7, 3, 5, &mut grad);
        // the map k -> <conv(x,k), g> is linear, so each tap's gradient is its unit response
        for t in 0..15 {
            let mut unit = vec![0.0; 15];
            unit[t] = 1.0;
            let ku = Kernel::new(3, 5, unit).unwrap();
            let v = circ_conv(&x, &ku, ConvMode::Forward).unwrap().dot(&g);
            assert!((v - grad[t]).abs() < 1e-12);
        }
        let _ = k;
    }

    #[test]
    fn oversized_kernel_rejected() {
        let img = ImageTensor::zeros(3, 3, 1);
        let k = Kernel::new(5, 5, vec![0.0; 25]).unwrap();
        assert!(circ_conv(&img, &k, ConvMode::Forward).is_err());
    }
}
