//! Unnormalized 2D discrete Fourier transforms over planar tensors.
//!
//! `fft2` carries no scaling; `ifft2` carries the full `1/(H*W)` factor so
//! that `ifft2(fft2(u)) == u`.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{invalid, Result};
use crate::tensor::{ComplexField, ImageTensor};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2D DFT of one `h x w` row-major plane.
fn transform_plane(buf: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        if w > 1 {
            let row = planner.plan_fft(w, direction);
            row.process(buf);
        }
        if h > 1 {
            let col = planner.plan_fft(h, direction);
            let mut t = vec![Complex64::new(0.0, 0.0); h * w];
            for i in 0..h {
                for j in 0..w {
                    t[j * h + i] = buf[i * w + j];
                }
            }
            col.process(&mut t);
            for i in 0..h {
                for j in 0..w {
                    buf[i * w + j] = t[j * h + i];
                }
            }
        }
    });
}

/// Forward unnormalized DFT of every channel of a real tensor.
pub fn fft2(img: &ImageTensor) -> Result<ComplexField> {
    let (h, w, c) = img.shape();
    if h == 0 || w == 0 {
        return invalid("fft2 requires non-zero dimensions");
    }
    let n = h * w;
    let mut out = ComplexField::zeros(h, w, c);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..c {
        for (b, &v) in buf.iter_mut().zip(img.plane(k)) {
            *b = Complex64::new(v, 0.0);
        }
        transform_plane(&mut buf, h, w, FftDirection::Forward);
        for (idx, b) in buf.iter().enumerate() {
            out.re[k * n + idx] = b.re;
            out.im[k * n + idx] = b.im;
        }
    }
    Ok(out)
}

fn complex_transform(field: &ComplexField, direction: FftDirection, scale: f64) -> ComplexField {
    let (h, w, c) = field.shape();
    let n = h * w;
    let mut out = ComplexField::zeros(h, w, c);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..c {
        for (idx, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(field.re[k * n + idx], field.im[k * n + idx]);
        }
        transform_plane(&mut buf, h, w, direction);
        for (idx, b) in buf.iter().enumerate() {
            out.re[k * n + idx] = b.re * scale;
            out.im[k * n + idx] = b.im * scale;
        }
    }
    out
}

/// Inverse DFT including the `1/(H*W)` factor.
pub fn ifft2(field: &ComplexField) -> Result<ComplexField> {
    if field.height == 0 || field.width == 0 {
        return invalid("ifft2 requires non-zero dimensions");
    }
    let scale = 1.0 / (field.height * field.width) as f64;
    Ok(complex_transform(field, FftDirection::Inverse, scale))
}

/// Real part of `ifft2`.
pub fn ifft2_real(field: &ComplexField) -> Result<ImageTensor> {
    let out = ifft2(field)?;
    ImageTensor::new(field.height, field.width, field.channels, out.re)
}

/// Forward DFT of a complex field (no scaling).
pub fn fft2_complex(field: &ComplexField) -> ComplexField {
    complex_transform(field, FftDirection::Forward, 1.0)
}

/// Inverse DFT of a complex field without the `1/(H*W)` factor.
pub fn ifft2_unscaled(field: &ComplexField) -> ComplexField {
    complex_transform(field, FftDirection::Inverse, 1.0)
}
