//! Differentiable image reconstruction with unrolled half-quadratic splitting.
//!
//! The crate covers a Poisson-Gaussian camera simulator and noise calibrator,
//! the generalized Anscombe transform, an FFT-based HQS reconstruction unit
//! with a learned per-pixel proximal network, a small reverse-mode autodiff
//! tape, RMSProp training, and a procedural texture-classification task for
//! joint low-level/high-level training.

pub mod anscombe;
pub mod conv;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod hqs;
pub mod imaging;
pub mod io;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use hqs::{HqsPipeline, HqsStage, Mode};
pub use imaging::{NoiseParams, Psf, Rng};
pub use tensor::{ComplexField, ImageTensor};
