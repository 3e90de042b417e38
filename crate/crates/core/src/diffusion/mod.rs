//! Denoising diffusion in the Cold Diffusion style: a restoration network is
//! trained to recover `x0` from a Gaussian-degraded image, and sampling
//! alternates restoration with re-degradation to the next lower level.

pub mod sample;
pub mod train;
pub mod unet;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageShape, ImageTensor};

pub use sample::{sample, sample_with_progress, Denoise, SAMPLE_BATCH};
pub use train::{train_denoiser, DiffusionConfig, TrainedDenoiser};
pub use unet::{DenoiserModel, UNetConfig};

/// Reference step count the linear β endpoints are quoted for.
const REFERENCE_STEPS: f64 = 1000.0;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

/// Cumulative signal levels `ᾱ_0 = 1 > ᾱ_1 > ... > ᾱ_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSchedule {
    alpha_bar: Vec<f64>,
}

impl DegradationSchedule {
    /// Linear β from `1e-4` to `0.02`, both scaled by `1000 / T` so that short
    /// schedules still end near pure noise.
    pub fn linear(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let scale = REFERENCE_STEPS / num_steps as f64;
        let (b0, b1) = (BETA_START * scale, (BETA_END * scale).min(0.999));
        let mut alpha_bar = Vec::with_capacity(num_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for s in 0..num_steps {
            let frac = if num_steps == 1 { 1.0 } else { s as f64 / (num_steps - 1) as f64 };
            acc *= 1.0 - (b0 + (b1 - b0) * frac);
            alpha_bar.push(acc);
        }
        Ok(Self { alpha_bar })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::StepOutOfRange {
            t,
            num_steps: self.num_steps(),
        })
    }

    /// `√ᾱ_t · x0 + √(1 − ᾱ_t) · noise` for a batch with per-item steps.
    pub fn degrade(&self, x0: &Tensor, t: &[usize], noise: &Tensor) -> Result<Tensor> {
        let b = x0.dim(0)?;
        if t.len() != b || noise.dims() != x0.dims() {
            return Err(Error::ShapeMismatch {
                expected: format!("{b} steps and noise of shape {:?}", x0.dims()),
                actual: format!("{} steps and noise of shape {:?}", t.len(), noise.dims()),
            });
        }
        let mut a = Vec::with_capacity(b);
        let mut s = Vec::with_capacity(b);
        for &step in t {
            let ab = self.alpha_bar(step)?;
            a.push(ab.sqrt());
            s.push((1.0 - ab).sqrt());
        }
        let dims = [b, 1, 1, 1];
        let a = Tensor::new(a, x0.device())?.to_dtype(x0.dtype())?.reshape(&dims[..])?;
        let s = Tensor::new(s, x0.device())?.to_dtype(x0.dtype())?.reshape(&dims[..])?;
        Ok((x0.broadcast_mul(&a)? + noise.broadcast_mul(&s)?)?)
    }

    /// Single-image form. The result is generally outside `[-1, 1]`, so it is
    /// returned as raw pixels rather than an [`ImageTensor`].
    pub fn degrade_image(&self, x0: &ImageTensor, t: usize, noise: &[f32]) -> Result<Vec<f32>> {
        if noise.len() != x0.pixels().len() {
            return Err(Error::ShapeMismatch {
                expected: format!("noise of {} values", x0.pixels().len()),
                actual: noise.len().to_string(),
            });
        }
        let ab = self.alpha_bar(t)?;
        let (a, s) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        Ok(x0.pixels().iter().zip(noise).map(|(x, e)| a * x + s * e).collect())
    }
}

pub(crate) fn check_shape(expected: ImageShape, x: &Tensor) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if ImageShape::new(c, h, w) != expected {
        return Err(Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: format!("{c}x{h}x{w}"),
        });
    }
    Ok(())
}
