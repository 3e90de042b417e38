//! Iterative restoration sampling.
//!
//! Starting from `x_T ~ N(0, I)`, each step restores `x̂0 = R(x_t, t)`,
//! re-estimates the noise that maps `x̂0` to `x_t`, and re-degrades `x̂0` with
//! that noise to level `t − 1`:
//!
//! ```text
//! ε̂       = (x_t − √ᾱ_t · x̂0) / √(1 − ᾱ_t)
//! x_{t−1} = x_t − D(x̂0, t, ε̂) + D(x̂0, t − 1, ε̂) = √ᾱ_{t−1} · x̂0 + √(1 − ᾱ_{t−1}) · ε̂
//! ```
//!
//! One pass therefore makes exactly `T` model evaluations.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::DegradationSchedule;
use crate::error::Result;
use crate::image::{self, ImageShape, ImageTensor};

/// Anything that restores `x0` from a degraded batch.
pub trait Denoise {
    fn image_shape(&self) -> ImageShape;

    /// `x̂0` for a `(B, C, H, W)` batch at per-item steps `t`.
    fn restore(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor>;
}

pub const SAMPLE_BATCH: usize = 50;

/// Draws `n` images. Output depends only on the model, schedule and `seed`.
pub fn sample<M: Denoise + ?Sized>(
    model: &M,
    schedule: &DegradationSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    sample_with_progress(model, schedule, n, seed, |_| {})
}

/// As [`sample`], reporting the number of finished images after each batch.
pub fn sample_with_progress<M: Denoise + ?Sized>(
    model: &M,
    schedule: &DegradationSchedule,
    n: usize,
    seed: u64,
    mut progress: impl FnMut(usize),
) -> Result<Vec<ImageTensor>> {
    let shape = model.image_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let big_t = schedule.num_steps();
    while out.len() < n {
        let b = SAMPLE_BATCH.min(n - out.len());
        let noise: Vec<f32> = (0..b * shape.numel())
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                e as f32
            })
            .collect();
        let mut x = Tensor::from_vec(noise, (b, shape.channels, shape.height, shape.width), &Device::Cpu)?;
        for t in (1..=big_t).rev() {
            // detached so the graph of earlier steps is dropped
            let x0 = model.restore(&x, &vec![t; b])?.detach().to_dtype(DType::F32)?.clamp(-1f32, 1f32)?;
            let ab = schedule.alpha_bar(t)?;
            let ab_prev = schedule.alpha_bar(t - 1)?;
            let eps = ((&x - (&x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
            x = ((x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?;
        }
        out.extend(image::unstack(&x.clamp(-1f32, 1f32)?)?);
        progress(out.len());
    }
    Ok(out)
}
