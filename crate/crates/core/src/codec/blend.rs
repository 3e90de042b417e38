use candle_core::Tensor;

use super::WatermarkImage;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("watermark scale {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `lambda · w + (1 − lambda) · x`, elementwise.
pub fn blend(x: &ImageTensor, w: &WatermarkImage, lambda: f64) -> Result<ImageTensor> {
    check_lambda(lambda)?;
    let wi = w.image();
    if wi.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("image {}", x.shape()),
            actual: format!("watermark {}", wi.shape()),
        });
    }
    let l = lambda as f32;
    let pixels = x
        .pixels()
        .iter()
        .zip(wi.pixels())
        .map(|(&xv, &wv)| l * wv + (1.0 - l) * xv)
        .collect();
    ImageTensor::from_clamped(x.shape(), pixels)
}

/// Batched blend on tensors of identical shape.
pub fn blend_tensor(x: &Tensor, w: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    if x.dims() != w.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.dims()),
            actual: format!("{:?}", w.dims()),
        });
    }
    Ok(((w * lambda)? + (x * (1.0 - lambda))?)?)
}
