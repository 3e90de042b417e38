//! Images as planar `f32` buffers in the normalized `[-1, 1]` range.

use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A single image, channels-first, every element in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: ImageShape,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(shape: ImageShape, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape} ({} values)", shape.numel()),
                actual: format!("{} values", pixels.len()),
            });
        }
        if let Some((offset, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(Error::PixelRange { offset, value });
        }
        Ok(Self { shape, pixels })
    }

    /// Builds an image, clamping values into range. NaN becomes 0.
    pub fn from_clamped(shape: ImageShape, mut pixels: Vec<f32>) -> Result<Self> {
        for v in pixels.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
        Self::new(shape, pixels)
    }

    pub fn filled(shape: ImageShape, value: f32) -> Result<Self> {
        Self::new(shape, vec![value; shape.numel()])
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn ensure_shape(&self, expected: ImageShape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_string(),
                actual: self.shape.to_string(),
            });
        }
        Ok(())
    }

    pub fn mse(&self, other: &ImageTensor) -> Result<f64> {
        other.ensure_shape(self.shape)?;
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        Ok(sum / self.pixels.len() as f64)
    }

    /// Round-trips through 8-bit storage.
    pub fn quantized(&self) -> ImageTensor {
        let pixels = self
            .pixels
            .iter()
            .map(|&v| u8_to_unit(unit_to_u8(v)))
            .collect();
        ImageTensor {
            shape: self.shape,
            pixels,
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| unit_to_u8(v)).collect()
    }

    pub fn from_u8(shape: ImageShape, bytes: &[u8]) -> Result<Self> {
        Self::new(shape, bytes.iter().map(|&b| u8_to_unit(b)).collect())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let (channels, interleaved) = match img.color().channel_count() {
            1 | 2 => (1, img.to_luma8().into_raw()),
            _ => (3, img.to_rgb8().into_raw()),
        };
        let shape = ImageShape::new(channels, height, width);
        let mut planar = vec![0u8; shape.numel()];
        for (i, px) in interleaved.chunks(channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                planar[c * shape.plane() + i] = v;
            }
        }
        Self::from_u8(shape, &planar)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let s = self.shape;
        let planar = self.to_u8();
        let mut interleaved = vec![0u8; s.numel()];
        for i in 0..s.plane() {
            for c in 0..s.channels {
                interleaved[i * s.channels + c] = planar[c * s.plane() + i];
            }
        }
        let color = match s.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            n => {
                return Err(Error::Config(format!(
                    "cannot write {n}-channel image as png"
                )))
            }
        };
        image::save_buffer(path, &interleaved, s.width as u32, s.height as u32, color)?;
        Ok(())
    }
}

pub fn unit_to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn u8_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Stacks images into a `(batch, channels, height, width)` tensor.
pub fn stack(images: &[&ImageTensor], device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Dataset("cannot stack an empty image batch".into()));
    };
    let shape = first.shape();
    let mut data = Vec::with_capacity(images.len() * shape.numel());
    for img in images {
        img.ensure_shape(shape)?;
        data.extend_from_slice(img.pixels());
    }
    Ok(Tensor::from_vec(
        data,
        (images.len(), shape.channels, shape.height, shape.width),
        device,
    )?)
}

/// Splits a `(batch, c, h, w)` tensor back into clamped images.
pub fn unstack(batch: &Tensor) -> Result<Vec<ImageTensor>> {
    let (b, c, h, w) = batch.dims4()?;
    let shape = ImageShape::new(c, h, w);
    let flat = batch
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    flat.chunks(shape.numel())
        .take(b)
        .map(|chunk| ImageTensor::from_clamped(shape, chunk.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        let shape = ImageShape::new(1, 1, 2);
        let err = ImageTensor::new(shape, vec![0.0, 1.5]).unwrap_err();
        assert!(matches!(err, Error::PixelRange { offset: 1, .. }));
    }

    #[test]
    fn rejects_wrong_length() {
        let shape = ImageShape::new(3, 2, 2);
        assert!(matches!(
            ImageTensor::new(shape, vec![0.0; 5]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn quantization_is_idempotent() {
        let shape = ImageShape::new(1, 1, 4);
        let img = ImageTensor::new(shape, vec![-1.0, -0.3331, 0.25, 1.0]).unwrap();
        let q = img.quantized();
        assert_eq!(q, q.quantized());
        assert_eq!(q.pixels()[0], -1.0);
        assert_eq!(q.pixels()[3], 1.0);
    }

    #[test]
    fn png_round_trip_is_lossless_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let shape = ImageShape::new(3, 4, 5);
        let pixels = (0..shape.numel())
            .map(|i| (i as f32 / shape.numel() as f32) * 2.0 - 1.0)
            .collect();
        let img = ImageTensor::new(shape, pixels).unwrap().quantized();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        assert_eq!(ImageTensor::load_png(&path).unwrap(), img);
    }

    #[test]
    fn stack_unstack_round_trip() {
        let shape = ImageShape::new(2, 3, 3);
        let a = ImageTensor::filled(shape, 0.5).unwrap();
        let b = ImageTensor::filled(shape, -0.25).unwrap();
        let t = stack(&[&a, &b], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 2, 3, 3]);
        assert_eq!(unstack(&t).unwrap(), vec![a, b]);
    }
}
