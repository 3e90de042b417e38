//! Convolutional U-Net restoration network with a sinusoidal step embedding.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::check_shape;
use crate::error::{Error, Result};
use crate::image::ImageShape;
use crate::nn::layers::{timestep_embedding, Conv2d, GroupNorm, Linear};
use crate::nn::ops::upsample2x;
use crate::nn::Scope;

const GROUPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_shape: ImageShape,
    pub channel_scale: usize,
    /// Width multiplier per resolution level; every level after the first halves the resolution.
    pub block_widths: Vec<usize>,
    pub res_blocks_per_level: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_scale == 0 || self.block_widths.is_empty() || self.res_blocks_per_level == 0 {
            return Err(Error::Config("U-Net needs positive widths and at least one level".into()));
        }
        if self.block_widths.contains(&0) {
            return Err(Error::Config("U-Net width multipliers must be positive".into()));
        }
        let f = 1usize << (self.block_widths.len() - 1);
        let s = self.image_shape;
        if s.height % f != 0 || s.width % f != 0 {
            return Err(Error::Config(format!(
                "{} levels cannot downsample {}x{} evenly",
                self.block_widths.len(),
                s.height,
                s.width
            )));
        }
        Ok(())
    }
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(s: &Scope, in_c: usize, out_c: usize, temb_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&s.pp("norm1"), GROUPS, in_c)?,
            conv1: Conv2d::new(&s.pp("conv1"), in_c, out_c, 3, 1, 1, true)?,
            temb: Linear::new(&s.pp("temb"), temb_dim, out_c)?,
            norm2: GroupNorm::new(&s.pp("norm2"), GROUPS, out_c)?,
            conv2: Conv2d::new_scaled(&s.pp("conv2"), out_c, out_c, 3, 1, 1e-3)?,
            skip: if in_c != out_c {
                Some(Conv2d::new(&s.pp("skip"), in_c, out_c, 1, 1, 0, true)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(temb)?.unsqueeze(D::Minus1)?.unsqueeze(D::Minus1)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Restoration network `R(x_t, t) ≈ x0`.
pub struct DenoiserModel {
    config: UNetConfig,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    down: Vec<Vec<ResBlock>>,
    downsample: Vec<Conv2d>,
    mid: [ResBlock; 2],
    up: Vec<Vec<ResBlock>>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl DenoiserModel {
    pub fn new(s: &Scope, config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.channel_scale;
        let tdim = 4 * ch;
        let widths: Vec<usize> = config.block_widths.iter().map(|m| m * ch).collect();
        let levels = widths.len();
        let nb = config.res_blocks_per_level;

        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut skips = vec![ch];
        let mut cur = ch;
        for (i, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for j in 0..nb {
                blocks.push(ResBlock::new(&s.pp(format!("down.{i}.{j}")), cur, w, tdim)?);
                cur = w;
                skips.push(cur);
            }
            down.push(blocks);
            if i + 1 < levels {
                downsample.push(Conv2d::new(&s.pp(format!("downsample.{i}")), cur, cur, 3, 2, 1, true)?);
                skips.push(cur);
            }
        }
        let mid = [
            ResBlock::new(&s.pp("mid.0"), cur, cur, tdim)?,
            ResBlock::new(&s.pp("mid.1"), cur, cur, tdim)?,
        ];
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for (i, &w) in widths.iter().enumerate().rev() {
            let mut blocks = Vec::new();
            for j in 0..=nb {
                let skip_c = skips.pop().expect("one skip per down block");
                blocks.push(ResBlock::new(&s.pp(format!("up.{i}.{j}")), cur + skip_c, w, tdim)?);
                cur = w;
            }
            up.push(blocks);
            if i > 0 {
                upsample.push(Conv2d::new(&s.pp(format!("upsample.{i}")), cur, cur, 3, 1, 1, true)?);
            }
        }
        Ok(Self {
            temb1: Linear::new(&s.pp("temb1"), ch, tdim)?,
            temb2: Linear::new(&s.pp("temb2"), tdim, tdim)?,
            conv_in: Conv2d::new(&s.pp("conv_in"), config.image_shape.channels, ch, 3, 1, 1, true)?,
            down,
            downsample,
            mid,
            up,
            upsample,
            norm_out: GroupNorm::new(&s.pp("norm_out"), GROUPS, cur)?,
            conv_out: Conv2d::new_scaled(&s.pp("conv_out"), cur, config.image_shape.channels, 3, 1, 1e-3)?,
            config,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn forward(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        check_shape(self.config.image_shape, x)?;
        if t.len() != x.dim(0)? {
            return Err(Error::ShapeMismatch {
                expected: format!("{} steps", x.dim(0)?),
                actual: t.len().to_string(),
            });
        }
        let ch = self.config.channel_scale;
        let temb = timestep_embedding(t, ch, x.dtype(), x.device())?;
        let temb = self.temb2.forward(&self.temb1.forward(&temb)?.silu()?)?;

        let mut h = self.conv_in.forward(x)?;
        let mut skips = vec![h.clone()];
        for (i, blocks) in self.down.iter().enumerate() {
            for b in blocks {
                h = b.forward(&h, &temb)?;
                skips.push(h.clone());
            }
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(&h)?;
                skips.push(h.clone());
            }
        }
        for b in &self.mid {
            h = b.forward(&h, &temb)?;
        }
        for (k, blocks) in self.up.iter().enumerate() {
            for b in blocks {
                let s = skips.pop().expect("matched skip");
                h = b.forward(&Tensor::cat(&[&h, &s], 1)?, &temb)?;
            }
            if let Some(us) = self.upsample.get(k) {
                h = us.forward(&upsample2x(&h)?)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}
