//! Index → watermark network.
//!
//! An embedding of the index goes through an MLP, is reshaped to a small
//! feature map and refined by a residual block, then residual up-sampling
//! blocks double the resolution until it matches the image. Every
//! normalization layer in a modulated block has its scale and bias shifted by
//! a linear map of the embedding. The output passes through tanh and a
//! Gaussian blur.

use candle_core::Tensor;

use super::{CodecConfig, GeneratorArchitecture};
use crate::error::{Error, Result};
use crate::image::ImageShape;
use crate::nn::layers::{BatchNorm2d, Conv2d, Embedding, Linear, Mode};
use crate::nn::ops::{gaussian_blur, upsample2x};
use crate::nn::{Init, Scope};

/// BatchNorm whose scale and bias are `1 + A·e` and `B·e` for embedding `e`.
/// Without modulation it is a plain affine BatchNorm.
struct ModBatchNorm {
    bn: BatchNorm2d,
    modulation: Option<(Linear, Linear)>,
}

impl ModBatchNorm {
    fn new(s: &Scope, channels: usize, embed_dim: usize, modulated: bool) -> Result<Self> {
        if !modulated {
            return Ok(Self {
                bn: BatchNorm2d::new(s, channels, true)?,
                modulation: None,
            });
        }
        let zero = Init::Const(0.0);
        Ok(Self {
            bn: BatchNorm2d::new(s, channels, false)?,
            modulation: Some((
                Linear::with_init(&s.pp("scale"), embed_dim, channels, zero, zero)?,
                Linear::with_init(&s.pp("shift"), embed_dim, channels, zero, zero)?,
            )),
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor, mode: Mode) -> Result<Tensor> {
        let Some((scale, shift)) = &self.modulation else {
            return self.bn.forward(x, mode);
        };
        let (n, c, _, _) = x.dims4()?;
        let y = self.bn.normalize(x, mode)?;
        let g = (scale.forward(emb)? + 1.0)?.reshape((n, c, 1, 1))?;
        let b = shift.forward(emb)?.reshape((n, c, 1, 1))?;
        Ok(y.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

/// Pre-activation residual block, optionally doubling resolution.
struct ResBlock {
    norm1: ModBatchNorm,
    conv1: Conv2d,
    norm2: ModBatchNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    upsample: bool,
}

impl ResBlock {
    fn new(
        s: &Scope,
        in_c: usize,
        out_c: usize,
        embed_dim: usize,
        modulated: bool,
        upsample: bool,
    ) -> Result<Self> {
        let skip = if in_c != out_c || upsample {
            Some(Conv2d::new(&s.pp("skip"), in_c, out_c, 1, 1, 0, true)?)
        } else {
            None
        };
        Ok(Self {
            norm1: ModBatchNorm::new(&s.pp("norm1"), in_c, embed_dim, modulated)?,
            conv1: Conv2d::new(&s.pp("conv1"), in_c, out_c, 3, 1, 1, true)?,
            norm2: ModBatchNorm::new(&s.pp("norm2"), out_c, embed_dim, modulated)?,
            conv2: Conv2d::new(&s.pp("conv2"), out_c, out_c, 3, 1, 1, true)?,
            skip,
            upsample,
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = self.norm1.forward(x, emb, mode)?.relu()?;
        let mut base = x.clone();
        if self.upsample {
            h = upsample2x(&h)?;
            base = upsample2x(&base)?;
        }
        let h = self.conv1.forward(&h)?;
        let h = self.norm2.forward(&h, emb, mode)?.relu()?;
        let h = self.conv2.forward(&h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(&base)?,
            None => base,
        };
        Ok((h + skip)?)
    }
}

pub struct Generator {
    embedding: Embedding,
    mlp: Vec<Linear>,
    seed_shape: (usize, usize, usize),
    stem: ResBlock,
    blocks: Vec<ResBlock>,
    out_norm: ModBatchNorm,
    out_conv: Conv2d,
    blur: (usize, f64),
}

/// Spatial size of the map fed to the first up-sampling block.
pub fn seed_resolution(shape: ImageShape, num_blocks: usize) -> Result<(usize, usize)> {
    let f = 1usize << num_blocks;
    if shape.height % f != 0 || shape.width % f != 0 || shape.height < f || shape.width < f {
        return Err(Error::Config(format!(
            "{num_blocks} up-sampling blocks cannot reach {}x{}",
            shape.height, shape.width
        )));
    }
    Ok((shape.height / f, shape.width / f))
}

impl Generator {
    pub fn new(s: &Scope, config: &CodecConfig) -> Result<Self> {
        let arch: &GeneratorArchitecture = &config.generator;
        let shape = config.image_shape;
        let (sh, sw) = seed_resolution(shape, arch.blocks.len())?;
        let e = arch.embedding_dim;
        let ch = arch.channel_scale;
        let widths: Vec<usize> = arch.blocks.iter().map(|b| b.width * ch).collect();
        let seed_c = widths[0];

        let mut mlp = Vec::new();
        let mut prev = e;
        for (i, &w) in arch.mlp_widths.iter().chain(std::iter::once(&(seed_c * sh * sw))).enumerate() {
            mlp.push(Linear::new(&s.pp(format!("mlp.{i}")), prev, w)?);
            prev = w;
        }
        let modulate_stem = arch.blocks[0].modulated;
        let stem = ResBlock::new(&s.pp("stem"), seed_c, seed_c, e, modulate_stem, false)?;
        let mut blocks = Vec::new();
        for (i, b) in arch.blocks.iter().enumerate() {
            let in_c = widths[i];
            let out_c = widths.get(i + 1).copied().unwrap_or(in_c);
            blocks.push(ResBlock::new(&s.pp(format!("up.{i}")), in_c, out_c, e, b.modulated, true)?);
        }
        let last = *widths.last().expect("validated non-empty");
        let modulate_out = arch.blocks.last().is_some_and(|b| b.modulated);
        Ok(Self {
            embedding: Embedding::new(&s.pp("embedding"), config.num_watermarks, e)?,
            mlp,
            seed_shape: (seed_c, sh, sw),
            stem,
            blocks,
            out_norm: ModBatchNorm::new(&s.pp("out_norm"), last, e, modulate_out)?,
            out_conv: Conv2d::new(&s.pp("out_conv"), last, shape.channels, 3, 1, 1, true)?,
            blur: (config.blur_kernel, config.blur_sigma),
        })
    }

    /// Watermarks for `indices`, `(n, C, H, W)` in [-1, 1].
    ///
    /// In `Train` and `Calibrate` modes normalization uses the statistics of
    /// this batch, so training always passes the full index set.
    pub fn forward(&self, indices: &[usize], mode: Mode) -> Result<Tensor> {
        let emb = self.embedding.forward(indices)?;
        let mut h = emb.clone();
        let last = self.mlp.len() - 1;
        for (i, layer) in self.mlp.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        let (c, sh, sw) = self.seed_shape;
        let mut h = h.reshape((indices.len(), c, sh, sw))?;
        h = self.stem.forward(&h, &emb, mode)?;
        for block in &self.blocks {
            h = block.forward(&h, &emb, mode)?;
        }
        let h = self.out_norm.forward(&h, &emb, mode)?.relu()?;
        let h = self.out_conv.forward(&h)?.tanh()?;
        let (k, sigma) = self.blur;
        if k <= 1 {
            return Ok(h);
        }
        gaussian_blur(&h, k, sigma)
    }
}
