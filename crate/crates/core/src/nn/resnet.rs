//! Residual classifiers with basic blocks (18- and 34-layer layouts).

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{global_avg_pool, BatchNorm2d, Conv2d, Linear, Mode};
use super::ops::max_pool2d;
use super::params::Scope;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stem {
    /// 3x3 stride-1 convolution, no pooling; for small inputs.
    Small,
    /// 7x7 stride-2 convolution followed by 3x3 stride-2 max pooling.
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetSpec {
    pub blocks: [usize; 4],
    pub base_width: usize,
    pub stem: Stem,
    pub in_channels: usize,
    pub num_outputs: usize,
}

impl ResNetSpec {
    pub fn resnet18_small(in_channels: usize, num_outputs: usize, base_width: usize) -> Self {
        Self {
            blocks: [2, 2, 2, 2],
            base_width,
            stem: Stem::Small,
            in_channels,
            num_outputs,
        }
    }

    pub fn resnet34(in_channels: usize, num_outputs: usize, base_width: usize) -> Self {
        Self {
            blocks: [3, 4, 6, 3],
            base_width,
            stem: Stem::Full,
            in_channels,
            num_outputs,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.base_width * 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.num_outputs == 0 || self.in_channels == 0 {
            return Err(Error::Config(format!("degenerate resnet spec {self:?}")));
        }
        Ok(())
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(s: &Scope, in_c: usize, out_c: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || in_c != out_c {
            Some((
                Conv2d::new(&s.pp("down.conv"), in_c, out_c, 1, stride, 0, false)?,
                BatchNorm2d::new(&s.pp("down.bn"), out_c, true)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&s.pp("conv1"), in_c, out_c, 3, stride, 1, false)?,
            bn1: BatchNorm2d::new(&s.pp("bn1"), out_c, true)?,
            conv2: Conv2d::new(&s.pp("conv2"), out_c, out_c, 3, 1, 1, false)?,
            bn2: BatchNorm2d::new(&s.pp("bn2"), out_c, true)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

pub struct ResNet {
    spec: ResNetSpec,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    head: Linear,
}

impl ResNet {
    pub fn new(s: &Scope, spec: ResNetSpec) -> Result<Self> {
        spec.validate()?;
        let w = spec.base_width;
        let stem = match spec.stem {
            Stem::Small => Conv2d::new(&s.pp("stem"), spec.in_channels, w, 3, 1, 1, false)?,
            Stem::Full => Conv2d::new(&s.pp("stem"), spec.in_channels, w, 7, 2, 3, false)?,
        };
        let stem_bn = BatchNorm2d::new(&s.pp("stem_bn"), w, true)?;
        let mut blocks = Vec::new();
        let mut in_c = w;
        for (stage, &count) in spec.blocks.iter().enumerate() {
            let out_c = w << stage;
            for i in 0..count {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    &s.pp(format!("layer{}.{}", stage + 1, i)),
                    in_c,
                    out_c,
                    stride,
                )?);
                in_c = out_c;
            }
        }
        let head = Linear::new(&s.pp("fc"), in_c, spec.num_outputs)?;
        Ok(Self {
            spec,
            stem,
            stem_bn,
            blocks,
            head,
        })
    }

    pub fn spec(&self) -> &ResNetSpec {
        &self.spec
    }

    /// Pooled penultimate features, `(batch, 8·base_width)`.
    pub fn features(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = self.stem_bn.forward(&self.stem.forward(x)?, mode)?.relu()?;
        if self.spec.stem == Stem::Full {
            h = max_pool2d(&h, 3, 2, 1)?;
        }
        for block in &self.blocks {
            h = block.forward(&h, mode)?;
        }
        global_avg_pool(&h)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.head.forward(&self.features(x, mode)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn output_shapes() {
        let store = ParamStore::new(3, DType::F32);
        let net = ResNet::new(&store.root(), ResNetSpec::resnet18_small(3, 10, 4)).unwrap();
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(net.forward(&x, Mode::Train).unwrap().dims(), &[2, 10]);
        assert_eq!(net.features(&x, Mode::Eval).unwrap().dims(), &[2, 32]);

        let store = ParamStore::new(3, DType::F32);
        let net = ResNet::new(&store.root(), ResNetSpec::resnet34(3, 5, 2)).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(net.forward(&x, Mode::Eval).unwrap().dims(), &[1, 5]);
    }
}
