use candle_core::{DType, Tensor, D};

use super::ops;
use super::params::{Init, Scope};
use crate::error::Result;

/// How normalization layers treat statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages updated with momentum.
    Train,
    /// Running statistics only.
    Eval,
    /// Batch statistics, copied verbatim into the running averages.
    Calibrate,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

#[derive(Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        s: &Scope,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = s.param("weight", &[out_c, in_c, kernel, kernel], Init::Kaiming { fan_in })?;
        let bias = if bias {
            Some(s.param("bias", &[out_c], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// Same layer with weights scaled down, for output heads that should start near zero.
    pub fn new_scaled(s: &Scope, in_c: usize, out_c: usize, kernel: usize, pad: usize, std: f64) -> Result<Self> {
        let weight = s.param("weight", &[out_c, in_c, kernel, kernel], Init::Normal { std })?;
        let bias = Some(s.param("bias", &[out_c], Init::Const(0.0))?);
        Ok(Self {
            weight,
            bias,
            stride: 1,
            pad,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, in_f: usize, out_f: usize) -> Result<Self> {
        let bound = 1.0 / (in_f as f64).sqrt();
        Ok(Self {
            weight: s.param("weight", &[out_f, in_f], Init::Uniform { bound })?,
            bias: Some(s.param("bias", &[out_f], Init::Uniform { bound })?),
        })
    }

    pub fn with_init(s: &Scope, in_f: usize, out_f: usize, weight: Init, bias: Init) -> Result<Self> {
        Ok(Self {
            weight: s.param("weight", &[out_f, in_f], weight)?,
            bias: Some(s.param("bias", &[out_f], bias)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Batch normalization over `(N, H, W)` per channel.
#[derive(Clone)]
pub struct BatchNorm2d {
    gamma: Option<Tensor>,
    beta: Option<Tensor>,
    running_mean: candle_core::Var,
    running_var: candle_core::Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(s: &Scope, channels: usize, affine: bool) -> Result<Self> {
        let (gamma, beta) = if affine {
            (
                Some(s.param("weight", &[channels], Init::Const(1.0))?),
                Some(s.param("bias", &[channels], Init::Const(0.0))?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            gamma,
            beta,
            running_mean: s.buffer("running_mean", &[channels], Init::Const(0.0))?,
            running_var: s.buffer("running_var", &[channels], Init::Const(1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Normalizes without the affine step.
    pub fn normalize(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if mode.uses_batch_stats() {
            let flat = x.transpose(0, 1)?.reshape((c, n * h * w))?;
            let mean = flat.mean(D::Minus1)?;
            let centred = flat.broadcast_sub(&mean.unsqueeze(1)?)?;
            let var = centred.sqr()?.mean(D::Minus1)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 {
                (var.detach() * (count / (count - 1.0)))?
            } else {
                var.detach()
            };
            if mode == Mode::Calibrate {
                self.running_mean.set(&mean.detach())?;
                self.running_var.set(&var.detach())?;
            } else {
                let m = self.momentum;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
            }
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().clone(),
                self.running_var.as_tensor().clone(),
            )
        };
        let mean = mean.reshape((1, c, 1, 1))?;
        let inv_std = (var + self.eps)?.sqrt()?.recip()?.reshape((1, c, 1, 1))?;
        Ok(x.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(1)?;
        let mut y = self.normalize(x, mode)?;
        if let Some(g) = &self.gamma {
            y = y.broadcast_mul(&g.reshape((1, c, 1, 1))?)?;
        }
        if let Some(b) = &self.beta {
            y = y.broadcast_add(&b.reshape((1, c, 1, 1))?)?;
        }
        Ok(y)
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(s: &Scope, groups: usize, channels: usize) -> Result<Self> {
        let groups = (1..=groups.min(channels))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        Ok(Self {
            groups,
            gamma: s.param("weight", &[channels], Init::Const(1.0))?,
            beta: s.param("bias", &[channels], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centred = g.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let y = centred.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = y.reshape((n, c, h, w))?;
        Ok(y
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(s: &Scope, count: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: s.param("weight", &[count, dim], Init::Normal { std: 1.0 })?,
        })
    }

    pub fn forward(&self, indices: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, indices.len(), self.table.device())?;
        Ok(self.table.index_select(&idx, 0)?)
    }
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Sinusoidal embedding of integer timesteps, `(len, dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10000f64).ln() * k as f64 / half.max(1) as f64).exp();
            let arg = step as f64 * freq;
            data.push(if i < half { arg.sin() } else { arg.cos() });
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?.to_dtype(dtype)?)
}
