//! CPU kernels with hand-written backward passes.
//!
//! Convolution is lowered to `im2col` followed by a single matmul so both the
//! forward pass and the two backward products run through the blocked gemm.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("custom op expects a contiguous input"),
    }
}

macro_rules! dispatch1 {
    ($storage:expr, $layout:expr, |$x:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(data) => {
                let $x = contiguous(data, $layout)?;
                let (out, shape) = $body;
                Ok((CpuStorage::F32(out), shape))
            }
            CpuStorage::F64(data) => {
                let $x = contiguous(data, $layout)?;
                let (out, shape) = $body;
                Ok((CpuStorage::F64(out), shape))
            }
            _ => bail!("unsupported dtype"),
        }
    };
}

/// Geometry of a 2-D sliding window over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Visits every (column-matrix offset, input offset) pair that lies inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let n = self.cols();
        let plane = self.height * self.width;
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    for b in 0..self.batch {
                        let in_base = (b * self.channels + c) * plane;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let col_base = row * n + (b * oh + oy) * ow;
                            let in_row = in_base + iy as usize * self.width;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.width as isize {
                                    f(col_base + ox, in_row + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(B, C, H, W)` → `(C·k·k, B·OH·OW)`.
struct Im2Col(Window);

/// Adjoint of [`Im2Col`]: scatter-adds columns back into an image batch.
struct Col2Im(Window);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        dispatch1!(storage, layout, |x| {
            let mut out = vec![Default::default(); g.rows() * g.cols()];
            g.for_each_tap(|col, src| out[col] = x[src]);
            (out, Shape::from((g.rows(), g.cols())))
        })
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        dispatch1!(storage, layout, |cols| {
            let mut out = vec![Default::default(); g.batch * g.channels * g.height * g.width];
            g.for_each_tap(|col, dst| out[dst] += cols[col]);
            (out, Shape::from((g.batch, g.channels, g.height, g.width)))
        })
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2-D convolution, `weight` shaped `(out, in, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (out_c, in_c, kernel, kw) = weight.dims4()?;
    if in_c != channels || kernel != kw {
        return Err(crate::Error::ShapeMismatch {
            expected: format!("{in_c} input channels, square kernel"),
            actual: format!("{channels} channels, kernel {kernel}x{kw}"),
        });
    }
    let g = Window {
        batch,
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let out = weight.reshape((out_c, g.rows()))?.matmul(&cols)?;
    let mut out = out.reshape((out_c, batch, g.out_h(), g.out_w()))?;
    if let Some(b) = bias {
        out = out.broadcast_add(&b.reshape((out_c, 1, 1, 1))?)?;
    }
    Ok(out.permute((1, 0, 2, 3))?.contiguous()?)
}

struct Upsample2x;
struct SumPool2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        dispatch1!(storage, layout, |x| {
            let (oh, ow) = (2 * h, 2 * w);
            let mut out = vec![Default::default(); b * c * oh * ow];
            for p in 0..b * c {
                for y in 0..oh {
                    for xo in 0..ow {
                        out[(p * oh + y) * ow + xo] = x[(p * h + y / 2) * w + xo / 2];
                    }
                }
            }
            (out, Shape::from((b, c, oh, ow)))
        })
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(SumPool2x)?))
    }
}

impl CustomOp1 for SumPool2x {
    fn name(&self) -> &'static str {
        "sumpool2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            bail!("sumpool2x needs even spatial dims, got {h}x{w}");
        }
        dispatch1!(storage, layout, |x| {
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![Default::default(); b * c * oh * ow];
            for p in 0..b * c {
                for y in 0..h {
                    for xi in 0..w {
                        out[(p * oh + y / 2) * ow + xi / 2] += x[(p * h + y) * w + xi];
                    }
                }
            }
            (out, Shape::from((b, c, oh, ow)))
        })
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Upsample2x)?))
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2x)?)
}

/// Max pooling with padding (padded cells never win).
struct MaxPool(Window);
struct MaxPoolGrad(Window);

impl MaxPool {
    fn argmax<T: WithDType>(g: &Window, x: &[T]) -> Vec<usize> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let plane = g.height * g.width;
        let mut idx = Vec::with_capacity(g.batch * g.channels * oh * ow);
        for p in 0..g.batch * g.channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(usize, T)> = None;
                    for ki in 0..g.kernel {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kj in 0..g.kernel {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            let at = p * plane + iy as usize * g.width + ix as usize;
                            if best.is_none_or(|(_, v)| x[at] > v) {
                                best = Some((at, x[at]));
                            }
                        }
                    }
                    idx.push(best.map(|(at, _)| at).unwrap_or(usize::MAX));
                }
            }
        }
        idx
    }
}

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "maxpool"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        dispatch1!(storage, layout, |x| {
            let out = MaxPool::argmax(&g, x)
                .into_iter()
                .map(|at| if at == usize::MAX { Default::default() } else { x[at] })
                .collect::<Vec<_>>();
            (out, Shape::from((g.batch, g.channels, g.out_h(), g.out_w())))
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &MaxPoolGrad(self.0))?))
    }
}

impl CustomOp2 for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "maxpool-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.batch, g.channels, g.height, g.width));
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(gr)) => {
                let (x, gr) = (contiguous(x, l1)?, contiguous(gr, l2)?);
                let mut out = vec![0f32; shape.elem_count()];
                for (at, gv) in MaxPool::argmax(&g, x).into_iter().zip(gr) {
                    if at != usize::MAX {
                        out[at] += *gv;
                    }
                }
                Ok((CpuStorage::F32(out), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(gr)) => {
                let (x, gr) = (contiguous(x, l1)?, contiguous(gr, l2)?);
                let mut out = vec![0f64; shape.elem_count()];
                for (at, gv) in MaxPool::argmax(&g, x).into_iter().zip(gr) {
                    if at != usize::MAX {
                        out[at] += *gv;
                    }
                }
                Ok((CpuStorage::F64(out), shape))
            }
            _ => bail!("maxpool-grad: unsupported dtype"),
        }
    }
}

pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let g = Window {
        batch,
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
    };
    Ok(x.contiguous()?.apply_op1(MaxPool(g))?)
}

/// Normalized 1-D Gaussian taps of odd length `size`.
pub fn gaussian_kernel1d(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Depthwise Gaussian blur with zero padding. The kernel is non-negative and
/// sums to one, so `[-1, 1]` inputs stay in `[-1, 1]`.
pub fn gaussian_blur(x: &Tensor, size: usize, sigma: f64) -> Result<Tensor> {
    if size <= 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    let k1 = gaussian_kernel1d(size, sigma);
    let k2: Vec<f64> = k1.iter().flat_map(|a| k1.iter().map(move |b| a * b)).collect();
    let kernel = Tensor::from_vec(k2, (1, 1, size, size), x.device())?.to_dtype(x.dtype())?;
    let flat = x.reshape((b * c, 1, h, w))?;
    let out = conv2d(&flat, &kernel, None, 1, size / 2)?;
    Ok(out.reshape((b, c, h, w))?)
}
