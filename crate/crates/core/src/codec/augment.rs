//! Random augmentation: horizontal flip, rotation in ±45°, resize-crop down to
//! 75% of the side, and Gaussian blur.
//!
//! Each augmentation is drawn independently with probability 1/2. The geometric
//! part is a bilinear resampling and the blur a zero-padded convolution, so the
//! whole pipeline is affine in the pixels; the tensor op backpropagates through
//! its exact adjoint.

use std::sync::Arc;

use candle_core::{bail, CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::{ImageShape, ImageTensor};
use crate::nn::ops::gaussian_kernel1d;

pub const MAX_ROTATION_DEG: f64 = 45.0;
pub const MIN_CROP_SCALE: f64 = 0.75;
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.5, 1.5);
/// Value written into pixels exposed by rotation (black).
pub const ROTATION_FILL: f32 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    /// Side of the crop window relative to the image side.
    pub scale: f64,
    /// Window origin as a fraction of the image side, in `[0, 1 - scale]`.
    pub offset_x: f64,
    pub offset_y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentParams {
    pub hflip: bool,
    pub rotation_deg: Option<f64>,
    pub crop: Option<Crop>,
    pub blur_sigma: Option<f64>,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let hflip = rng.random_bool(0.5);
        let rotation_deg = rng
            .random_bool(0.5)
            .then(|| rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG));
        let crop = rng.random_bool(0.5).then(|| {
            let scale = rng.random_range(MIN_CROP_SCALE..=1.0);
            Crop {
                scale,
                offset_x: rng.random_range(0.0..=1.0 - scale),
                offset_y: rng.random_range(0.0..=1.0 - scale),
            }
        });
        let blur_sigma = rng
            .random_bool(0.5)
            .then(|| rng.random_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1));
        Self {
            hflip,
            rotation_deg,
            crop,
            blur_sigma,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && self.rotation_deg.is_none() && self.crop.is_none() && self.blur_sigma.is_none()
    }

    fn is_geometric(&self) -> bool {
        self.hflip || self.rotation_deg.is_some() || self.crop.is_some()
    }
}

const NO_TAP: u32 = u32::MAX;

/// Precomputed per-image affine map.
#[derive(Debug, Clone)]
struct PixelMap {
    /// Four bilinear taps per output pixel; `None` when the geometry is the identity.
    taps: Option<Vec<[(u32, f32); 4]>>,
    /// Constant contribution from taps that fall outside the image.
    fill: Option<Vec<f32>>,
    blur: Option<Vec<f64>>,
}

impl PixelMap {
    fn new(params: &AugmentParams, height: usize, width: usize) -> Self {
        let (taps, fill) = if params.is_geometric() {
            let (taps, fill) = Self::geometry(params, height, width);
            (Some(taps), fill)
        } else {
            (None, None)
        };
        let blur = params.blur_sigma.map(|sigma| {
            let radius = (2.0 * sigma).ceil() as usize;
            gaussian_kernel1d(2 * radius + 1, sigma)
        });
        Self { taps, fill, blur }
    }

    fn geometry(params: &AugmentParams, height: usize, width: usize) -> (Vec<[(u32, f32); 4]>, Option<Vec<f32>>) {
        let (w, h) = (width as f64, height as f64);
        let (cx, cy) = (w / 2.0, h / 2.0);
        let (sin, cos) = params.rotation_deg.unwrap_or(0.0).to_radians().sin_cos();
        let mut taps = Vec::with_capacity(height * width);
        let mut fill = vec![0f32; height * width];
        let mut any_fill = false;
        for oy in 0..height {
            for ox in 0..width {
                // continuous coordinates with pixel centres at i + 0.5
                let (mut u, mut v) = (ox as f64 + 0.5, oy as f64 + 0.5);
                if let Some(c) = params.crop {
                    u = c.offset_x * w + u * c.scale;
                    v = c.offset_y * h + v * c.scale;
                }
                if params.rotation_deg.is_some() {
                    let (du, dv) = (u - cx, v - cy);
                    u = cx + cos * du + sin * dv;
                    v = cy - sin * du + cos * dv;
                }
                if params.hflip {
                    u = w - u;
                }
                let (sx, sy) = (u - 0.5, v - 0.5);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let corners = [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1.0, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1.0, (1.0 - fx) * fy),
                    (x0 + 1.0, y0 + 1.0, fx * fy),
                ];
                let mut px = [(NO_TAP, 0f32); 4];
                for (slot, &(x, y, wt)) in px.iter_mut().zip(&corners) {
                    if wt == 0.0 {
                        continue;
                    }
                    if x >= 0.0 && y >= 0.0 && x < w && y < h {
                        *slot = ((y as usize * width + x as usize) as u32, wt as f32);
                    } else {
                        fill[oy * width + ox] += ROTATION_FILL * wt as f32;
                        any_fill = true;
                    }
                }
                taps.push(px);
            }
        }
        (taps, any_fill.then_some(fill))
    }

    fn forward<T: WithDType>(&self, src: &[T], dst: &mut [T], height: usize, width: usize) {
        let plane = height * width;
        let mut buf: Vec<T> = vec![T::zero(); plane];
        for (s, d) in src.chunks(plane).zip(dst.chunks_mut(plane)) {
            match &self.taps {
                Some(taps) => {
                    for (i, px) in taps.iter().enumerate() {
                        let mut acc = self.fill.as_ref().map_or(0.0, |f| f[i] as f64);
                        for &(idx, wt) in px {
                            if idx != NO_TAP {
                                acc += wt as f64 * s[idx as usize].to_f64();
                            }
                        }
                        buf[i] = T::from_f64(acc);
                    }
                }
                None => buf.copy_from_slice(s),
            }
            match &self.blur {
                Some(k) => separable_blur(&buf, d, height, width, k),
                None => d.copy_from_slice(&buf),
            }
        }
    }

    fn adjoint<T: WithDType>(&self, grad: &[T], dst: &mut [T], height: usize, width: usize) {
        let plane = height * width;
        let mut buf: Vec<T> = vec![T::zero(); plane];
        for (g, d) in grad.chunks(plane).zip(dst.chunks_mut(plane)) {
            // a symmetric kernel with zero padding is self-adjoint
            match &self.blur {
                Some(k) => separable_blur(g, &mut buf, height, width, k),
                None => buf.copy_from_slice(g),
            }
            match &self.taps {
                Some(taps) => {
                    d.iter_mut().for_each(|v| *v = T::zero());
                    for (i, px) in taps.iter().enumerate() {
                        for &(idx, wt) in px {
                            if idx != NO_TAP {
                                let idx = idx as usize;
                                d[idx] = T::from_f64(d[idx].to_f64() + wt as f64 * buf[i].to_f64());
                            }
                        }
                    }
                }
                None => d.copy_from_slice(&buf),
            }
        }
    }
}

fn separable_blur<T: WithDType>(src: &[T], dst: &mut [T], height: usize, width: usize, k: &[f64]) {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0f64; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && xx < width as isize {
                    acc += kv * src[y * width + xx as usize].to_f64();
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && yy < height as isize {
                    acc += kv * tmp[yy as usize * width + x];
                }
            }
            dst[y * width + x] = T::from_f64(acc);
        }
    }
}

/// Applies `params` to one image. Output stays in `[-1, 1]`.
pub fn apply(x: &ImageTensor, params: &AugmentParams) -> Result<ImageTensor> {
    if params.is_identity() {
        return Ok(x.clone());
    }
    let s = x.shape();
    let map = PixelMap::new(params, s.height, s.width);
    let mut out = vec![0f32; s.numel()];
    map.forward(x.pixels(), &mut out, s.height, s.width);
    ImageTensor::from_clamped(s, out)
}

/// One random augmentation pipeline drawn from `seed`.
pub fn augment(x: &ImageTensor, seed: u64) -> Result<ImageTensor> {
    let params = AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(seed));
    apply(x, &params)
}

struct AugmentOp {
    maps: Arc<Vec<PixelMap>>,
    shape: ImageShape,
}

struct AugmentAdjoint {
    maps: Arc<Vec<PixelMap>>,
    shape: ImageShape,
}

impl AugmentOp {
    fn run<T: WithDType>(&self, x: &[T], adjoint: bool) -> Vec<T> {
        let n = self.shape.numel();
        let mut out = vec![T::zero(); x.len()];
        for ((map, src), dst) in self.maps.iter().zip(x.chunks(n)).zip(out.chunks_mut(n)) {
            if adjoint {
                map.adjoint(src, dst, self.shape.height, self.shape.width);
            } else {
                map.forward(src, dst, self.shape.height, self.shape.width);
            }
        }
        out
    }
}

fn run_op(
    maps: &Arc<Vec<PixelMap>>,
    shape: ImageShape,
    storage: &CpuStorage,
    layout: &Layout,
    adjoint: bool,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let op = AugmentOp {
        maps: maps.clone(),
        shape,
    };
    let Some((start, end)) = layout.contiguous_offsets() else {
        bail!("augment expects a contiguous batch");
    };
    let out_shape = layout.shape().clone();
    match storage {
        CpuStorage::F32(d) => Ok((CpuStorage::F32(op.run(&d[start..end], adjoint)), out_shape)),
        CpuStorage::F64(d) => Ok((CpuStorage::F64(op.run(&d[start..end], adjoint)), out_shape)),
        _ => bail!("augment: unsupported dtype"),
    }
}

impl CustomOp1 for AugmentOp {
    fn name(&self) -> &'static str {
        "augment"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        run_op(&self.maps, self.shape, storage, layout, false)
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let adj = AugmentAdjoint {
            maps: self.maps.clone(),
            shape: self.shape,
        };
        Ok(Some(grad.contiguous()?.apply_op1(adj)?))
    }
}

impl CustomOp1 for AugmentAdjoint {
    fn name(&self) -> &'static str {
        "augment-adjoint"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        run_op(&self.maps, self.shape, storage, layout, true)
    }
}

/// Applies per-image parameters to a `(batch, c, h, w)` tensor, differentiably.
pub fn augment_batch(x: &Tensor, params: &[AugmentParams]) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if params.len() != b {
        return Err(crate::Error::ShapeMismatch {
            expected: format!("{b} augmentation parameter sets"),
            actual: params.len().to_string(),
        });
    }
    let maps = Arc::new(params.iter().map(|p| PixelMap::new(p, h, w)).collect());
    let op = AugmentOp {
        maps,
        shape: ImageShape::new(c, h, w),
    };
    Ok(x.contiguous()?.apply_op1(op)?)
}
