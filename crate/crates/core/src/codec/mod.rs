//! Watermark generator/decoder pair.
//!
//! The generator maps an index in `[0, C)` to a fixed image-shaped watermark.
//! The decoder maps an image to `C` logits and is trained to recover the index
//! of a blended watermark while staying flat on clean images.

pub mod augment;
pub mod blend;
pub mod generator;
pub mod loss;
pub mod train;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::error::{Error, Result};
use crate::image::{self, ImageShape, ImageTensor};
use crate::nn::resnet::{ResNet, ResNetSpec};
use crate::nn::{Mode, ParamStore};

pub use augment::{augment, AugmentParams};
pub use blend::blend;
pub use generator::Generator;
pub use loss::{decoder_loss, regularisation_loss, total_loss};
pub use train::{train_codec, EpochMetrics, TrainOutcome};

const CHECKPOINT_FORMAT: &str = "diffmark.codec.v1";
const DECODE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderArch {
    /// 18-layer residual network with a 3x3 stem and no stem pooling.
    Compact,
    /// 34-layer residual network with the usual 7x7 stem and max pooling.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpBlock {
    /// Input feature width as a multiple of the channel scale.
    pub width: usize,
    pub modulated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArchitecture {
    pub embedding_dim: usize,
    /// Hidden widths of the MLP; its output layer is sized to the seed feature map.
    pub mlp_widths: Vec<usize>,
    pub channel_scale: usize,
    pub blocks: Vec<UpBlock>,
}

impl GeneratorArchitecture {
    pub fn new(embedding_dim: usize, mlp_widths: Vec<usize>, channel_scale: usize, block_widths: &[usize]) -> Self {
        Self {
            embedding_dim,
            mlp_widths,
            channel_scale,
            blocks: block_widths
                .iter()
                .map(|&width| UpBlock { width, modulated: true })
                .collect(),
        }
    }

    pub fn block_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.width).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub image_shape: ImageShape,
    pub num_watermarks: usize,
    pub lambda_target: f64,
    #[serde(default = "default_lambda_init")]
    pub lambda_init: f64,
    #[serde(default = "default_anneal_epochs")]
    pub anneal_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Learning rate at the last epoch relative to `learning_rate`; the rate
    /// follows a half-cosine down to it once λ has reached its target.
    #[serde(default = "default_final_lr_fraction")]
    pub final_lr_fraction: f64,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub augmentations_enabled: bool,
    pub decoder_arch: DecoderArch,
    pub decoder_width: usize,
    pub generator: GeneratorArchitecture,
    /// Fraction of the images held out for the per-epoch accuracy metrics.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    /// Passes over the held-out split per evaluation, each with fresh random pairs.
    #[serde(default = "default_eval_passes")]
    pub eval_passes: usize,
}

fn default_lambda_init() -> f64 {
    0.5
}
fn default_anneal_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    1e-4
}
fn default_final_lr_fraction() -> f64 {
    1.0
}
fn default_holdout() -> f64 {
    0.1
}
fn default_eval_passes() -> usize {
    1
}

impl CodecConfig {
    /// 32x32 RGB, 128 watermarks, k5 σ2 blur, generator widths (4, 2, 1) at scale 64.
    pub fn cifar() -> Self {
        Self {
            image_shape: ImageShape::new(3, 32, 32),
            num_watermarks: 128,
            lambda_target: 0.025,
            lambda_init: 0.5,
            anneal_epochs: 30,
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-4,
            final_lr_fraction: 1.0,
            blur_kernel: 5,
            blur_sigma: 2.0,
            augmentations_enabled: true,
            decoder_arch: DecoderArch::Compact,
            decoder_width: 64,
            generator: GeneratorArchitecture::new(128, vec![512], 64, &[4, 2, 1]),
            holdout_fraction: 0.1,
            eval_passes: 5,
        }
    }

    /// 128x128 RGB, 512 watermarks, k11 σ4 blur, generator widths (4, 2, 2, 2, 1) at scale 64.
    pub fn celeba() -> Self {
        Self {
            image_shape: ImageShape::new(3, 128, 128),
            num_watermarks: 512,
            blur_kernel: 11,
            blur_sigma: 4.0,
            decoder_arch: DecoderArch::Standard,
            generator: GeneratorArchitecture::new(128, vec![512], 64, &[4, 2, 2, 2, 1]),
            batch_size: 32,
            ..Self::cifar()
        }
    }

    /// CIFAR layout with narrow networks and a short decayed schedule, for CPU runs.
    pub fn desk(num_watermarks: usize) -> Self {
        Self {
            num_watermarks,
            epochs: 20,
            anneal_epochs: 8,
            batch_size: 32,
            learning_rate: 2e-3,
            final_lr_fraction: 0.05,
            decoder_width: 8,
            generator: GeneratorArchitecture::new(32, vec![64], 8, &[4, 2, 1]),
            eval_passes: 2,
            ..Self::cifar()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_watermarks < 2 {
            return bad(format!("need at least 2 watermarks, got {}", self.num_watermarks));
        }
        if !(self.lambda_target > 0.0 && self.lambda_target <= self.lambda_init && self.lambda_init <= 1.0) {
            return bad(format!(
                "require 0 < lambda_target ({}) <= lambda_init ({}) <= 1",
                self.lambda_target, self.lambda_init
            ));
        }
        if self.blur_kernel == 0 || self.blur_kernel % 2 == 0 {
            return bad(format!("blur kernel must be odd and >= 1, got {}", self.blur_kernel));
        }
        if self.blur_kernel > 1 && !(self.blur_sigma > 0.0) {
            return bad(format!("blur sigma must be positive, got {}", self.blur_sigma));
        }
        if self.batch_size == 0 || self.decoder_width == 0 {
            return bad("batch size and decoder width must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("invalid learning rate {}", self.learning_rate));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad(format!("final learning-rate fraction {} outside (0, 1]", self.final_lr_fraction));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout fraction {} outside [0, 1)", self.holdout_fraction));
        }
        let s = self.image_shape;
        if s.channels == 0 || s.height == 0 || s.width == 0 {
            return bad(format!("empty image shape {s}"));
        }
        let g = &self.generator;
        if g.blocks.is_empty() || g.channel_scale == 0 || g.embedding_dim == 0 {
            return bad("generator needs at least one block and positive widths".into());
        }
        if g.blocks.iter().any(|b| b.width == 0) || g.mlp_widths.contains(&0) {
            return bad("generator widths must be positive".into());
        }
        generator::seed_resolution(s, g.blocks.len())?;
        Ok(())
    }

    pub(crate) fn decoder_spec(&self) -> ResNetSpec {
        let c = self.image_shape.channels;
        match self.decoder_arch {
            DecoderArch::Compact => ResNetSpec::resnet18_small(c, self.num_watermarks, self.decoder_width),
            DecoderArch::Standard => ResNetSpec::resnet34(c, self.num_watermarks, self.decoder_width),
        }
    }
}

/// λ for `epoch`: linear from `lambda_init` at epoch 0 to `lambda_target` at `anneal_epochs`, constant after.
pub fn anneal_lambda(epoch: usize, config: &CodecConfig) -> f64 {
    if epoch >= config.anneal_epochs {
        return config.lambda_target;
    }
    let frac = epoch as f64 / config.anneal_epochs as f64;
    let l = config.lambda_init + (config.lambda_target - config.lambda_init) * frac;
    l.max(config.lambda_target)
}

/// Learning rate for `epoch`: constant while λ anneals, then a half-cosine
/// from `learning_rate` to `learning_rate · final_lr_fraction` at the last epoch.
pub fn codec_learning_rate(epoch: usize, config: &CodecConfig) -> f64 {
    let lr = config.learning_rate;
    let last = config.epochs.saturating_sub(1);
    if epoch <= config.anneal_epochs || last <= config.anneal_epochs {
        return lr;
    }
    let frac = ((epoch - config.anneal_epochs) as f64 / (last - config.anneal_epochs) as f64).min(1.0);
    let floor = lr * config.final_lr_fraction;
    floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkImage {
    index: usize,
    image: ImageTensor,
}

impl WatermarkImage {
    pub fn new(index: usize, image: ImageTensor) -> Self {
        Self { index, image }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn image(&self) -> &ImageTensor {
        &self.image
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLogits {
    values: Vec<f64>,
}

impl DecoderLogits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("empty logit vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {i} is {}", values[i])));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn softmax(&self) -> Vec<f64> {
        let lse = loss::log_sum_exp(&self.values);
        self.values.iter().map(|v| (v - lse).exp()).collect()
    }

    /// Shannon entropy of the softmax in nats.
    pub fn entropy(&self) -> f64 {
        let lse = loss::log_sum_exp(&self.values);
        self.values
            .iter()
            .map(|v| {
                let lp = v - lse;
                -lp.exp() * lp
            })
            .sum()
    }
}

/// Generator and decoder with their parameters.
///
/// A codec is usable for marking and decoding once it is frozen: training
/// ends by freezing, and loading restores a frozen codec.
pub struct WatermarkCodec {
    config: CodecConfig,
    seed: u64,
    store: ParamStore,
    generator: Generator,
    decoder: ResNet,
    frozen: bool,
    bank: OnceLock<Vec<WatermarkImage>>,
}

impl WatermarkCodec {
    /// Freshly initialized, untrained codec.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: CodecConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let generator = Generator::new(&root.pp("generator"), &config)?;
        let decoder = ResNet::new(&root.pp("decoder"), config.decoder_spec())?;
        Ok(Self {
            config,
            seed,
            store,
            generator,
            decoder,
            frozen: false,
            bank: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn num_watermarks(&self) -> usize {
        self.config.num_watermarks
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn generator(&self) -> &Generator {
        &self.generator
    }

    pub(crate) fn decoder(&self) -> &ResNet {
        &self.decoder
    }

    /// Fixes normalization statistics to those of the full watermark bank and
    /// marks the codec ready for use.
    pub fn freeze(&mut self) -> Result<()> {
        let all: Vec<usize> = (0..self.config.num_watermarks).collect();
        self.generator.forward(&all, Mode::Calibrate)?;
        self.frozen = true;
        self.bank = OnceLock::new();
        Ok(())
    }

    pub(crate) fn unfreeze(&mut self) {
        self.frozen = false;
        self.bank = OnceLock::new();
    }

    fn ensure_frozen(&self) -> Result<()> {
        if self.frozen {
            Ok(())
        } else {
            Err(Error::Uninitialized)
        }
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.config.num_watermarks {
            return Err(Error::IndexOutOfRange {
                index,
                num_watermarks: self.config.num_watermarks,
            });
        }
        Ok(())
    }

    /// All `C` watermarks, computed once per frozen state.
    pub fn watermark_bank(&self) -> Result<&[WatermarkImage]> {
        self.ensure_frozen()?;
        if let Some(bank) = self.bank.get() {
            return Ok(bank);
        }
        let mut bank = Vec::with_capacity(self.config.num_watermarks);
        let all: Vec<usize> = (0..self.config.num_watermarks).collect();
        for chunk in all.chunks(DECODE_CHUNK) {
            let t = self.generator.forward(chunk, Mode::Eval)?;
            for (&i, img) in chunk.iter().zip(image::unstack(&t)?) {
                bank.push(WatermarkImage::new(i, img));
            }
        }
        Ok(self.bank.get_or_init(|| bank))
    }

    pub fn generate_watermark(&self, index: usize) -> Result<WatermarkImage> {
        self.check_index(index)?;
        Ok(self.watermark_bank()?[index].clone())
    }

    /// `blend(x, w_index, lambda)` with this codec's watermark.
    pub fn mark(&self, x: &ImageTensor, index: usize, lambda: f64) -> Result<ImageTensor> {
        x.ensure_shape(self.config.image_shape)?;
        let w = self.generate_watermark(index)?;
        blend::blend(x, &w, lambda)
    }

    pub fn decode(&self, x: &ImageTensor) -> Result<DecoderLogits> {
        Ok(self.decode_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn decode_batch(&self, images: &[ImageTensor]) -> Result<Vec<DecoderLogits>> {
        self.ensure_frozen()?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(DECODE_CHUNK) {
            for img in chunk {
                img.ensure_shape(self.config.image_shape)?;
            }
            let refs: Vec<&ImageTensor> = chunk.iter().collect();
            let x = image::stack(&refs, self.store.device())?.to_dtype(self.store.dtype())?;
            let logits = self.decode_tensor(&x)?;
            let rows: Vec<Vec<f64>> = logits.to_dtype(DType::F64)?.to_vec2()?;
            for row in rows {
                out.push(DecoderLogits::new(row)?);
            }
        }
        Ok(out)
    }

    /// Evaluation-mode decoder logits for a `(B, C, H, W)` batch.
    pub fn decode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.ensure_frozen()?;
        self.decoder.forward(&x.to_dtype(self.store.dtype())?, Mode::Eval)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CHECKPOINT_FORMAT).with_tensors("", self.store.tensors());
        ck.meta_json("config", &self.config)?;
        ck.meta("seed", self.seed.to_string());
        ck.meta("frozen", self.frozen.to_string());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_format(CHECKPOINT_FORMAT)?;
        let config: CodecConfig = ck.get_json("config")?;
        let seed = ck
            .get_meta("seed")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad seed: {e}")))?;
        let mut codec = Self::new(config, seed)?;
        let tensors: BTreeMap<String, Tensor> = ck.section("");
        codec.store.assign(&tensors)?;
        codec.frozen = ck.get_meta("frozen")? == "true";
        Ok(codec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// SHA-256 of the serialized parameters and configuration.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_checkpoint()?.to_bytes()?))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_config(c: usize) -> CodecConfig {
        CodecConfig {
            image_shape: ImageShape::new(3, 8, 8),
            num_watermarks: c,
            epochs: 2,
            anneal_epochs: 1,
            batch_size: 8,
            decoder_width: 2,
            generator: GeneratorArchitecture::new(4, vec![8], 2, &[2, 1]),
            eval_passes: 1,
            holdout_fraction: 0.25,
            blur_kernel: 3,
            blur_sigma: 1.0,
            ..CodecConfig::cifar()
        }
    }

    #[test]
    fn learning_rate_decays_after_annealing() {
        let cfg = CodecConfig {
            epochs: 21,
            anneal_epochs: 10,
            final_lr_fraction: 0.1,
            ..CodecConfig::desk(16)
        };
        assert_eq!(codec_learning_rate(0, &cfg), 2e-3);
        assert_eq!(codec_learning_rate(10, &cfg), 2e-3);
        assert!((codec_learning_rate(15, &cfg) - 1.1e-3).abs() < 1e-12);
        assert!((codec_learning_rate(20, &cfg) - 2e-4).abs() < 1e-12);
        let flat = CodecConfig::cifar();
        assert_eq!(codec_learning_rate(flat.epochs - 1, &flat), flat.learning_rate);
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        let cfg = CodecConfig::cifar();
        assert_eq!(anneal_lambda(0, &cfg), 0.5);
        assert_eq!(anneal_lambda(30, &cfg), 0.025);
        assert_eq!(anneal_lambda(500, &cfg), 0.025);
        assert!((anneal_lambda(15, &cfg) - (0.5 + 0.025) / 2.0).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 0..40 {
            let l = anneal_lambda(e, &cfg);
            assert!(l <= prev && l >= cfg.lambda_target);
            prev = l;
        }
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig::cifar().validate().is_ok());
        assert!(CodecConfig::celeba().validate().is_ok());
        assert!(CodecConfig::desk(16).validate().is_ok());
        let mut c = CodecConfig::cifar();
        c.blur_kernel = 4;
        assert!(c.validate().is_err());
        let mut c = CodecConfig::cifar();
        c.lambda_target = 0.6;
        assert!(c.validate().is_err());
        let mut c = CodecConfig::cifar();
        c.num_watermarks = 1;
        assert!(c.validate().is_err());
        let mut c = CodecConfig::cifar();
        c.generator = GeneratorArchitecture::new(8, vec![], 8, &[1; 6]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_roundtrips_through_yaml() {
        let c = CodecConfig::desk(16);
        let text = serde_yaml::to_string(&c).unwrap();
        assert_eq!(serde_yaml::from_str::<CodecConfig>(&text).unwrap(), c);
    }

    #[test]
    fn logits_helpers() {
        let l = DecoderLogits::new(vec![1.0, 3.0, 3.0, -2.0]).unwrap();
        assert_eq!(l.argmax(), 1);
        let p = l.softmax();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let flat = DecoderLogits::new(vec![0.7; 16]).unwrap();
        assert!((flat.entropy() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn untrained_codec_refuses_to_generate() {
        let codec = WatermarkCodec::new(tiny_config(4), 1).unwrap();
        assert!(matches!(codec.generate_watermark(0), Err(Error::Uninitialized)));
        let x = ImageTensor::filled(ImageShape::new(3, 8, 8), 0.0).unwrap();
        assert!(matches!(codec.decode(&x), Err(Error::Uninitialized)));
    }

    #[test]
    fn frozen_codec_generates_bounded_deterministic_watermarks() {
        let mut codec = WatermarkCodec::new(tiny_config(4), 1).unwrap();
        codec.freeze().unwrap();
        let a = codec.generate_watermark(2).unwrap();
        let b = codec.generate_watermark(2).unwrap();
        assert_eq!(a, b);
        assert!(a.image().pixels().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(
            codec.generate_watermark(4),
            Err(Error::IndexOutOfRange { index: 4, num_watermarks: 4 })
        ));

        // evaluation-mode output for a lone index matches the frozen full-bank batch
        let all: Vec<usize> = (0..4).collect();
        let calib = codec.generator.forward(&all, Mode::Calibrate).unwrap();
        let calib = image::unstack(&calib).unwrap();
        assert!(calib[2].mse(a.image()).unwrap() < 1e-10);
    }

    #[test]
    fn decode_rejects_wrong_shape() {
        let mut codec = WatermarkCodec::new(tiny_config(4), 1).unwrap();
        codec.freeze().unwrap();
        let x = ImageTensor::filled(ImageShape::new(3, 16, 16), 0.0).unwrap();
        assert!(matches!(codec.decode(&x), Err(Error::ShapeMismatch { .. })));
        let y = ImageTensor::filled(ImageShape::new(3, 8, 8), 0.1).unwrap();
        assert_eq!(codec.decode(&y).unwrap(), codec.decode(&y).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut codec = WatermarkCodec::new(tiny_config(4), 9).unwrap();
        codec.freeze().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.safetensors");
        codec.save(&path).unwrap();
        let back = WatermarkCodec::load(&path).unwrap();
        assert_eq!(back.config(), codec.config());
        assert_eq!(back.fingerprint().unwrap(), codec.fingerprint().unwrap());
        for i in 0..4 {
            assert_eq!(back.generate_watermark(i).unwrap(), codec.generate_watermark(i).unwrap());
        }
    }
}
