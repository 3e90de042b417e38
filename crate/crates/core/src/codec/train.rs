//! Joint generator/decoder training.
//!
//! Each step draws a random watermark index per image, generates the full
//! watermark bank, blends, optionally augments both the marked and the clean
//! images, and descends on the decoder loss of the marked half plus the
//! regulariser of the clean half.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_batch, AugmentParams};
use super::blend::blend_tensor;
use super::loss::{decoder_loss_batch, regularisation_loss_batch};
use super::{anneal_lambda, codec_learning_rate, CodecConfig, WatermarkCodec};
use crate::error::{Error, Result};
use crate::image::{self, ImageTensor};
use crate::nn::optim::Adam;
use crate::nn::Mode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lambda: f64,
    pub loss_d: f64,
    pub loss_r: f64,
    /// Held-out decode accuracy on marked images without augmentation.
    pub acc_clean: f64,
    /// Held-out decode accuracy on marked images after a random augmentation.
    pub acc_aug: f64,
    /// Mean squared difference between marked and original held-out images.
    pub wm_mse: f64,
}

pub struct TrainOutcome {
    pub codec: WatermarkCodec,
    pub metrics: Vec<EpochMetrics>,
}

fn batch_tensor(images: &[ImageTensor], idx: &[usize], dtype: DType) -> Result<Tensor> {
    let refs: Vec<&ImageTensor> = idx.iter().map(|&i| &images[i]).collect();
    Ok(image::stack(&refs, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Splits `n` items into (train, holdout) index lists.
fn split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    let h = ((n as f64) * fraction).round() as usize;
    let h = h.min(n.saturating_sub(1));
    let holdout = all.split_off(n - h);
    (all, holdout)
}

/// Trains a codec on `images` and returns it frozen, with per-epoch metrics.
///
/// `on_epoch` sees each epoch's metrics as they are produced.
pub fn train_codec(
    images: &[ImageTensor],
    config: &CodecConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::Dataset("codec training needs at least one image".into()));
    }
    for img in images {
        img.ensure_shape(config.image_shape)?;
    }
    let mut codec = WatermarkCodec::new(config.clone(), seed)?;
    let dtype = codec.store().dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let (train_idx, holdout_idx) = split(images.len(), config.holdout_fraction, &mut rng);
    let eval_idx = if holdout_idx.is_empty() { train_idx.clone() } else { holdout_idx };

    let mut opt = Adam::new(codec.store().trainable(), config.learning_rate);
    let all: Vec<usize> = (0..config.num_watermarks).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut trace: Vec<f64> = Vec::new();
    let mut order = train_idx.clone();

    for epoch in 0..config.epochs {
        let lambda = anneal_lambda(epoch, config);
        opt.lr = codec_learning_rate(epoch, config);
        order.shuffle(&mut rng);
        let (mut sum_d, mut sum_r, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len();
            let x = batch_tensor(images, chunk, dtype)?;
            let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..config.num_watermarks)).collect();
            let bank = codec.generator().forward(&all, Mode::Train)?;
            let tidx = Tensor::from_vec(
                targets.iter().map(|&t| t as u32).collect::<Vec<_>>(),
                b,
                x.device(),
            )?;
            let w = bank.index_select(&tidx, 0)?;
            let mut marked = blend_tensor(&x, &w, lambda)?;
            let mut clean = x;
            if config.augmentations_enabled {
                let pm: Vec<AugmentParams> = (0..b).map(|_| AugmentParams::sample(&mut rng)).collect();
                let pc: Vec<AugmentParams> = (0..b).map(|_| AugmentParams::sample(&mut rng)).collect();
                marked = augment_batch(&marked, &pm)?;
                clean = augment_batch(&clean, &pc)?;
            }
            let logits = codec
                .decoder()
                .forward(&Tensor::cat(&[&marked, &clean], 0)?, Mode::Train)?;
            let ld = decoder_loss_batch(&logits.narrow(0, 0, b)?, &targets)?;
            let lr = regularisation_loss_batch(&logits.narrow(0, b, b)?)?;
            let loss = (&ld + &lr)?;
            let value = scalar(&loss)?;
            trace.push(value);
            if !value.is_finite() {
                let start = trace.len().saturating_sub(20);
                return Err(Error::Diverged {
                    epoch,
                    loss: value,
                    trace: trace[start..].to_vec(),
                });
            }
            opt.backward_step(&loss)?;
            sum_d += scalar(&ld)?;
            sum_r += scalar(&lr)?;
            steps += 1;
        }

        codec.freeze()?;
        let (acc_clean, acc_aug, wm_mse) = evaluate(&codec, images, &eval_idx, lambda, config.eval_passes, &mut rng)?;
        codec.unfreeze();
        let m = EpochMetrics {
            epoch,
            lambda,
            loss_d: sum_d / steps.max(1) as f64,
            loss_r: sum_r / steps.max(1) as f64,
            acc_clean,
            acc_aug,
            wm_mse,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    codec.freeze()?;
    Ok(TrainOutcome { codec, metrics })
}

/// Decode accuracy without and with augmentation, and the mean marking MSE,
/// over `passes` random index assignments of the images in `idx`.
pub fn evaluate(
    codec: &WatermarkCodec,
    images: &[ImageTensor],
    idx: &[usize],
    lambda: f64,
    passes: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64, f64)> {
    let c = codec.num_watermarks();
    let (mut hit, mut hit_aug, mut mse, mut n) = (0usize, 0usize, 0.0, 0usize);
    for _ in 0..passes.max(1) {
        let mut marked = Vec::with_capacity(idx.len());
        let mut augmented = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            let t = rng.random_range(0..c);
            let m = codec.mark(&images[i], t, lambda)?;
            mse += m.mse(&images[i])?;
            augmented.push(super::augment::apply(&m, &AugmentParams::sample(rng))?);
            marked.push(m);
            targets.push(t);
        }
        let plain = codec.decode_batch(&marked)?;
        let aug = codec.decode_batch(&augmented)?;
        for ((p, a), &t) in plain.iter().zip(&aug).zip(&targets) {
            hit += (p.argmax() == t) as usize;
            hit_aug += (a.argmax() == t) as usize;
        }
        n += idx.len();
    }
    let n = n.max(1) as f64;
    Ok((hit as f64 / n, hit_aug as f64 / n, mse / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::tests::tiny_config;
    use crate::image::ImageShape;

    fn images(n: usize) -> Vec<ImageTensor> {
        (0..n)
            .map(|i| {
                let shape = ImageShape::new(3, 8, 8);
                let px = (0..shape.numel())
                    .map(|k| (((k * 7 + i * 13) % 17) as f32 / 8.5 - 1.0).clamp(-1.0, 1.0))
                    .collect();
                ImageTensor::new(shape, px).unwrap()
            })
            .collect()
    }

    #[test]
    fn short_run_produces_metrics_and_a_frozen_codec() {
        let cfg = tiny_config(4);
        let data = images(16);
        let mut seen = 0;
        let out = train_codec(&data, &cfg, 3, |_| seen += 1).unwrap();
        assert_eq!(seen, cfg.epochs);
        assert_eq!(out.metrics.len(), cfg.epochs);
        assert!(out.codec.is_frozen());
        let m = &out.metrics[0];
        assert_eq!(m.lambda, 0.5);
        assert!(m.loss_d.is_finite() && m.loss_r >= (4f64).ln() - 1e-5);
        assert!(out.codec.generate_watermark(3).is_ok());
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = tiny_config(4);
        let data = images(12);
        let a = train_codec(&data, &cfg, 5, |_| {}).unwrap();
        let b = train_codec(&data, &cfg, 5, |_| {}).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.codec.fingerprint().unwrap(), b.codec.fingerprint().unwrap());
    }

    #[test]
    fn divergence_aborts_with_trace() {
        let mut cfg = tiny_config(4);
        cfg.learning_rate = 1e38;
        cfg.epochs = 6;
        let err = train_codec(&images(16), &cfg, 1, |_| {}).err().expect("should diverge");
        match err {
            Error::Diverged { trace, .. } => assert!(!trace.is_empty()),
            other => panic!("unexpected {other}"),
        }
    }
}
