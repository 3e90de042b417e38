//! Restoration training: minimize `|R(D(x0, t, ε), t) − x0|₁` over random `(x0, t, ε)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sample::Denoise;
use super::unet::{DenoiserModel, UNetConfig};
use super::DegradationSchedule;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{self, ImageShape, ImageTensor};
use crate::nn::optim::{accumulate, Adam};
use crate::nn::ParamStore;

const CHECKPOINT_FORMAT: &str = "diffmark.denoiser.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub unet: UNetConfig,
    pub num_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches summed per optimizer step.
    #[serde(default = "one")]
    pub grad_accumulation: usize,
    pub learning_rate: f64,
    /// Decay of an exponential moving average of the weights; off when absent.
    #[serde(default)]
    pub ema_decay: Option<f64>,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl DiffusionConfig {
    /// Channel scale 32, widths (1, 2, 2), batch 64, lr 2e-5, T = 50.
    pub fn desk(image_shape: ImageShape) -> Self {
        Self {
            unet: UNetConfig {
                image_shape,
                channel_scale: 32,
                block_widths: vec![1, 2, 2],
                res_blocks_per_level: 1,
            },
            num_steps: 50,
            epochs: 100,
            batch_size: 64,
            grad_accumulation: 1,
            learning_rate: 2e-5,
            ema_decay: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.num_steps == 0 || self.batch_size == 0 || self.grad_accumulation == 0 {
            return Err(Error::Config(
                "steps, batch size and accumulation factor must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("EMA decay {d} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub loss: f64,
}

/// A restoration network with its schedule, ready for sampling.
pub struct TrainedDenoiser {
    config: DiffusionConfig,
    schedule: DegradationSchedule,
    store: ParamStore,
    model: DenoiserModel,
    loss_curve: Vec<LossPoint>,
}

impl TrainedDenoiser {
    fn fresh(config: DiffusionConfig) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(config.seed, DType::F32);
        let model = DenoiserModel::new(&store.root().pp("unet"), config.unet.clone())?;
        Ok(Self {
            schedule: DegradationSchedule::linear(config.num_steps)?,
            config,
            store,
            model,
            loss_curve: Vec::new(),
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn schedule(&self) -> &DegradationSchedule {
        &self.schedule
    }

    pub fn loss_curve(&self) -> &[LossPoint] {
        &self.loss_curve
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<ImageTensor>> {
        super::sample(self, &self.schedule, n, seed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_format(CHECKPOINT_FORMAT)?;
        let mut d = Self::fresh(ck.get_json("config")?)?;
        d.store.assign(&ck.section("param."))?;
        d.loss_curve = ck.get_json("loss_curve")?;
        // sampling uses the averaged weights when they exist
        let ema = ck.section("ema.");
        if !ema.is_empty() {
            d.store.assign(&ema)?;
        }
        Ok(d)
    }
}

impl Denoise for TrainedDenoiser {
    fn image_shape(&self) -> ImageShape {
        self.config.unet.image_shape
    }

    fn restore(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.model.forward(x_t, t)
    }
}

struct TrainState {
    epoch: usize,
    rng: ChaCha8Rng,
    opt: Adam,
    ema: Option<BTreeMap<String, Tensor>>,
}

fn save_checkpoint(path: &Path, d: &TrainedDenoiser, st: &TrainState) -> Result<()> {
    let (step, moments) = st.opt.state();
    let mut ck = Checkpoint::new(CHECKPOINT_FORMAT)
        .with_tensors("param.", d.store.tensors())
        .with_tensors("adam.", moments);
    if let Some(ema) = &st.ema {
        ck = ck.with_tensors("ema.", ema.clone());
    }
    ck.meta_json("config", &d.config)?;
    ck.meta_json("loss_curve", &d.loss_curve)?;
    ck.meta("epoch", st.epoch.to_string());
    ck.meta("adam_step", step.to_string());
    ck.meta_json("rng", &(st.rng.get_seed(), st.rng.get_stream(), st.rng.get_word_pos()))?;
    ck.save(path)
}

fn resume(path: &Path, config: &DiffusionConfig, d: &mut TrainedDenoiser, st: &mut TrainState) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    ck.expect_format(CHECKPOINT_FORMAT)?;
    let saved: DiffusionConfig = ck.get_json("config")?;
    if saved.unet != config.unet || saved.num_steps != config.num_steps || saved.seed != config.seed {
        return Err(Error::Checkpoint(format!(
            "{} was written for a different model configuration",
            path.display()
        )));
    }
    d.store.assign(&ck.section("param."))?;
    d.loss_curve = ck.get_json("loss_curve")?;
    let parse = |k: &str| -> Result<u64> {
        ck.get_meta(k)?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad `{k}`: {e}")))
    };
    st.epoch = parse("epoch")? as usize;
    st.opt.load_state(parse("adam_step")?, &ck.section("adam."))?;
    let (seed, stream, pos): ([u8; 32], u64, u128) = ck.get_json("rng")?;
    st.rng = ChaCha8Rng::from_seed(seed);
    st.rng.set_stream(stream);
    st.rng.set_word_pos(pos);
    let ema = ck.section("ema.");
    st.ema = if ema.is_empty() { st.ema.take() } else { Some(ema) };
    Ok(())
}

/// Where and how often training persists its state.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoint written after every epoch; training resumes from it when present.
    pub checkpoint: Option<PathBuf>,
}

/// Gradient of the mean L1 restoration loss over `batch`, summed from
/// micro-batches of at most `micro` items; also returns each micro-batch loss.
fn batch_gradients(
    d: &TrainedDenoiser,
    images: &[ImageTensor],
    batch: &[usize],
    t_all: &[usize],
    noise_all: &[f32],
    micro: usize,
    vars: &[(String, candle_core::Var)],
) -> Result<(GradStore, Vec<f64>)> {
    let numel = d.config.unet.image_shape.numel();
    let mut grads = None;
    let mut values = Vec::new();
    for (j, mb) in batch.chunks(micro).enumerate() {
        let start = j * micro;
        let refs: Vec<&ImageTensor> = mb.iter().map(|&i| &images[i]).collect();
        let x0 = image::stack(&refs, &Device::Cpu)?;
        let t = &t_all[start..start + mb.len()];
        let noise = noise_all[start * numel..(start + mb.len()) * numel].to_vec();
        let noise = Tensor::from_vec(noise, x0.dims(), &Device::Cpu)?;
        let xt = d.schedule.degrade(&x0, t, &noise)?;
        let pred = d.model.forward(&xt, t)?;
        let loss = (pred - &x0)?.abs()?.mean_all()?;
        values.push(loss.to_scalar::<f32>()? as f64);
        // weighted so the micro-batch sum equals the full-batch mean
        let weighted = (loss * (mb.len() as f64 / batch.len() as f64))?;
        accumulate(&mut grads, weighted.backward()?, vars)?;
    }
    grads.ok_or_else(|| Error::Dataset("empty batch".into())).map(|g| (g, values))
}

/// Trains (or resumes training of) a denoiser on `images`.
///
/// `on_epoch` receives each epoch's mean loss.
pub fn train_denoiser(
    images: &[ImageTensor],
    config: &DiffusionConfig,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&LossPoint),
) -> Result<TrainedDenoiser> {
    if images.is_empty() {
        return Err(Error::Dataset("diffusion training needs at least one image".into()));
    }
    let shape = config.unet.image_shape;
    for img in images {
        img.ensure_shape(shape)?;
    }
    let mut d = TrainedDenoiser::fresh(config.clone())?;
    let vars = d.store.trainable();
    let mut st = TrainState {
        epoch: 0,
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xd1ff_0500),
        opt: Adam::new(vars.clone(), config.learning_rate),
        ema: config.ema_decay.map(|_| d.store.tensors()),
    };
    if let Some(path) = options.checkpoint.as_deref().filter(|p| p.exists()) {
        resume(path, config, &mut d, &mut st)?;
    }

    let mut trace = Vec::new();
    let t_max = config.num_steps;
    let numel = shape.numel();
    while st.epoch < config.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut st.rng);
        let (mut sum, mut count) = (0.0, 0usize);
        let micro = config.batch_size.div_ceil(config.grad_accumulation);
        for batch in order.chunks(config.batch_size) {
            // draws are made per batch so accumulation does not change them
            let t_all: Vec<usize> = (0..batch.len()).map(|_| st.rng.random_range(1..=t_max)).collect();
            let noise_all: Vec<f32> = (0..batch.len() * numel)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut st.rng);
                    e as f32
                })
                .collect();
            let (grads, values) = batch_gradients(&d, images, batch, &t_all, &noise_all, micro, &vars)?;
            for (mb, value) in batch.chunks(micro).zip(values) {
                trace.push(value);
                if !value.is_finite() {
                    let start = trace.len().saturating_sub(20);
                    return Err(Error::Diverged {
                        epoch: st.epoch,
                        loss: value,
                        trace: trace[start..].to_vec(),
                    });
                }
                sum += value * mb.len() as f64;
                count += mb.len();
            }
            st.opt.step(&grads)?;
            if let (Some(decay), Some(ema)) = (config.ema_decay, st.ema.as_mut()) {
                for (name, var) in &vars {
                    if let Some(avg) = ema.get_mut(name) {
                        *avg = ((&*avg * decay)? + (var.as_tensor() * (1.0 - decay))?)?;
                    }
                }
            }
        }
        let point = LossPoint {
            epoch: st.epoch,
            loss: sum / count.max(1) as f64,
        };
        on_epoch(&point);
        d.loss_curve.push(point);
        st.epoch += 1;
        if let Some(path) = &options.checkpoint {
            save_checkpoint(path, &d, &st)?;
        }
    }
    if let Some(ema) = st.ema {
        d.store.assign(&ema)?;
    }
    Ok(d)
}

/// Checkpoint path's final form, loadable with [`TrainedDenoiser::load`].
pub fn save_denoiser(d: &TrainedDenoiser, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new(CHECKPOINT_FORMAT).with_tensors("param.", d.store.tensors());
    ck.meta_json("config", &d.config)?;
    ck.meta_json("loss_curve", &d.loss_curve)?;
    ck.meta("epoch", d.loss_curve.len().to_string());
    ck.save(path)
}
