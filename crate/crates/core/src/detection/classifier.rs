//! Small residual classifier for class or attribute prediction on generated images.

use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageClassifier;
use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::codec::loss::decoder_loss_batch;
use crate::error::{Error, Result};
use crate::image::{self, ImageShape, ImageTensor};
use crate::nn::optim::Adam;
use crate::nn::resnet::{ResNet, ResNetSpec};
use crate::nn::{Mode, ParamStore};

const CHECKPOINT_FORMAT: &str = "diffmark.classifier.v1";
const CHUNK: usize = 128;
/// Images used for the final normalization-statistics pass.
const CALIBRATION_IMAGES: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub image_shape: ImageShape,
    pub num_classes: usize,
    #[serde(default = "default_width")]
    pub base_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_width() -> usize {
    8
}

fn default_holdout() -> f64 {
    0.1
}

impl ClassifierConfig {
    pub fn desk(image_shape: ImageShape, num_classes: usize) -> Self {
        Self {
            image_shape,
            num_classes,
            base_width: 8,
            epochs: 5,
            batch_size: 64,
            learning_rate: 2e-3,
            holdout_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.base_width == 0 {
            return Err(Error::Config("classifier epochs, batch size and width must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "bad learning rate {} or holdout fraction {}",
                self.learning_rate, self.holdout_fraction
            )));
        }
        Ok(())
    }

    fn spec(&self) -> ResNetSpec {
        ResNetSpec::resnet18_small(self.image_shape.channels, self.num_classes, self.base_width)
    }
}

/// ResNet18-style classifier evaluated with frozen normalization statistics.
pub struct AttributeClassifier {
    config: ClassifierConfig,
    seed: u64,
    store: ParamStore,
    net: ResNet,
    holdout_accuracy: Option<f64>,
}

impl AttributeClassifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, DType::F32);
        let net = ResNet::new(&store.root(), config.spec())?;
        Ok(Self {
            config,
            seed,
            store,
            net,
            holdout_accuracy: None,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    /// Accuracy on the images held out during training, if any were.
    pub fn holdout_accuracy(&self) -> Option<f64> {
        self.holdout_accuracy
    }

    fn batch(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        for img in images {
            img.ensure_shape(self.config.image_shape)?;
        }
        image::stack(images, self.store.device())
    }

    fn logits(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let refs: Vec<&ImageTensor> = chunk.iter().collect();
            let l = self.net.forward(&self.batch(&refs)?, Mode::Eval)?;
            out.extend(l.to_vec2::<f32>()?);
        }
        Ok(out)
    }

    pub fn accuracy(&self, images: &[ImageTensor], labels: &[usize]) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(images)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / images.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CHECKPOINT_FORMAT).with_tensors("", self.store.tensors());
        ck.meta_json("config", &self.config)?;
        ck.meta("seed", self.seed.to_string());
        ck.meta_json("holdout_accuracy", &self.holdout_accuracy)?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_format(CHECKPOINT_FORMAT)?;
        let seed = ck
            .get_meta("seed")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad seed: {e}")))?;
        let mut c = Self::new(ck.get_json("config")?, seed)?;
        c.store.assign(&ck.section(""))?;
        c.holdout_accuracy = ck.get_json("holdout_accuracy")?;
        Ok(c)
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_checkpoint()?.to_bytes()?))
    }
}

impl ImageClassifier for AttributeClassifier {
    fn image_shape(&self) -> ImageShape {
        self.config.image_shape
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict(&self, images: &[ImageTensor]) -> Result<Vec<usize>> {
        Ok(self
            .logits(images)?
            .iter()
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    fn features(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let refs: Vec<&ImageTensor> = chunk.iter().collect();
            let f = self.net.features(&self.batch(&refs)?, Mode::Eval)?;
            out.extend(f.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }
}

/// Trains on `(images, labels)`, holding out a random fraction to report accuracy.
pub fn train_attribute_classifier(
    images: &[ImageTensor],
    labels: &[usize],
    config: &ClassifierConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<AttributeClassifier> {
    config.validate()?;
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", images.len()),
            actual: labels.len().to_string(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= config.num_classes) {
        return Err(Error::Dataset(format!(
            "label {bad} outside the {} configured classes",
            config.num_classes
        )));
    }
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Dataset(format!(
            "classifier training needs at least two classes, labels contain {distinct:?}"
        )));
    }
    let mut clf = AttributeClassifier::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5_51f1);
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let h = ((images.len() as f64) * config.holdout_fraction).round() as usize;
    let holdout = order.split_off(images.len() - h.min(images.len() - 1));

    let mut opt = Adam::new(clf.store.trainable(), config.learning_rate);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&ImageTensor> = chunk.iter().map(|&i| &images[i]).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = clf.net.forward(&clf.batch(&refs)?, Mode::Train)?;
            let loss = decoder_loss_batch(&logits, &targets)?;
            let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: v,
                    trace: vec![sum / steps.max(1) as f64],
                });
            }
            opt.backward_step(&loss)?;
            sum += v;
            steps += 1;
        }
        on_epoch(epoch, sum / steps.max(1) as f64);
    }
    let calib: Vec<&ImageTensor> = order.iter().take(CALIBRATION_IMAGES).map(|&i| &images[i]).collect();
    clf.net.forward(&clf.batch(&calib)?, Mode::Calibrate)?;

    if !holdout.is_empty() {
        let hi: Vec<ImageTensor> = holdout.iter().map(|&i| images[i].clone()).collect();
        let hl: Vec<usize> = holdout.iter().map(|&i| labels[i]).collect();
        clf.holdout_accuracy = Some(clf.accuracy(&hi, &hl)?);
    }
    Ok(clf)
}
