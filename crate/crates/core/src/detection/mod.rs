//! Decoding generated images against a codec and a class predictor, and the
//! statistics that read watermark survival out of the resulting histogram.

pub mod classifier;
pub mod fid;
pub mod report;
pub mod stats;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use classifier::{train_attribute_classifier, AttributeClassifier, ClassifierConfig};
pub use fid::{fid, fid_vs_signal, spearman, FidAnalysis, FidPairing};
pub use report::TestReport;
pub use stats::{
    chi2_sf, chi_squared_all, chi_squared_per_watermark, chi_squared_testable, fisher_exact, format_p,
    ChiSquaredOptions, ChiSquaredResult, ContingencyTable2x2, NullReference, UntestedWatermark,
};

use crate::codec::{DecoderLogits, WatermarkCodec};
use crate::error::{Error, Result};
use crate::image::{ImageShape, ImageTensor};

/// Watermark × class counts; every decoded image lands in exactly one cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionHistogram {
    counts: Vec<Vec<u64>>,
    n_images: u64,
}

impl DetectionHistogram {
    pub fn zeros(num_watermarks: usize, num_classes: usize) -> Result<Self> {
        if num_watermarks == 0 || num_classes == 0 {
            return Err(Error::Config(format!(
                "histogram needs at least one row and column, got {num_watermarks}x{num_classes}"
            )));
        }
        Ok(Self {
            counts: vec![vec![0; num_classes]; num_watermarks],
            n_images: 0,
        })
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.first().map_or(0, Vec::len);
        if counts.is_empty() || k == 0 {
            return Err(Error::Config("histogram needs at least one row and column".into()));
        }
        if let Some(bad) = counts.iter().position(|r| r.len() != k) {
            return Err(Error::ShapeMismatch {
                expected: format!("{k} classes per row"),
                actual: format!("row {bad} has {}", counts[bad].len()),
            });
        }
        let n_images = counts.iter().flatten().sum();
        Ok(Self { counts, n_images })
    }

    pub fn num_watermarks(&self) -> usize {
        self.counts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.counts[0].len()
    }

    pub fn n_images(&self) -> u64 {
        self.n_images
    }

    pub fn count(&self, watermark: usize, class: usize) -> u64 {
        self.counts[watermark][class]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn add(&mut self, watermark: usize, class: usize) -> Result<()> {
        if watermark >= self.num_watermarks() {
            return Err(Error::IndexOutOfRange {
                index: watermark,
                num_watermarks: self.num_watermarks(),
            });
        }
        if class >= self.num_classes() {
            return Err(Error::Stats(format!(
                "class {class} outside histogram with {} classes",
                self.num_classes()
            )));
        }
        self.counts[watermark][class] += 1;
        self.n_images += 1;
        Ok(())
    }

    /// Row sums: how often each watermark was decoded.
    pub fn watermark_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// 2x2 table of "watermark `w` decoded" against "class `k` predicted".
    pub fn contingency(&self, watermark: usize, class: usize) -> ContingencyTable2x2 {
        let a = self.count(watermark, class);
        let row: u64 = self.counts[watermark].iter().sum();
        let col: u64 = self.counts.iter().map(|r| r[class]).sum();
        let b = row - a;
        let c = col - a;
        ContingencyTable2x2::new(a, b, c, self.n_images - a - b - c)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Draw an index from the softmax distribution.
    #[default]
    Sample,
    Argmax,
}

impl std::fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredictionMode::Sample => "sample",
            PredictionMode::Argmax => "argmax",
        })
    }
}

pub fn predict_watermark(logits: &DecoderLogits, mode: PredictionMode, rng: &mut impl Rng) -> usize {
    match mode {
        PredictionMode::Argmax => logits.argmax(),
        PredictionMode::Sample => {
            let p = logits.softmax();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return i;
                }
            }
            // u landed in the rounding gap above the last partial sum
            p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
        }
    }
}

/// Maps images to a class or attribute label.
pub trait ImageClassifier {
    fn image_shape(&self) -> ImageShape;
    fn num_classes(&self) -> usize;
    fn predict(&self, images: &[ImageTensor]) -> Result<Vec<usize>>;
    /// Penultimate-layer features, one row per image.
    fn features(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>>;
}

/// Decodes and classifies every image into one histogram cell.
pub fn build_histogram<C: ImageClassifier + ?Sized>(
    images: &[ImageTensor],
    codec: &WatermarkCodec,
    classifier: &C,
    mode: PredictionMode,
    seed: u64,
) -> Result<DetectionHistogram> {
    if images.is_empty() {
        return Err(Error::Dataset("no images to analyze".into()));
    }
    let want = codec.config().image_shape;
    if classifier.image_shape() != want {
        return Err(Error::ShapeMismatch {
            expected: format!("classifier input {want}"),
            actual: classifier.image_shape().to_string(),
        });
    }
    for img in images {
        img.ensure_shape(want)?;
    }
    let logits = codec.decode_batch(images)?;
    let classes = classifier.predict(images)?;
    let mut h = DetectionHistogram::zeros(codec.num_watermarks(), classifier.num_classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (l, &k) in logits.iter().zip(&classes) {
        h.add(predict_watermark(l, mode, &mut rng), k)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::tests::tiny_config;
    use proptest::prelude::*;

    #[test]
    fn argmax_ties_take_lowest() {
        let l = DecoderLogits::new(vec![0.1, 0.9, 0.9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(predict_watermark(&l, PredictionMode::Argmax, &mut rng), 1);
    }

    #[test]
    fn dominant_logit_always_sampled() {
        let l = DecoderLogits::new(vec![0.0, 800.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| predict_watermark(&l, PredictionMode::Sample, &mut rng) == 1));
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let l = DecoderLogits::new(vec![0.3; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut c = [0usize; 4];
        for _ in 0..n {
            c[predict_watermark(&l, PredictionMode::Sample, &mut rng)] += 1;
        }
        for v in c {
            assert!((v as f64 / n as f64 - 0.25).abs() < 0.01, "{c:?}");
        }
    }

    #[test]
    fn sampling_matches_softmax_goodness_of_fit() {
        let l = DecoderLogits::new(vec![0.0, 1.0, 2.0, -1.0, 0.5]).unwrap();
        let p = l.softmax();
        let n = 100_000u64;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0u64; p.len()];
        for _ in 0..n {
            counts[predict_watermark(&l, PredictionMode::Sample, &mut rng)] += 1;
        }
        let t: f64 = counts
            .iter()
            .zip(&p)
            .map(|(&o, &pi)| {
                let e = pi * n as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        assert!(chi2_sf(t, (p.len() - 1) as f64).unwrap() > 1e-3, "T={t}");
    }

    #[test]
    fn contingency_margins() {
        let h = DetectionHistogram::from_counts(vec![vec![5, 1], vec![2, 7], vec![0, 3]]).unwrap();
        let t = h.contingency(0, 0);
        assert_eq!((t.a, t.b, t.c, t.d), (5, 1, 2, 10));
        assert_eq!(t.total(), h.n_images());
        assert!(DetectionHistogram::from_counts(vec![vec![1, 2], vec![3]]).is_err());
    }

    struct ConstClassifier(ImageShape, usize);

    impl ImageClassifier for ConstClassifier {
        fn image_shape(&self) -> ImageShape {
            self.0
        }
        fn num_classes(&self) -> usize {
            3
        }
        fn predict(&self, images: &[ImageTensor]) -> Result<Vec<usize>> {
            Ok(vec![self.1; images.len()])
        }
        fn features(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![0.0]; images.len()])
        }
    }

    #[test]
    fn histogram_mass_and_identical_images() {
        let mut codec = WatermarkCodec::new(tiny_config(4), 1).unwrap();
        codec.freeze().unwrap();
        let shape = codec.config().image_shape;
        let img = ImageTensor::filled(shape, 0.2).unwrap();
        let cls = ConstClassifier(shape, 2);
        let h = build_histogram(std::slice::from_ref(&img), &codec, &cls, PredictionMode::Sample, 0).unwrap();
        assert_eq!(h.n_images(), 1);
        let many = vec![img; 9];
        let h = build_histogram(&many, &codec, &cls, PredictionMode::Argmax, 0).unwrap();
        let nonzero = h.counts().iter().flatten().filter(|&&c| c > 0).count();
        assert_eq!((nonzero, h.n_images()), (1, 9));
        let wrong = ImageTensor::filled(ImageShape::new(3, 4, 4), 0.0).unwrap();
        assert!(build_histogram(&[wrong], &codec, &cls, PredictionMode::Argmax, 0).is_err());
        assert!(build_histogram(&[], &codec, &cls, PredictionMode::Argmax, 0).is_err());
    }

    proptest! {
        #[test]
        fn mass_conservation(cells in proptest::collection::vec((0usize..5, 0usize..3), 0..200)) {
            let mut h = DetectionHistogram::zeros(5, 3).unwrap();
            for &(w, k) in &cells {
                h.add(w, k).unwrap();
            }
            let total: u64 = h.counts().iter().flatten().sum();
            prop_assert_eq!(total, cells.len() as u64);
            prop_assert_eq!(h.n_images(), cells.len() as u64);
        }
    }
}
