//! Config-driven end-to-end runs with a resumable, hash-checked stage ledger.
//!
//! Stages: ingest → train_codec → mark → train_diffusion → generate →
//! train_classifier → analyze. Each stage writes under
//! `<output_dir>/<stage>/<inputs hash prefix>/`, so a changed input lands in a
//! fresh directory and an unchanged one is found again and skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{file_sha256, sha256_hex};
use crate::codec::{train_codec, CodecConfig, WatermarkCodec};
use crate::dataset::{load_any, synthetic, Dataset, SyntheticSpec};
use crate::detection::classifier::{train_attribute_classifier, AttributeClassifier, ClassifierConfig};
use crate::detection::fid::fid_vs_signal;
use crate::detection::report::{FisherResult, TestReport};
use crate::detection::stats::{chi_squared_testable, fisher_exact, ChiSquaredOptions};
use crate::detection::{build_histogram, ImageClassifier, PredictionMode};
use crate::diffusion::train::{save_denoiser, train_denoiser, DiffusionConfig, TrainOptions, TrainedDenoiser};
use crate::error::{Error, Result};
use crate::image::ImageShape;
use crate::provenance::{apply_marking, resolve_plan, CodecBinding, Manifest, MarkOptions, MarkingPlan, Selector};

pub const LEDGER_FILE: &str = "ledger.json";
const DONE_FILE: &str = "outputs.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
        seed: u64,
    },
    /// Packed dataset file or a directory of PNGs with optional label and attribute tables.
    Path { path: PathBuf },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic { spec, seed } => synthetic(spec, *seed),
            DatasetSource::Path { path } => load_any(path),
        }
    }
}

/// What the histogram columns are: class labels or the values of one attribute.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassTarget {
    #[default]
    Label,
    Attribute {
        name: String,
    },
}

/// Targets and class names for the classifier.
pub fn class_targets(ds: &Dataset, target: &ClassTarget) -> Result<(Vec<usize>, Vec<String>)> {
    match target {
        ClassTarget::Label => {
            let labels = ds.labels()?;
            let names = (0..ds.num_classes()).map(|k| k.to_string()).collect();
            Ok((labels, names))
        }
        ClassTarget::Attribute { name } => {
            if !ds.attribute_names().contains(name) {
                return Err(Error::Dataset(format!("dataset has no attribute `{name}`")));
            }
            let values: Vec<String> = ds
                .records()
                .iter()
                .map(|r| r.attributes.get(name).cloned().unwrap_or_default())
                .collect();
            let names: Vec<String> = values.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
            let idx = values
                .iter()
                .map(|v| names.binary_search(v).expect("value listed"))
                .collect();
            Ok((idx, names))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSettings {
    pub base_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        let c = ClassifierConfig::desk(ImageShape::new(3, 32, 32), 2);
        Self {
            base_width: c.base_width,
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            holdout_fraction: c.holdout_fraction,
        }
    }
}

impl ClassifierSettings {
    pub fn config(&self, image_shape: ImageShape, num_classes: usize) -> ClassifierConfig {
        ClassifierConfig {
            image_shape,
            num_classes,
            base_width: self.base_width,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            holdout_fraction: self.holdout_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOptions {
    #[serde(default)]
    pub prediction_mode: PredictionMode,
    #[serde(default)]
    pub chi_squared: ChiSquaredOptions,
    #[serde(default)]
    pub target: ClassTarget,
    /// Minimum generated samples per class for the FID analysis; `None` skips it.
    #[serde(default = "default_fid_min")]
    pub fid_min_samples: Option<usize>,
}

fn default_fid_min() -> Option<usize> {
    Some(10)
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            prediction_mode: PredictionMode::Sample,
            chi_squared: ChiSquaredOptions::default(),
            target: ClassTarget::Label,
            fid_min_samples: default_fid_min(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub codec: CodecConfig,
    /// Trained codec to reuse instead of training one from `codec`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codec_checkpoint: Option<PathBuf>,
    pub plan: MarkingPlan,
    #[serde(default)]
    pub mark: MarkOptions,
    pub diffusion: DiffusionConfig,
    pub n_generate: usize,
    #[serde(default)]
    pub classifier: ClassifierSettings,
    #[serde(default)]
    pub analysis: AnalysisOptions,
}

pub const PRESETS: [&str; 5] = ["single-class", "all-classes", "5-of-100", "partial-class", "attribute"];

impl ExperimentConfig {
    /// Desk-scale version of one of the named experiment recipes.
    pub fn preset(name: &str, output_dir: impl Into<PathBuf>) -> Result<Self> {
        let seed = 0;
        let cifar_like = SyntheticSpec::default();
        let mut diffusion = DiffusionConfig::desk(ImageShape::new(3, 32, 32));
        diffusion.seed = seed;
        let mut cfg = Self {
            name: name.to_string(),
            seed,
            output_dir: output_dir.into(),
            dataset: DatasetSource::Synthetic {
                spec: cifar_like.clone(),
                seed,
            },
            codec: CodecConfig::desk(16),
            codec_checkpoint: None,
            plan: MarkingPlan::single(Selector::ClassEquals { class: 0 }, 0, None),
            mark: MarkOptions::default(),
            diffusion,
            n_generate: 1000,
            classifier: ClassifierSettings::default(),
            analysis: AnalysisOptions::default(),
        };
        match name {
            "single-class" | "cifar-like-single-class" => {}
            "all-classes" => {
                cfg.plan = MarkingPlan {
                    rules: (0..cifar_like.num_classes)
                        .map(|k| rule(Selector::ClassEquals { class: k }, k))
                        .collect(),
                };
            }
            "5-of-100" => {
                cfg.dataset = DatasetSource::Synthetic {
                    spec: SyntheticSpec {
                        num_classes: 100,
                        per_class: 20,
                        ..cifar_like
                    },
                    seed,
                };
                cfg.plan = MarkingPlan {
                    rules: (0..5).map(|k| rule(Selector::ClassEquals { class: k }, k)).collect(),
                };
                cfg.analysis.fid_min_samples = Some(5);
            }
            "partial-class" => {
                cfg.plan = MarkingPlan::single(Selector::SplitAndClass { split: 0, class: 0 }, 0, None);
            }
            "attribute" => {
                cfg.plan = MarkingPlan::single(
                    Selector::AttributeEquals {
                        name: "marker".into(),
                        value: "yes".into(),
                    },
                    0,
                    None,
                );
                cfg.analysis.target = ClassTarget::Attribute { name: "marker".into() };
                cfg.analysis.fid_min_samples = None;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}`; known presets: {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            Ok(serde_yaml::from_str(&text)?)
        }
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.diffusion.validate()?;
        if self.n_generate == 0 {
            return Err(Error::Config("n_generate must be positive".into()));
        }
        if self.codec_checkpoint.is_none() && self.codec.image_shape != self.diffusion.unet.image_shape {
            return Err(Error::Config(format!(
                "codec works on {} images but the diffusion model on {}",
                self.codec.image_shape, self.diffusion.unet.image_shape
            )));
        }
        Ok(())
    }
}

fn rule(selector: Selector, watermark_index: usize) -> crate::provenance::MarkingRule {
    crate::provenance::MarkingRule {
        selector,
        watermark_index,
        lambda: None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed { cause: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub inputs_hash: String,
    pub outputs_hash: Option<String>,
    pub wall_time_s: f64,
    #[serde(flatten)]
    pub status: StageStatus,
}

/// Append-only history of stage executions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub records: Vec<StageRecord>,
}

impl RunLedger {
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Latest completed record of `stage` with these inputs.
    pub fn completed(&self, stage: &str, inputs_hash: &str) -> Option<&StageRecord> {
        self.records
            .iter()
            .rev()
            .find(|r| r.stage == stage && r.inputs_hash == inputs_hash && r.status == StageStatus::Completed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub ledger: RunLedger,
    pub report: TestReport,
    pub report_dir: PathBuf,
    pub report_hash: String,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

fn hash_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(v)?.as_bytes()))
}

struct Runner<'a> {
    out: PathBuf,
    ledger: RunLedger,
    executed: Vec<String>,
    skipped: Vec<String>,
    log: &'a mut dyn FnMut(&str),
}

impl Runner<'_> {
    /// Runs `body` in the stage directory unless an identical run already
    /// completed there; returns the directory and the outputs hash.
    fn stage(
        &mut self,
        name: &str,
        inputs: &serde_json::Value,
        body: impl FnOnce(&Path, &mut dyn FnMut(&str)) -> Result<String>,
    ) -> Result<(PathBuf, String)> {
        let inputs_hash = hash_json(&(name, inputs))?;
        let dir = self.out.join(name).join(&inputs_hash[..16]);
        let done = dir.join(DONE_FILE);
        if let Some(rec) = self.ledger.completed(name, &inputs_hash) {
            if let (Some(h), true) = (rec.outputs_hash.clone(), done.exists()) {
                let on_disk: String = serde_json::from_str(&fs::read_to_string(&done).map_err(|e| Error::io(&done, e))?)?;
                if on_disk == h {
                    (self.log)(&format!("{name}: unchanged inputs, skipped"));
                    self.skipped.push(name.to_string());
                    return Ok((dir, h));
                }
            }
        }
        (self.log)(&format!("{name}: running in {}", dir.display()));
        let start = Instant::now();
        let result = fs::create_dir_all(&dir)
            .map_err(|e| Error::io(&dir, e))
            .and_then(|_| body(&dir, &mut *self.log));
        let wall = start.elapsed().as_secs_f64();
        match result {
            Ok(h) => {
                fs::write(&done, serde_json::to_string(&h)?).map_err(|e| Error::io(&done, e))?;
                self.ledger.records.push(StageRecord {
                    stage: name.to_string(),
                    inputs_hash,
                    outputs_hash: Some(h.clone()),
                    wall_time_s: wall,
                    status: StageStatus::Completed,
                });
                self.ledger.save(&self.out.join(LEDGER_FILE))?;
                self.executed.push(name.to_string());
                Ok((dir, h))
            }
            Err(e) => {
                let cause = e.to_string();
                self.ledger.records.push(StageRecord {
                    stage: name.to_string(),
                    inputs_hash,
                    outputs_hash: None,
                    wall_time_s: wall,
                    status: StageStatus::Failed { cause: cause.clone() },
                });
                self.ledger.save(&self.out.join(LEDGER_FILE))?;
                Err(Error::Stage {
                    stage: name.to_string(),
                    cause,
                })
            }
        }
    }
}

/// Per-class generated and reference features, and the watermark each class carries.
type FidInputs = (
    BTreeMap<usize, DMatrix<f64>>,
    BTreeMap<usize, DMatrix<f64>>,
    BTreeMap<usize, usize>,
);

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

fn group_features(features: &[Vec<f64>], classes: &[usize]) -> BTreeMap<usize, DMatrix<f64>> {
    let mut by: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (f, &k) in features.iter().zip(classes) {
        by.entry(k).or_default().push(f.clone());
    }
    by.into_iter().map(|(k, rows)| (k, to_matrix(&rows))).collect()
}

/// Which class each rule's watermark belongs to, when its selector names one.
pub fn rule_classes(plan: &MarkingPlan, target: &ClassTarget, class_names: &[String]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for r in &plan.rules {
        let class = match (&r.selector, target) {
            (Selector::ClassEquals { class }, ClassTarget::Label) => Some(*class),
            (Selector::SplitAndClass { class, .. }, ClassTarget::Label) => Some(*class),
            (Selector::AttributeEquals { name, value }, ClassTarget::Attribute { name: t }) if name == t => {
                class_names.iter().position(|n| n == value)
            }
            _ => None,
        };
        if let Some(k) = class {
            m.insert(k, r.watermark_index);
        }
    }
    m
}

/// Runs every stage, skipping those whose inputs match a completed ledger entry.
pub fn run_pipeline(config: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<RunOutcome> {
    config.validate()?;
    let out = config.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    fs::write(out.join("config.yaml"), config.to_yaml()?).map_err(|e| Error::io(&out, e))?;
    let ledger = RunLedger::load_or_default(&out.join(LEDGER_FILE))?;
    let mut r = Runner {
        out: out.clone(),
        ledger,
        executed: Vec::new(),
        skipped: Vec::new(),
        log,
    };
    let seed = config.seed;

    let dataset = config.dataset.load()?;
    let pretrained = config.codec_checkpoint.as_deref().map(WatermarkCodec::load).transpose()?;
    let codec_shape = pretrained.as_ref().map_or(config.codec.image_shape, |c| c.config().image_shape);
    if dataset.shape() != codec_shape || codec_shape != config.diffusion.unet.image_shape {
        return Err(Error::Config(format!(
            "dataset images are {} but the codec expects {} and the diffusion model {}",
            dataset.shape(),
            codec_shape,
            config.diffusion.unet.image_shape
        )));
    }
    let data_fp = dataset.fingerprint();
    r.stage(
        "ingest",
        &serde_json::json!({ "source": config.dataset, "fingerprint": data_fp }),
        |dir, _| {
            dataset.save_packed(&dir.join("dataset.safetensors"))?;
            Ok(data_fp.clone())
        },
    )?;

    let codec_inputs = match &pretrained {
        Some(c) => serde_json::json!({ "checkpoint": c.fingerprint()? }),
        None => serde_json::json!({ "codec": config.codec, "dataset": data_fp, "seed": seed }),
    };
    let (codec_dir, codec_hash) = r.stage("train_codec", &codec_inputs, |dir, log| {
        if let Some(codec) = &pretrained {
            log("  reusing the given codec checkpoint");
            codec.save(&dir.join("codec.safetensors"))?;
            return codec.fingerprint();
        }
        let outcome = train_codec(dataset.images(), &config.codec, seed, |m| {
            log(&format!(
                "  codec epoch {} lambda {:.4} acc {:.3} aug {:.3}",
                m.epoch, m.lambda, m.acc_clean, m.acc_aug
            ))
        })?;
        outcome.codec.save(&dir.join("codec.safetensors"))?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&outcome.metrics)?)
            .map_err(|e| Error::io(dir, e))?;
        outcome.codec.fingerprint()
    })?;
    let codec_path = codec_dir.join("codec.safetensors");

    let (mark_dir, mark_hash) = r.stage(
        "mark",
        &serde_json::json!({ "plan": config.plan, "options": config.mark, "codec": codec_hash, "dataset": data_fp, "seed": seed }),
        |dir, log| {
            let codec = WatermarkCodec::load(&codec_path)?;
            let manifest = resolve_plan(&config.plan, &dataset, &CodecBinding::of(&codec)?, seed)?;
            for s in &manifest.rules {
                log(&format!(
                    "  rule {}: {} images ({:.2}%) with watermark {}",
                    s.rule,
                    s.marked,
                    100.0 * s.fraction,
                    s.watermark_index
                ));
            }
            let marked = apply_marking(&dataset, &manifest, &codec, config.mark)?;
            manifest.save(&dir.join("manifest.json"))?;
            marked.save_packed(&dir.join("marked.safetensors"))?;
            hash_json(&(manifest.content_hash()?, marked.fingerprint()))
        },
    )?;

    let (diff_dir, diff_hash) = r.stage(
        "train_diffusion",
        &serde_json::json!({ "diffusion": config.diffusion, "marked": mark_hash }),
        |dir, log| {
            let marked = Dataset::load_packed(&mark_dir.join("marked.safetensors"))?;
            let opts = TrainOptions {
                checkpoint: Some(dir.join("train_state.safetensors")),
            };
            let d = train_denoiser(marked.images(), &config.diffusion, &opts, |p| {
                log(&format!("  diffusion epoch {} loss {:.5}", p.epoch, p.loss))
            })?;
            let path = dir.join("denoiser.safetensors");
            save_denoiser(&d, &path)?;
            file_sha256(&path)
        },
    )?;

    let (gen_dir, gen_hash) = r.stage(
        "generate",
        &serde_json::json!({ "n": config.n_generate, "seed": seed, "denoiser": diff_hash }),
        |dir, log| generate_to(&diff_dir.join("denoiser.safetensors"), config.n_generate, seed, dir, log),
    )?;

    let (clf_dir, clf_hash) = r.stage(
        "train_classifier",
        &serde_json::json!({ "classifier": config.classifier, "target": config.analysis.target, "dataset": data_fp, "seed": seed }),
        |dir, log| {
            let (labels, names) = class_targets(&dataset, &config.analysis.target)?;
            let cc = config.classifier.config(dataset.shape(), names.len().max(2));
            let clf = train_attribute_classifier(dataset.images(), &labels, &cc, seed, |e, l| {
                log(&format!("  classifier epoch {e} loss {l:.4}"))
            })?;
            log(&format!("  classifier held-out accuracy {:?}", clf.holdout_accuracy()));
            clf.save(&dir.join("classifier.safetensors"))?;
            clf.fingerprint()
        },
    )?;

    let (report_dir, report_hash) = r.stage(
        "analyze",
        &serde_json::json!({
            "analysis": config.analysis, "codec": codec_hash, "classifier": clf_hash,
            "generated": gen_hash, "marking": mark_hash, "seed": seed,
        }),
        |dir, _| {
            let codec = WatermarkCodec::load(&codec_path)?;
            let clf = AttributeClassifier::load(&clf_dir.join("classifier.safetensors"))?;
            let generated = Dataset::load_packed(&gen_dir.join("samples.safetensors"))?;
            let manifest = Manifest::load(&mark_dir.join("manifest.json"))?;
            let report = analyze(&generated, &dataset, &codec, &clf, &manifest, &config.analysis, seed)?;
            report.write_dir(dir)?;
            report.content_hash()
        },
    )?;
    let report = TestReport::from_json(
        &fs::read_to_string(report_dir.join("report.json")).map_err(|e| Error::io(&report_dir, e))?,
    )?;
    Ok(RunOutcome {
        ledger: r.ledger,
        report,
        report_dir,
        report_hash,
        executed: r.executed,
        skipped: r.skipped,
    })
}

/// Seed sidecar written next to generated samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub n: usize,
    pub seed: u64,
    pub denoiser_sha256: String,
    pub num_steps: usize,
}

/// Samples `n` images into `dir/samples.safetensors` with a `samples.seed.json` sidecar;
/// returns the samples' fingerprint.
pub fn generate_to(denoiser: &Path, n: usize, seed: u64, dir: &Path, log: &mut dyn FnMut(&str)) -> Result<String> {
    let d = TrainedDenoiser::load(denoiser)?;
    let images = crate::diffusion::sample_with_progress(&d, d.schedule(), n, seed, |done| {
        log(&format!("  generated {done}/{n}"))
    })?;
    let ds = Dataset::from_images(images)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.save_packed(&dir.join("samples.safetensors"))?;
    let rec = GenerationRecord {
        n,
        seed,
        denoiser_sha256: file_sha256(denoiser)?,
        num_steps: d.schedule().num_steps(),
    };
    let side = dir.join("samples.seed.json");
    fs::write(&side, serde_json::to_string_pretty(&rec)?).map_err(|e| Error::io(&side, e))?;
    Ok(ds.fingerprint())
}

/// Histogram, per-watermark tests, Fisher tables for marked classes, and the FID pairing.
pub fn analyze(
    generated: &Dataset,
    reference: &Dataset,
    codec: &WatermarkCodec,
    classifier: &AttributeClassifier,
    manifest: &Manifest,
    options: &AnalysisOptions,
    seed: u64,
) -> Result<TestReport> {
    let h = build_histogram(generated.images(), codec, classifier, options.prediction_mode, seed)?;
    let (chi, untested) = chi_squared_testable(&h, &options.chi_squared)?;
    let (ref_labels, class_names) = class_targets(reference, &options.target)?;
    let pairs = rule_classes(&manifest.plan, &options.target, &class_names);
    let mut fisher = Vec::new();
    for (&k, &w) in &pairs {
        if k < h.num_classes() && w < h.num_watermarks() {
            let table = h.contingency(w, k);
            fisher.push(FisherResult {
                watermark_index: w,
                class_id: k,
                table,
                p_value: fisher_exact(&table)?,
            });
        }
    }
    let fid = match options.fid_min_samples {
        Some(min) if !pairs.is_empty() => {
            let testable: BTreeMap<usize, usize> = pairs
                .iter()
                .filter(|(_, w)| chi.iter().any(|r| r.watermark_index == **w))
                .map(|(&k, &w)| (k, w))
                .collect();
            let (g, r, m) = fid_inputs(generated, reference, classifier, &ref_labels, &testable)?;
            Some(fid_vs_signal(&g, &r, &m, &chi, min)?)
        }
        _ => None,
    };
    Ok(TestReport {
        seed,
        n_generated: generated.len(),
        prediction_mode: options.prediction_mode,
        chi_squared_options: options.chi_squared,
        marking: manifest.rules.clone(),
        classifier_accuracy: classifier.holdout_accuracy(),
        class_names,
        histogram: h,
        chi_squared: chi,
        untested,
        fisher,
        fid,
    })
}

fn fid_inputs(
    generated: &Dataset,
    reference: &Dataset,
    classifier: &AttributeClassifier,
    ref_labels: &[usize],
    pairs: &BTreeMap<usize, usize>,
) -> Result<FidInputs> {
    let gen_classes = classifier.predict(generated.images())?;
    let gen = group_features(&classifier.features(generated.images())?, &gen_classes);
    let keep: Vec<usize> = (0..reference.len()).filter(|&i| pairs.contains_key(&ref_labels[i])).collect();
    let ref_imgs: Vec<_> = keep.iter().map(|&i| reference.images()[i].clone()).collect();
    let ref_cls: Vec<usize> = keep.iter().map(|&i| ref_labels[i]).collect();
    let real = group_features(&classifier.features(&ref_imgs)?, &ref_cls);
    Ok((gen, real, pairs.clone()))
}
