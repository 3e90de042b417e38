//! Marking plans, resolved manifests, and applying them to a dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::codec::{blend, WatermarkCodec};
use crate::dataset::{Dataset, ImageRecord};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selector {
    ClassEquals { class: usize },
    AttributeEquals { name: String, value: String },
    SplitAndClass { split: u32, class: usize },
    /// Image names or content hashes.
    ExplicitIds { ids: Vec<String> },
}

impl Selector {
    fn matches(&self, r: &ImageRecord, ids: Option<&BTreeSet<String>>) -> bool {
        match self {
            Selector::ClassEquals { class } => r.label == Some(*class),
            Selector::AttributeEquals { name, value } => r.attributes.get(name) == Some(value),
            Selector::SplitAndClass { split, class } => r.split == Some(*split) && r.label == Some(*class),
            Selector::ExplicitIds { .. } => {
                ids.is_some_and(|ids| ids.contains(&r.name) || ids.contains(&r.content_hash))
            }
        }
    }

    fn check_available(&self, ds: &Dataset) -> Result<()> {
        let missing = |what: &str| Err(Error::Plan(format!("selector {self:?} needs {what}, which the dataset lacks")));
        match self {
            Selector::ClassEquals { .. } if ds.records().iter().any(|r| r.label.is_none()) => {
                missing("labels for every image")
            }
            Selector::SplitAndClass { .. }
                if ds.records().iter().any(|r| r.label.is_none() || r.split.is_none()) =>
            {
                missing("labels and splits for every image")
            }
            Selector::AttributeEquals { name, .. } if !ds.attribute_names().contains(name) => {
                missing(&format!("an attribute table with column `{name}`"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkingRule {
    pub selector: Selector,
    pub watermark_index: usize,
    /// Watermark scale; the codec's target scale when absent.
    #[serde(default)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarkingPlan {
    pub rules: Vec<MarkingRule>,
}

impl MarkingPlan {
    pub fn single(selector: Selector, watermark_index: usize, lambda: Option<f64>) -> Self {
        Self {
            rules: vec![MarkingRule {
                selector,
                watermark_index,
                lambda,
            }],
        }
    }
}

/// What a manifest needs to know about the codec it will be applied with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecBinding {
    pub checkpoint_hash: String,
    pub num_watermarks: usize,
    pub default_lambda: f64,
}

impl CodecBinding {
    pub fn of(codec: &WatermarkCodec) -> Result<Self> {
        Ok(Self {
            checkpoint_hash: codec.fingerprint()?,
            num_watermarks: codec.num_watermarks(),
            default_lambda: codec.config().lambda_target,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub ordinal: usize,
    pub content_hash: String,
    pub rule: Option<usize>,
    pub watermark_index: Option<usize>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSummary {
    pub rule: usize,
    pub watermark_index: usize,
    pub lambda: f64,
    pub marked: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dataset_fingerprint: String,
    pub dataset_size: usize,
    pub codec: CodecBinding,
    pub plan: MarkingPlan,
    pub seed: u64,
    pub created_at: String,
    pub rules: Vec<RuleSummary>,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn marked_count(&self) -> usize {
        self.records.iter().filter(|r| r.rule.is_some()).count()
    }

    pub fn marked_fraction(&self) -> f64 {
        self.marked_count() as f64 / self.dataset_size.max(1) as f64
    }

    /// Per-rule marked counts recomputed from the records.
    pub fn recount(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            if let Some(rule) = r.rule {
                *out.entry(rule).or_insert(0) += 1;
            }
        }
        out
    }

    /// Hash of everything but the creation time.
    pub fn content_hash(&self) -> Result<String> {
        let mut m = self.clone();
        m.created_at.clear();
        Ok(sha256_hex(&serde_json::to_vec(&m)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_slice(&bytes)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Plan(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }
}

/// Resolves every rule against `dataset`. Selectors must be disjoint.
pub fn resolve_plan(plan: &MarkingPlan, dataset: &Dataset, codec: &CodecBinding, seed: u64) -> Result<Manifest> {
    let mut lambdas = Vec::with_capacity(plan.rules.len());
    for rule in &plan.rules {
        if rule.watermark_index >= codec.num_watermarks {
            return Err(Error::IndexOutOfRange {
                index: rule.watermark_index,
                num_watermarks: codec.num_watermarks,
            });
        }
        let l = rule.lambda.unwrap_or(codec.default_lambda);
        if !(l > 0.0 && l < 1.0) {
            return Err(Error::Plan(format!("rule lambda {l} outside (0, 1)")));
        }
        lambdas.push(l);
        rule.selector.check_available(dataset)?;
    }
    let id_sets: Vec<Option<BTreeSet<String>>> = plan
        .rules
        .iter()
        .map(|r| match &r.selector {
            Selector::ExplicitIds { ids } => Some(ids.iter().cloned().collect()),
            _ => None,
        })
        .collect();

    let mut records = Vec::with_capacity(dataset.len());
    let mut conflicts = Vec::new();
    for r in dataset.records() {
        let hits: Vec<usize> = plan
            .rules
            .iter()
            .enumerate()
            .filter(|(i, rule)| rule.selector.matches(r, id_sets[*i].as_ref()))
            .map(|(i, _)| i)
            .collect();
        if hits.len() > 1 {
            conflicts.push(format!("{} (rules {hits:?})", r.name));
        }
        let rule = hits.first().copied();
        records.push(ManifestRecord {
            ordinal: r.ordinal,
            content_hash: r.content_hash.clone(),
            rule,
            watermark_index: rule.map(|i| plan.rules[i].watermark_index),
            lambda: rule.map(|i| lambdas[i]),
        });
    }
    if !conflicts.is_empty() {
        return Err(Error::OverlappingSelectors { ids: conflicts });
    }

    let n = dataset.len();
    let rules = plan
        .rules
        .iter()
        .enumerate()
        .map(|(i, rule)| {
            let marked = records.iter().filter(|r| r.rule == Some(i)).count();
            RuleSummary {
                rule: i,
                watermark_index: rule.watermark_index,
                lambda: lambdas[i],
                marked,
                fraction: marked as f64 / n as f64,
            }
        })
        .collect();
    Ok(Manifest {
        version: MANIFEST_VERSION,
        dataset_fingerprint: dataset.fingerprint(),
        dataset_size: n,
        codec: codec.clone(),
        plan: plan.clone(),
        seed,
        created_at: chrono::Utc::now().to_rfc3339(),
        rules,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkOptions {
    /// Round marked pixels to 8-bit levels, as when stored to image files.
    pub quantize: bool,
}

impl Default for MarkOptions {
    fn default() -> Self {
        Self { quantize: true }
    }
}

/// Blends each marked record with its watermark; unmarked images are untouched.
pub fn apply_marking(
    dataset: &Dataset,
    manifest: &Manifest,
    codec: &WatermarkCodec,
    options: MarkOptions,
) -> Result<Dataset> {
    if let Some(prev) = dataset.marked_with() {
        return Err(Error::AlreadyMarked(prev.to_string()));
    }
    let fp = dataset.fingerprint();
    if fp != manifest.dataset_fingerprint {
        return Err(Error::StaleManifest {
            manifest: manifest.dataset_fingerprint.clone(),
            dataset: fp,
        });
    }
    let codec_hash = codec.fingerprint()?;
    if codec_hash != manifest.codec.checkpoint_hash {
        return Err(Error::Plan(format!(
            "manifest was resolved for codec {}, got {codec_hash}",
            manifest.codec.checkpoint_hash
        )));
    }
    let mut images = Vec::with_capacity(dataset.len());
    for (img, rec) in dataset.images().iter().zip(&manifest.records) {
        match (rec.watermark_index, rec.lambda) {
            (Some(j), Some(l)) => {
                let marked = blend(img, &codec.generate_watermark(j)?, l)?;
                images.push(if options.quantize { marked.quantized() } else { marked });
            }
            _ => images.push(img.clone()),
        }
    }
    dataset.with_marked_images(images, manifest.content_hash()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic, SyntheticSpec};

    fn binding() -> CodecBinding {
        CodecBinding {
            checkpoint_hash: "c0dec".into(),
            num_watermarks: 16,
            default_lambda: 0.025,
        }
    }

    fn ten_classes() -> Dataset {
        synthetic(
            &SyntheticSpec {
                num_classes: 10,
                per_class: 10,
                size: 4,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn one_class_of_ten_is_ten_percent() {
        let ds = ten_classes();
        let plan = MarkingPlan::single(Selector::ClassEquals { class: 0 }, 0, None);
        let m = resolve_plan(&plan, &ds, &binding(), 0).unwrap();
        assert_eq!(m.marked_count(), 10);
        assert_eq!(m.rules[0].fraction, 0.1);
        assert_eq!(m.rules[0].lambda, 0.025);
        assert_eq!(m.recount()[&0], 10);
    }

    #[test]
    fn split_and_class_is_two_percent() {
        let ds = ten_classes();
        let plan = MarkingPlan::single(Selector::SplitAndClass { split: 1, class: 0 }, 0, Some(0.05));
        let m = resolve_plan(&plan, &ds, &binding(), 0).unwrap();
        assert_eq!(m.marked_count(), 2);
        assert_eq!(m.marked_fraction(), 0.02);
    }

    #[test]
    fn empty_plan_marks_nothing() {
        let ds = ten_classes();
        let m = resolve_plan(&MarkingPlan::default(), &ds, &binding(), 0).unwrap();
        assert_eq!(m.marked_count(), 0);
        assert_eq!(m.records.len(), ds.len());
    }

    #[test]
    fn overlapping_selectors_are_reported() {
        let ds = ten_classes();
        let plan = MarkingPlan {
            rules: vec![
                MarkingRule {
                    selector: Selector::ClassEquals { class: 2 },
                    watermark_index: 0,
                    lambda: None,
                },
                MarkingRule {
                    selector: Selector::ExplicitIds {
                        ids: vec![ds.records()[2].name.clone(), ds.records()[3].name.clone()],
                    },
                    watermark_index: 1,
                    lambda: None,
                },
            ],
        };
        match resolve_plan(&plan, &ds, &binding(), 0).unwrap_err() {
            Error::OverlappingSelectors { ids } => {
                assert_eq!(ids.len(), 1);
                assert!(ids[0].starts_with(&ds.records()[2].name));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_attribute_fails_at_resolution() {
        let ds = ten_classes();
        let plan = MarkingPlan::single(
            Selector::AttributeEquals {
                name: "eyeglasses".into(),
                value: "yes".into(),
            },
            0,
            None,
        );
        assert!(matches!(resolve_plan(&plan, &ds, &binding(), 0), Err(Error::Plan(_))));
    }

    #[test]
    fn bad_index_and_lambda_rejected() {
        let ds = ten_classes();
        let plan = MarkingPlan::single(Selector::ClassEquals { class: 0 }, 16, None);
        assert!(matches!(
            resolve_plan(&plan, &ds, &binding(), 0),
            Err(Error::IndexOutOfRange { .. })
        ));
        let plan = MarkingPlan::single(Selector::ClassEquals { class: 0 }, 1, Some(1.0));
        assert!(resolve_plan(&plan, &ds, &binding(), 0).is_err());
    }

    #[test]
    fn manifest_json_roundtrip() {
        let ds = ten_classes();
        let plan = MarkingPlan::single(Selector::ClassEquals { class: 3 }, 5, None);
        let m = resolve_plan(&plan, &ds, &binding(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        let back = Manifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash().unwrap(), m.content_hash().unwrap());
    }
}
