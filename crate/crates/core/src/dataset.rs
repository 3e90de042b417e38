//! In-memory image corpora with labels, splits and attribute columns.
//!
//! A dataset is identified by its fingerprint, a hash over every image's
//! content hash and its metadata. Datasets round-trip through a directory of
//! PNGs with CSV side tables, or through a single packed safetensors file that
//! keeps pixels unquantized.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{ImageShape, ImageTensor};

const PACKED_FORMAT: &str = "diffmark.dataset.v1";
pub const LABELS_FILE: &str = "labels.csv";
pub const ATTRIBUTES_FILE: &str = "attributes.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub ordinal: usize,
    pub name: String,
    pub content_hash: String,
    pub label: Option<usize>,
    pub split: Option<u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    shape: ImageShape,
    records: Vec<ImageRecord>,
    images: Vec<ImageTensor>,
    attribute_names: BTreeSet<String>,
    marked_with: Option<String>,
}

pub fn content_hash(image: &ImageTensor) -> String {
    let mut h = Sha256::new();
    h.update(image.shape().to_string().as_bytes());
    for v in image.pixels() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn check_resolutions(names: &[String], images: &[ImageTensor]) -> Result<ImageShape> {
    let Some(first) = images.first() else {
        return Err(Error::Dataset("dataset has no images".into()));
    };
    let expected = first.shape();
    let offenders: Vec<String> = names
        .iter()
        .zip(images)
        .filter(|(_, img)| img.shape() != expected)
        .map(|(n, img)| format!("{n} ({})", img.shape()))
        .collect();
    if !offenders.is_empty() {
        return Err(Error::MixedResolutions {
            expected: expected.to_string(),
            offenders,
        });
    }
    Ok(expected)
}

impl Dataset {
    /// Unlabeled dataset with generated names `img000000`, `img000001`, ...
    pub fn from_images(images: Vec<ImageTensor>) -> Result<Self> {
        let names = (0..images.len()).map(|i| format!("img{i:06}")).collect();
        Self::from_named(names, images)
    }

    pub fn from_named(names: Vec<String>, images: Vec<ImageTensor>) -> Result<Self> {
        if names.len() != images.len() {
            return Err(Error::Dataset(format!("{} names for {} images", names.len(), images.len())));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Dataset("duplicate image names".into()));
        }
        let shape = check_resolutions(&names, &images)?;
        let records = names
            .into_iter()
            .zip(&images)
            .enumerate()
            .map(|(ordinal, (name, img))| ImageRecord {
                ordinal,
                name,
                content_hash: content_hash(img),
                label: None,
                split: None,
                attributes: BTreeMap::new(),
            })
            .collect();
        Ok(Self {
            shape,
            records,
            images,
            attribute_names: BTreeSet::new(),
            marked_with: None,
        })
    }

    pub fn with_labels(mut self, labels: &[usize]) -> Result<Self> {
        self.check_len(labels.len(), "labels")?;
        for (r, &l) in self.records.iter_mut().zip(labels) {
            r.label = Some(l);
        }
        Ok(self)
    }

    pub fn with_splits(mut self, splits: &[u32]) -> Result<Self> {
        self.check_len(splits.len(), "splits")?;
        for (r, &s) in self.records.iter_mut().zip(splits) {
            r.split = Some(s);
        }
        Ok(self)
    }

    /// Adds an attribute column; `None` leaves a record without a value.
    pub fn with_attribute(mut self, name: &str, values: &[Option<String>]) -> Result<Self> {
        self.check_len(values.len(), "attribute values")?;
        for (r, v) in self.records.iter_mut().zip(values) {
            if let Some(v) = v {
                r.attributes.insert(name.to_string(), v.clone());
            }
        }
        self.attribute_names.insert(name.to_string());
        Ok(self)
    }

    fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if n != self.records.len() {
            return Err(Error::Dataset(format!("{n} {what} for {} images", self.records.len())));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn attribute_names(&self) -> &BTreeSet<String> {
        &self.attribute_names
    }

    /// Hash of the manifest this dataset was marked with, if any.
    pub fn marked_with(&self) -> Option<&str> {
        self.marked_with.as_deref()
    }

    /// Number of classes, `1 + max label`; zero when unlabeled.
    pub fn num_classes(&self) -> usize {
        self.records.iter().filter_map(|r| r.label).max().map_or(0, |m| m + 1)
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.records
            .iter()
            .map(|r| {
                r.label
                    .ok_or_else(|| Error::Dataset(format!("image `{}` has no label", r.name)))
            })
            .collect()
    }

    /// Subset with fresh ordinals, keeping names and metadata.
    pub fn subset(&self, ordinals: &[usize]) -> Result<Self> {
        let mut records = Vec::with_capacity(ordinals.len());
        let mut images = Vec::with_capacity(ordinals.len());
        for (new, &i) in ordinals.iter().enumerate() {
            let mut r = self
                .records
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Dataset(format!("ordinal {i} out of range")))?;
            r.ordinal = new;
            records.push(r);
            images.push(self.images[i].clone());
        }
        if images.is_empty() {
            return Err(Error::Dataset("empty subset".into()));
        }
        Ok(Self {
            shape: self.shape,
            records,
            images,
            attribute_names: self.attribute_names.clone(),
            marked_with: self.marked_with.clone(),
        })
    }

    /// Same records with replaced pixels, stamped with the manifest hash that produced them.
    pub(crate) fn with_marked_images(&self, images: Vec<ImageTensor>, manifest_hash: String) -> Result<Self> {
        self.check_len(images.len(), "images")?;
        let mut out = self.clone();
        for ((r, img), old) in out.records.iter_mut().zip(&images).zip(&self.images) {
            if img != old {
                r.content_hash = content_hash(img);
            }
        }
        out.images = images;
        out.marked_with = Some(manifest_hash);
        Ok(out)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.shape.to_string().as_bytes());
        for r in &self.records {
            h.update(r.content_hash.as_bytes());
            h.update(format!("|{:?}|{:?}|{:?}|{:?}\n", r.name, r.label, r.split, r.attributes).as_bytes());
        }
        if let Some(m) = &self.marked_with {
            h.update(b"marked:");
            h.update(m.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save_packed(&self, path: &Path) -> Result<()> {
        let s = self.shape;
        let mut data = Vec::with_capacity(self.len() * s.numel());
        for img in &self.images {
            data.extend_from_slice(img.pixels());
        }
        let t = Tensor::from_vec(data, (self.len(), s.channels, s.height, s.width), &Device::Cpu)?;
        let mut ck = Checkpoint::new(PACKED_FORMAT).with_tensors("", BTreeMap::from([("images".to_string(), t)]));
        ck.meta_json("records", &self.records)?;
        ck.meta_json("attribute_names", &self.attribute_names)?;
        ck.meta_json("marked_with", &self.marked_with)?;
        ck.save(path)
    }

    pub fn load_packed(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_format(PACKED_FORMAT)?;
        let records: Vec<ImageRecord> = ck.get_json("records")?;
        let t = ck
            .tensors
            .get("images")
            .ok_or_else(|| Error::Dataset(format!("{} has no image tensor", path.display())))?;
        let (n, c, h, w) = t.dims4()?;
        if n != records.len() {
            return Err(Error::Dataset(format!("{n} images but {} records", records.len())));
        }
        let shape = ImageShape::new(c, h, w);
        let flat = t.flatten_all()?.to_vec1::<f32>()?;
        let images = flat
            .chunks(shape.numel())
            .map(|p| ImageTensor::new(shape, p.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        for (r, img) in records.iter().zip(&images) {
            if r.content_hash != content_hash(img) {
                return Err(Error::Dataset(format!("content hash mismatch for `{}`", r.name)));
            }
        }
        Ok(Self {
            shape,
            records,
            images,
            attribute_names: ck.get_json("attribute_names")?,
            marked_with: ck.get_json("marked_with")?,
        })
    }

    /// Writes `<name>.png` per image plus the label and attribute tables.
    /// PNG storage quantizes pixels to 8 bits.
    pub fn export_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (r, img) in self.records.iter().zip(&self.images) {
            img.save_png(&dir.join(format!("{}.png", r.name)))?;
        }
        if self.records.iter().any(|r| r.label.is_some() || r.split.is_some()) {
            let path = dir.join(LABELS_FILE);
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
            w.write_record(["name", "label", "split"]).map_err(|e| csv_err(&path, e))?;
            for r in &self.records {
                let label = r.label.map(|l| l.to_string()).unwrap_or_default();
                let split = r.split.map(|s| s.to_string()).unwrap_or_default();
                w.write_record([r.name.as_str(), &label, &split]).map_err(|e| csv_err(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        if !self.attribute_names.is_empty() {
            let path = dir.join(ATTRIBUTES_FILE);
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
            let mut header = vec!["name".to_string()];
            header.extend(self.attribute_names.iter().cloned());
            w.write_record(&header).map_err(|e| csv_err(&path, e))?;
            for r in &self.records {
                let mut row = vec![r.name.clone()];
                for a in &self.attribute_names {
                    row.push(r.attributes.get(a).cloned().unwrap_or_default());
                }
                w.write_record(&row).map_err(|e| csv_err(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Dataset(format!("{}: {e}", path.display()))
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        rows.push(rec.iter().map(|s| s.trim().to_string()).collect());
    }
    Ok((header, rows))
}

/// Strips a trailing `.png` so tables may name files either way.
fn stem(name: &str) -> &str {
    name.strip_suffix(".png").unwrap_or(name)
}

/// Loads every `*.png` in `dir` (sorted by file name), with optional
/// `labels.csv` (`name,label[,split]`) and `attributes.csv` (`name,<attr>...`).
pub fn ingest_dir(dir: &Path) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG images in {}", dir.display())));
    }
    let mut names = Vec::with_capacity(files.len());
    let mut images = Vec::with_capacity(files.len());
    for f in &files {
        names.push(
            f.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        images.push(ImageTensor::load_png(f)?);
    }
    let mut ds = Dataset::from_named(names.clone(), images)?;
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let labels_path = dir.join(LABELS_FILE);
    if labels_path.exists() {
        let (header, rows) = read_table(&labels_path)?;
        if header.len() < 2 || header[0] != "name" || header[1] != "label" {
            return Err(Error::Dataset(format!(
                "{}: expected header `name,label[,split]`",
                labels_path.display()
            )));
        }
        for row in rows {
            let &i = index.get(stem(&row[0])).ok_or_else(|| {
                Error::Dataset(format!("{}: unknown image `{}`", labels_path.display(), row[0]))
            })?;
            let parse_err = |what: &str, v: &str| Error::Dataset(format!("{}: bad {what} `{v}`", labels_path.display()));
            if !row[1].is_empty() {
                ds.records[i].label = Some(row[1].parse().map_err(|_| parse_err("label", &row[1]))?);
            }
            if let Some(s) = row.get(2).filter(|s| !s.is_empty()) {
                ds.records[i].split = Some(s.parse().map_err(|_| parse_err("split", s))?);
            }
        }
    }

    let attr_path = dir.join(ATTRIBUTES_FILE);
    if attr_path.exists() {
        let (header, rows) = read_table(&attr_path)?;
        if header.first().map(String::as_str) != Some("name") {
            return Err(Error::Dataset(format!("{}: first column must be `name`", attr_path.display())));
        }
        for a in &header[1..] {
            ds.attribute_names.insert(a.clone());
        }
        for row in rows {
            let &i = index.get(stem(&row[0])).ok_or_else(|| {
                Error::Dataset(format!("{}: unknown image `{}`", attr_path.display(), row[0]))
            })?;
            for (a, v) in header[1..].iter().zip(&row[1..]) {
                if !v.is_empty() {
                    ds.records[i].attributes.insert(a.clone(), v.clone());
                }
            }
        }
    }
    Ok(ds)
}

/// Loads a dataset from a packed file or a PNG directory.
pub fn load_any(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        ingest_dir(path)
    } else {
        Dataset::load_packed(path)
    }
}

/// Procedural labelled images for desk-scale experiments.
///
/// Class `k` draws shape `k mod 5` (disc, square, horizontal bars, vertical
/// bars, ring) in a class hue on a darker background. `jitter` in `[0, 1]`
/// scales the random position, size, colour and pixel-noise variation. A
/// small bright bar in the top-right corner is drawn for images whose
/// `marker` attribute is `yes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub jitter: f64,
    /// Number of equal splits; record `i` of each class falls in split `i mod num_splits`.
    pub num_splits: u32,
    /// Probability that an image carries the marker attribute.
    pub marker_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            per_class: 200,
            size: 32,
            jitter: 0.5,
            num_splits: 5,
            marker_rate: 0.05,
        }
    }
}

fn hue_rgb(h: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn draw_synthetic(class: usize, marker: bool, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> ImageTensor {
    let n = spec.size;
    let j = spec.jitter.clamp(0.0, 1.0);
    let mut u = |scale: f64| (rng.random::<f64>() * 2.0 - 1.0) * scale * j;
    let base = hue_rgb(class as f64 * 0.381_966 + u(0.04));
    let fg: Vec<f64> = base.iter().map(|c| 0.25 + 0.7 * c + u(0.1)).collect();
    let bg_level = -0.6 + u(0.25);
    let bg_tint = hue_rgb(class as f64 * 0.381_966 + 0.5);
    let cx = 0.5 + u(0.18);
    let cy = 0.5 + u(0.18);
    let r = 0.28 + u(0.08);
    let period = 0.2 + u(0.04);
    let noise = 0.04 * j;
    let shape_kind = class % 5;
    let mut px = vec![0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let fx = (x as f64 + 0.5) / n as f64;
            let fy = (y as f64 + 0.5) / n as f64;
            let (dx, dy) = (fx - cx, fy - cy);
            let d = (dx * dx + dy * dy).sqrt();
            let inside = match shape_kind {
                0 => d < r,
                1 => dx.abs() < r * 0.85 && dy.abs() < r * 0.85,
                2 => (fy / period).floor() as i64 % 2 == 0 && dx.abs() < r * 1.2,
                3 => (fx / period).floor() as i64 % 2 == 0 && dy.abs() < r * 1.2,
                _ => d < r && d > r * 0.55,
            };
            let mark = marker && y < n / 8 + 1 && x >= n - n / 4 - 1 && x < n - 1;
            for c in 0..3 {
                let v = if mark {
                    0.95
                } else if inside {
                    fg[c]
                } else {
                    bg_level + 0.2 * bg_tint[c]
                };
                let e: f64 = rng.sample(StandardNormal);
                px[c * n * n + y * n + x] = (v + noise * e).clamp(-1.0, 1.0) as f32;
            }
        }
    }
    ImageTensor::new(ImageShape::new(3, n, n), px).expect("clamped pixels")
}

/// Balanced synthetic dataset; classes interleave so any prefix stays roughly balanced.
pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.per_class == 0 || spec.size < 4 || spec.num_splits == 0 {
        return Err(Error::Config(format!("degenerate synthetic spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.num_classes * spec.per_class;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    let mut markers = Vec::with_capacity(total);
    for i in 0..spec.per_class {
        for k in 0..spec.num_classes {
            let marker = rng.random_bool(spec.marker_rate.clamp(0.0, 1.0));
            images.push(draw_synthetic(k, marker, spec, &mut rng));
            labels.push(k);
            splits.push(i as u32 % spec.num_splits);
            markers.push(Some(if marker { "yes" } else { "no" }.to_string()));
        }
    }
    Dataset::from_images(images)?
        .with_labels(&labels)?
        .with_splits(&splits)?
        .with_attribute("marker", &markers)
}
