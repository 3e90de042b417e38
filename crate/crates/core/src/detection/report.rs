//! Analysis report: JSON record plus heatmap, bar chart and scatter figures as SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fid::FidAnalysis;
use super::stats::{format_p, ChiSquaredOptions, ChiSquaredResult, ContingencyTable2x2, UntestedWatermark};
use super::{DetectionHistogram, PredictionMode};
use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::provenance::RuleSummary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherResult {
    pub watermark_index: usize,
    pub class_id: usize,
    pub table: ContingencyTable2x2,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub seed: u64,
    pub n_generated: usize,
    pub prediction_mode: PredictionMode,
    pub chi_squared_options: ChiSquaredOptions,
    /// Per-rule λ and marked fraction of the training corpus.
    pub marking: Vec<RuleSummary>,
    pub classifier_accuracy: Option<f64>,
    /// Name of each histogram column.
    #[serde(default)]
    pub class_names: Vec<String>,
    pub histogram: DetectionHistogram,
    pub chi_squared: Vec<ChiSquaredResult>,
    /// Rows left without a statistic because too few images landed in them.
    #[serde(default)]
    pub untested: Vec<UntestedWatermark>,
    pub fisher: Vec<FisherResult>,
    pub fid: Option<FidAnalysis>,
}

impl TestReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    /// Plain-text table of the per-watermark tests.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "n = {}, seed = {}, prediction mode = {}, null = {:?}, pooling below E = {}",
            self.n_generated, self.seed, self.prediction_mode, self.chi_squared_options.null, self.chi_squared_options.min_expected
        );
        for r in &self.marking {
            let _ = writeln!(
                s,
                "rule {}: watermark {} at lambda {} marks {} images ({:.2}%)",
                r.rule,
                r.watermark_index,
                r.lambda,
                r.marked,
                100.0 * r.fraction
            );
        }
        if let Some(a) = self.classifier_accuracy {
            let _ = writeln!(s, "classifier held-out accuracy = {a:.4}");
        }
        let _ = writeln!(s, "watermark  statistic  df  p-value  pooled");
        for r in &self.chi_squared {
            let _ = writeln!(
                s,
                "{:>9}  {:>9.3}  {:>2}  {}  {:?}",
                r.watermark_index,
                r.statistic,
                r.degrees_of_freedom,
                format_p(r.p_value),
                r.pooled_classes
            );
        }
        for u in &self.untested {
            let _ = writeln!(s, "{:>9}  untested: {}", u.watermark_index, u.reason);
        }
        for f in &self.fisher {
            let t = f.table;
            let _ = writeln!(
                s,
                "fisher wm {} x class {}: [[{}, {}], [{}, {}]] p = {}",
                f.watermark_index,
                f.class_id,
                t.a,
                t.b,
                t.c,
                t.d,
                format_p(f.p_value)
            );
        }
        if let Some(fid) = &self.fid {
            match fid.rank_correlation {
                Some(r) => {
                    let _ = writeln!(s, "spearman(FID, statistic) = {r:.4}");
                }
                None => {
                    let _ = writeln!(s, "spearman(FID, statistic) undefined");
                }
            }
            for (k, n) in &fid.excluded {
                let _ = writeln!(s, "class {k} excluded from FID: {n} samples");
            }
        }
        s
    }

    /// Writes `report.json`, `summary.txt` and the figures; returns the files written.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![
            (dir.join("report.json"), self.to_json()?),
            (dir.join("summary.txt"), self.summary()),
            (dir.join("histogram.svg"), heatmap_svg(&self.histogram)),
            (dir.join("chi2_by_watermark.svg"), bar_svg(&self.chi_squared)),
        ];
        if let Some(fid) = &self.fid {
            files.push((dir.join("fid_vs_chi2.svg"), scatter_svg(fid)));
        }
        for (p, body) in &files {
            fs::write(p, body).map_err(|e| Error::io(p, e))?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Watermark rows × class columns, shaded by count (log scale).
pub fn heatmap_svg(h: &DetectionHistogram) -> String {
    let (c, k) = (h.num_watermarks(), h.num_classes());
    let cell = (480.0 / c.max(k) as f64).clamp(3.0, 40.0);
    let (ml, mt) = (60.0, 30.0);
    let (w, ht) = (ml + cell * k as f64 + 20.0, mt + cell * c as f64 + 40.0);
    let max = h.counts().iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let mut s = svg_open(w, ht);
    let _ = writeln!(s, "<text x=\"{ml}\" y=\"18\">watermark (rows) vs predicted class (columns), n = {}</text>", h.n_images());
    for wi in 0..c {
        for ki in 0..k {
            let v = h.count(wi, ki) as f64;
            let shade = 255.0 - 255.0 * (1.0 + v).ln() / (1.0 + max).ln();
            let g = shade.round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell:.1}\" height=\"{cell:.1}\" fill=\"rgb({g},{g},255)\"><title>wm {wi}, class {ki}: {v}</title></rect>",
                ml + cell * ki as f64,
                mt + cell * wi as f64
            );
        }
    }
    let _ = writeln!(s, "<text x=\"{ml}\" y=\"{:.1}\">class 0..{}</text>", ht - 12.0, k - 1);
    let _ = writeln!(s, "<text x=\"4\" y=\"{:.1}\">wm 0..{}</text>", mt + 10.0, c - 1);
    s.push_str("</svg>\n");
    s
}

/// Statistic per watermark index.
pub fn bar_svg(results: &[ChiSquaredResult]) -> String {
    let n = results.len().max(1);
    let (ml, mt, pw, ph) = (60.0, 30.0, 600.0, 300.0);
    let max = results.iter().map(|r| r.statistic).fold(0.0f64, f64::max).max(1e-12);
    let bw = pw / n as f64;
    let mut s = svg_open(ml + pw + 20.0, mt + ph + 40.0);
    let _ = writeln!(s, "<text x=\"{ml}\" y=\"18\">chi-squared statistic by watermark index (max {max:.3})</text>");
    for (i, r) in results.iter().enumerate() {
        let bh = ph * r.statistic / max;
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"steelblue\"><title>wm {}: {:.3}, p = {}</title></rect>",
            ml + bw * i as f64,
            mt + ph - bh,
            (bw * 0.9).max(0.5),
            r.watermark_index,
            r.statistic,
            format_p(r.p_value)
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
        mt + ph,
        ml + pw
    );
    let _ = writeln!(s, "<text x=\"{ml}\" y=\"{:.1}\">watermark index</text>", mt + ph + 25.0);
    s.push_str("</svg>\n");
    s
}

/// Per-class FID against the paired statistic.
pub fn scatter_svg(fid: &FidAnalysis) -> String {
    let (ml, mt, pw, ph) = (60.0, 30.0, 400.0, 300.0);
    let xs: Vec<f64> = fid.pairings.iter().map(|p| p.fid).collect();
    let ys: Vec<f64> = fid.pairings.iter().map(|p| p.chi2_statistic).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if v.is_empty() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let ((x0, x1), (y0, y1)) = (range(&xs), range(&ys));
    let mut s = svg_open(ml + pw + 20.0, mt + ph + 40.0);
    let corr = fid.rank_correlation.map_or("undefined".to_string(), |r| format!("{r:.3}"));
    let _ = writeln!(s, "<text x=\"{ml}\" y=\"18\">chi-squared statistic vs per-class FID (spearman {corr})</text>");
    for p in &fid.pairings {
        let x = ml + pw * (p.fid - x0) / (x1 - x0);
        let y = mt + ph - ph * (p.chi2_statistic - y0) / (y1 - y0);
        let _ = writeln!(
            s,
            "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"4\" fill=\"darkred\"><title>class {}: FID {:.3}, statistic {:.3}</title></circle>",
            p.class_id, p.fid, p.chi2_statistic
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{ml}\" y=\"{:.1}\">FID {x0:.2} .. {x1:.2}; statistic {y0:.2} .. {y1:.2}</text>",
        mt + ph + 25.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::stats::chi_squared_all;

    fn report() -> TestReport {
        let h = DetectionHistogram::from_counts(vec![vec![40, 5, 5], vec![10, 12, 9], vec![11, 10, 12]]).unwrap();
        let opts = ChiSquaredOptions::default();
        TestReport {
            seed: 4,
            n_generated: h.n_images() as usize,
            prediction_mode: PredictionMode::Sample,
            chi_squared_options: opts,
            marking: vec![],
            classifier_accuracy: Some(0.9),
            class_names: vec!["a".into(), "b".into(), "c".into()],
            chi_squared: chi_squared_all(&h, &opts).unwrap(),
            untested: vec![],
            fisher: vec![],
            fid: None,
            histogram: h,
        }
    }

    #[test]
    fn json_roundtrip_and_stable_hash() {
        let r = report();
        let back = TestReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.content_hash().unwrap(), r.content_hash().unwrap());
    }

    #[test]
    fn writes_figures() {
        let dir = tempfile::tempdir().unwrap();
        let files = report().write_dir(dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let heat = fs::read_to_string(dir.path().join("histogram.svg")).unwrap();
        assert_eq!(heat.matches("<rect x=").count(), 9);
        let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("prediction mode = sample"));
    }
}
