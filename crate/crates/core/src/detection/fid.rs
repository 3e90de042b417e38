//! Fréchet distance between Gaussian fits of two feature sets, and its
//! per-class pairing with watermark signal strength.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::stats::ChiSquaredResult;
use crate::error::{Error, Result};

/// Eigenvalues down to this (relative to the spectrum's scale) are treated as zero.
const NEG_EIG_TOL: f64 = 1e-6;

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (n - 1.0);
    (mean, cov)
}

fn clipped_eigenvalues(m: DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 0.0 {
            if *v < -NEG_EIG_TOL * scale {
                return Err(Error::MatrixSqrt { residual: -*v });
            }
            *v = 0.0;
        }
    }
    Ok((vals, eig.eigenvectors))
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = clipped_eigenvalues(m.clone())?;
    let d = DMatrix::from_diagonal(&vals.map(f64::sqrt));
    Ok(&vecs * d * vecs.transpose())
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})` for row-sample matrices.
///
/// `Tr (Σ_a Σ_b)^{1/2}` is evaluated as the sum of square roots of the
/// eigenvalues of the symmetric product `Σ_a^{1/2} Σ_b Σ_a^{1/2}`.
pub fn fid(features_a: &DMatrix<f64>, features_b: &DMatrix<f64>) -> Result<f64> {
    if features_a.nrows() < 2 || features_b.nrows() < 2 {
        return Err(Error::Stats(format!(
            "FID needs at least 2 samples per side, got {} and {}",
            features_a.nrows(),
            features_b.nrows()
        )));
    }
    if features_a.ncols() != features_b.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} feature columns", features_a.ncols()),
            actual: features_b.ncols().to_string(),
        });
    }
    if features_a.iter().chain(features_b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("FID features".into()));
    }
    let (ma, sa) = mean_cov(features_a);
    let (mb, sb) = mean_cov(features_b);
    let root_a = sym_sqrt(&sa)?;
    let (vals, _) = clipped_eigenvalues(&root_a * &sb * &root_a)?;
    let tr_cross: f64 = vals.iter().map(|v| v.sqrt()).sum();
    let diff = ma - mb;
    let value = diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * tr_cross;
    Ok(value.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidPairing {
    pub class_id: usize,
    pub watermark_index: usize,
    pub fid: f64,
    pub chi2_statistic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidAnalysis {
    pub pairings: Vec<FidPairing>,
    /// `(class, generated sample count)` for classes below the minimum.
    pub excluded: Vec<(usize, usize)>,
    /// Spearman correlation of FID against the statistic; `None` when undefined.
    pub rank_correlation: Option<f64>,
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` with fewer than two points or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Per-class FID of generated against clean reference features, paired with
/// the statistic of the watermark assigned to that class.
pub fn fid_vs_signal(
    generated: &BTreeMap<usize, DMatrix<f64>>,
    reference: &BTreeMap<usize, DMatrix<f64>>,
    class_watermarks: &BTreeMap<usize, usize>,
    chi2: &[ChiSquaredResult],
    min_samples: usize,
) -> Result<FidAnalysis> {
    let mut pairings = Vec::new();
    let mut excluded = Vec::new();
    for (&class, &w) in class_watermarks {
        let gen = generated.get(&class);
        let count = gen.map_or(0, |g| g.nrows());
        let Some(real) = reference.get(&class) else {
            return Err(Error::Stats(format!("no reference features for class {class}")));
        };
        if count < min_samples.max(2) {
            excluded.push((class, count));
            continue;
        }
        let stat = chi2
            .iter()
            .find(|r| r.watermark_index == w)
            .ok_or_else(|| Error::Stats(format!("no statistic for watermark {w}")))?
            .statistic;
        pairings.push(FidPairing {
            class_id: class,
            watermark_index: w,
            fid: fid(gen.expect("count > 0"), real)?,
            chi2_statistic: stat,
        });
    }
    let f: Vec<f64> = pairings.iter().map(|p| p.fid).collect();
    let s: Vec<f64> = pairings.iter().map(|p| p.chi2_statistic).collect();
    Ok(FidAnalysis {
        rank_correlation: spearman(&f, &s),
        pairings,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e + shift
        })
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = gaussian(500, 6, 0.0, 1);
        assert!(fid(&a, &a).unwrap() <= 1e-8);
    }

    #[test]
    fn symmetric() {
        let a = gaussian(300, 4, 0.0, 1);
        let b = gaussian(400, 4, 0.3, 2);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn too_few_samples_or_mismatched_dims() {
        let a = gaussian(1, 3, 0.0, 1);
        let b = gaussian(5, 3, 0.0, 2);
        assert!(fid(&a, &b).is_err());
        assert!(fid(&gaussian(5, 2, 0.0, 1), &b).is_err());
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), None);
    }

    #[test]
    fn noisy_class_has_max_fid_and_lowest_statistic() {
        let mut gen = BTreeMap::new();
        let mut real = BTreeMap::new();
        let mut map = BTreeMap::new();
        let mut chi = Vec::new();
        for k in 0..4usize {
            real.insert(k, gaussian(200, 3, k as f64, 10 + k as u64));
            let shift = if k == 2 { k as f64 + 3.0 } else { k as f64 };
            gen.insert(k, gaussian(200, 3, shift, 20 + k as u64));
            map.insert(k, k);
            chi.push(ChiSquaredResult {
                watermark_index: k,
                statistic: if k == 2 { 0.5 } else { 50.0 + k as f64 },
                degrees_of_freedom: 4,
                p_value: 0.5,
                null: Default::default(),
                pooled_classes: vec![],
            });
        }
        gen.insert(3, gaussian(3, 3, 3.0, 99));
        let a = fid_vs_signal(&gen, &real, &map, &chi, 10).unwrap();
        assert_eq!(a.excluded, vec![(3, 3)]);
        let worst = a.pairings.iter().max_by(|x, y| x.fid.total_cmp(&y.fid)).unwrap();
        assert_eq!(worst.class_id, 2);
        assert_eq!(worst.chi2_statistic, 0.5);
        assert!(a.rank_correlation.unwrap() < 0.0);
    }
}
