//! Chi-squared tests against the mean-count null, Fisher's exact test, and
//! the special functions behind them.

use serde::{Deserialize, Serialize};

use super::DetectionHistogram;
use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

/// Series for the lower regularized gamma `P(a, x)`; converges fast for `x < a + 1`.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    (sum.ln() - x + a * x.ln() - ln_gamma(a)).exp()
}

/// Continued fraction (modified Lentz) for the upper regularized gamma `Q(a, x)`; for `x ≥ a + 1`.
fn gamma_q_fraction(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Upper regularized incomplete gamma `Q(a, x) = Γ(a, x) / Γ(a)`.
pub fn gamma_q(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || !(x >= 0.0) || !a.is_finite() || x.is_nan() {
        return Err(Error::Stats(format!("incomplete gamma undefined at a={a}, x={x}")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(if x < a + 1.0 {
        (1.0 - gamma_p_series(a, x)).max(0.0)
    } else {
        gamma_q_fraction(a, x)
    })
}

/// Upper tail `P(X ≥ stat)` for `X ~ χ²_df`.
pub fn chi2_sf(stat: f64, df: f64) -> Result<f64> {
    if stat <= 0.0 {
        return Ok(1.0);
    }
    gamma_q(df / 2.0, stat / 2.0)
}

/// Formats a p-value, flooring the display at `1e-300`.
pub fn format_p(p: f64) -> String {
    if p < 1e-300 {
        "<1e-300".to_string()
    } else {
        format!("{p:.4e}")
    }
}

/// Reference distribution for a watermark's statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullReference {
    /// `T · C/(C−1)` against `χ²` with one degree of freedom per (pooled) class.
    ///
    /// With watermark totals free, a row's deviation from the pooled mean has
    /// covariance `(1 − 1/C)·diag(E)`, which this reference matches.
    #[default]
    Calibrated,
    /// `T` against `χ²` with one degree of freedom fewer than the number of classes.
    Classic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquaredOptions {
    pub null: NullReference,
    /// Classes whose expected count falls below this are pooled into one bin.
    pub min_expected: f64,
}

impl Default for ChiSquaredOptions {
    fn default() -> Self {
        Self {
            null: NullReference::Calibrated,
            min_expected: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquaredResult {
    pub watermark_index: usize,
    /// `Σ_k (counts[w,k] − E_k)² / E_k` over the bins actually tested.
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub null: NullReference,
    /// Classes merged into the low-count bin.
    pub pooled_classes: Vec<usize>,
}

/// Tests watermark `w`'s class distribution against the mean over all watermarks.
pub fn chi_squared_per_watermark(
    h: &DetectionHistogram,
    w: usize,
    options: &ChiSquaredOptions,
) -> Result<ChiSquaredResult> {
    let (c, k) = (h.num_watermarks(), h.num_classes());
    if w >= c {
        return Err(Error::IndexOutOfRange {
            index: w,
            num_watermarks: c,
        });
    }
    if k < 2 || c < 2 {
        return Err(Error::InsufficientCounts(format!(
            "need at least 2 watermarks and 2 classes, histogram is {c}x{k}"
        )));
    }
    let expected: Vec<f64> = (0..k)
        .map(|j| (0..c).map(|i| h.count(i, j) as f64).sum::<f64>() / c as f64)
        .collect();
    if expected.iter().all(|&e| e == 0.0) {
        return Err(Error::InsufficientCounts("every expected count is zero".into()));
    }
    let mut bins: Vec<(f64, f64)> = Vec::with_capacity(k + 1);
    let mut pooled = Vec::new();
    let (mut po, mut pe) = (0.0, 0.0);
    for (j, &e) in expected.iter().enumerate() {
        let o = h.count(w, j) as f64;
        if e < options.min_expected {
            pooled.push(j);
            po += o;
            pe += e;
        } else {
            bins.push((o, e));
        }
    }
    if pe > 0.0 {
        bins.push((po, pe));
    }
    if bins.len() < 2 {
        return Err(Error::InsufficientCounts(format!(
            "only {} bin(s) left after pooling classes with expected count below {}",
            bins.len(),
            options.min_expected
        )));
    }
    let statistic: f64 = bins.iter().map(|&(o, e)| (o - e) * (o - e) / e).sum();
    let (df, p_value) = match options.null {
        NullReference::Classic => {
            let df = bins.len() - 1;
            (df, chi2_sf(statistic, df as f64)?)
        }
        NullReference::Calibrated => {
            let df = bins.len();
            let scaled = statistic * c as f64 / (c as f64 - 1.0);
            (df, chi2_sf(scaled, df as f64)?)
        }
    };
    Ok(ChiSquaredResult {
        watermark_index: w,
        statistic,
        degrees_of_freedom: df,
        p_value,
        null: options.null,
        pooled_classes: pooled,
    })
}

pub fn chi_squared_all(h: &DetectionHistogram, options: &ChiSquaredOptions) -> Result<Vec<ChiSquaredResult>> {
    (0..h.num_watermarks())
        .map(|w| chi_squared_per_watermark(h, w, options))
        .collect()
}

/// A watermark row the chi-squared test could not be run on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UntestedWatermark {
    pub watermark_index: usize,
    pub reason: String,
}

/// Like [`chi_squared_all`], but rows with too few counts are set aside instead of failing the lot.
pub fn chi_squared_testable(
    h: &DetectionHistogram,
    options: &ChiSquaredOptions,
) -> Result<(Vec<ChiSquaredResult>, Vec<UntestedWatermark>)> {
    let (mut tested, mut untested) = (Vec::new(), Vec::new());
    for w in 0..h.num_watermarks() {
        match chi_squared_per_watermark(h, w, options) {
            Ok(r) => tested.push(r),
            Err(Error::InsufficientCounts(reason)) => untested.push(UntestedWatermark {
                watermark_index: w,
                reason,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok((tested, untested))
}

/// `[[a, b], [c, d]]`: rows are watermark detected yes/no, columns attribute detected yes/no.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Self { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }
}

fn ln_factorial(n: u64) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

/// Two-sided Fisher exact p-value: total probability of the tables with the
/// observed margins that are no more likely than the observed one.
pub fn fisher_exact(t: &ContingencyTable2x2) -> Result<f64> {
    let n = t.total();
    if n == 0 {
        return Err(Error::EmptyTable);
    }
    let (r1, r2) = (t.a + t.b, t.c + t.d);
    let c1 = t.a + t.c;
    let c2 = t.b + t.d;
    let fixed = ln_factorial(r1) + ln_factorial(r2) + ln_factorial(c1) + ln_factorial(c2) - ln_factorial(n);
    let ln_p = |a: u64| {
        let (b, c) = (r1 - a, c1 - a);
        let d = r2 - c;
        fixed - ln_factorial(a) - ln_factorial(b) - ln_factorial(c) - ln_factorial(d)
    };
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    if lo == hi {
        return Ok(1.0);
    }
    let observed = ln_p(t.a);
    // relative slack so tables tied with the observed one are not lost to rounding
    let cutoff = observed + 1e-7;
    let mut p = 0.0;
    for a in lo..=hi {
        let lp = ln_p(a);
        if lp <= cutoff {
            p += lp.exp();
        }
    }
    Ok(p.min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_at_integers_and_half() {
        let mut f = 1.0f64;
        for n in 1..30u32 {
            assert!((ln_gamma(n as f64) - f.ln()).abs() < 1e-12 * f.ln().abs().max(1.0));
            f *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn chi2_df1_at_ten() {
        // χ²₁ tail = erfc(√(x/2)); erfc(√5) = 1.565402258002549e-3
        assert!((chi2_sf(10.0, 1.0).unwrap() - 1.565_402_258_002_549e-3).abs() < 1e-15);
        assert_eq!(chi2_sf(0.0, 3.0).unwrap(), 1.0);
        // χ²₂ tail is exp(−x/2)
        for x in [0.1, 1.0, 7.5, 40.0, 300.0] {
            let exact = (-x / 2.0f64).exp();
            assert!((chi2_sf(x, 2.0).unwrap() - exact).abs() <= 1e-14 * exact.max(1e-300));
        }
    }

    #[test]
    fn p_value_display_floor() {
        assert_eq!(format_p(1e-320), "<1e-300");
        assert_eq!(format_p(0.0), "<1e-300");
        assert_eq!(format_p(1.5654e-3), "1.5654e-3");
    }

    #[test]
    fn two_by_two_worked_example() {
        let h = DetectionHistogram::from_counts(vec![vec![30, 10], vec![10, 30]]).unwrap();
        let classic = ChiSquaredOptions {
            null: NullReference::Classic,
            ..Default::default()
        };
        let r = chi_squared_per_watermark(&h, 0, &classic).unwrap();
        assert!((r.statistic - 10.0).abs() < 1e-12);
        assert_eq!(r.degrees_of_freedom, 1);
        assert!((r.p_value - 1.565e-3).abs() < 1e-6);

        let cal = chi_squared_per_watermark(&h, 0, &ChiSquaredOptions::default()).unwrap();
        assert_eq!(cal.statistic, r.statistic);
        assert_eq!(cal.degrees_of_freedom, 2);
        // T·C/(C−1) = 20 on two degrees of freedom: e^{−10}
        assert!((cal.p_value - (-10f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_give_zero_and_one() {
        let h = DetectionHistogram::from_counts(vec![vec![5, 7, 9]; 4]).unwrap();
        for null in [NullReference::Calibrated, NullReference::Classic] {
            let r = chi_squared_per_watermark(&h, 2, &ChiSquaredOptions { null, min_expected: 1.0 }).unwrap();
            assert_eq!(r.statistic, 0.0);
            assert_eq!(r.p_value, 1.0);
        }
    }

    #[test]
    fn small_counts_are_pooled_and_empty_is_rejected() {
        let h = DetectionHistogram::from_counts(vec![vec![20, 0, 1, 0], vec![20, 1, 0, 0]]).unwrap();
        let r = chi_squared_per_watermark(&h, 0, &ChiSquaredOptions::default()).unwrap();
        assert_eq!(r.pooled_classes, vec![1, 2, 3]);
        let empty = DetectionHistogram::from_counts(vec![vec![0, 0], vec![0, 0]]).unwrap();
        assert!(matches!(
            chi_squared_per_watermark(&empty, 0, &ChiSquaredOptions::default()),
            Err(Error::InsufficientCounts(_))
        ));
    }

    #[test]
    fn fisher_examples() {
        let p = fisher_exact(&ContingencyTable2x2::new(3, 1, 1, 3)).unwrap();
        assert!((p - 34.0 / 70.0).abs() < 1e-12);
        assert_eq!(fisher_exact(&ContingencyTable2x2::new(0, 0, 4, 6)).unwrap(), 1.0);
        assert!(matches!(
            fisher_exact(&ContingencyTable2x2::new(0, 0, 0, 0)),
            Err(Error::EmptyTable)
        ));
    }

    #[test]
    fn sparse_rows_are_set_aside() {
        // every image in one class column: nothing left to compare against
        let h = DetectionHistogram::from_counts(vec![vec![5, 0, 0], vec![7, 0, 0]]).unwrap();
        let (tested, untested) = chi_squared_testable(&h, &ChiSquaredOptions::default()).unwrap();
        assert!(tested.is_empty());
        assert_eq!(untested.iter().map(|u| u.watermark_index).collect::<Vec<_>>(), [0, 1]);
        let h = DetectionHistogram::from_counts(vec![vec![5, 6, 0], vec![7, 4, 1]]).unwrap();
        let (tested, untested) = chi_squared_testable(&h, &ChiSquaredOptions::default()).unwrap();
        assert_eq!(tested, chi_squared_all(&h, &ChiSquaredOptions::default()).unwrap());
        assert!(untested.is_empty());
    }
}
