//! Decoder cross-entropy and the flat-distribution regulariser.
//!
//! The scalar forms operate on a single [`DecoderLogits`] in `f64`; the tensor
//! forms average the same quantities over a batch and are what training
//! differentiates.

use candle_core::{Tensor, D};

use super::DecoderLogits;
use crate::error::{Error, Result};

fn check_finite(values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i} is {}", values[i])));
    }
    Ok(())
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Negative log-softmax probability of `target`.
pub fn decoder_loss(logits: &DecoderLogits, target: usize) -> Result<f64> {
    let v = logits.values();
    check_finite(v)?;
    if target >= v.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            num_watermarks: v.len(),
        });
    }
    let pivot = v[target];
    let rest: f64 = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, x)| (x - pivot).exp())
        .sum();
    // ln(1 + rest) keeps precision when the target dominates
    Ok(rest.ln_1p().max(0.0))
}

/// Cross-entropy between the uniform distribution and `softmax(logits)`; at least `ln C`.
pub fn regularisation_loss(logits: &DecoderLogits) -> Result<f64> {
    let v = logits.values();
    check_finite(v)?;
    if v.len() < 2 {
        return Err(Error::Config("regularisation needs at least two watermarks".into()));
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Ok(log_sum_exp(v) - mean)
}

pub fn total_loss(marked: &DecoderLogits, target: usize, clean: &DecoderLogits) -> Result<f64> {
    Ok(decoder_loss(marked, target)? + regularisation_loss(clean)?)
}

fn log_sum_exp_rows(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    Ok((shifted.exp()?.sum_keepdim(D::Minus1)?.log()? + max)?.squeeze(D::Minus1)?)
}

/// Batch mean of [`decoder_loss`] for `(batch, C)` logits.
pub fn decoder_loss_batch(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if targets.len() != b {
        return Err(Error::ShapeMismatch {
            expected: format!("{b} targets"),
            actual: format!("{}", targets.len()),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            num_watermarks: c,
        });
    }
    let idx: Vec<u32> = targets.iter().map(|&t| t as u32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), logits.device())?;
    let picked = logits.gather(&idx, 1)?.squeeze(1)?;
    Ok((log_sum_exp_rows(logits)? - picked)?.mean_all()?)
}

/// Batch mean of [`regularisation_loss`].
pub fn regularisation_loss_batch(logits: &Tensor) -> Result<Tensor> {
    let mean = logits.mean(D::Minus1)?;
    Ok((log_sum_exp_rows(logits)? - mean)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn logits(v: &[f64]) -> DecoderLogits {
        DecoderLogits::new(v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let l = logits(&[0.3; 128]);
        assert!((decoder_loss(&l, 5).unwrap() - 128f64.ln()).abs() < 1e-12);
        assert!((128f64.ln() - 4.8520).abs() < 1e-4);
        let l4 = logits(&[0.0; 4]);
        assert!((regularisation_loss(&l4).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn worked_values() {
        // direct evaluation: ln(1 + 3e^-2)
        let d = decoder_loss(&logits(&[2.0, 0.0, 0.0, 0.0]), 0).unwrap();
        let oracle = -((2f64).exp() / ((2f64).exp() + 3.0)).ln();
        assert!((d - oracle).abs() < 1e-14);
        assert!((d - 0.34075).abs() < 1e-5);

        // (1/4)·Σ −ln p_k with p = (e, 1, 1, 1)/(e + 3)
        let r = regularisation_loss(&logits(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        let z = 1f64.exp() + 3.0;
        let oracle = (-(1f64.exp() / z).ln() - 3.0 * (1.0 / z).ln()) / 4.0;
        assert!((r - oracle).abs() < 1e-14);
        assert!((r - 1.49367).abs() < 1e-5);
    }

    #[test]
    fn total_is_the_sum() {
        let marked = logits(&[2.0, 0.0, 0.0, 0.0]);
        let clean = logits(&[0.0; 4]);
        let t = total_loss(&marked, 0, &clean).unwrap();
        let sum = decoder_loss(&marked, 0).unwrap() + regularisation_loss(&clean).unwrap();
        assert_eq!(t, sum);
        assert!((t - (0.34075 + 4f64.ln())).abs() < 1e-5);
    }

    #[test]
    fn decoder_loss_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0, 700.0] {
            let l = decoder_loss(&logits(&[margin, 0.0, 0.0]), 0).unwrap();
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
        assert!(prev < 1e-300);
    }

    #[test]
    fn rejects_non_finite_and_bad_target() {
        assert!(DecoderLogits::new(vec![0.0, f64::NAN]).is_err());
        assert!(matches!(
            decoder_loss(&logits(&[0.0, 1.0]), 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn batch_forms_match_scalar_forms() {
        let rows = [[2.0, 0.0, -1.0], [0.5, 0.5, 3.0]];
        let t = Tensor::new(&rows, &Device::Cpu).unwrap();
        let d = decoder_loss_batch(&t, &[0, 2]).unwrap().to_scalar::<f64>().unwrap();
        let r = regularisation_loss_batch(&t).unwrap().to_scalar::<f64>().unwrap();
        let d_ref = (decoder_loss(&logits(&rows[0]), 0).unwrap()
            + decoder_loss(&logits(&rows[1]), 2).unwrap())
            / 2.0;
        let r_ref = (regularisation_loss(&logits(&rows[0])).unwrap()
            + regularisation_loss(&logits(&rows[1])).unwrap())
            / 2.0;
        assert!((d - d_ref).abs() < 1e-12);
        assert!((r - r_ref).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn regulariser_bounded_below_by_ln_c(v in prop::collection::vec(-20.0f64..20.0, 2..64)) {
            let c = v.len() as f64;
            let r = regularisation_loss(&logits(&v)).unwrap();
            prop_assert!(r - c.ln() >= -1e-12);
        }

        #[test]
        fn regulariser_is_ln_c_for_constant_logits(x in -50.0f64..50.0, n in 2usize..600) {
            let r = regularisation_loss(&logits(&vec![x; n])).unwrap();
            prop_assert!((r - (n as f64).ln()).abs() < 1e-10);
        }
    }
}
