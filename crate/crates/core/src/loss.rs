//! Training objectives and the evaluation metric.
//!
//! Default objective is soft Dice with epsilon 1.0; cross-entropy is the
//! alternative behind the config switch. The Dice coefficient on binary
//! masks is the evaluation metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

/// Which loss the training loop minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    CrossEntropy,
}

pub const DICE_EPS: f64 = 1.0;

/// Soft Dice loss on two-class logits against a binary mask:
/// `1 - (2 * sum(p1 * m) + eps) / (sum(p1) + sum(m) + eps)` with p1 the
/// softmax foreground probability.
pub fn dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: VarId,
    mask: &Tensor<T>,
    eps: f64,
) -> Result<VarId> {
    let lshape = tape.shape(logits).to_vec();
    if lshape.len() != 3 || lshape[0] != 2 || mask.shape != [lshape[1], lshape[2]] {
        return Err(Error::ShapeMismatch {
            op: "dice_loss",
            lhs: lshape,
            rhs: mask.shape.clone(),
        });
    }
    let (h, w) = (lshape[1], lshape[2]);
    let probs = tape.softmax_axis(logits, 0)?;
    let fg = tape.slice_channels(probs, 1, 1)?;
    let mask_id = tape.constant(vec![1, h, w], mask.data.clone())?;
    let prod = tape.mul(fg, mask_id)?;
    let intersection = tape.sum_all(prod)?;
    let fg_sum = tape.sum_all(fg)?;
    let mask_sum: f64 = mask.data.iter().map(|v| v.to_f64()).sum();
    let eps_t = T::from_f64(eps);
    let two = T::from_f64(2.0);
    let numer = tape.affine(intersection, two, eps_t)?;
    let denom = tape.affine(fg_sum, T::ONE, T::from_f64(mask_sum + eps))?;
    let ratio = tape.div(numer, denom)?;
    tape.affine(ratio, -T::ONE, T::ONE)
}

/// Pixel-averaged two-class cross-entropy.
pub fn cross_entropy_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: VarId,
    mask: &Tensor<T>,
) -> Result<VarId> {
    let lshape = tape.shape(logits).to_vec();
    if lshape.len() != 3 || lshape[0] != 2 || mask.shape != [lshape[1], lshape[2]] {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_loss",
            lhs: lshape,
            rhs: mask.shape.clone(),
        });
    }
    tape.cross_entropy2(logits, &mask.data)
}

/// Dice coefficient 2|P∩G| / (|P| + |G|) on binary masks; 1 when both are
/// empty. Non-binary values are rejected.
pub fn dice_metric<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    if pred.shape != gt.shape {
        return Err(Error::ShapeMismatch {
            op: "dice_metric",
            lhs: pred.shape.clone(),
            rhs: gt.shape.clone(),
        });
    }
    let mut inter = 0u64;
    let mut p_count = 0u64;
    let mut g_count = 0u64;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let pb = as_binary(p).ok_or_else(|| non_binary("prediction", p))?;
        let gb = as_binary(g).ok_or_else(|| non_binary("ground truth", g))?;
        p_count += pb as u64;
        g_count += gb as u64;
        inter += (pb & gb) as u64;
    }
    if p_count + g_count == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_count + g_count) as f64)
}

fn as_binary<T: Scalar>(v: T) -> Option<u8> {
    let f = v.to_f64();
    if f == 0.0 {
        Some(0)
    } else if f == 1.0 {
        Some(1)
    } else {
        None
    }
}

fn non_binary<T: Scalar>(which: &str, v: T) -> Error {
    Error::invalid("dice_metric", format!("{which} mask holds non-binary value {v}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_mask_loss() -> f64 {
        // p1 = 0.5 everywhere (zero logits), mask half ones on a 4x4 grid:
        // 1 - (2*4 + 1) / (8 + 8 + 1) = 1 - 9/17.
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(vec![2, 4, 4], vec![0.0; 32]).unwrap();
        let mut mask = Tensor::zeros(vec![4, 4]);
        for i in 0..8 {
            mask.data[i] = 1.0;
        }
        let loss = dice_loss(&mut tape, logits, &mask, DICE_EPS).unwrap();
        tape.data(loss)[0]
    }

    #[test]
    fn dice_loss_closed_form() {
        let expect = 1.0 - 9.0 / 17.0;
        assert!((half_mask_loss() - expect).abs() < 1e-12);
    }

    #[test]
    fn dice_loss_perfect_prediction_approaches_zero() {
        let mut tape = Tape::<f64>::new();
        let mut logits = Tensor::zeros(vec![2, 2, 2]);
        let mask = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        for p in 0..4 {
            let fg = mask.data[p] > 0.5;
            logits.data[p] = if fg { -20.0 } else { 20.0 };
            logits.data[4 + p] = if fg { 20.0 } else { -20.0 };
        }
        let lid = tape.leaf(&logits).unwrap();
        let loss = dice_loss(&mut tape, lid, &mask, DICE_EPS).unwrap();
        assert!(tape.data(loss)[0] < 1e-3);
    }

    #[test]
    fn dice_loss_empty_mask_is_stable() {
        let mut tape = Tape::<f64>::new();
        let mut logits = Tensor::zeros(vec![2, 2, 2]);
        for p in 0..4 {
            logits.data[p] = 20.0;
            logits.data[4 + p] = -20.0;
        }
        let lid = tape.leaf(&logits).unwrap();
        let mask = Tensor::zeros(vec![2, 2]);
        let loss = dice_loss(&mut tape, lid, &mask, DICE_EPS).unwrap();
        assert!(tape.data(loss)[0] < 1e-3);
    }

    #[test]
    fn dice_metric_cases() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(dice_metric(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_metric(&a, &b).unwrap(), 0.0);

        // |P| = |G| = 4, overlap 2 -> 0.5.
        let p = Tensor::from_vec(vec![8], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let g = Tensor::from_vec(vec![8], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(dice_metric(&p, &g).unwrap(), 0.5);

        let empty = Tensor::<f64>::zeros(vec![4]);
        assert_eq!(dice_metric(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn dice_metric_symmetry_and_rejection() {
        let p = Tensor::from_vec(vec![4], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let g = Tensor::from_vec(vec![4], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(dice_metric(&p, &g).unwrap(), dice_metric(&g, &p).unwrap());

        let soft = Tensor::from_vec(vec![4], vec![0.5, 0.0, 1.0, 1.0]).unwrap();
        assert!(dice_metric(&soft, &g).is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut tape = Tape::<f64>::new();
        let logits = Tensor::from_vec(vec![2, 1, 2], vec![0.3, -1.2, -0.4, 0.9]).unwrap();
        let mask = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let lid = tape.leaf(&logits).unwrap();
        let loss = cross_entropy_loss(&mut tape, lid, &mask).unwrap();
        // Pixel 0 target class 1, pixel 1 target class 0.
        let lse0 = (0.3f64.exp() + (-0.4f64).exp()).ln();
        let lse1 = ((-1.2f64).exp() + 0.9f64.exp()).ln();
        let expect = ((lse0 - -0.4) + (lse1 - -1.2)) / 2.0;
        assert!((tape.data(loss)[0] - expect).abs() < 1e-12);
    }
}
