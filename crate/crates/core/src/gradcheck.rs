//! Central finite-difference gradient checking.
//!
//! The numeric side re-runs the forward pass at perturbed inputs and never
//! touches the recorded backward rules, so it is an independent oracle for
//! them. Checks run in `f64`; the default step is 1e-5.

use crate::error::Result;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Settings for a finite-difference sweep.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Entries where both analytic and numeric gradients are below this
    /// magnitude are skipped (relative error is meaningless near zero).
    pub skip_below: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            skip_below: 1e-6,
        }
    }
}

/// Outcome of one sweep.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64, skip_below: f64) {
        let scale = analytic.abs().max(numeric.abs());
        if scale < skip_below {
            self.skipped += 1;
            return;
        }
        self.checked += 1;
        let rel = (analytic - numeric).abs() / scale;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
        }
    }
}

impl GradCheck {
    /// Compare analytic gradients of `build` against central differences.
    ///
    /// `build` receives a fresh tape plus leaves for `inputs` (in order) and
    /// must return a scalar loss. Inputs with `requires_grad` are swept
    /// element by element; others are treated as constants.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], build: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
    {
        let eval = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<VarId>, VarId)> {
            let mut tape = Tape::new();
            let ids: Vec<VarId> = tensors
                .iter()
                .map(|t| tape.leaf(t))
                .collect::<Result<_>>()?;
            let loss = build(&mut tape, &ids)?;
            Ok((tape, ids, loss))
        };

        let (mut tape, ids, loss) = eval(inputs)?;
        tape.backward(loss)?;
        let analytic: Vec<Option<Vec<f64>>> = ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()))
            .collect();

        let mut report = GradReport::default();
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (pi, input) in inputs.iter().enumerate() {
            if !input.requires_grad {
                continue;
            }
            let grad = analytic[pi]
                .as_ref()
                .expect("requires_grad leaf missing gradient after backward");
            for e in 0..input.numel() {
                let orig = work[pi].data[e];
                work[pi].data[e] = orig + self.step;
                let (tp, _, lp) = eval(&work)?;
                let f_plus = tp.data(lp)[0];
                work[pi].data[e] = orig - self.step;
                let (tm, _, lm) = eval(&work)?;
                let f_minus = tm.data(lm)[0];
                work[pi].data[e] = orig;
                let numeric = (f_plus - f_minus) / (2.0 * self.step);
                report.record(grad[e], numeric, self.skip_below);
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_correct_gradients() {
        let x = Tensor::from_vec(vec![3], vec![0.3, -0.7, 1.2]).unwrap().with_grad();
        let report = GradCheck::default()
            .run(&[x], |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                tape.sum_all(sq)
            })
            .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn report_flags_mismatches_and_skips_noise() {
        let mut r = GradReport::default();
        r.record(3.0, 2.0, 1e-6);
        assert!(r.max_rel_err > 0.3);
        assert_eq!(r.checked, 1);
        r.record(1e-9, -1e-9, 1e-6);
        assert_eq!(r.skipped, 1);
    }

    #[test]
    fn constant_inputs_are_not_swept() {
        let x = Tensor::from_vec(vec![2], vec![0.4, 0.9]).unwrap().with_grad();
        let c = Tensor::from_vec(vec![2], vec![2.0, 3.0]).unwrap();
        let report = GradCheck::default()
            .run(&[x, c], |tape, ids| {
                let p = tape.mul(ids[0], ids[1])?;
                tape.sum_all(p)
            })
            .unwrap();
        assert_eq!(report.checked, 2);
    }
}
