//! Central finite-difference verification of reverse-mode gradients.
//!
//! Checks always run in f64: the perturbation is 1e-5 and the comparison
//! tolerance 1e-4, both far below f32 resolution.

use super::{DiffError, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum allowed relative error between analytic and numeric.
    pub rel: f64,
    /// Absolute floor below which both gradients count as zero.
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            eps: 1e-5,
            rel: 1e-4,
            atol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Report {
    /// Worst relative error seen across all checked elements.
    pub max_rel: f64,
    /// Number of scalar elements compared.
    pub checked: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error(
        "gradient mismatch at input {input} element {element}: \
         analytic {analytic:.3e}, numeric {numeric:.3e}, rel {rel:.3e}"
    )]
    Mismatch {
        input: usize,
        element: usize,
        analytic: f64,
        numeric: f64,
        rel: f64,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Compare reverse-mode gradients of a scalar-valued graph against central
/// finite differences, perturbing every element of every input.
///
/// `f` must rebuild the same graph from the given leaf variables each call.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, tol: Tolerance) -> Result<Report, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> super::Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t)).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.len_of(loss) != 1 {
            return Err(GradCheckError::Diff(DiffError::NonScalarLoss(
                tape.len_of(loss),
            )));
        }
        Ok(tape.scalar_value(loss))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = Report::default();
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.len() {
            let orig = tensor.data()[ei];
            work[ti].data_mut()[ei] = orig + tol.eps;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = orig - tol.eps;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * tol.eps);
            let an = analytic[ti][ei];
            let denom = an.abs().max(numeric.abs());
            let rel = (an - numeric).abs() / denom.max(1e-6);
            report.checked += 1;
            if (an - numeric).abs() > tol.atol && rel > tol.rel {
                return Err(GradCheckError::Mismatch {
                    input: ti,
                    element: ei,
                    analytic: an,
                    numeric,
                    rel,
                });
            }
            report.max_rel = report.max_rel.max(rel);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_correct_gradient() {
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.1]);
        let report = check(
            &[x],
            |tape, vars| {
                let t = tape.tanh(vars[0])?;
                let sq = tape.mul(t, t)?;
                tape.sum(sq)
            },
            Tolerance::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel < 1e-4);
    }

    #[test]
    fn rejects_wrong_gradient() {
        // sum(x * x): pretend the gradient is x instead of 2x by sneaking
        // a detach into one factor.
        let x = Tensor::from_vec(vec![0.5, 2.0]);
        let err = check(
            &[x],
            |tape, vars| {
                let frozen = tape.detach(vars[0]);
                let sq = tape.mul(vars[0], frozen)?;
                tape.sum(sq)
            },
            Tolerance::default(),
        );
        assert!(matches!(err, Err(GradCheckError::Mismatch { .. })));
    }
}
