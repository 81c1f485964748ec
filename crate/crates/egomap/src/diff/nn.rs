//! Small network building blocks composed from primitive tape ops.

use super::{DiffError, Result, Tape, Var};
use crate::real::Real;

/// `w @ x + b` for `w` of shape `[m, n]`, `x` of `[n]`, `b` of `[m]`.
pub fn linear<T: Real>(tape: &mut Tape<T>, w: Var, b: Var, x: Var) -> Result<Var> {
    let wx = tape.matvec(w, x)?;
    tape.add(wx, b)
}

/// Tape handles for one GRU cell's nine parameter tensors.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

/// Gated recurrent unit step.
///
/// reset    r = sigmoid(W_r x + U_r h + b_r)
/// update   z = sigmoid(W_z x + U_z h + b_z)
/// candidate c = tanh(W_h x + U_h (r * h) + b_h)
/// output   h' = (1 - z) * h + z * c
///
/// A saturated update gate (z = 1) therefore hands the state entirely to
/// the candidate.
pub fn gru_cell<T: Real>(tape: &mut Tape<T>, p: &GruVars, x: Var, h: Var) -> Result<Var> {
    let gate = |tape: &mut Tape<T>, w, u, b, hin| -> Result<Var> {
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, hin)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let r_pre = gate(tape, p.w_r, p.u_r, p.b_r, h)?;
    let r = tape.sigmoid(r_pre)?;
    let z_pre = gate(tape, p.w_z, p.u_z, p.b_z, h)?;
    let z = tape.sigmoid(z_pre)?;
    let rh = tape.mul(r, h)?;
    let c_pre = gate(tape, p.w_h, p.u_h, p.b_h, rh)?;
    let c = tape.tanh(c_pre)?;
    let keep = tape.affine(z, -1.0, 1.0)?;
    let old = tape.mul(keep, h)?;
    let new = tape.mul(z, c)?;
    tape.add(old, new)
}

/// Softmax of `beta * scores` for a positive scalar temperature variable.
/// Rejects non-finite scores and temperatures below one.
pub fn softmax_with_temperature<T: Real>(
    tape: &mut Tape<T>,
    scores: Var,
    beta: Var,
) -> Result<Var> {
    if tape.values(scores).iter().any(|v| !v.is_finite()) {
        return Err(DiffError::NonFinite {
            op: "softmax_with_temperature",
        });
    }
    let b = tape.scalar_value(beta);
    if !b.is_finite() || b < T::one() {
        return Err(DiffError::NonFinite {
            op: "softmax_with_temperature",
        });
    }
    let scaled = tape.mul_scalar(scores, beta)?;
    tape.softmax(scaled)
}

/// Mean squared error between two equal-length vectors.
pub fn mse<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.affine(s, 1.0 / tape.len_of(a) as f64, 0.0)
}

/// Log-probability of one action under a categorical distribution given by
/// logits; returns the log-softmax vector and the selected entry.
pub fn categorical_log_prob<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    action: usize,
) -> Result<(Var, Var)> {
    let lp = tape.log_softmax(logits)?;
    let sel = tape.gather(lp, action)?;
    Ok((lp, sel))
}

/// Entropy of a categorical distribution from its log-softmax vector.
pub fn categorical_entropy<T: Real>(tape: &mut Tape<T>, log_probs: Var) -> Result<Var> {
    let p = tape.exp(log_probs)?;
    let plp = tape.dot(p, log_probs)?;
    tape.affine(plp, -1.0, 0.0)
}

/// Draw an index from a categorical distribution given its probabilities
/// and a uniform sample in [0, 1).
pub fn sample_categorical<T: Real>(probs: &[T], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::{check, Tolerance};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn temperature_one_softmax_matches_reference() {
        let mut tape: Tape<f64> = Tape::new();
        let scores = tape.input(&Tensor::from_vec(vec![1.0, 0.0]));
        let beta = tape.scalar_input(1.0);
        let p = softmax_with_temperature(&mut tape, scores, beta).unwrap();
        let v = tape.values(p);
        assert!((v[0] - 0.7311).abs() < 1e-4);
        assert!((v[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn higher_temperature_sharpens() {
        let mut tape: Tape<f64> = Tape::new();
        let scores = tape.input(&Tensor::from_vec(vec![1.0, 0.0, -1.0]));
        let b1 = tape.scalar_input(1.0);
        let b5 = tape.scalar_input(5.0);
        let p1 = softmax_with_temperature(&mut tape, scores, b1).unwrap();
        let p5 = softmax_with_temperature(&mut tape, scores, b5).unwrap();
        assert!(tape.values(p5)[0] > tape.values(p1)[0]);
        assert!(tape.values(p5)[2] < tape.values(p1)[2]);
    }

    #[test]
    fn softmax_temperature_rejects_bad_inputs() {
        let mut tape: Tape<f64> = Tape::new();
        let nan = tape.input(&Tensor::from_vec(vec![f64::NAN, 0.0]));
        let beta = tape.scalar_input(1.0);
        assert!(softmax_with_temperature(&mut tape, nan, beta).is_err());
        let ok = tape.input(&Tensor::from_vec(vec![1.0, 0.0]));
        let cold = tape.scalar_input(0.5);
        assert!(softmax_with_temperature(&mut tape, ok, cold).is_err());
    }

    #[test]
    fn oneplus_of_zero_is_one_plus_ln_two() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.input(&Tensor::from_vec(vec![0.0]));
        let y = tape.oneplus(x).unwrap();
        assert!((tape.scalar_value(y) - (1.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn saturated_update_gate_hands_state_to_candidate() {
        // Huge update-gate bias forces z ~ 1, so h' ~ tanh-candidate no
        // matter what the previous state held.
        let n = 3;
        let mut tape: Tape<f64> = Tape::new();
        let zeros = Tensor::zeros(vec![n, n]);
        let zero_b = Tensor::zeros(vec![n]);
        let eye = {
            let mut t = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                t.data_mut()[i * n + i] = 1.0;
            }
            t
        };
        let p = GruVars {
            w_r: tape.input(&zeros),
            u_r: tape.input(&zeros),
            b_r: tape.input(&zero_b),
            w_z: tape.input(&zeros),
            u_z: tape.input(&zeros),
            b_z: tape.input(&Tensor::from_vec(vec![50.0; n])),
            w_h: tape.input(&eye),
            u_h: tape.input(&zeros),
            b_h: tape.input(&zero_b),
        };
        let x = tape.input(&Tensor::from_vec(vec![0.5, -0.25, 2.0]));
        let h = tape.input(&Tensor::from_vec(vec![9.0, -9.0, 9.0]));
        let out = gru_cell(&mut tape, &p, x, h).unwrap();
        let expect = [0.5f64.tanh(), (-0.25f64).tanh(), 2.0f64.tanh()];
        for (o, e) in tape.values(out).iter().zip(expect) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn gru_cell_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let (nx, nh) = (3, 4);
            let inputs = vec![
                rand_tensor(&mut rng, vec![nh, nx]),
                rand_tensor(&mut rng, vec![nh, nh]),
                rand_tensor(&mut rng, vec![nh]),
                rand_tensor(&mut rng, vec![nh, nx]),
                rand_tensor(&mut rng, vec![nh, nh]),
                rand_tensor(&mut rng, vec![nh]),
                rand_tensor(&mut rng, vec![nh, nx]),
                rand_tensor(&mut rng, vec![nh, nh]),
                rand_tensor(&mut rng, vec![nh]),
                rand_tensor(&mut rng, vec![nx]),
                rand_tensor(&mut rng, vec![nh]),
            ];
            check(
                &inputs,
                |tape, v| {
                    let p = GruVars {
                        w_r: v[0],
                        u_r: v[1],
                        b_r: v[2],
                        w_z: v[3],
                        u_z: v[4],
                        b_z: v[5],
                        w_h: v[6],
                        u_h: v[7],
                        b_h: v[8],
                    };
                    let h = gru_cell(tape, &p, v[9], v[10])?;
                    let sq = tape.mul(h, h)?;
                    tape.sum(sq)
                },
                Tolerance::default(),
            )
            .unwrap();
        }
    }

    #[test]
    fn entropy_of_uniform_distribution_is_log_n() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.input(&Tensor::from_vec(vec![0.7; 5]));
        let (lp, _) = categorical_log_prob(&mut tape, logits, 0).unwrap();
        let h = categorical_entropy(&mut tape, lp).unwrap();
        assert!((tape.scalar_value(h) - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn sample_categorical_respects_cdf() {
        let probs = [0.1, 0.2, 0.7];
        assert_eq!(sample_categorical(&probs, 0.05), 0);
        assert_eq!(sample_categorical(&probs, 0.15), 1);
        assert_eq!(sample_categorical(&probs, 0.9), 2);
        assert_eq!(sample_categorical(&probs, 0.999999), 2);
    }
}
