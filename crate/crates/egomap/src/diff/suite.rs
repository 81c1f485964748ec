//! Finite-difference coverage for every differentiable operator.
//!
//! Each named check builds a fresh random instance, reduces the op output
//! to a scalar with a fixed random weighting, and compares reverse-mode
//! gradients against central differences in f64. The CLI surfaces this as
//! the gradient verification command; unit tests run it with fewer
//! instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, GradCheckError, Report, Tolerance};
use super::{nn, Tape, Var};
use crate::tensor::Tensor;

type InstanceFn = Box<dyn Fn(&mut ChaCha8Rng) -> Result<Report, GradCheckError>>;

pub struct OpCheck {
    pub name: &'static str,
    run: InstanceFn,
}

#[derive(Debug, Clone)]
pub struct OpResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel: f64,
    pub failure: Option<String>,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
}

/// Reduce any output to a scalar via a fixed random weighting so every
/// output element influences the loss.
fn reduce(tape: &mut Tape<f64>, out: Var, weights: &[f64]) -> super::Result<Var> {
    let w = tape.input(&Tensor::from_vec(weights.to_vec()));
    tape.dot(out, w)
}

fn weights(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

macro_rules! op_check {
    ($name:literal, $run:expr) => {
        OpCheck {
            name: $name,
            run: Box::new($run),
        }
    };
}

fn unary_check(
    name: &'static str,
    len: usize,
    build: fn(&mut Tape<f64>, Var) -> super::Result<Var>,
) -> OpCheck {
    OpCheck {
        name,
        run: Box::new(move |rng| {
            let x = rand_tensor(rng, &[len]);
            let w = weights(rng, len);
            check(
                &[x],
                move |tape, v| {
                    let y = build(tape, v[0])?;
                    reduce(tape, y, &w)
                },
                Tolerance::default(),
            )
        }),
    }
}

/// The full operator checklist.
pub fn op_checks() -> Vec<OpCheck> {
    let mut checks = vec![
        unary_check("relu", 9, |t, x| t.relu(x)),
        unary_check("tanh", 9, |t, x| t.tanh(x)),
        unary_check("sigmoid", 9, |t, x| t.sigmoid(x)),
        unary_check("oneplus", 9, |t, x| t.oneplus(x)),
        unary_check("exp", 9, |t, x| t.exp(x)),
        unary_check("softmax", 7, |t, x| t.softmax(x)),
        unary_check("log_softmax", 7, |t, x| t.log_softmax(x)),
        unary_check("affine", 9, |t, x| t.affine(x, -2.5, 0.75)),
        op_check!("sum", |rng: &mut ChaCha8Rng| {
            let x = rand_tensor(rng, &[9]);
            check(&[x], |tape, v| tape.sum(v[0]), Tolerance::default())
        }),
        op_check!("matvec", |rng: &mut ChaCha8Rng| {
            let (m, n) = (4, 6);
            let w = rand_tensor(rng, &[m, n]);
            let x = rand_tensor(rng, &[n]);
            let rw = weights(rng, m);
            check(
                &[w, x],
                move |tape, v| {
                    let y = tape.matvec(v[0], v[1])?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("add", |rng: &mut ChaCha8Rng| {
            let a = rand_tensor(rng, &[8]);
            let b = rand_tensor(rng, &[8]);
            let rw = weights(rng, 8);
            check(
                &[a, b],
                move |tape, v| {
                    let y = tape.add(v[0], v[1])?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("sub", |rng: &mut ChaCha8Rng| {
            let a = rand_tensor(rng, &[8]);
            let b = rand_tensor(rng, &[8]);
            let rw = weights(rng, 8);
            check(
                &[a, b],
                move |tape, v| {
                    let y = tape.sub(v[0], v[1])?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("mul", |rng: &mut ChaCha8Rng| {
            let a = rand_tensor(rng, &[8]);
            let b = rand_tensor(rng, &[8]);
            let rw = weights(rng, 8);
            check(
                &[a, b],
                move |tape, v| {
                    let y = tape.mul(v[0], v[1])?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("mul_scalar", |rng: &mut ChaCha8Rng| {
            let x = rand_tensor(rng, &[8]);
            let s = rand_tensor(rng, &[1]);
            let rw = weights(rng, 8);
            check(
                &[x, s],
                move |tape, v| {
                    let y = tape.mul_scalar(v[0], v[1])?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("dot", |rng: &mut ChaCha8Rng| {
            let a = rand_tensor(rng, &[11]);
            let b = rand_tensor(rng, &[11]);
            check(
                &[a, b],
                |tape, v| tape.dot(v[0], v[1]),
                Tolerance::default(),
            )
        }),
        op_check!("gather", |rng: &mut ChaCha8Rng| {
            let x = rand_tensor(rng, &[9]);
            let idx = rng.gen_range(0..9);
            check(
                &[x],
                move |tape, v| tape.gather(v[0], idx),
                Tolerance::default(),
            )
        }),
        op_check!("slice", |rng: &mut ChaCha8Rng| {
            let x = rand_tensor(rng, &[12]);
            let off = rng.gen_range(0..6);
            let rw = weights(rng, 5);
            check(
                &[x],
                move |tape, v| {
                    let y = tape.slice(v[0], off, 5)?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("concat", |rng: &mut ChaCha8Rng| {
            let a = rand_tensor(rng, &[4]);
            let b = rand_tensor(rng, &[7]);
            let c = rand_tensor(rng, &[3]);
            let rw = weights(rng, 14);
            check(
                &[a, b, c],
                move |tape, v| {
                    let y = tape.concat(&[v[0], v[1], v[2]])?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("conv2d", |rng: &mut ChaCha8Rng| {
            let (cin, h, w) = (2, 6, 7);
            let (cout, kh, kw, stride, pad) = (3, 3, 3, 2, 1);
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (w + 2 * pad - kw) / stride + 1;
            let x = rand_tensor(rng, &[cin, h, w]);
            let wk = rand_tensor(rng, &[cout, cin, kh, kw]);
            let b = rand_tensor(rng, &[cout]);
            let rw = weights(rng, cout * oh * ow);
            check(
                &[x, wk, b],
                move |tape, v| {
                    let y = tape.conv2d(v[0], v[1], v[2], stride, pad)?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("bilinear_sample", |rng: &mut ChaCha8Rng| {
            let (c, h, w) = (2, 5, 4);
            let (oh, ow) = (3, 3);
            let map = rand_tensor(rng, &[c, h, w]);
            let grid: Vec<[f64; 2]> = (0..oh * ow)
                .map(|_| [rng.gen_range(-1.3..1.3), rng.gen_range(-1.3..1.3)])
                .collect();
            let rw = weights(rng, c * oh * ow);
            check(
                &[map],
                move |tape, v| {
                    let y = tape.bilinear_sample(v[0], grid.clone(), oh, ow)?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("scatter_mean", |rng: &mut ChaCha8Rng| {
            let (c, k, h, w) = (3, 10, 3, 4);
            let x = rand_tensor(rng, &[c, k]);
            let cells: Vec<Option<usize>> = (0..k)
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        None
                    } else {
                        Some(rng.gen_range(0..h * w))
                    }
                })
                .collect();
            let rw = weights(rng, c * h * w);
            check(
                &[x],
                move |tape, v| {
                    let (y, _) = tape.scatter_mean(v[0], cells.clone(), h, w)?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("blend_lerp", |rng: &mut ChaCha8Rng| {
            let (c, h, w) = (3, 3, 4);
            let old = rand_tensor(rng, &[c, h, w]);
            let new = rand_tensor(rng, &[c, h, w]);
            let eta: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            let rw = weights(rng, c * h * w);
            check(
                &[old, new],
                move |tape, v| {
                    let y = tape.blend_lerp(v[0], v[1], eta.clone())?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("cosine_scan", |rng: &mut ChaCha8Rng| {
            let (c, h, w) = (4, 3, 3);
            let map = rand_tensor(rng, &[c, h, w]);
            let q = rand_tensor(rng, &[c]);
            let rw = weights(rng, h * w);
            check(
                &[map, q],
                move |tape, v| {
                    let y = tape.cosine_scan(v[0], v[1])?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("l1_scan", |rng: &mut ChaCha8Rng| {
            let (c, h, w) = (4, 3, 3);
            let map = rand_tensor(rng, &[c, h, w]);
            let q = rand_tensor(rng, &[c]);
            let rw = weights(rng, h * w);
            check(
                &[map, q],
                move |tape, v| {
                    let y = tape.l1_scan(v[0], v[1])?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("linear", |rng: &mut ChaCha8Rng| {
            let (m, n) = (5, 4);
            let w = rand_tensor(rng, &[m, n]);
            let b = rand_tensor(rng, &[m]);
            let x = rand_tensor(rng, &[n]);
            let rw = weights(rng, m);
            check(
                &[w, b, x],
                move |tape, v| {
                    let y = nn::linear(tape, v[0], v[1], v[2])?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("gru_cell", |rng: &mut ChaCha8Rng| {
            let (nx, nh) = (3, 4);
            let shapes: [&[usize]; 11] = [
                &[nh, nx],
                &[nh, nh],
                &[nh],
                &[nh, nx],
                &[nh, nh],
                &[nh],
                &[nh, nx],
                &[nh, nh],
                &[nh],
                &[nx],
                &[nh],
            ];
            let inputs: Vec<Tensor<f64>> =
                shapes.iter().map(|s| rand_tensor(rng, s)).collect();
            let rw = weights(rng, nh);
            check(
                &inputs,
                move |tape, v| {
                    let p = nn::GruVars {
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
                    let h = nn::gru_cell(tape, &p, v[9], v[10])?;
                    reduce(tape, h, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("softmax_with_temperature", |rng: &mut ChaCha8Rng| {
            let scores = rand_tensor(rng, &[7]);
            let b = Tensor::from_vec(vec![rng.gen_range(1.0..4.0)]);
            let rw = weights(rng, 7);
            check(
                &[scores, b],
                move |tape, v| {
                    let y = nn::softmax_with_temperature(tape, v[0], v[1])?;
                    reduce(tape, y, &rw)
                },
                Tolerance::default(),
            )
        }),
        op_check!("mse", |rng: &mut ChaCha8Rng| {
            let a = rand_tensor(rng, &[6]);
            let b = rand_tensor(rng, &[6]);
            check(
                &[a, b],
                |tape, v| nn::mse(tape, v[0], v[1]),
                Tolerance::default(),
            )
        }),
        op_check!("categorical_log_prob", |rng: &mut ChaCha8Rng| {
            let logits = rand_tensor(rng, &[5]);
            let action = rng.gen_range(0..5);
            check(
                &[logits],
                move |tape, v| {
                    let (_, lp) = nn::categorical_log_prob(tape, v[0], action)?;
                    Ok(lp)
                },
                Tolerance::default(),
            )
        }),
        op_check!("categorical_entropy", |rng: &mut ChaCha8Rng| {
            let logits = rand_tensor(rng, &[5]);
            check(
                &[logits],
                |tape, v| {
                    let lp = tape.log_softmax(v[0])?;
                    nn::categorical_entropy(tape, lp)
                },
                Tolerance::default(),
            )
        }),
    ];
    checks.sort_by_key(|c| c.name);
    checks
}

/// Run every op check for `instances` random instances each.
pub fn run_suite(instances: usize, seed: u64) -> Vec<OpResult> {
    op_checks()
        .into_iter()
        .map(|check| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(check.name));
            let mut max_rel = 0.0f64;
            let mut failure = None;
            for _ in 0..instances {
                match (check.run)(&mut rng) {
                    Ok(report) => max_rel = max_rel.max(report.max_rel),
                    Err(e) => {
                        failure = Some(e.to_string());
                        break;
                    }
                }
            }
            OpResult {
                name: check.name,
                instances,
                max_rel,
                failure,
            }
        })
        .collect()
}

/// Stable tiny string hash so each op gets its own rng stream.
fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_difference_check() {
        let results = run_suite(3, 20260824);
        for r in &results {
            assert!(
                r.passed(),
                "{}: {}",
                r.name,
                r.failure.as_deref().unwrap_or("")
            );
            assert!(r.max_rel <= 1e-4, "{}: max rel {}", r.name, r.max_rel);
        }
        assert!(results.len() >= 25);
    }
}
