//! Finite-difference gradient checking.
//!
//! Deliberately independent of [`crate::tensor::Tape::backward`]: the
//! numerical baseline only ever calls a user-supplied loss closure, so it
//! can falsify the analytic backward pass rather than agree with it by
//! construction.
//!
//! Central differences in f64 with step h have truncation error O(h^2)
//! and roundoff error O(eps_f64 * |loss| / h); h = 1e-6 balances the two
//! well below the tolerances used here. f32 analytic gradients are
//! checked against an f64-model baseline because an all-f32 difference
//! quotient has a roundoff floor far above any useful tolerance.

use std::fmt;

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

/// For comparing f32 analytic gradients against an f64 numerical baseline.
pub const F32_TOL: Tolerance = Tolerance {
    rtol: 1e-3,
    atol: 1e-5,
};

/// For comparing f64 analytic gradients against an f64 numerical baseline.
pub const F64_TOL: Tolerance = Tolerance {
    rtol: 1e-6,
    atol: 1e-7,
};

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numerical: f64,
    pub abs_err: f64,
    pub bound: f64,
}

impl fmt::Display for GradMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gradient mismatch at index {}: analytic {:.6e}, numerical {:.6e}, |diff| {:.3e} > bound {:.3e}",
            self.index, self.analytic, self.numerical, self.abs_err, self.bound
        )
    }
}

/// Central-difference gradient of `loss` at `x` with step `h`.
pub fn numerical_grad(x: &[f64], h: f64, loss: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = loss(&probe);
        probe[i] = orig - h;
        let down = loss(&probe);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Element-wise comparison: passes when
/// |a - n| <= rtol * max(|a|, |n|) + atol for every element.
/// Returns the largest relative error seen, or the first failing element.
pub fn compare(
    analytic: &[f64],
    numerical: &[f64],
    tol: Tolerance,
) -> Result<f64, GradMismatch> {
    assert_eq!(
        analytic.len(),
        numerical.len(),
        "gradient length mismatch: {} vs {}",
        analytic.len(),
        numerical.len()
    );
    let mut max_rel = 0.0f64;
    for (i, (&a, &n)) in analytic.iter().zip(numerical).enumerate() {
        let abs_err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let bound = tol.rtol * scale + tol.atol;
        if !(abs_err <= bound) {
            return Err(GradMismatch {
                index: i,
                analytic: a,
                numerical: n,
                abs_err,
                bound,
            });
        }
        if scale > 0.0 {
            max_rel = max_rel.max(abs_err / scale.max(tol.atol));
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor, TensorId};

    /// Deterministic pseudo-random values for probe weights and inputs,
    /// kept away from zero so ReLU kinks and sign flips are avoided.
    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        let mut state = salt.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
        (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                let u = (state >> 11) as f64 / (1u64 << 53) as f64; // [0, 1)
                let v = 0.3 + 1.4 * u; // [0.3, 1.7)
                if state & (1 << 7) == 0 {
                    v
                } else {
                    -v
                }
            })
            .collect()
    }

    /// Check d(loss)/d(x) for `loss(x) = sum(w ⊙ build(x))`, where `w` is a
    /// fixed probe so the gradient of every output element is exercised.
    fn check_op(
        rows: usize,
        cols: usize,
        build: impl Fn(&mut Tape<f64>, TensorId) -> TensorId,
    ) {
        let x0 = pseudo(rows * cols, 17);
        let run = |x: &[f64], want_grad: bool| -> (f64, Option<Vec<f64>>) {
            let mut tape: Tape<f64> = Tape::new();
            let xid = tape.leaf(Tensor::new(rows, cols, x.to_vec()));
            let out = build(&mut tape, xid);
            let osz = tape.value(out).data.len();
            let w = tape.leaf(Tensor::new(
                tape.value(out).rows,
                tape.value(out).cols,
                pseudo(osz, 99),
            ));
            let weighted = tape.mul(out, w);
            let loss = tape.sum_all(weighted);
            let v = tape.scalar(loss);
            if want_grad {
                tape.backward(loss);
                (v, Some(tape.grad(xid).unwrap().to_vec()))
            } else {
                (v, None)
            }
        };
        let (_, analytic) = run(&x0, true);
        let numerical = numerical_grad(&x0, 1e-6, &mut |x| run(x, false).0);
        compare(&analytic.unwrap(), &numerical, F64_TOL)
            .unwrap_or_else(|m| panic!("{m}"));
    }

    #[test]
    fn fd_matmul() {
        let b0 = pseudo(12, 3);
        check_op(3, 4, move |t, x| {
            let b = t.leaf(Tensor::new(4, 3, b0.clone()));
            t.matmul(x, b)
        });
    }

    #[test]
    fn fd_matmul_second_operand() {
        let a0 = pseudo(12, 5);
        check_op(4, 3, move |t, x| {
            let a = t.leaf(Tensor::new(3, 4, a0.clone()));
            t.matmul(a, x)
        });
    }

    #[test]
    fn fd_matmul_nt() {
        let b0 = pseudo(8, 7);
        check_op(3, 4, move |t, x| {
            let b = t.leaf(Tensor::new(2, 4, b0.clone()));
            t.matmul_nt(x, b)
        });
    }

    #[test]
    fn fd_matmul_nt_second_operand() {
        let a0 = pseudo(8, 11);
        check_op(3, 4, move |t, x| {
            let a = t.leaf(Tensor::new(2, 4, a0.clone()));
            t.matmul_nt(a, x)
        });
    }

    #[test]
    fn fd_add_sub_mul_chain() {
        let y0 = pseudo(6, 13);
        check_op(2, 3, move |t, x| {
            let y = t.leaf(Tensor::new(2, 3, y0.clone()));
            let s = t.add(x, y);
            let d = t.sub(s, y);
            t.mul(d, s)
        });
    }

    #[test]
    fn fd_mul_with_shared_operand() {
        check_op(2, 3, |t, x| t.mul(x, x));
    }

    #[test]
    fn fd_add_bias_input() {
        let b0 = pseudo(3, 19);
        check_op(4, 3, move |t, x| {
            let b = t.leaf(Tensor::new(1, 3, b0.clone()));
            t.add_bias(x, b)
        });
    }

    #[test]
    fn fd_add_bias_bias_operand() {
        let a0 = pseudo(12, 23);
        check_op(1, 3, move |t, x| {
            let a = t.leaf(Tensor::new(4, 3, a0.clone()));
            t.add_bias(a, x)
        });
    }

    #[test]
    fn fd_scale() {
        check_op(2, 3, |t, x| t.scale(x, -1.75));
    }

    #[test]
    fn fd_relu() {
        // pseudo() keeps inputs away from the kink at zero.
        check_op(2, 5, |t, x| t.relu(x));
    }

    #[test]
    fn fd_sigmoid() {
        check_op(2, 5, |t, x| t.sigmoid(x));
    }

    #[test]
    fn fd_softmax() {
        check_op(3, 5, |t, x| t.softmax(x));
    }

    #[test]
    fn fd_masked_softmax() {
        check_op(2, 4, |t, x| {
            let mask = vec![true, true, false, true, false, true, true, true];
            t.masked_softmax(x, mask)
        });
    }

    #[test]
    fn fd_layer_norm_input() {
        let g0 = pseudo(5, 29);
        let b0 = pseudo(5, 31);
        check_op(3, 5, move |t, x| {
            let g = t.leaf(Tensor::new(1, 5, g0.clone()));
            let b = t.leaf(Tensor::new(1, 5, b0.clone()));
            t.layer_norm(x, g, b, 1e-5)
        });
    }

    #[test]
    fn fd_layer_norm_gain_and_bias() {
        let a0 = pseudo(15, 37);
        // x plays the role of the gain row
        check_op(1, 5, move |t, x| {
            let a = t.leaf(Tensor::new(3, 5, a0.clone()));
            let b = t.leaf(Tensor::new(1, 5, vec![0.1; 5]));
            t.layer_norm(a, x, b, 1e-5)
        });
    }

    #[test]
    fn fd_embed_table() {
        check_op(4, 3, |t, x| t.embed(x, &[1, 3, 0, 3, 2]));
    }

    #[test]
    fn fd_slice_and_concat() {
        check_op(4, 6, |t, x| {
            let a = t.slice_cols(x, 0, 2);
            let b = t.slice_cols(x, 2, 4);
            let top = t.slice_rows(x, 0, 2);
            let cat = t.concat_cols(&[b, a]);
            let bottom = t.slice_rows(cat, 2, 2);
            let stack = t.concat_rows(&[top, bottom]);
            t.relu(stack)
        });
    }

    #[test]
    fn fd_token_nll() {
        let x0 = pseudo(3 * 6, 41);
        let targets = [2usize, 0, 5];
        let run = |x: &[f64], grad: bool| {
            let mut tape: Tape<f64> = Tape::new();
            let logits = tape.leaf(Tensor::new(3, 6, x.to_vec()));
            let loss = tape.token_nll(logits, &targets, 0);
            let v = tape.scalar(loss);
            if grad {
                tape.backward(loss);
                (v, Some(tape.grad(logits).unwrap().to_vec()))
            } else {
                (v, None)
            }
        };
        let (_, analytic) = run(&x0, true);
        let numerical = numerical_grad(&x0, 1e-6, &mut |x| run(x, false).0);
        compare(&analytic.unwrap(), &numerical, F64_TOL).unwrap_or_else(|m| panic!("{m}"));
    }

    #[test]
    fn fd_bce_logits() {
        let x0 = pseudo(6, 43);
        let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let run = |x: &[f64], grad: bool| {
            let mut tape: Tape<f64> = Tape::new();
            let logits = tape.leaf(Tensor::new(1, 6, x.to_vec()));
            let loss = tape.bce_logits(logits, &targets);
            let v = tape.scalar(loss);
            if grad {
                tape.backward(loss);
                (v, Some(tape.grad(logits).unwrap().to_vec()))
            } else {
                (v, None)
            }
        };
        let (_, analytic) = run(&x0, true);
        let numerical = numerical_grad(&x0, 1e-6, &mut |x| run(x, false).0);
        compare(&analytic.unwrap(), &numerical, F64_TOL).unwrap_or_else(|m| panic!("{m}"));
    }

    #[test]
    fn compare_rejects_out_of_tolerance_values() {
        let res = compare(&[1.0, 2.0], &[1.0, 2.1], F64_TOL);
        assert!(res.is_err());
        let m = res.unwrap_err();
        assert_eq!(m.index, 1);
    }
}
