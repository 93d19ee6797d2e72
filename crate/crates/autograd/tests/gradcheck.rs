//! Finite-difference oracle for every differentiable op.
//!
//! Each op is wrapped into a scalar through a fixed random linear
//! functional of its output; the analytic gradient from `backward` must
//! match central differences at h = 1e-5 within 1e-5 relative (1e-7
//! absolute floor) on at least 20 random small tensors per op.

use autograd::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

struct Case {
    /// Shapes of the perturbable leaf inputs.
    shapes: Vec<Vec<usize>>,
    /// Lower bound for sampled input values (to keep log/sqrt/relu smooth).
    lo: f64,
    hi: f64,
}

fn sample(rng: &mut ChaCha8Rng, case: &Case) -> Vec<Vec<f64>> {
    case.shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n).map(|_| rng.random_range(case.lo..case.hi)).collect()
        })
        .collect()
}

fn scalarize(tape: &mut Tape, out: Tensor, weights: &[f64]) -> Tensor {
    let w = tape
        .leaf(weights.to_vec(), &tape.shape(out).to_vec())
        .unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod).unwrap()
}

/// Run one gradient check: analytic vs central differences for every
/// coordinate of every input.
fn check(
    name: &str,
    case: &Case,
    build: impl Fn(&mut Tape, &[Tensor]) -> Tensor,
    trials: usize,
    rel_tol: f64,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let inputs = sample(&mut rng, case);
        let out_len = {
            let mut tape = Tape::new();
            let leaves: Vec<Tensor> = inputs
                .iter()
                .zip(&case.shapes)
                .map(|(d, s)| tape.leaf(d.clone(), s).unwrap())
                .collect();
            let out = build(&mut tape, &leaves);
            tape.data(out).len()
        };
        let weights: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

        let eval = |inputs: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::new();
            let leaves: Vec<Tensor> = inputs
                .iter()
                .zip(&case.shapes)
                .map(|(d, s)| tape.leaf(d.clone(), s).unwrap())
                .collect();
            let out = build(&mut tape, &leaves);
            let s = scalarize(&mut tape, out, &weights);
            tape.value(s)
        };

        // Analytic gradients.
        let analytic: Vec<Vec<f64>> = {
            let mut tape = Tape::new();
            let leaves: Vec<Tensor> = inputs
                .iter()
                .zip(&case.shapes)
                .map(|(d, s)| tape.leaf(d.clone(), s).unwrap())
                .collect();
            let out = build(&mut tape, &leaves);
            let s = scalarize(&mut tape, out, &weights);
            tape.backward(s).unwrap();
            leaves
                .iter()
                .zip(&inputs)
                .map(|(l, d)| {
                    tape.grad(*l)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; d.len()])
                })
                .collect()
        };

        for (ii, data) in inputs.iter().enumerate() {
            for j in 0..data.len() {
                let mut plus = inputs.clone();
                plus[ii][j] += H;
                let mut minus = inputs.clone();
                minus[ii][j] -= H;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
                let an = analytic[ii][j];
                let denom = an.abs().max(fd.abs());
                let err = (fd - an).abs();
                assert!(
                    err <= rel_tol * denom + 1e-7,
                    "{name} trial {trial} input {ii} coord {j}: analytic {an} vs fd {fd} (err {err:.3e})"
                );
            }
        }
    }
}

#[test]
fn matmul_3x4_by_4x2_matches_finite_differences() {
    check(
        "matmul",
        &Case {
            shapes: vec![vec![3, 4], vec![4, 2]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.matmul(l[0], l[1]).unwrap(),
        20,
        1e-6,
        11,
    );
}

#[test]
fn matmul_nt_matches_finite_differences() {
    check(
        "matmul_nt",
        &Case {
            shapes: vec![vec![3, 4], vec![2, 4]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.matmul_nt(l[0], l[1]).unwrap(),
        20,
        1e-5,
        12,
    );
}

#[test]
fn elementwise_binary_same_shape() {
    for (name, f) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
        ("div", 3),
    ] {
        check(
            name,
            &Case {
                shapes: vec![vec![2, 3], vec![2, 3]],
                lo: 0.5,
                hi: 1.5,
            },
            move |t, l| match f {
                0 => t.add(l[0], l[1]).unwrap(),
                1 => t.sub(l[0], l[1]).unwrap(),
                2 => t.mul(l[0], l[1]).unwrap(),
                _ => t.div(l[0], l[1]).unwrap(),
            },
            20,
            1e-5,
            13,
        );
    }
}

#[test]
fn elementwise_binary_row_broadcast() {
    check(
        "mul_row_broadcast",
        &Case {
            shapes: vec![vec![3, 4], vec![4]],
            lo: 0.5,
            hi: 1.5,
        },
        |t, l| t.mul(l[0], l[1]).unwrap(),
        20,
        1e-5,
        14,
    );
    check(
        "div_scalar_broadcast",
        &Case {
            shapes: vec![vec![3, 4], vec![1]],
            lo: 0.5,
            hi: 1.5,
        },
        |t, l| t.div(l[0], l[1]).unwrap(),
        20,
        1e-5,
        15,
    );
    check(
        "sub_row_on_left",
        &Case {
            shapes: vec![vec![4], vec![3, 4]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.sub(l[0], l[1]).unwrap(),
        20,
        1e-5,
        16,
    );
}

#[test]
fn unary_ops_match_finite_differences() {
    // tanh pinned at 1e-6 relative, like matmul.
    check(
        "tanh",
        &Case {
            shapes: vec![vec![2, 4]],
            lo: -1.5,
            hi: 1.5,
        },
        |t, l| t.tanh(l[0]).unwrap(),
        20,
        1e-6,
        17,
    );
    check(
        "exp",
        &Case {
            shapes: vec![vec![2, 4]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.exp(l[0]).unwrap(),
        20,
        1e-5,
        18,
    );
    check(
        "log",
        &Case {
            shapes: vec![vec![2, 4]],
            lo: 0.3,
            hi: 2.0,
        },
        |t, l| t.log(l[0]).unwrap(),
        20,
        1e-5,
        19,
    );
    check(
        "sigmoid",
        &Case {
            shapes: vec![vec![2, 4]],
            lo: -2.0,
            hi: 2.0,
        },
        |t, l| t.sigmoid(l[0]).unwrap(),
        20,
        1e-5,
        20,
    );
    // Keep relu inputs away from the kink at zero.
    check(
        "relu",
        &Case {
            shapes: vec![vec![2, 4]],
            lo: 0.2,
            hi: 2.0,
        },
        |t, l| t.relu(l[0]).unwrap(),
        20,
        1e-5,
        21,
    );
    check(
        "neg",
        &Case {
            shapes: vec![vec![2, 4]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.neg(l[0]).unwrap(),
        20,
        1e-5,
        22,
    );
    check(
        "sqrt",
        &Case {
            shapes: vec![vec![2, 4]],
            lo: 0.5,
            hi: 2.0,
        },
        |t, l| t.sqrt(l[0]).unwrap(),
        20,
        1e-5,
        23,
    );
    check(
        "scale",
        &Case {
            shapes: vec![vec![2, 4]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.scale(l[0], -2.5).unwrap(),
        20,
        1e-5,
        24,
    );
}

#[test]
fn softmax_and_layer_norm_match_finite_differences() {
    check(
        "softmax_rows",
        &Case {
            shapes: vec![vec![3, 5]],
            lo: -2.0,
            hi: 2.0,
        },
        |t, l| t.softmax_rows(l[0]).unwrap(),
        20,
        1e-5,
        25,
    );
    check(
        "layer_norm_rows",
        &Case {
            shapes: vec![vec![3, 5], vec![5], vec![5]],
            lo: -1.5,
            hi: 1.5,
        },
        |t, l| t.layer_norm_rows(l[0], l[1], l[2]).unwrap(),
        20,
        1e-5,
        26,
    );
}

#[test]
fn reductions_and_structure_match_finite_differences() {
    check(
        "sum_all",
        &Case {
            shapes: vec![vec![3, 4]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.sum_all(l[0]).unwrap(),
        20,
        1e-5,
        27,
    );
    check(
        "mean_all",
        &Case {
            shapes: vec![vec![3, 4]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.mean_all(l[0]).unwrap(),
        20,
        1e-5,
        28,
    );
    check(
        "sum_rows",
        &Case {
            shapes: vec![vec![3, 4]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.sum_rows(l[0]).unwrap(),
        20,
        1e-5,
        29,
    );
    check(
        "gather_rows",
        &Case {
            shapes: vec![vec![4, 3]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.gather_rows(l[0], &[2, 0, 2, 3]).unwrap(),
        20,
        1e-5,
        30,
    );
    check(
        "slice_cols",
        &Case {
            shapes: vec![vec![3, 5]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.slice_cols(l[0], 1, 3).unwrap(),
        20,
        1e-5,
        31,
    );
    check(
        "concat_cols",
        &Case {
            shapes: vec![vec![3, 2], vec![3, 3]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.concat_cols(&[l[0], l[1]]).unwrap(),
        20,
        1e-5,
        32,
    );
    check(
        "concat_rows",
        &Case {
            shapes: vec![vec![2, 3], vec![4, 3]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.concat_rows(&[l[0], l[1]]).unwrap(),
        20,
        1e-5,
        33,
    );
    check(
        "rel_shift",
        &Case {
            shapes: vec![vec![4, 3]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| t.rel_shift(l[0]).unwrap(),
        20,
        1e-5,
        34,
    );
}

#[test]
fn masked_attention_matches_finite_differences() {
    check(
        "masked_attention",
        &Case {
            shapes: vec![vec![4, 6], vec![4, 6], vec![4, 6]],
            lo: -1.0,
            hi: 1.0,
        },
        |t, l| {
            let mask = t.causal_mask(4, 0).unwrap();
            t.masked_attention(l[0], l[1], l[2], Some(mask), None)
                .unwrap()
        },
        20,
        1e-5,
        35,
    );
}

#[test]
fn composed_mlp_loss_matches_finite_differences() {
    // Two-layer tanh MLP, squared-error loss against constants.
    check(
        "mlp",
        &Case {
            shapes: vec![
                vec![2, 5],  // inputs
                vec![4, 5],  // w1
                vec![4],     // b1
                vec![3, 4],  // w2
                vec![3],     // b2
            ],
            lo: -0.8,
            hi: 0.8,
        },
        |t, l| {
            let h = t.matmul_nt(l[0], l[1]).unwrap();
            let h = t.add(h, l[2]).unwrap();
            let h = t.tanh(h).unwrap();
            let y = t.matmul_nt(h, l[3]).unwrap();
            let y = t.add(y, l[4]).unwrap();
            let err = t.mul(y, y).unwrap();
            t.sum_all(err).unwrap()
        },
        20,
        1e-5,
        36,
    );
}
