//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Everything is 64-bit floats on a define-by-run [`Tape`]: record a
//! forward pass through the op builders, call [`Tape::backward`] on a
//! scalar loss, then read gradients off the tape. Designed to be just
//! enough for a gated transformer with Gaussian policy and value heads:
//! matrix products, broadcast elementwise math, softmax, layer norm,
//! masked attention, and a handful of structural ops.
//!
//! Tensors are immutable once recorded; the optimizer in [`adam`] updates
//! plain parameter arrays outside any tape. A tape is single-threaded,
//! but independent tapes may run on separate threads.

mod adam;
mod checkpoint;
mod error;
mod ops;
mod tape;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, CheckpointError, NamedArray};
pub use error::{Result, TensorError};
pub use ops::{matmul_raw, MASK_NEG};
pub use tape::{Tape, Tensor};

#[cfg(test)]
mod tests {
    use super::*;

    fn t(tape: &mut Tape, data: &[f64], shape: &[usize]) -> Tensor {
        tape.leaf(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = t(&mut tape, &[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let x = t(&mut tape, &[3.0, 4.0], &[2, 1]);
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.data(y), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_col() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0, 2.0], &[1, 2]);
        let b = t(&mut tape, &[3.0, 4.0], &[2, 1]);
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(y), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[0.0; 6], &[2, 3]);
        let b = t(&mut tape, &[0.0; 8], &[4, 2]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn elementwise_add_and_exp() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0, 2.0], &[2]);
        let b = t(&mut tape, &[3.0, 4.0], &[2]);
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.data(s), &[4.0, 6.0]);
        let z = t(&mut tape, &[0.0], &[1]);
        let e = tape.exp(z).unwrap();
        assert_eq!(tape.data(e), &[1.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[0.0, 0.0], &[1, 2]);
        let s = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.data(s), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero_before_affine() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[5.0; 4], &[1, 4]);
        let gain = t(&mut tape, &[1.0; 4], &[4]);
        let bias = t(&mut tape, &[0.0; 4], &[4]);
        let y = tape.layer_norm_rows(a, gain, bias).unwrap();
        for v in tape.data(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 2.0, 3.0], &[3]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[2.0], &[1]);
        let loss = tape.mul(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::TapeConsumed)
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 2.0], &[2]);
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn attention_without_memory_is_plain_causal() {
        // Same q/k/v with a zero-row memory block and without one.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let q = t(&mut tape, &data, &[4, 8]);
        let k = t(&mut tape, &data, &[4, 8]);
        let v = t(&mut tape, &data, &[4, 8]);
        let mask = tape.causal_mask(4, 0).unwrap();
        let plain = tape.masked_attention(q, k, v, Some(mask), None).unwrap();

        let empty_k = tape.leaf(vec![], &[0, 8]).unwrap();
        let empty_v = tape.leaf(vec![], &[0, 8]).unwrap();
        let mask2 = tape.causal_mask(4, 0).unwrap();
        let with_mem = tape
            .masked_attention(q, k, v, Some(mask2), Some((empty_k, empty_v)))
            .unwrap();

        for (a, b) in tape.data(plain).iter().zip(tape.data(with_mem)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcast_row_vector() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&mut tape, &[10.0, 20.0], &[2]);
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.data(y), &[11.0, 22.0, 13.0, 24.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn broadcast_scalar_divide() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[2.0, 4.0, 8.0], &[3]);
        let c = tape.scalar(2.0).unwrap();
        let y = tape.div(a, c).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 4.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        // d(sum a/c)/dc = -sum(a)/c^2 = -14/4
        assert!((tape.grad(c).unwrap()[0] + 3.5).abs() < 1e-12);
    }

    #[test]
    fn determinism_same_inputs_same_bits() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape
                .leaf((0..12).map(|i| (i as f64).sin()).collect(), &[3, 4])
                .unwrap();
            let b = tape
                .leaf((0..12).map(|i| (i as f64).cos()).collect(), &[3, 4])
                .unwrap();
            let m = tape.matmul_nt(a, b).unwrap();
            let s = tape.softmax_rows(m).unwrap();
            let l = tape.sum_all(s).unwrap();
            tape.backward(l).unwrap();
            (
                tape.data(s).to_vec(),
                tape.grad(a).unwrap().to_vec(),
            )
        };
        let (s1, g1) = run();
        let (s2, g2) = run();
        assert_eq!(s1, s2);
        assert_eq!(g1, g2);
    }
}
