//! Property tests for structural invariants.

use autograd::Tape;
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..8,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut tape = Tape::new();
        let a = tape.leaf(data, &[rows, cols]).unwrap();
        let s = tape.softmax_rows(a).unwrap();
        let out = tape.data(s);
        for v in out {
            prop_assert!(*v >= 0.0);
        }
        for r in 0..rows {
            let sum: f64 = out[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn broadcast_rejects_incompatible_shapes(
        r in 2usize..5,
        c in 2usize..5,
    ) {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.0; r * c], &[r, c]).unwrap();
        // A vector matching the leading (not trailing) dimension must be rejected
        // when the dims differ.
        if r != c {
            let b = tape.leaf(vec![0.0; r], &[r]).unwrap();
            prop_assert!(tape.add(a, b).is_err());
        }
    }
}
