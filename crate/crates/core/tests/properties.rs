//! Randomized property tests for the structural invariants that hold for
//! every input, not just the seeded instances in the unit tests.

use proptest::prelude::*;

use sqft_core::quant::{calibrate_params, dequantize, quantize_rtn, GroupSize, RangeMode};
use sqft_core::sparsity::{
    apply_mask, build_mask, measure_sparsity, score_magnitude, Group, SparsityLevel,
};
use sqft_core::tensor::Matrix;

fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |data| Matrix::new(rows, cols, data).unwrap())
}

proptest! {
    #[test]
    fn mask_prunes_exact_count(w in matrix_strategy(8, 12), s in 0.0f64..0.99) {
        let level = SparsityLevel::new(s).unwrap();
        let mask = build_mask(&score_magnitude(&w), level, Group::PerRow);
        let expect_per_row = (s * 12.0).floor() as usize;
        for i in 0..8 {
            let pruned = (0..12).filter(|&j| !mask.is_kept(i, j)).count();
            prop_assert_eq!(pruned, expect_per_row);
        }
    }

    #[test]
    fn masking_is_idempotent(w in matrix_strategy(6, 10), s in 0.0f64..0.99) {
        let level = SparsityLevel::new(s).unwrap();
        let mask = build_mask(&score_magnitude(&w), level, Group::PerMatrix);
        let once = apply_mask(&w, &mask).unwrap();
        let twice = apply_mask(&once, &mask).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(measure_sparsity(&once) >= mask.zero_fraction() - 1e-12);
    }

    #[test]
    fn rtn_codes_in_range_and_bounded_error(w in matrix_strategy(4, 16), bits in 2u32..=8) {
        let params = calibrate_params(&w, bits, GroupSize::WholeRow, RangeMode::Paper).unwrap();
        let q = quantize_rtn(&w, &params).unwrap();
        let deq = dequantize(&q);
        for i in 0..4 {
            for j in 0..16 {
                prop_assert!(i64::from(q.code_at(i, j)) <= params.q_max());
                let (lo, hi) = params.representable_range(i, j);
                let v = w.get(i, j);
                if v >= lo && v <= hi {
                    prop_assert!((v - deq.get(i, j)).abs() <= params.scale_at(i, j) / 2.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn hadamard_commutes(a in matrix_strategy(5, 7), b in matrix_strategy(5, 7)) {
        prop_assert_eq!(a.hadamard(&b).unwrap(), b.hadamard(&a).unwrap());
    }

    #[test]
    fn quantization_preserves_exact_zeros(w in matrix_strategy(6, 8), s in 0.1f64..0.9) {
        let level = SparsityLevel::new(s).unwrap();
        let mask = build_mask(&score_magnitude(&w), level, Group::PerRow);
        let wp = apply_mask(&w, &mask).unwrap();
        let params = calibrate_params(&wp, 4, GroupSize::WholeRow, RangeMode::Paper).unwrap();
        let deq = dequantize(&quantize_rtn(&wp, &params).unwrap());
        for i in 0..6 {
            for j in 0..8 {
                if !mask.is_kept(i, j) {
                    prop_assert_eq!(deq.get(i, j), 0.0);
                }
            }
        }
    }
}
