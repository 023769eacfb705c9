//! Property tests for the spec-level invariants of the building blocks.

use gearkv_core::{
    filter_outliers, frobenius_error, hconcat, load_tensor, outlier_pair_count, quantize,
    save_tensor, split_heads, DenseMatrix, GroupingScheme, HeadLayout, OutlierAxis,
};
use proptest::prelude::*;

fn small_matrix() -> impl Strategy<Value = DenseMatrix> {
    (1usize..=12, 1usize..=16).prop_flat_map(|(rows, cols)| {
        prop::collection::vec(-1000.0f32..1000.0, rows * cols)
            .prop_map(move |values| DenseMatrix::new(rows, cols, values).unwrap())
    })
}

fn scheme() -> impl Strategy<Value = GroupingScheme> {
    prop_oneof![
        Just(GroupingScheme::PerTokenVector),
        Just(GroupingScheme::PerChannelVector),
        (1usize..=9).prop_map(|g| GroupingScheme::PerTokenGrouped { group_size: g }),
        (1usize..=9).prop_map(|g| GroupingScheme::PerChannelGrouped { group_size: g }),
    ]
}

/// Independent group-index oracle matching the grouping definition.
fn group_of(scheme: GroupingScheme, rows: usize, cols: usize, r: usize, c: usize) -> usize {
    match scheme {
        GroupingScheme::PerTokenGrouped { group_size } => {
            r * cols.div_ceil(group_size) + c / group_size
        }
        GroupingScheme::PerChannelGrouped { group_size } => {
            c * rows.div_ceil(group_size) + r / group_size
        }
        GroupingScheme::PerTokenVector => r,
        GroupingScheme::PerChannelVector => c,
    }
}

proptest! {
    #[test]
    fn quantization_error_bounded_by_half_step(
        x in small_matrix(),
        bits in prop::sample::select(vec![2u8, 4, 8]),
        scheme in scheme(),
    ) {
        let q = quantize(&x, bits, scheme).unwrap();
        let back = gearkv_core::dequantize(&q).unwrap();
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let g = group_of(scheme, x.rows(), x.cols(), r, c);
                let delta = q.scales()[g];
                let err = (x.get(r, c) - back.get(r, c)).abs();
                if delta == 0.0 {
                    prop_assert_eq!(x.get(r, c), back.get(r, c));
                } else {
                    prop_assert!(
                        err <= delta / 2.0 + 1e-6,
                        "({}, {}): err {} > delta/2 {}", r, c, err, delta / 2.0
                    );
                }
            }
        }
    }

    #[test]
    fn codes_on_a_dyadic_grid_roundtrip_exactly(
        codes in prop::collection::vec(0u8..=3, 1..24),
        bits in prop::sample::select(vec![2u8, 4, 8]),
    ) {
        // Pin the group range so the grid step stays exactly 0.25.
        let levels = (1u32 << bits) - 1;
        let mut all = codes.clone();
        all.push(0);
        all.push(levels.min(255) as u8);
        let values: Vec<f32> = all.iter().map(|&c| c as f32 * 0.25).collect();
        let x = DenseMatrix::new(1, values.len(), values).unwrap();
        let q = quantize(&x, bits, GroupingScheme::PerTokenVector).unwrap();
        let back = gearkv_core::dequantize(&q).unwrap();
        prop_assert_eq!(back, x);
        let unpacked = q.unpack_codes();
        prop_assert_eq!(unpacked.len(), all.len());
        for (code, original) in unpacked.iter().zip(&all) {
            prop_assert_eq!(code, original);
        }
    }

    #[test]
    fn filter_decomposition_is_exact(
        x in small_matrix(),
        s in 0.0f64..=100.0,
        channel_axis in any::<bool>(),
    ) {
        let axis = if channel_axis { OutlierAxis::Channel } else { OutlierAxis::Token };
        let (sparse, remainder) = filter_outliers(&x, s, axis).unwrap();
        // Exact reassembly.
        prop_assert_eq!(sparse.to_dense().add(&remainder).unwrap(), x.clone());
        // Count law.
        let (vectors, len) = match axis {
            OutlierAxis::Channel => (x.cols(), x.rows()),
            OutlierAxis::Token => (x.rows(), x.cols()),
        };
        prop_assert_eq!(sparse.nnz(), vectors * 2 * outlier_pair_count(s, len));
        // No duplicate coordinates.
        let mut seen = std::collections::HashSet::new();
        for e in sparse.entries() {
            prop_assert!(seen.insert((e.row, e.col)), "duplicate entry ({}, {})", e.row, e.col);
        }
    }

    #[test]
    fn split_then_concat_is_identity(
        (head_dim, head_count, rows) in (1usize..=6, 1usize..=4, 1usize..=8),
        seed in any::<u64>(),
    ) {
        let cols = head_dim * head_count;
        let mut state = seed | 1;
        let values: Vec<f32> = (0..rows * cols).map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 35) as f32 / (1u64 << 28) as f32) - 1.0
        }).collect();
        let x = DenseMatrix::new(rows, cols, values).unwrap();
        let layout = HeadLayout::new(head_count, head_dim).unwrap();
        let heads = split_heads(&x, layout).unwrap();
        prop_assert_eq!(hconcat(&heads).unwrap(), x);
    }

    #[test]
    fn frobenius_satisfies_triangle_inequality(
        rows in 1usize..=6,
        cols in 1usize..=6,
        seed in any::<u64>(),
    ) {
        let mut state = seed | 1;
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n).map(|_| {
                state = state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
                ((state >> 34) as f32 / (1u64 << 28) as f32) - 2.0
            }).collect()
        };
        let x = DenseMatrix::new(rows, cols, draw(rows * cols)).unwrap();
        let y = DenseMatrix::new(rows, cols, draw(rows * cols)).unwrap();
        let z = DenseMatrix::new(rows, cols, draw(rows * cols)).unwrap();
        let xz = frobenius_error(&x, &z).unwrap();
        let xy = frobenius_error(&x, &y).unwrap();
        let yz = frobenius_error(&y, &z).unwrap();
        prop_assert!(xz <= xy + yz + 1e-6 * (xy + yz).max(1.0));
    }

    #[test]
    fn grouped_scheme_with_full_extent_matches_vector_scheme(x in small_matrix()) {
        let grouped = quantize(&x, 4, GroupingScheme::PerTokenGrouped { group_size: x.cols() }).unwrap();
        let vector = quantize(&x, 4, GroupingScheme::PerTokenVector).unwrap();
        prop_assert_eq!(grouped.packed_codes(), vector.packed_codes());
        prop_assert_eq!(grouped.scales(), vector.scales());
        prop_assert_eq!(grouped.zeros(), vector.zeros());
    }

    #[test]
    fn tensor_file_roundtrip_is_bit_exact(
        rows in 1usize..=5,
        cols in 1usize..=5,
        bits in prop::collection::vec(any::<u32>(), 25),
    ) {
        let values: Vec<f32> = bits
            .iter()
            .take(rows * cols)
            .map(|&b| {
                let v = f32::from_bits(b);
                if v.is_finite() { v } else { 0.0 }
            })
            .collect();
        let x = DenseMatrix::new(rows, cols, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.kvt");
        save_tensor(&x, &path).unwrap();
        let y = load_tensor(&path).unwrap();
        prop_assert_eq!(x.rows(), y.rows());
        prop_assert_eq!(x.cols(), y.cols());
        for (a, b) in x.values().iter().zip(y.values()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
