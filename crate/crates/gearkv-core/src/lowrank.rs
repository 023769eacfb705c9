//! Rank-r approximation of residual matrices by power iteration.
//!
//! The solver runs the two-sided iteration `A = X B`, `B = X^T A`, applying
//! Householder QR re-orthonormalization to both factors inside the final
//! iteration only. `A B^T` then approximates the top-r truncated SVD of `X`.
//! Factor initialization draws from a deterministic Gaussian stream keyed by
//! `(seed, head index)`, so identical inputs give bit-identical factors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{DenseMatrix, HeadLayout, TensorError};

const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, thiserror::Error)]
pub enum LowRankError {
    #[error("rank must be at least 1")]
    InvalidRank,
    #[error("iteration count must be at least 1")]
    InvalidIterations,
    #[error("cannot factor an empty matrix")]
    EmptyInput,
    #[error("matrix has {cols} columns but layout covers {expected}")]
    LayoutMismatch { cols: usize, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Factor pair of one head: `a` is `covered_rows x r`, `b` is `head_dim x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFactors {
    a: DenseMatrix,
    b: DenseMatrix,
}

impl HeadFactors {
    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    /// Materializes `a * b^T`.
    pub fn reconstruct(&self) -> DenseMatrix {
        self.a.matmul_transpose(&self.b)
    }

    pub(crate) fn from_parts(a: DenseMatrix, b: DenseMatrix) -> Self {
        Self { a, b }
    }
}

/// Per-head low-rank factors for a source matrix.
///
/// Rows before `row_offset` receive zero correction; the factors cover the
/// trailing `total_rows - row_offset` rows. `rank == 0` encodes a disabled
/// low-rank term.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    heads: Vec<HeadFactors>,
    rank: usize,
    layout: HeadLayout,
    row_offset: usize,
    total_rows: usize,
    clamped: bool,
    rank_deficient: bool,
}

impl LowRankFactors {
    /// Factors carrying no correction at all.
    pub fn empty(layout: HeadLayout, total_rows: usize) -> Self {
        Self {
            heads: Vec::new(),
            rank: 0,
            layout,
            row_offset: 0,
            total_rows,
            clamped: false,
            rank_deficient: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rank == 0
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn heads(&self) -> &[HeadFactors] {
        &self.heads
    }

    pub fn row_offset(&self) -> usize {
        self.row_offset
    }

    pub fn total_rows(&self) -> usize {
        self.total_rows
    }

    /// Rows actually covered by the factors.
    pub fn covered_rows(&self) -> usize {
        self.total_rows - self.row_offset
    }

    /// True when the requested rank exceeded `min(rows, head_dim)`.
    pub fn clamped(&self) -> bool {
        self.clamped
    }

    /// True when QR met linearly dependent columns and zeroed them.
    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    /// Re-homes factors solved on a row slice into a taller matrix: the
    /// covered rows become the trailing rows of `total_rows`.
    pub fn placed_at(mut self, row_offset: usize, total_rows: usize) -> Self {
        if !self.is_empty() {
            assert_eq!(
                row_offset + self.covered_rows(),
                total_rows,
                "factor placement must end at the last row"
            );
        }
        self.row_offset = row_offset;
        self.total_rows = total_rows;
        self
    }

    /// Materializes the full `total_rows x channels` correction matrix.
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.total_rows, self.layout.total_channels());
        if self.rank == 0 {
            return out;
        }
        for (h, factors) in self.heads.iter().enumerate() {
            let block = factors.reconstruct();
            let col_range = self.layout.head_range(h);
            for r in 0..block.rows() {
                for (c, col) in col_range.clone().enumerate() {
                    out.set(self.row_offset + r, col, block.get(r, c));
                }
            }
        }
        out
    }

    pub(crate) fn from_parts(
        heads: Vec<HeadFactors>,
        rank: usize,
        layout: HeadLayout,
        row_offset: usize,
        total_rows: usize,
        clamped: bool,
        rank_deficient: bool,
    ) -> Self {
        Self {
            heads,
            rank,
            layout,
            row_offset,
            total_rows,
            clamped,
            rank_deficient,
        }
    }
}

/// Thin-Q Householder orthonormalization.
///
/// Returns a matrix of the same shape whose columns are orthonormal and span
/// the input's column space; linearly dependent columns come back as zero
/// columns with the deficiency flag set instead of aborting.
pub fn orthonormalize(m: &DenseMatrix) -> (DenseMatrix, bool) {
    let n = m.rows();
    let k = m.cols();
    let mut r: Vec<f32> = m.values().to_vec();
    let mut reflectors: Vec<(usize, Vec<f32>)> = Vec::new();
    let mut deficient = vec![false; k];
    let mut diag_negative = vec![false; k];

    let max_col_norm = (0..k)
        .map(|c| {
            (0..n)
                .map(|i| (r[i * k + c] as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0f64, f64::max);
    let tol = max_col_norm * 1e-7;

    for j in 0..k {
        if j >= n {
            deficient[j] = true;
            continue;
        }
        let sigma = (j..n)
            .map(|i| (r[i * k + j] as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if sigma <= tol || sigma == 0.0 {
            deficient[j] = true;
            continue;
        }
        let x0 = r[j * k + j] as f64;
        let alpha = if x0 >= 0.0 { -sigma } else { sigma };
        diag_negative[j] = alpha < 0.0;
        let mut v: Vec<f32> = (j..n).map(|i| r[i * k + j]).collect();
        v[0] = (x0 - alpha) as f32;
        let vnorm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            deficient[j] = true;
            continue;
        }
        for x in &mut v {
            *x = (*x as f64 / vnorm) as f32;
        }
        for c in j..k {
            let w: f64 = v
                .iter()
                .enumerate()
                .map(|(i, &vi)| vi as f64 * r[(j + i) * k + c] as f64)
                .sum::<f64>()
                * 2.0;
            for (i, &vi) in v.iter().enumerate() {
                r[(j + i) * k + c] -= (w * vi as f64) as f32;
            }
        }
        reflectors.push((j, v));
    }

    // Q = H_0 H_1 ... H_t applied to the thin identity.
    let mut q = vec![0.0f32; n * k];
    for j in 0..k.min(n) {
        q[j * k + j] = 1.0;
    }
    for (offset, v) in reflectors.iter().rev() {
        for c in 0..k {
            let w: f64 = v
                .iter()
                .enumerate()
                .map(|(i, &vi)| vi as f64 * q[(offset + i) * k + c] as f64)
                .sum::<f64>()
                * 2.0;
            for (i, &vi) in v.iter().enumerate() {
                q[(offset + i) * k + c] -= (w * vi as f64) as f32;
            }
        }
    }
    // Canonical sign: make the implicit R diagonal non-negative, and zero out
    // deficient columns.
    for j in 0..k {
        if deficient[j] {
            for i in 0..n {
                q[i * k + j] = 0.0;
            }
        } else if diag_negative[j] {
            for i in 0..n {
                q[i * k + j] = -q[i * k + j];
            }
        }
    }
    let any_deficient = deficient.iter().any(|&d| d);
    (DenseMatrix::from_raw(n, k, q), any_deficient)
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f32> = (0..rows * cols)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    DenseMatrix::from_raw(rows, cols, values)
}

struct SingleHeadSolve {
    factors: HeadFactors,
    rank: usize,
    clamped: bool,
    rank_deficient: bool,
}

fn solve_single(
    m: &DenseMatrix,
    rank: usize,
    iterations: usize,
    seed: u64,
) -> Result<SingleHeadSolve, LowRankError> {
    if rank == 0 {
        return Err(LowRankError::InvalidRank);
    }
    if iterations == 0 {
        return Err(LowRankError::InvalidIterations);
    }
    if m.rows() == 0 {
        return Err(LowRankError::EmptyInput);
    }
    let effective = rank.min(m.rows()).min(m.cols());
    let clamped = effective < rank;

    let mut b = gaussian_matrix(m.cols(), effective, seed);
    let mut a = DenseMatrix::zeros(m.rows(), effective);
    let mut rank_deficient = false;
    for l in 0..iterations {
        let last = l == iterations - 1;
        if last {
            let (q, deficient) = orthonormalize(&b);
            b = q;
            rank_deficient |= deficient;
        }
        a = m.matmul(&b);
        if last {
            let (q, deficient) = orthonormalize(&a);
            a = q;
            rank_deficient |= deficient;
        }
        b = m.transpose_matmul(&a);
    }
    Ok(SingleHeadSolve {
        factors: HeadFactors::from_parts(a, b),
        rank: effective,
        clamped,
        rank_deficient,
    })
}

/// Power-iteration rank-`rank` factorization of a single matrix.
///
/// The result is modeled as a one-head [`LowRankFactors`]; the requested rank
/// is clamped to `min(rows, cols)` with the `clamped` flag set.
pub fn power_iteration_svd(
    m: &DenseMatrix,
    rank: usize,
    iterations: usize,
    seed: u64,
) -> Result<LowRankFactors, LowRankError> {
    let solve = solve_single(m, rank, iterations, seed)?;
    let layout = HeadLayout::new(1, m.cols())?;
    Ok(LowRankFactors::from_parts(
        vec![solve.factors],
        solve.rank,
        layout,
        0,
        m.rows(),
        solve.clamped,
        solve.rank_deficient,
    ))
}

/// Applies [`power_iteration_svd`] independently to each head split of `m`.
///
/// Head `h` draws its Gaussian initialization from `seed + h * stride`, so
/// head 0 of a single-head layout reproduces `power_iteration_svd` exactly.
pub fn solve_heads(
    m: &DenseMatrix,
    layout: HeadLayout,
    rank: usize,
    iterations: usize,
    seed: u64,
) -> Result<LowRankFactors, LowRankError> {
    if m.cols() != layout.total_channels() {
        return Err(LowRankError::LayoutMismatch {
            cols: m.cols(),
            expected: layout.total_channels(),
        });
    }
    let splits = crate::tensor::split_heads(m, layout)?;
    let mut heads = Vec::with_capacity(splits.len());
    let mut effective = 0;
    let mut clamped = false;
    let mut rank_deficient = false;
    for (h, head) in splits.iter().enumerate() {
        let solve = solve_single(head, rank, iterations, derive_head_seed(seed, h as u64))?;
        effective = solve.rank;
        clamped |= solve.clamped;
        rank_deficient |= solve.rank_deficient;
        heads.push(solve.factors);
    }
    Ok(LowRankFactors::from_parts(
        heads,
        effective,
        layout,
        0,
        m.rows(),
        clamped,
        rank_deficient,
    ))
}

pub(crate) fn derive_head_seed(seed: u64, head: u64) -> u64 {
    seed.wrapping_add(head.wrapping_mul(SEED_STRIDE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::frobenius_error;

    fn mat(rows: usize, cols: usize, values: &[f32]) -> DenseMatrix {
        DenseMatrix::new(rows, cols, values.to_vec()).unwrap()
    }

    fn max_abs(m: &DenseMatrix) -> f32 {
        m.values().iter().fold(0.0f32, |acc, v| acc.max(v.abs()))
    }

    #[test]
    fn orthonormalize_identity_is_identity() {
        let eye = mat(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let (q, deficient) = orthonormalize(&eye);
        assert!(!deficient);
        for r in 0..3 {
            for c in 0..3 {
                let expected = if r == c { 1.0 } else { 0.0 };
                assert!((q.get(r, c) - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn orthonormalize_removes_column_scaling() {
        let m = mat(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let (q, deficient) = orthonormalize(&m);
        assert!(!deficient);
        for r in 0..2 {
            for c in 0..2 {
                let expected = if r == c { 1.0 } else { 0.0 };
                assert!((q.get(r, c) - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn orthonormalize_random_tall_matrix() {
        let m = gaussian_matrix(64, 4, 7);
        let (q, deficient) = orthonormalize(&m);
        assert!(!deficient);
        let qtq = q.transpose_matmul(&q);
        for r in 0..4 {
            for c in 0..4 {
                let expected = if r == c { 1.0 } else { 0.0 };
                assert!(
                    (qtq.get(r, c) - expected).abs() < 1e-5,
                    "QtQ deviates at ({r},{c}): {}",
                    qtq.get(r, c)
                );
            }
        }
        // Projector identity: Q Q^T M = M when Q spans M's columns.
        let projected = q.matmul(&q.transpose_matmul(&m));
        let diff = projected.sub(&m).unwrap();
        assert!(max_abs(&diff) < 1e-4, "projector residual {}", max_abs(&diff));
    }

    #[test]
    fn orthonormalize_flags_dependent_columns() {
        // Second column is twice the first.
        let m = mat(3, 2, &[1.0, 2.0, 1.0, 2.0, 0.0, 0.0]);
        let (q, deficient) = orthonormalize(&m);
        assert!(deficient);
        for r in 0..3 {
            assert_eq!(q.get(r, 1), 0.0);
        }
        let col0_norm: f32 = (0..3).map(|r| q.get(r, 0) * q.get(r, 0)).sum();
        assert!((col0_norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rank_one_matrix_recovered_exactly() {
        let u = [1.0f32, -2.0, 0.5, 3.0];
        let v = [2.0f32, 1.0, -1.0];
        let values: Vec<f32> = u.iter().flat_map(|&a| v.iter().map(move |&b| a * b)).collect();
        let m = mat(4, 3, &values);
        let factors = power_iteration_svd(&m, 1, 2, 42).unwrap();
        let err = frobenius_error(&m, &factors.reconstruct()).unwrap();
        assert!(err <= 1e-5 * m.frobenius_norm());
    }

    #[test]
    fn zero_matrix_yields_zero_reconstruction() {
        let m = DenseMatrix::zeros(6, 4);
        let factors = power_iteration_svd(&m, 2, 2, 1).unwrap();
        assert_eq!(factors.reconstruct(), DenseMatrix::zeros(6, 4));
        assert!(factors.rank_deficient());
    }

    #[test]
    fn rank_clamps_to_matrix_bounds() {
        let m = gaussian_matrix(3, 5, 11);
        let factors = power_iteration_svd(&m, 10, 2, 0).unwrap();
        assert!(factors.clamped());
        assert_eq!(factors.rank(), 3);
    }

    #[test]
    fn factors_are_deterministic_per_seed() {
        let m = gaussian_matrix(32, 16, 5);
        let layout = HeadLayout::new(2, 8).unwrap();
        let a = solve_heads(&m, layout, 3, 2, 99).unwrap();
        let b = solve_heads(&m, layout, 3, 2, 99).unwrap();
        for (ha, hb) in a.heads().iter().zip(b.heads()) {
            assert_eq!(
                ha.a().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                hb.a().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(
                ha.b().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                hb.b().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        let c = solve_heads(&m, layout, 3, 2, 100).unwrap();
        assert_ne!(a.heads()[0].a(), c.heads()[0].a());
    }

    #[test]
    fn single_head_layout_reduces_to_power_iteration() {
        let m = gaussian_matrix(24, 8, 3);
        let layout = HeadLayout::new(1, 8).unwrap();
        let multi = solve_heads(&m, layout, 2, 2, 77).unwrap();
        let single = power_iteration_svd(&m, 2, 2, 77).unwrap();
        assert_eq!(multi.heads()[0], single.heads()[0]);
    }

    #[test]
    fn zero_head_reconstructs_to_zero() {
        let mut values = gaussian_matrix(16, 8, 9).values().to_vec();
        for r in 0..16 {
            for c in 4..8 {
                values[r * 8 + c] = 0.0;
            }
        }
        let m = mat(16, 8, &values);
        let layout = HeadLayout::new(2, 4).unwrap();
        let factors = solve_heads(&m, layout, 2, 2, 13).unwrap();
        let recon = factors.reconstruct();
        for r in 0..16 {
            for c in 4..8 {
                assert_eq!(recon.get(r, c), 0.0);
            }
        }
    }

    #[test]
    fn per_head_squared_errors_sum_to_total() {
        let m = gaussian_matrix(32, 16, 21);
        let layout = HeadLayout::new(2, 8).unwrap();
        let factors = solve_heads(&m, layout, 4, 2, 0).unwrap();
        let total = frobenius_error(&m, &factors.reconstruct()).unwrap();
        let splits = crate::tensor::split_heads(&m, layout).unwrap();
        let mut sum_sq = 0.0f64;
        for (h, head) in splits.iter().enumerate() {
            let err = frobenius_error(head, &factors.heads()[h].reconstruct()).unwrap();
            sum_sq += err * err;
        }
        assert!((total * total - sum_sq).abs() <= 1e-9 * sum_sq.max(1.0));
    }

    #[test]
    fn final_iteration_leaves_a_orthonormal() {
        let m = gaussian_matrix(64, 16, 2);
        let factors = power_iteration_svd(&m, 4, 2, 8).unwrap();
        let a = factors.heads()[0].a();
        let ata = a.transpose_matmul(a);
        for r in 0..4 {
            for c in 0..4 {
                let expected = if r == c { 1.0 } else { 0.0 };
                assert!((ata.get(r, c) - expected).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn error_is_monotone_in_rank() {
        let m = gaussian_matrix(48, 24, 17);
        let mut prev = f64::INFINITY;
        for r in [1, 2, 4, 8] {
            let factors = power_iteration_svd(&m, r, 2, 5).unwrap();
            let err = frobenius_error(&m, &factors.reconstruct()).unwrap();
            assert!(err <= prev + 1e-9, "rank {r} error {err} above {prev}");
            prev = err;
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let m = gaussian_matrix(4, 4, 0);
        assert!(matches!(
            power_iteration_svd(&m, 0, 2, 0),
            Err(LowRankError::InvalidRank)
        ));
        assert!(matches!(
            power_iteration_svd(&m, 1, 0, 0),
            Err(LowRankError::InvalidIterations)
        ));
    }
}
