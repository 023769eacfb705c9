//! Per-vector extraction of extreme entries into a sparse matrix.
//!
//! For sparsity `s`, each vector along the chosen axis gives up its
//! `k = floor(s * len / 200)` largest and `k` smallest entries; the remainder
//! keeps zeros at the extracted positions so that `sparse + remainder`
//! reconstructs the input exactly. Ties are broken by the smallest index
//! along the vector.

use crate::tensor::{DenseMatrix, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum OutlierError {
    #[error("sparsity percent must lie in [0, 100], got {0}")]
    InvalidSparsity(f64),
    #[error("matrix dimensions exceed u32 index range")]
    IndexOverflow,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which axis the per-vector extraction runs along.
///
/// `Channel` scans each column (the Key-cache convention); `Token` scans each
/// row (the Value-cache convention).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierAxis {
    Channel,
    Token,
}

/// One extracted entry in coordinate form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierEntry {
    pub row: u32,
    pub col: u32,
    pub value: f32,
}

/// Sparse matrix of extracted extreme entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOutliers {
    entries: Vec<OutlierEntry>,
    rows: usize,
    cols: usize,
    axis: OutlierAxis,
}

impl SparseOutliers {
    pub fn empty(rows: usize, cols: usize, axis: OutlierAxis) -> Self {
        Self {
            entries: Vec::new(),
            rows,
            cols,
            axis,
        }
    }

    pub fn entries(&self) -> &[OutlierEntry] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn axis(&self) -> OutlierAxis {
        self.axis
    }

    /// Materializes the sparse matrix densely (zeros elsewhere).
    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for e in &self.entries {
            out.set(e.row as usize, e.col as usize, e.value);
        }
        out
    }

    pub(crate) fn from_parts(
        entries: Vec<OutlierEntry>,
        rows: usize,
        cols: usize,
        axis: OutlierAxis,
    ) -> Self {
        Self {
            entries,
            rows,
            cols,
            axis,
        }
    }
}

/// Entries extracted per side of one vector of length `len` at sparsity `s`.
pub fn outlier_pair_count(sparsity_percent: f64, len: usize) -> usize {
    ((sparsity_percent * len as f64) / 200.0).floor() as usize
}

/// Splits `x` into extracted extremes and the remainder `x - sparse`.
pub fn filter_outliers(
    x: &DenseMatrix,
    sparsity_percent: f64,
    axis: OutlierAxis,
) -> Result<(SparseOutliers, DenseMatrix), OutlierError> {
    if !(0.0..=100.0).contains(&sparsity_percent) || sparsity_percent.is_nan() {
        return Err(OutlierError::InvalidSparsity(sparsity_percent));
    }
    if x.rows() > u32::MAX as usize || x.cols() > u32::MAX as usize {
        return Err(OutlierError::IndexOverflow);
    }
    let mut remainder = x.clone();
    let mut entries = Vec::new();
    match axis {
        OutlierAxis::Channel => {
            let k = outlier_pair_count(sparsity_percent, x.rows());
            for col in 0..x.cols() {
                let vector: Vec<f32> = (0..x.rows()).map(|r| x.get(r, col)).collect();
                for pos in select_extremes(&vector, k) {
                    entries.push(OutlierEntry {
                        row: pos as u32,
                        col: col as u32,
                        value: x.get(pos, col),
                    });
                    remainder.set(pos, col, 0.0);
                }
            }
        }
        OutlierAxis::Token => {
            let k = outlier_pair_count(sparsity_percent, x.cols());
            for row in 0..x.rows() {
                let vector = x.row(row).to_vec();
                for pos in select_extremes(&vector, k) {
                    entries.push(OutlierEntry {
                        row: row as u32,
                        col: pos as u32,
                        value: x.get(row, pos),
                    });
                    remainder.set(row, pos, 0.0);
                }
            }
        }
    }
    Ok((
        SparseOutliers::from_parts(entries, x.rows(), x.cols(), axis),
        remainder,
    ))
}

/// Positions of the `k` largest and `k` smallest entries of `vector`,
/// returned in ascending index order. The max side picks first; the min side
/// selects from the remaining positions, so the sets never overlap.
fn select_extremes(vector: &[f32], k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    debug_assert!(2 * k <= vector.len());
    let mut order: Vec<usize> = (0..vector.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        vector[b]
            .partial_cmp(&vector[a])
            .expect("finite values")
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; vector.len()];
    for &i in order.iter().take(k) {
        taken[i] = true;
    }
    order.sort_unstable_by(|&a, &b| {
        vector[a]
            .partial_cmp(&vector[b])
            .expect("finite values")
            .then(a.cmp(&b))
    });
    let mut count = 0;
    for &i in &order {
        if count == k {
            break;
        }
        if !taken[i] {
            taken[i] = true;
            count += 1;
        }
    }
    let mut positions: Vec<usize> = taken
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| t.then_some(i))
        .collect();
    positions.sort_unstable();
    positions
}
