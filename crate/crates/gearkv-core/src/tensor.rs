//! Dense row-major matrices, head-wise views, error metrics and tensor file I/O.
//!
//! Every tensor in this crate is a 2-D `tokens x channels` matrix of finite
//! f32 values stored row-major. Batch/layer dimensions are handled by callers
//! iterating 2-D matrices.

use std::fs;
use std::path::Path;

/// Magic bytes of the tensor file format.
pub const TENSOR_MAGIC: [u8; 4] = *b"KVT1";
const TENSOR_HEADER_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    ShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("value buffer holds {got} entries, shape {rows}x{cols} needs {expected}")]
    LengthMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("matrix must have at least one column")]
    NoColumns,
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("head layout {head_count}x{head_dim} does not cover {cols} channels")]
    HeadLayoutMismatch {
        head_count: usize,
        head_dim: usize,
        cols: usize,
    },
    #[error("head layout requires head_count >= 1 and head_dim >= 1")]
    InvalidHeadLayout,
    #[error("bad magic {0:?}, expected \"KVT1\"")]
    BadMagic([u8; 4]),
    #[error("truncated header: file holds {got} bytes, header needs {TENSOR_HEADER_LEN}")]
    TruncatedHeader { got: usize },
    #[error("truncated payload: expected {expected} bytes after header, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("unsupported dtype tag {0}, only 0 (f32) is defined")]
    UnsupportedDtype(u8),
    #[error("dimension overflow: {rows} x {cols} does not fit in memory bounds")]
    DimensionOverflow { rows: u64, cols: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major `rows x cols` matrix of finite f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl DenseMatrix {
    /// Builds a matrix, validating length and finiteness of the payload.
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self, TensorError> {
        if cols == 0 {
            return Err(TensorError::NoColumns);
        }
        let expected = rows
            .checked_mul(cols)
            .ok_or(TensorError::DimensionOverflow {
                rows: rows as u64,
                cols: cols as u64,
            })?;
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                rows,
                cols,
                expected,
                got: values.len(),
            });
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    row: i / cols,
                    col: i % cols,
                });
            }
        }
        Ok(Self { rows, cols, values })
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(cols >= 1, "matrix must have at least one column");
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        debug_assert!(row < self.rows && col < self.cols);
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        debug_assert!(row < self.rows && col < self.cols);
        self.values[row * self.cols + col] = value;
    }

    /// Row `r` as a contiguous slice.
    pub fn row(&self, r: usize) -> &[f32] {
        assert!(r < self.rows, "row {r} out of range ({} rows)", self.rows);
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> DenseMatrix {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        DenseMatrix {
            rows: end - start,
            cols: self.cols,
            values: self.values[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> DenseMatrix {
        assert!(start <= end && end <= self.cols, "column range out of bounds");
        assert!(end > start, "column slice must be non-empty");
        let width = end - start;
        let mut values = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            values.extend_from_slice(&self.values[r * self.cols + start..r * self.cols + end]);
        }
        DenseMatrix {
            rows: self.rows,
            cols: width,
            values,
        }
    }

    /// Elementwise difference `self - rhs`.
    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
        self.check_same_shape(rhs)?;
        let values = self
            .values
            .iter()
            .zip(&rhs.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values,
        })
    }

    /// Elementwise sum `self + rhs`.
    pub fn add(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
        self.check_same_shape(rhs)?;
        let values = self
            .values
            .iter()
            .zip(&rhs.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values,
        })
    }

    /// `self (n x k) * rhs (k x m)`.
    pub fn matmul(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimensions differ");
        let mut out = vec![0.0f32; self.rows * rhs.cols];
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = rhs.row(k);
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        DenseMatrix {
            rows: self.rows,
            cols: rhs.cols,
            values: out,
        }
    }

    /// `self^T (k x n) * rhs (n x m)` without materializing the transpose.
    pub fn transpose_matmul(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, rhs.rows, "transpose_matmul row counts differ");
        let mut out = vec![0.0f32; self.cols * rhs.cols];
        for r in 0..self.rows {
            let lhs_row = self.row(r);
            let rhs_row = rhs.row(r);
            for (i, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        DenseMatrix {
            rows: self.cols,
            cols: rhs.cols,
            values: out,
        }
    }

    /// `self (n x r) * rhs^T (r x m)` where `rhs` is `m x r`.
    pub fn matmul_transpose(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, rhs.cols, "matmul_transpose inner dims differ");
        let mut out = vec![0.0f32; self.rows * rhs.rows];
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            for j in 0..rhs.rows {
                let rhs_row = rhs.row(j);
                let mut acc = 0.0f32;
                for (&a, &b) in lhs_row.iter().zip(rhs_row) {
                    acc += a * b;
                }
                out[i * rhs.rows + j] = acc;
            }
        }
        DenseMatrix {
            rows: self.rows,
            cols: rhs.rows,
            values: out,
        }
    }

    /// Frobenius norm, accumulated in f64.
    pub fn frobenius_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    fn check_same_shape(&self, rhs: &DenseMatrix) -> Result<(), TensorError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(TensorError::ShapeMismatch {
                expected_rows: self.rows,
                expected_cols: self.cols,
                rows: rhs.rows,
                cols: rhs.cols,
            });
        }
        Ok(())
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        Self { rows, cols, values }
    }
}

/// Multi-head split of the channel dimension: `head_count * head_dim` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    head_count: usize,
    head_dim: usize,
}

impl HeadLayout {
    pub fn new(head_count: usize, head_dim: usize) -> Result<Self, TensorError> {
        if head_count == 0 || head_dim == 0 {
            return Err(TensorError::InvalidHeadLayout);
        }
        Ok(Self {
            head_count,
            head_dim,
        })
    }

    pub fn head_count(&self) -> usize {
        self.head_count
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Total channel count covered by this layout.
    pub fn total_channels(&self) -> usize {
        self.head_count * self.head_dim
    }

    /// Column range owned by head `h`.
    pub fn head_range(&self, h: usize) -> std::ops::Range<usize> {
        assert!(h < self.head_count, "head index out of range");
        h * self.head_dim..(h + 1) * self.head_dim
    }
}

/// Splits the channel dimension into per-head matrices.
///
/// Head `h` owns columns `[h * head_dim, (h+1) * head_dim)`; concatenating the
/// returned matrices column-wise recovers the input exactly.
pub fn split_heads(x: &DenseMatrix, layout: HeadLayout) -> Result<Vec<DenseMatrix>, TensorError> {
    if x.cols() != layout.total_channels() {
        return Err(TensorError::HeadLayoutMismatch {
            head_count: layout.head_count,
            head_dim: layout.head_dim,
            cols: x.cols(),
        });
    }
    Ok((0..layout.head_count)
        .map(|h| {
            let range = layout.head_range(h);
            x.slice_cols(range.start, range.end)
        })
        .collect())
}

/// Column-wise concatenation, the inverse of [`split_heads`].
pub fn hconcat(parts: &[DenseMatrix]) -> Result<DenseMatrix, TensorError> {
    assert!(!parts.is_empty(), "hconcat needs at least one part");
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            if p.rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    expected_rows: rows,
                    expected_cols: p.cols(),
                    rows: p.rows(),
                    cols: p.cols(),
                });
            }
            values.extend_from_slice(p.row(r));
        }
    }
    Ok(DenseMatrix::from_raw(rows, cols, values))
}

/// `||x - y||_F`: zero iff the matrices are equal, symmetric in its arguments.
pub fn frobenius_error(x: &DenseMatrix, y: &DenseMatrix) -> Result<f64, TensorError> {
    x.check_same_shape(y)?;
    let sum: f64 = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(a, b)| {
            let d = (*a as f64) - (*b as f64);
            d * d
        })
        .sum();
    Ok(sum.sqrt())
}

/// Writes a matrix in the KVT1 format.
///
/// Layout (little-endian): magic `"KVT1"`, u32 rows, u32 cols, u8 dtype tag
/// (0 = f32), 3 padding bytes, then `rows * cols` f32 values row-major.
pub fn save_tensor(x: &DenseMatrix, path: &Path) -> Result<(), TensorError> {
    if x.rows > u32::MAX as usize || x.cols > u32::MAX as usize {
        return Err(TensorError::DimensionOverflow {
            rows: x.rows as u64,
            cols: x.cols as u64,
        });
    }
    let mut bytes = Vec::with_capacity(TENSOR_HEADER_LEN + x.values.len() * 4);
    bytes.extend_from_slice(&TENSOR_MAGIC);
    bytes.extend_from_slice(&(x.rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(x.cols as u32).to_le_bytes());
    bytes.push(0u8);
    bytes.extend_from_slice(&[0u8; 3]);
    for v in &x.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads a KVT1 tensor file; bit-exact inverse of [`save_tensor`].
pub fn load_tensor(path: &Path) -> Result<DenseMatrix, TensorError> {
    let bytes = fs::read(path)?;
    if bytes.len() < TENSOR_HEADER_LEN {
        return Err(TensorError::TruncatedHeader { got: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != TENSOR_MAGIC {
        return Err(TensorError::BadMagic(magic));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let dtype = bytes[12];
    if dtype != 0 {
        return Err(TensorError::UnsupportedDtype(dtype));
    }
    let count = rows
        .checked_mul(cols)
        .filter(|&c| c <= (usize::MAX / 4) as u64)
        .ok_or(TensorError::DimensionOverflow { rows, cols })? as usize;
    let expected = count * 4;
    let payload = &bytes[TENSOR_HEADER_LEN..];
    if payload.len() != expected {
        return Err(TensorError::TruncatedPayload {
            expected,
            got: payload.len(),
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseMatrix::new(rows as usize, cols as usize, values)
}
