//! Uniform asymmetric integer quantization under four grouping schemes.
//!
//! Each group stores a scale `delta = (max - min) / (2^b - 1)` and a
//! zero-point `min`; codes are `round_ties_even((x - min) / delta)` clamped to
//! `[0, 2^b - 1]`. Constant groups get `delta = 0` and all-zero codes.
//!
//! Packed layout: codes are emitted in stream order (row-major for per-token
//! schemes, column-major for per-channel schemes) and packed little-endian
//! within each byte, so groups occupy contiguous bit spans.

use crate::tensor::{DenseMatrix, TensorError};

pub const SUPPORTED_BIT_WIDTHS: [u8; 3] = [2, 4, 8];

#[derive(Debug, thiserror::Error)]
pub enum QuantError {
    #[error("unsupported bit width {0}, expected one of 2, 4, 8")]
    UnsupportedBitWidth(u8),
    #[error("group size must be at least 1")]
    InvalidGroupSize,
    #[error("cannot quantize an empty matrix")]
    EmptyInput,
    #[error("corrupted packed payload: expected {expected} bytes, got {got}")]
    CorruptPayload { expected: usize, got: usize },
    #[error("corrupted group metadata: expected {expected} groups, got {got}")]
    CorruptGroups { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How entries are grouped for scale/zero-point computation.
///
/// Grouped schemes cut the grouped axis into runs of `group_size` (a shorter
/// remainder group keeps its own scale); vector schemes use one group per
/// whole row or column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupingScheme {
    /// Groups of `group_size` consecutive channels within one token row.
    PerTokenGrouped { group_size: usize },
    /// Groups of `group_size` consecutive tokens within one channel column.
    PerChannelGrouped { group_size: usize },
    /// One group per token row.
    PerTokenVector,
    /// One group per channel column.
    PerChannelVector,
}

impl GroupingScheme {
    pub fn validate(&self) -> Result<(), QuantError> {
        match self {
            GroupingScheme::PerTokenGrouped { group_size }
            | GroupingScheme::PerChannelGrouped { group_size } => {
                if *group_size == 0 {
                    return Err(QuantError::InvalidGroupSize);
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// True when the packed stream runs column-major.
    pub fn is_channel_major(&self) -> bool {
        matches!(
            self,
            GroupingScheme::PerChannelGrouped { .. } | GroupingScheme::PerChannelVector
        )
    }

    /// Group size along the token axis required of streaming flush blocks;
    /// `None` when any flush size is valid.
    pub fn token_axis_group_size(&self) -> Option<usize> {
        match self {
            GroupingScheme::PerChannelGrouped { group_size } => Some(*group_size),
            _ => None,
        }
    }

    /// Number of scale/zero pairs for a `rows x cols` matrix.
    pub fn group_count(&self, rows: usize, cols: usize) -> usize {
        match self {
            GroupingScheme::PerTokenGrouped { group_size } => rows * cols.div_ceil(*group_size),
            GroupingScheme::PerChannelGrouped { group_size } => cols * rows.div_ceil(*group_size),
            GroupingScheme::PerTokenVector => rows,
            GroupingScheme::PerChannelVector => cols,
        }
    }

    /// Invokes `f` once per group, in stream order, with the linear (row-major)
    /// value indices of the group's entries.
    fn for_each_group<F: FnMut(GroupIndices)>(&self, rows: usize, cols: usize, mut f: F) {
        match *self {
            GroupingScheme::PerTokenGrouped { group_size } => {
                for r in 0..rows {
                    let mut c = 0;
                    while c < cols {
                        let len = group_size.min(cols - c);
                        f(GroupIndices::RowRun {
                            start: r * cols + c,
                            len,
                        });
                        c += len;
                    }
                }
            }
            GroupingScheme::PerTokenVector => {
                for r in 0..rows {
                    f(GroupIndices::RowRun {
                        start: r * cols,
                        len: cols,
                    });
                }
            }
            GroupingScheme::PerChannelGrouped { group_size } => {
                for c in 0..cols {
                    let mut r = 0;
                    while r < rows {
                        let len = group_size.min(rows - r);
                        f(GroupIndices::ColRun {
                            start: r * cols + c,
                            len,
                            stride: cols,
                        });
                        r += len;
                    }
                }
            }
            GroupingScheme::PerChannelVector => {
                for c in 0..cols {
                    f(GroupIndices::ColRun {
                        start: c,
                        len: rows,
                        stride: cols,
                    });
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum GroupIndices {
    RowRun { start: usize, len: usize },
    ColRun { start: usize, len: usize, stride: usize },
}

impl GroupIndices {
    fn iter(self) -> impl Iterator<Item = usize> {
        let (start, len, stride) = match self {
            GroupIndices::RowRun { start, len } => (start, len, 1),
            GroupIndices::ColRun { start, len, stride } => (start, len, stride),
        };
        (0..len).map(move |i| start + i * stride)
    }
}

/// Bit-packed quantized tensor with per-group scale/zero metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<u8>,
    scales: Vec<f32>,
    zeros: Vec<f32>,
    scheme: GroupingScheme,
    rows: usize,
    cols: usize,
    bit_width: u8,
}

impl QuantizedTensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bit_width(&self) -> u8 {
        self.bit_width
    }

    pub fn scheme(&self) -> GroupingScheme {
        self.scheme
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zeros(&self) -> &[f32] {
        &self.zeros
    }

    /// Packed code bytes in stream order.
    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn group_count(&self) -> usize {
        self.scales.len()
    }

    /// Unpacks all codes in stream order.
    pub fn unpack_codes(&self) -> Vec<u8> {
        let total = self.rows * self.cols;
        let mut reader = BitReader::new(&self.codes);
        (0..total).map(|_| reader.read(self.bit_width)).collect()
    }

    pub(crate) fn from_parts(
        codes: Vec<u8>,
        scales: Vec<f32>,
        zeros: Vec<f32>,
        scheme: GroupingScheme,
        rows: usize,
        cols: usize,
        bit_width: u8,
    ) -> Result<Self, QuantError> {
        if !SUPPORTED_BIT_WIDTHS.contains(&bit_width) {
            return Err(QuantError::UnsupportedBitWidth(bit_width));
        }
        scheme.validate()?;
        let expected_bytes = packed_len(rows * cols, bit_width);
        if codes.len() != expected_bytes {
            return Err(QuantError::CorruptPayload {
                expected: expected_bytes,
                got: codes.len(),
            });
        }
        let expected_groups = scheme.group_count(rows, cols);
        if scales.len() != expected_groups || zeros.len() != expected_groups {
            return Err(QuantError::CorruptGroups {
                expected: expected_groups,
                got: scales.len().min(zeros.len()),
            });
        }
        Ok(Self {
            codes,
            scales,
            zeros,
            scheme,
            rows,
            cols,
            bit_width,
        })
    }
}

pub(crate) fn packed_len(entries: usize, bit_width: u8) -> usize {
    (entries * bit_width as usize).div_ceil(8)
}

struct BitWriter {
    bytes: Vec<u8>,
    bit_pos: usize,
}

impl BitWriter {
    fn with_capacity(entries: usize, bit_width: u8) -> Self {
        Self {
            bytes: vec![0u8; packed_len(entries, bit_width)],
            bit_pos: 0,
        }
    }

    fn push(&mut self, code: u8, bit_width: u8) {
        // Widths 2/4/8 divide a byte, so codes never straddle byte boundaries.
        let byte = self.bit_pos / 8;
        let shift = self.bit_pos % 8;
        self.bytes[byte] |= code << shift;
        self.bit_pos += bit_width as usize;
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit_pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, bit_pos: 0 }
    }

    fn read(&mut self, bit_width: u8) -> u8 {
        let byte = self.bit_pos / 8;
        let shift = self.bit_pos % 8;
        let mask = if bit_width == 8 {
            0xFF
        } else {
            (1u8 << bit_width) - 1
        };
        self.bit_pos += bit_width as usize;
        (self.bytes[byte] >> shift) & mask
    }
}

/// Quantizes `x` group-wise at `bit_width` bits under `scheme`.
pub fn quantize(
    x: &DenseMatrix,
    bit_width: u8,
    scheme: GroupingScheme,
) -> Result<QuantizedTensor, QuantError> {
    if !SUPPORTED_BIT_WIDTHS.contains(&bit_width) {
        return Err(QuantError::UnsupportedBitWidth(bit_width));
    }
    scheme.validate()?;
    if x.rows() == 0 {
        return Err(QuantError::EmptyInput);
    }
    let levels = (1u32 << bit_width) - 1;
    let group_count = scheme.group_count(x.rows(), x.cols());
    let mut scales = Vec::with_capacity(group_count);
    let mut zeros = Vec::with_capacity(group_count);
    let mut writer = BitWriter::with_capacity(x.rows() * x.cols(), bit_width);
    let values = x.values();

    scheme.for_each_group(x.rows(), x.cols(), |group| {
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for idx in group.iter() {
            let v = values[idx];
            min = min.min(v);
            max = max.max(v);
        }
        let delta = (max - min) / levels as f32;
        scales.push(delta);
        zeros.push(min);
        if delta == 0.0 {
            for _ in group.iter() {
                writer.push(0, bit_width);
            }
        } else {
            for idx in group.iter() {
                let code = ((values[idx] - min) / delta).round_ties_even();
                let code = (code as u32).min(levels) as u8;
                writer.push(code, bit_width);
            }
        }
    });

    Ok(QuantizedTensor {
        codes: writer.finish(),
        scales,
        zeros,
        scheme,
        rows: x.rows(),
        cols: x.cols(),
        bit_width,
    })
}

/// Reconstructs `zero + code * delta` per entry.
pub fn dequantize(q: &QuantizedTensor) -> Result<DenseMatrix, QuantError> {
    let total = q.rows * q.cols;
    let expected = packed_len(total, q.bit_width);
    if q.codes.len() != expected {
        return Err(QuantError::CorruptPayload {
            expected,
            got: q.codes.len(),
        });
    }
    let mut out = vec![0.0f32; total];
    let mut reader = BitReader::new(&q.codes);
    let mut group_idx = 0usize;
    q.scheme.for_each_group(q.rows, q.cols, |group| {
        let delta = q.scales[group_idx];
        let zero = q.zeros[group_idx];
        group_idx += 1;
        for idx in group.iter() {
            let code = reader.read(q.bit_width);
            out[idx] = zero + code as f32 * delta;
        }
    });
    Ok(DenseMatrix::new(q.rows, q.cols, out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, values: &[f32]) -> DenseMatrix {
        DenseMatrix::new(rows, cols, values.to_vec()).unwrap()
    }

    #[test]
    fn constant_group_degenerates_to_zero_delta() {
        let x = mat(2, 2, &[5.0; 4]);
        let q = quantize(&x, 4, GroupingScheme::PerTokenVector).unwrap();
        assert_eq!(q.scales(), &[0.0, 0.0]);
        assert_eq!(q.zeros(), &[5.0, 5.0]);
        assert!(q.unpack_codes().iter().all(|&c| c == 0));
        let back = dequantize(&q).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn grid_values_quantize_exactly() {
        let x = mat(1, 4, &[0.0, 1.0, 2.0, 3.0]);
        let q = quantize(&x, 2, GroupingScheme::PerTokenVector).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.zeros(), &[0.0]);
        assert_eq!(q.unpack_codes(), vec![0, 1, 2, 3]);
        assert_eq!(dequantize(&q).unwrap(), x);
    }

    #[test]
    fn rounding_is_ties_to_even() {
        // (0.5 - 0.1) / ((0.9 - 0.1) / 3) lands on the 1.5 boundary; the code
        // must resolve to 2, with the remaining entries on grid positions.
        let x = mat(1, 4, &[0.1, 0.9, 0.5, 0.3]);
        let q = quantize(&x, 2, GroupingScheme::PerTokenVector).unwrap();
        assert_eq!(q.unpack_codes(), vec![0, 3, 2, 1]);
        let expected_delta = (0.9f32 - 0.1f32) / 3.0;
        assert!((q.scales()[0] - expected_delta).abs() < 1e-7);
    }

    #[test]
    fn per_entry_error_bound_holds() {
        let mut state = 0x9E3779B97F4A7C15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f32 / (1u64 << 31) as f32) * 8.0 - 4.0
        };
        let values: Vec<f32> = (0..8 * 64).map(|_| next()).collect();
        let x = mat(8, 64, &values);
        let scheme = GroupingScheme::PerTokenGrouped { group_size: 16 };
        let q = quantize(&x, 4, scheme).unwrap();
        let back = dequantize(&q).unwrap();
        // Walk groups the same way the spec defines them and bound each entry.
        let mut group_idx = 0;
        for r in 0..8 {
            for g0 in (0..64).step_by(16) {
                let delta = q.scales()[group_idx];
                group_idx += 1;
                for c in g0..g0 + 16 {
                    let err = (x.get(r, c) - back.get(r, c)).abs();
                    assert!(
                        err <= delta / 2.0 + 1e-6,
                        "entry ({r},{c}) error {err} exceeds delta/2 = {}",
                        delta / 2.0
                    );
                }
            }
        }
    }

    #[test]
    fn grouped_with_full_axis_equals_vector_scheme() {
        let values: Vec<f32> = (0..48).map(|i| ((i * 37) % 23) as f32 * 0.37).collect();
        let x = mat(6, 8, &values);
        let a = quantize(&x, 2, GroupingScheme::PerTokenGrouped { group_size: 8 }).unwrap();
        let b = quantize(&x, 2, GroupingScheme::PerTokenVector).unwrap();
        assert_eq!(a.packed_codes(), b.packed_codes());
        assert_eq!(a.scales(), b.scales());
        assert_eq!(a.zeros(), b.zeros());

        let c = quantize(&x, 4, GroupingScheme::PerChannelGrouped { group_size: 6 }).unwrap();
        let d = quantize(&x, 4, GroupingScheme::PerChannelVector).unwrap();
        assert_eq!(c.packed_codes(), d.packed_codes());
        assert_eq!(c.scales(), d.scales());
    }

    #[test]
    fn fidelity_improves_with_bit_width() {
        let values: Vec<f32> = (0..128)
            .map(|i| ((i as f32) * 0.731).sin() * 3.0 + ((i / 7) as f32))
            .collect();
        let x = mat(8, 16, &values);
        let mut prev = f64::INFINITY;
        for b in [2u8, 4, 8] {
            let q = quantize(&x, b, GroupingScheme::PerTokenVector).unwrap();
            let err = crate::tensor::frobenius_error(&x, &dequantize(&q).unwrap()).unwrap();
            assert!(err <= prev, "error grew from {prev} to {err} at b={b}");
            prev = err;
        }
    }

    #[test]
    fn packing_golden_bytes_per_token() {
        let x = mat(2, 4, &[0.0, 1.0, 2.0, 3.0, 3.0, 2.0, 1.0, 0.0]);
        let q = quantize(&x, 2, GroupingScheme::PerTokenVector).unwrap();
        // Row-major stream, little-endian in-byte: row 0 = 0,1,2,3 -> 0b11100100.
        assert_eq!(q.packed_codes(), &[0b1110_0100, 0b0001_1011]);
    }

    #[test]
    fn packing_golden_bytes_per_channel() {
        // Column-major stream over a 3x2 matrix, both columns grid-aligned
        // with delta 1: codes per column are [0, 8, 15].
        let x = mat(3, 2, &[0.0, 0.0, 8.0, 8.0, 15.0, 15.0]);
        let q = quantize(&x, 4, GroupingScheme::PerChannelVector).unwrap();
        assert_eq!(q.unpack_codes(), vec![0, 8, 15, 0, 8, 15]);
        assert_eq!(q.packed_codes(), &[0b1000_0000, 0b0000_1111, 0b1111_1000]);
    }

    #[test]
    fn remainder_group_gets_own_scale() {
        let x = mat(1, 5, &[0.0, 1.0, 10.0, 11.0, 100.0]);
        let q = quantize(&x, 4, GroupingScheme::PerTokenGrouped { group_size: 2 }).unwrap();
        assert_eq!(q.group_count(), 3);
        assert_eq!(q.zeros(), &[0.0, 10.0, 100.0]);
        assert_eq!(q.scales()[2], 0.0);
    }

    #[test]
    fn rejects_unsupported_bit_width() {
        let x = mat(1, 2, &[0.0, 1.0]);
        assert!(matches!(
            quantize(&x, 3, GroupingScheme::PerTokenVector),
            Err(QuantError::UnsupportedBitWidth(3))
        ));
        assert!(matches!(
            quantize(&x, 16, GroupingScheme::PerTokenVector),
            Err(QuantError::UnsupportedBitWidth(16))
        ));
    }

    #[test]
    fn rejects_empty_input_and_zero_group() {
        let x = mat(1, 2, &[0.0, 1.0]);
        assert!(matches!(
            quantize(&x, 2, GroupingScheme::PerTokenGrouped { group_size: 0 }),
            Err(QuantError::InvalidGroupSize)
        ));
        let empty = DenseMatrix::zeros(0, 2);
        assert!(matches!(
            quantize(&empty, 2, GroupingScheme::PerTokenVector),
            Err(QuantError::EmptyInput)
        ));
    }

    #[test]
    fn corrupt_payload_detected_on_dequantize() {
        let x = mat(2, 4, &[0.0, 1.0, 2.0, 3.0, 3.0, 2.0, 1.0, 0.0]);
        let q = quantize(&x, 2, GroupingScheme::PerTokenVector).unwrap();
        let bad = QuantizedTensor {
            codes: q.codes[..1].to_vec(),
            ..q
        };
        assert!(matches!(
            dequantize(&bad),
            Err(QuantError::CorruptPayload {
                expected: 2,
                got: 1
            })
        ));
    }
}
