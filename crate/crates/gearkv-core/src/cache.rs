//! Streaming KV-cache state machine.
//!
//! Prefill compresses the prompt K/V into one block each at the prefill rank.
//! Decode tokens accumulate in full-precision buffers; when a buffer reaches
//! the flush threshold, both buffers are compressed into new blocks at the
//! decode rank and cleared. Flushed blocks never change afterwards.

use std::fs;
use std::path::Path;

use crate::gear::{self, CompressedBlock, GearConfig, GearError, Phase, Role};
use crate::lowrank::{HeadFactors, LowRankFactors};
use crate::outlier::{OutlierAxis, OutlierEntry, SparseOutliers};
use crate::quant::{GroupingScheme, QuantizedTensor};
use crate::tensor::{DenseMatrix, HeadLayout, TensorError};

/// Magic bytes of the cache snapshot format.
pub const SNAPSHOT_MAGIC: [u8; 4] = *b"GKV1";

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("prefill matrices disagree: K is {k_rows}x{k_cols}, V is {v_rows}x{v_cols}")]
    PrefillShapeMismatch {
        k_rows: usize,
        k_cols: usize,
        v_rows: usize,
        v_cols: usize,
    },
    #[error("appended vector has {got} entries, cache expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("appended vector contains a non-finite value")]
    NonFiniteToken,
    #[error("passthrough configs cannot back a compressed cache")]
    PassthroughConfig,
    #[error("snapshot has bad magic {0:?}, expected \"GKV1\"")]
    SnapshotBadMagic([u8; 4]),
    #[error("snapshot truncated at byte {at}")]
    SnapshotTruncated { at: usize },
    #[error("snapshot corrupt: {0}")]
    SnapshotCorrupt(String),
    #[error(transparent)]
    Gear(#[from] GearError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Compressed blocks plus full-precision streaming buffers for one layer's
/// Key and Value streams.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    key_blocks: Vec<CompressedBlock>,
    value_blocks: Vec<CompressedBlock>,
    key_buffer: Vec<f32>,
    value_buffer: Vec<f32>,
    buffered: usize,
    channels: usize,
    cfg: GearConfig,
    layout: HeadLayout,
    total_tokens: usize,
}

impl KvCache {
    /// Compresses the prompt K/V with the prefill rank and starts streaming.
    ///
    /// Config validation happens here once; appends assume a valid config.
    pub fn prefill(
        k0: &DenseMatrix,
        v0: &DenseMatrix,
        cfg: GearConfig,
        layout: HeadLayout,
    ) -> Result<Self, CacheError> {
        cfg.validate()?;
        if cfg.is_passthrough() {
            return Err(CacheError::PassthroughConfig);
        }
        if k0.rows() != v0.rows() || k0.cols() != v0.cols() {
            return Err(CacheError::PrefillShapeMismatch {
                k_rows: k0.rows(),
                k_cols: k0.cols(),
                v_rows: v0.rows(),
                v_cols: v0.cols(),
            });
        }
        let channels = layout.total_channels();
        if k0.cols() != channels {
            return Err(CacheError::Tensor(TensorError::HeadLayoutMismatch {
                head_count: layout.head_count(),
                head_dim: layout.head_dim(),
                cols: k0.cols(),
            }));
        }
        let n = k0.rows();
        let mut key_blocks = Vec::new();
        let mut value_blocks = Vec::new();
        if n > 0 {
            let rank = cfg.rank_prefill;
            key_blocks.push(
                gear::compress_block(k0, &cfg, layout, Role::Key, rank, Phase::Prefill)?
                    .with_token_range(0, n),
            );
            value_blocks.push(
                gear::compress_block(v0, &cfg, layout, Role::Value, rank, Phase::Prefill)?
                    .with_token_range(0, n),
            );
        }
        Ok(Self {
            key_blocks,
            value_blocks,
            key_buffer: Vec::new(),
            value_buffer: Vec::new(),
            buffered: 0,
            channels,
            cfg,
            layout,
            total_tokens: n,
        })
    }

    /// Pushes one decode token's key/value rows, flushing the buffers into
    /// decode blocks when they reach the configured capacity.
    pub fn append_token(&mut self, k_t: &[f32], v_t: &[f32]) -> Result<(), CacheError> {
        for row in [k_t, v_t] {
            if row.len() != self.channels {
                return Err(CacheError::DimensionMismatch {
                    expected: self.channels,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(CacheError::NonFiniteToken);
            }
        }
        self.key_buffer.extend_from_slice(k_t);
        self.value_buffer.extend_from_slice(v_t);
        self.buffered += 1;
        self.total_tokens += 1;
        if self.buffered == self.cfg.buffer_size {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<(), CacheError> {
        let rows = self.buffered;
        let start = self.total_tokens - rows;
        let k = DenseMatrix::new(rows, self.channels, std::mem::take(&mut self.key_buffer))?;
        let v = DenseMatrix::new(rows, self.channels, std::mem::take(&mut self.value_buffer))?;
        let rank = self.cfg.rank_decode;
        self.key_blocks.push(
            gear::compress_block(&k, &self.cfg, self.layout, Role::Key, rank, Phase::Decode)?
                .with_token_range(start, self.total_tokens),
        );
        self.value_blocks.push(
            gear::compress_block(&v, &self.cfg, self.layout, Role::Value, rank, Phase::Decode)?
                .with_token_range(start, self.total_tokens),
        );
        self.buffered = 0;
        Ok(())
    }

    /// Reconstructs the full K and V matrices: blocks in token order followed
    /// by the raw buffered rows.
    pub fn materialize(&self) -> Result<(DenseMatrix, DenseMatrix), CacheError> {
        Ok((
            self.materialize_side(&self.key_blocks, &self.key_buffer)?,
            self.materialize_side(&self.value_blocks, &self.value_buffer)?,
        ))
    }

    fn materialize_side(
        &self,
        blocks: &[CompressedBlock],
        buffer: &[f32],
    ) -> Result<DenseMatrix, CacheError> {
        let mut values = Vec::with_capacity(self.total_tokens * self.channels);
        for block in blocks {
            let recon = gear::reconstruct_block(block)?;
            values.extend_from_slice(recon.values());
        }
        values.extend_from_slice(buffer);
        Ok(DenseMatrix::new(self.total_tokens, self.channels, values)?)
    }

    pub fn key_blocks(&self) -> &[CompressedBlock] {
        &self.key_blocks
    }

    pub fn value_blocks(&self) -> &[CompressedBlock] {
        &self.value_blocks
    }

    /// Buffered (not yet compressed) token count.
    pub fn buffered_tokens(&self) -> usize {
        self.buffered
    }

    pub fn key_buffer_row(&self, i: usize) -> &[f32] {
        &self.key_buffer[i * self.channels..(i + 1) * self.channels]
    }

    pub fn value_buffer_row(&self, i: usize) -> &[f32] {
        &self.value_buffer[i * self.channels..(i + 1) * self.channels]
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cfg(&self) -> &GearConfig {
        &self.cfg
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    /// Serializes the full state under the GKV1 header.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(&SNAPSHOT_MAGIC);
        write_config(&mut w, &self.cfg);
        write_u64(&mut w, self.layout.head_count() as u64);
        write_u64(&mut w, self.layout.head_dim() as u64);
        write_u64(&mut w, self.total_tokens as u64);
        write_u64(&mut w, self.channels as u64);
        for blocks in [&self.key_blocks, &self.value_blocks] {
            write_u64(&mut w, blocks.len() as u64);
            for block in blocks.iter() {
                write_block(&mut w, block);
            }
        }
        for buffer in [&self.key_buffer, &self.value_buffer] {
            write_u64(&mut w, buffer.len() as u64);
            for v in buffer.iter() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CacheError> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != SNAPSHOT_MAGIC {
            return Err(CacheError::SnapshotBadMagic(magic.try_into().unwrap()));
        }
        let cfg = read_config(&mut r)?;
        let head_count = r.u64()? as usize;
        let head_dim = r.u64()? as usize;
        let layout = HeadLayout::new(head_count, head_dim)
            .map_err(|e| CacheError::SnapshotCorrupt(e.to_string()))?;
        let total_tokens = r.u64()? as usize;
        let channels = r.u64()? as usize;
        let mut all_blocks = Vec::new();
        for _ in 0..2 {
            let count = r.u64()? as usize;
            let mut blocks = Vec::with_capacity(count);
            for _ in 0..count {
                blocks.push(read_block(&mut r)?);
            }
            all_blocks.push(blocks);
        }
        let value_blocks = all_blocks.pop().unwrap();
        let key_blocks = all_blocks.pop().unwrap();
        let mut buffers = Vec::new();
        for _ in 0..2 {
            let len = r.u64()? as usize;
            let mut buffer = Vec::with_capacity(len);
            for _ in 0..len {
                buffer.push(r.f32()?);
            }
            buffers.push(buffer);
        }
        let value_buffer = buffers.pop().unwrap();
        let key_buffer = buffers.pop().unwrap();
        if channels == 0 || key_buffer.len() % channels != 0 {
            return Err(CacheError::SnapshotCorrupt(
                "buffer length not a multiple of channel count".into(),
            ));
        }
        let buffered = key_buffer.len() / channels;
        Ok(Self {
            key_blocks,
            value_blocks,
            key_buffer,
            value_buffer,
            buffered,
            channels,
            cfg,
            layout,
            total_tokens,
        })
    }

    pub fn save_state(&self, path: &Path) -> Result<(), CacheError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load_state(path: &Path) -> Result<Self, CacheError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Canonical byte encoding of one block; used by snapshots and by tests that
/// assert flushed blocks are bit-identical to direct compression.
pub fn encode_block(block: &CompressedBlock) -> Vec<u8> {
    let mut w = Vec::new();
    write_block(&mut w, block);
    w
}

fn write_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn write_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn write_scheme(w: &mut Vec<u8>, scheme: GroupingScheme) {
    match scheme {
        GroupingScheme::PerTokenGrouped { group_size } => {
            w.push(0);
            write_u64(w, group_size as u64);
        }
        GroupingScheme::PerChannelGrouped { group_size } => {
            w.push(1);
            write_u64(w, group_size as u64);
        }
        GroupingScheme::PerTokenVector => {
            w.push(2);
            write_u64(w, 0);
        }
        GroupingScheme::PerChannelVector => {
            w.push(3);
            write_u64(w, 0);
        }
    }
}

fn write_config(w: &mut Vec<u8>, cfg: &GearConfig) {
    w.push(cfg.bit_width);
    write_f64(w, cfg.sparsity_percent);
    write_u64(w, cfg.rank_prefill as u64);
    write_u64(w, cfg.rank_decode as u64);
    write_u64(w, cfg.buffer_size as u64);
    write_scheme(w, cfg.key_scheme);
    write_scheme(w, cfg.value_scheme);
    write_u64(w, cfg.power_iterations as u64);
    write_u64(w, cfg.seed);
    write_f64(w, cfg.coverage_percent);
}

fn write_matrix(w: &mut Vec<u8>, m: &DenseMatrix) {
    write_u64(w, m.rows() as u64);
    write_u64(w, m.cols() as u64);
    for v in m.values() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_block(w: &mut Vec<u8>, block: &CompressedBlock) {
    w.push(match block.role() {
        Role::Key => 0,
        Role::Value => 1,
    });
    let range = block.token_range();
    write_u64(w, range.start as u64);
    write_u64(w, range.end as u64);

    let backbone = block.backbone();
    write_u64(w, backbone.rows() as u64);
    write_u64(w, backbone.cols() as u64);
    w.push(backbone.bit_width());
    write_scheme(w, backbone.scheme());
    write_u64(w, backbone.scales().len() as u64);
    for v in backbone.scales() {
        w.extend_from_slice(&v.to_le_bytes());
    }
    for v in backbone.zeros() {
        w.extend_from_slice(&v.to_le_bytes());
    }
    write_u64(w, backbone.packed_codes().len() as u64);
    w.extend_from_slice(backbone.packed_codes());

    let outliers = block.outliers();
    w.push(match outliers.axis() {
        OutlierAxis::Channel => 0,
        OutlierAxis::Token => 1,
    });
    write_u64(w, outliers.nnz() as u64);
    for e in outliers.entries() {
        w.extend_from_slice(&e.row.to_le_bytes());
        w.extend_from_slice(&e.col.to_le_bytes());
        w.extend_from_slice(&e.value.to_le_bytes());
    }

    let lowrank = block.lowrank();
    write_u64(w, lowrank.rank() as u64);
    write_u64(w, lowrank.layout().head_count() as u64);
    write_u64(w, lowrank.layout().head_dim() as u64);
    write_u64(w, lowrank.row_offset() as u64);
    write_u64(w, lowrank.total_rows() as u64);
    w.push(u8::from(lowrank.clamped()) | (u8::from(lowrank.rank_deficient()) << 1));
    write_u64(w, lowrank.heads().len() as u64);
    for head in lowrank.heads() {
        write_matrix(w, head.a());
        write_matrix(w, head.b());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CacheError> {
        if self.pos + n > self.bytes.len() {
            return Err(CacheError::SnapshotTruncated { at: self.pos });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CacheError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CacheError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CacheError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CacheError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CacheError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_scheme(r: &mut Reader) -> Result<GroupingScheme, CacheError> {
    let tag = r.u8()?;
    let g = r.u64()? as usize;
    match tag {
        0 => Ok(GroupingScheme::PerTokenGrouped { group_size: g }),
        1 => Ok(GroupingScheme::PerChannelGrouped { group_size: g }),
        2 => Ok(GroupingScheme::PerTokenVector),
        3 => Ok(GroupingScheme::PerChannelVector),
        other => Err(CacheError::SnapshotCorrupt(format!(
            "unknown grouping scheme tag {other}"
        ))),
    }
}

fn read_config(r: &mut Reader) -> Result<GearConfig, CacheError> {
    Ok(GearConfig {
        bit_width: r.u8()?,
        sparsity_percent: r.f64()?,
        rank_prefill: r.u64()? as usize,
        rank_decode: r.u64()? as usize,
        buffer_size: r.u64()? as usize,
        key_scheme: read_scheme(r)?,
        value_scheme: read_scheme(r)?,
        power_iterations: r.u64()? as usize,
        seed: r.u64()?,
        coverage_percent: r.f64()?,
    })
}

fn read_matrix(r: &mut Reader) -> Result<DenseMatrix, CacheError> {
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        values.push(r.f32()?);
    }
    DenseMatrix::new(rows, cols, values).map_err(|e| CacheError::SnapshotCorrupt(e.to_string()))
}

fn read_block(r: &mut Reader) -> Result<CompressedBlock, CacheError> {
    let role = match r.u8()? {
        0 => Role::Key,
        1 => Role::Value,
        other => {
            return Err(CacheError::SnapshotCorrupt(format!(
                "unknown role tag {other}"
            )))
        }
    };
    let start = r.u64()? as usize;
    let end = r.u64()? as usize;

    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let bits = r.u8()?;
    let scheme = read_scheme(r)?;
    let group_count = r.u64()? as usize;
    let mut scales = Vec::with_capacity(group_count);
    for _ in 0..group_count {
        scales.push(r.f32()?);
    }
    let mut zeros = Vec::with_capacity(group_count);
    for _ in 0..group_count {
        zeros.push(r.f32()?);
    }
    let code_len = r.u64()? as usize;
    let codes = r.take(code_len)?.to_vec();
    let backbone = QuantizedTensor::from_parts(codes, scales, zeros, scheme, rows, cols, bits)
        .map_err(|e| CacheError::SnapshotCorrupt(e.to_string()))?;

    let axis = match r.u8()? {
        0 => OutlierAxis::Channel,
        1 => OutlierAxis::Token,
        other => {
            return Err(CacheError::SnapshotCorrupt(format!(
                "unknown outlier axis tag {other}"
            )))
        }
    };
    let nnz = r.u64()? as usize;
    let mut entries = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        entries.push(OutlierEntry {
            row: r.u32()?,
            col: r.u32()?,
            value: r.f32()?,
        });
    }
    let outliers = SparseOutliers::from_parts(entries, rows, cols, axis);

    let rank = r.u64()? as usize;
    let head_count = r.u64()? as usize;
    let head_dim = r.u64()? as usize;
    let layout = HeadLayout::new(head_count, head_dim)
        .map_err(|e| CacheError::SnapshotCorrupt(e.to_string()))?;
    let row_offset = r.u64()? as usize;
    let total_rows = r.u64()? as usize;
    let flags = r.u8()?;
    let stored_heads = r.u64()? as usize;
    let mut heads = Vec::with_capacity(stored_heads);
    for _ in 0..stored_heads {
        let a = read_matrix(r)?;
        let b = read_matrix(r)?;
        heads.push(HeadFactors::from_parts(a, b));
    }
    let lowrank = LowRankFactors::from_parts(
        heads,
        rank,
        layout,
        row_offset,
        total_rows,
        flags & 1 != 0,
        flags & 2 != 0,
    );

    Ok(CompressedBlock::from_parts(
        backbone, outliers, lowrank, role, start, end,
    ))
}
