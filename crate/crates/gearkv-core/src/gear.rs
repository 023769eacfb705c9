//! Block compression composing the quantized backbone, sparse outliers and
//! the low-rank residual term.
//!
//! Compression order for a block `X`: extract outliers `S`, quantize the
//! remainder into the backbone `D`, then fit per-head low-rank factors to the
//! residual `X - dequant(D) - S`. Reconstruction is `dequant(D) + L + S`.

use crate::lowrank::{self, LowRankFactors, LowRankError};
use crate::outlier::{self, OutlierAxis, OutlierError, SparseOutliers};
use crate::quant::{self, GroupingScheme, QuantError, QuantizedTensor};
use crate::tensor::{frobenius_error, DenseMatrix, HeadLayout, TensorError};

/// Bit width marking an uncompressed FP16 reference configuration. Such a
/// config is valid for memory accounting and deviation baselines but cannot
/// be quantized.
pub const PASSTHROUGH_BITS: u8 = 16;

#[derive(Debug, thiserror::Error)]
pub enum GearError {
    #[error("bit width {0} is not one of 2, 4, 8 (16 = uncompressed reference)")]
    InvalidBitWidth(u8),
    #[error("sparsity percent {0} outside [0, 100]")]
    InvalidSparsity(f64),
    #[error("coverage percent {0} outside [0, 100]")]
    InvalidCoverage(f64),
    #[error("buffer size must be at least 1")]
    InvalidBufferSize,
    #[error("power iteration count must be at least 1")]
    InvalidIterations,
    #[error(
        "flush size {buffer_size} must be a multiple of per-channel group size {group_size}"
    )]
    FlushThresholdViolation {
        buffer_size: usize,
        group_size: usize,
    },
    #[error("passthrough configs (bit width 16) cannot be compressed")]
    PassthroughNotCompressible,
    #[error("cannot compress an empty block")]
    EmptyBlock,
    #[error("block components disagree: {0}")]
    ComponentMismatch(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Outlier(#[from] OutlierError),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Whether a matrix holds Key or Value rows; decides the outlier axis and the
/// backbone grouping orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Key,
    Value,
}

impl Role {
    /// Keys extract per-channel outliers, Values per-token.
    pub fn outlier_axis(&self) -> OutlierAxis {
        match self {
            Role::Key => OutlierAxis::Channel,
            Role::Value => OutlierAxis::Token,
        }
    }
}

/// Whether a block carries prompt tokens or generated tokens. Prefill blocks
/// honor the coverage percentage; decode blocks always get full coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Decode,
}

/// Full compression operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct GearConfig {
    /// Backbone bit width: 2, 4 or 8; 16 marks an uncompressed reference.
    pub bit_width: u8,
    /// Outlier percentage `s`; 0 disables the sparse term.
    pub sparsity_percent: f64,
    /// Low-rank rank for prefill blocks; 0 disables the term.
    pub rank_prefill: usize,
    /// Low-rank rank for decode blocks.
    pub rank_decode: usize,
    /// Streaming buffer capacity in tokens.
    pub buffer_size: usize,
    /// Backbone grouping for Key blocks.
    pub key_scheme: GroupingScheme,
    /// Backbone grouping for Value blocks.
    pub value_scheme: GroupingScheme,
    /// Power iteration count for the low-rank solver.
    pub power_iterations: usize,
    /// Seed for the solver's Gaussian initialization.
    pub seed: u64,
    /// Portion of most recent prefill tokens receiving low-rank correction.
    pub coverage_percent: f64,
}

impl GearConfig {
    pub fn validate(&self) -> Result<(), GearError> {
        if !quant::SUPPORTED_BIT_WIDTHS.contains(&self.bit_width)
            && self.bit_width != PASSTHROUGH_BITS
        {
            return Err(GearError::InvalidBitWidth(self.bit_width));
        }
        if !(0.0..=100.0).contains(&self.sparsity_percent) || self.sparsity_percent.is_nan() {
            return Err(GearError::InvalidSparsity(self.sparsity_percent));
        }
        if !(0.0..=100.0).contains(&self.coverage_percent) || self.coverage_percent.is_nan() {
            return Err(GearError::InvalidCoverage(self.coverage_percent));
        }
        if self.buffer_size == 0 {
            return Err(GearError::InvalidBufferSize);
        }
        if self.power_iterations == 0 {
            return Err(GearError::InvalidIterations);
        }
        for scheme in [self.key_scheme, self.value_scheme] {
            scheme.validate()?;
            if let Some(g) = scheme.token_axis_group_size() {
                if self.buffer_size % g != 0 {
                    return Err(GearError::FlushThresholdViolation {
                        buffer_size: self.buffer_size,
                        group_size: g,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn is_passthrough(&self) -> bool {
        self.bit_width == PASSTHROUGH_BITS
    }

    pub fn scheme_for(&self, role: Role) -> GroupingScheme {
        match role {
            Role::Key => self.key_scheme,
            Role::Value => self.value_scheme,
        }
    }

    pub fn rank_for(&self, phase: Phase) -> usize {
        match phase {
            Phase::Prefill => self.rank_prefill,
            Phase::Decode => self.rank_decode,
        }
    }

    /// Plain 4-bit per-token grouped quantization, group size 64.
    pub fn per_token_4bit() -> Self {
        Self {
            bit_width: 4,
            sparsity_percent: 0.0,
            rank_prefill: 0,
            rank_decode: 0,
            buffer_size: 64,
            key_scheme: GroupingScheme::PerTokenGrouped { group_size: 64 },
            value_scheme: GroupingScheme::PerTokenGrouped { group_size: 64 },
            power_iterations: 2,
            seed: 0,
            coverage_percent: 100.0,
        }
    }

    /// 4-bit per-channel-vector Key / per-token-vector Value backbone.
    pub fn kcvt_4bit() -> Self {
        Self {
            bit_width: 4,
            sparsity_percent: 0.0,
            rank_prefill: 0,
            rank_decode: 0,
            buffer_size: 20,
            key_scheme: GroupingScheme::PerChannelVector,
            value_scheme: GroupingScheme::PerTokenVector,
            power_iterations: 2,
            seed: 0,
            coverage_percent: 100.0,
        }
    }

    /// Low-rank correction on the KCVT backbone.
    pub fn gear_l_4bit_kcvt() -> Self {
        Self {
            rank_prefill: 4,
            rank_decode: 2,
            ..Self::kcvt_4bit()
        }
    }

    /// Sparse + low-rank correction on the KCVT backbone.
    pub fn gear_4bit_kcvt() -> Self {
        Self {
            sparsity_percent: 2.0,
            ..Self::gear_l_4bit_kcvt()
        }
    }

    /// 2-bit fine-grained per-channel Key / per-token Value backbone,
    /// group size 64, flush size 64.
    pub fn kivi_2bit() -> Self {
        Self {
            bit_width: 2,
            sparsity_percent: 0.0,
            rank_prefill: 0,
            rank_decode: 0,
            buffer_size: 64,
            key_scheme: GroupingScheme::PerChannelGrouped { group_size: 64 },
            value_scheme: GroupingScheme::PerTokenGrouped { group_size: 64 },
            power_iterations: 2,
            seed: 0,
            coverage_percent: 100.0,
        }
    }

    /// Low-rank correction on the 2-bit fine-grained backbone.
    pub fn gear_l_2bit_kivi() -> Self {
        Self {
            rank_prefill: 4,
            rank_decode: 2,
            ..Self::kivi_2bit()
        }
    }

    /// Sparse + low-rank correction on the 2-bit fine-grained backbone.
    pub fn gear_2bit_kivi() -> Self {
        Self {
            sparsity_percent: 2.0,
            ..Self::gear_l_2bit_kivi()
        }
    }
}

/// One compressed span of token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBlock {
    backbone: QuantizedTensor,
    outliers: SparseOutliers,
    lowrank: LowRankFactors,
    role: Role,
    token_start: usize,
    token_end: usize,
}

impl CompressedBlock {
    pub fn backbone(&self) -> &QuantizedTensor {
        &self.backbone
    }

    pub fn outliers(&self) -> &SparseOutliers {
        &self.outliers
    }

    pub fn lowrank(&self) -> &LowRankFactors {
        &self.lowrank
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Token rows this block covers in the owning cache.
    pub fn token_range(&self) -> std::ops::Range<usize> {
        self.token_start..self.token_end
    }

    pub fn rows(&self) -> usize {
        self.backbone.rows()
    }

    pub fn cols(&self) -> usize {
        self.backbone.cols()
    }

    /// Rebase the covered token range (content untouched).
    pub fn with_token_range(mut self, start: usize, end: usize) -> Self {
        assert_eq!(end - start, self.rows(), "range length must match rows");
        self.token_start = start;
        self.token_end = end;
        self
    }

    pub(crate) fn from_parts(
        backbone: QuantizedTensor,
        outliers: SparseOutliers,
        lowrank: LowRankFactors,
        role: Role,
        token_start: usize,
        token_end: usize,
    ) -> Self {
        Self {
            backbone,
            outliers,
            lowrank,
            role,
            token_start,
            token_end,
        }
    }
}

/// Error metrics of a block against its source matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub frobenius_error: f64,
    /// `||X - X_hat||_F / ||X||_F`; zero for a zero source.
    pub relative_error: f64,
    pub max_abs_error: f64,
    /// Fraction of summed component energy held by the dequantized backbone.
    pub backbone_energy_share: f64,
    pub lowrank_energy_share: f64,
    pub outlier_energy_share: f64,
}

/// Compresses one block of token rows.
///
/// The low-rank term is fitted to the residual after dequantization. For
/// prefill blocks with coverage `p < 100` only the most recent
/// `ceil(p% * rows)` rows enter the solver; older rows get zero correction.
pub fn compress_block(
    x: &DenseMatrix,
    cfg: &GearConfig,
    layout: HeadLayout,
    role: Role,
    rank: usize,
    phase: Phase,
) -> Result<CompressedBlock, GearError> {
    cfg.validate()?;
    if cfg.is_passthrough() {
        return Err(GearError::PassthroughNotCompressible);
    }
    if x.rows() == 0 {
        return Err(GearError::EmptyBlock);
    }
    if x.cols() != layout.total_channels() {
        return Err(GearError::Tensor(TensorError::HeadLayoutMismatch {
            head_count: layout.head_count(),
            head_dim: layout.head_dim(),
            cols: x.cols(),
        }));
    }

    let axis = role.outlier_axis();
    let (outliers, remainder) = if cfg.sparsity_percent > 0.0 {
        outlier::filter_outliers(x, cfg.sparsity_percent, axis)?
    } else {
        (
            SparseOutliers::empty(x.rows(), x.cols(), axis),
            x.clone(),
        )
    };

    let backbone = quant::quantize(&remainder, cfg.bit_width, cfg.scheme_for(role))?;

    let covered = match phase {
        Phase::Prefill => coverage_rows(cfg.coverage_percent, x.rows()),
        Phase::Decode => x.rows(),
    };
    let lowrank = if rank == 0 || covered == 0 {
        LowRankFactors::empty(layout, x.rows())
    } else {
        let dequant = quant::dequantize(&backbone)?;
        let mut residual = x.sub(&dequant)?;
        for e in outliers.entries() {
            let r = e.row as usize;
            let c = e.col as usize;
            residual.set(r, c, residual.get(r, c) - e.value);
        }
        let offset = x.rows() - covered;
        let tail = residual.slice_rows(offset, x.rows());
        lowrank::solve_heads(&tail, layout, rank, cfg.power_iterations, cfg.seed)?
            .placed_at(offset, x.rows())
    };

    Ok(CompressedBlock::from_parts(
        backbone,
        outliers,
        lowrank,
        role,
        0,
        x.rows(),
    ))
}

/// Most recent rows covered at coverage percentage `p`: `ceil(p% * rows)`.
pub fn coverage_rows(coverage_percent: f64, rows: usize) -> usize {
    ((coverage_percent * rows as f64) / 100.0).ceil() as usize
}

/// Materializes `dequant(backbone) + lowrank + outliers`.
pub fn reconstruct_block(block: &CompressedBlock) -> Result<DenseMatrix, GearError> {
    let dequant = quant::dequantize(&block.backbone)?;
    check_component_shapes(block)?;
    let mut out = if block.lowrank.is_empty() {
        dequant
    } else {
        dequant.add(&block.lowrank.reconstruct())?
    };
    for e in block.outliers.entries() {
        let r = e.row as usize;
        let c = e.col as usize;
        out.set(r, c, out.get(r, c) + e.value);
    }
    Ok(out)
}

fn check_component_shapes(block: &CompressedBlock) -> Result<(), GearError> {
    let rows = block.backbone.rows();
    let cols = block.backbone.cols();
    if block.outliers.rows() != rows || block.outliers.cols() != cols {
        return Err(GearError::ComponentMismatch(format!(
            "outliers are {}x{}, backbone is {rows}x{cols}",
            block.outliers.rows(),
            block.outliers.cols()
        )));
    }
    if !block.lowrank.is_empty() {
        if block.lowrank.total_rows() != rows
            || block.lowrank.layout().total_channels() != cols
        {
            return Err(GearError::ComponentMismatch(format!(
                "low-rank term covers {}x{}, backbone is {rows}x{cols}",
                block.lowrank.total_rows(),
                block.lowrank.layout().total_channels()
            )));
        }
    }
    Ok(())
}

/// Compares a source matrix against a block's reconstruction.
pub fn error_report(x: &DenseMatrix, block: &CompressedBlock) -> Result<ErrorReport, GearError> {
    let reconstructed = reconstruct_block(block)?;
    let frob = frobenius_error(x, &reconstructed)?;
    let x_norm = x.frobenius_norm();
    let relative = if x_norm == 0.0 { 0.0 } else { frob / x_norm };
    let max_abs = x
        .values()
        .iter()
        .zip(reconstructed.values())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0f64, f64::max);

    let backbone_energy = quant::dequantize(&block.backbone)?.frobenius_norm().powi(2);
    let lowrank_energy = if block.lowrank.is_empty() {
        0.0
    } else {
        block.lowrank.reconstruct().frobenius_norm().powi(2)
    };
    let outlier_energy: f64 = block
        .outliers
        .entries()
        .iter()
        .map(|e| (e.value as f64).powi(2))
        .sum();
    let total_energy = backbone_energy + lowrank_energy + outlier_energy;
    let share = |e: f64| if total_energy == 0.0 { 0.0 } else { e / total_energy };

    Ok(ErrorReport {
        frobenius_error: frob,
        relative_error: relative,
        max_abs_error: max_abs,
        backbone_energy_share: share(backbone_energy),
        lowrank_energy_share: share(lowrank_energy),
        outlier_energy_share: share(outlier_energy),
    })
}
