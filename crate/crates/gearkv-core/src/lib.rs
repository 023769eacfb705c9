//! KV-cache compression engine.
//!
//! Cached Key/Value matrices are decomposed into three complementary terms: a
//! bit-packed quantized backbone for the bulk entries, a sparse matrix of
//! per-vector extreme outliers, and a head-wise low-rank fit of the
//! remaining residual. A streaming cache compresses prompt tokens up front
//! and batches generated tokens through a full-precision buffer. A synthetic
//! attention simulator and a closed-form memory accountant measure what the
//! decomposition costs and saves.

pub mod attention;
pub mod cache;
pub mod gear;
pub mod lowrank;
pub mod memory;
pub mod outlier;
pub mod quant;
pub mod tensor;

pub use attention::{
    attention_step, attention_step_compressed, generate_synthetic_kv, run_deviation,
    AttentionError, CacheMode, DeviationCase, DeviationPoint, DeviationTrace, SyntheticKv,
    SyntheticKvSpec,
};
pub use cache::{CacheError, KvCache, SNAPSHOT_MAGIC};
pub use gear::{
    compress_block, error_report, reconstruct_block, CompressedBlock, ErrorReport, GearConfig,
    GearError, Phase, Role, PASSTHROUGH_BITS,
};
pub use lowrank::{
    orthonormalize, power_iteration_svd, solve_heads, HeadFactors, LowRankError, LowRankFactors,
};
pub use memory::{account, account_state, BufferModel, CacheDims, MemoryError, MemoryReport};
pub use outlier::{
    filter_outliers, outlier_pair_count, OutlierAxis, OutlierEntry, OutlierError, SparseOutliers,
};
pub use quant::{dequantize, quantize, GroupingScheme, QuantError, QuantizedTensor};
pub use tensor::{
    frobenius_error, hconcat, load_tensor, save_tensor, split_heads, DenseMatrix, HeadLayout,
    TensorError, TENSOR_MAGIC,
};
