//! Stream-K GEMM work decomposition.
//!
//! The MAC-iteration space of a tiled GEMM is split across a fixed grid of
//! workers ([`decompose`]), executed with a cross-worker partial-sum fixup
//! and checked against a reference GEMM ([`executor`]), and summarized with
//! throughput, intensity and padding analytics ([`metrics`], [`harness`]).

pub mod decompose;
pub mod error;
pub mod executor;
pub mod harness;
pub mod metrics;
pub mod model;

pub use decompose::{
    fragments_for_range, makespan_model, modeled_utilization, partition, partition_data_parallel,
    partition_split_k, partition_streamk, quantization_utilization, Decomposition,
    DecompositionKind, TileFragment, WorkerPlan,
};
pub use error::{Error, Result};
pub use executor::{
    execute, execute_padded_pair, execute_with_c, gemm_oracle, gemm_oracle_with_c,
    generate_matrices, verify, ErrorReport, ExecMode, ExecutionTrace, FixupWorkspace, MatrixBuffer,
    PaddedPair, ScalarKind, TraceEvent, TraceRecord,
};
pub use harness::{
    compare_padding, parse_config, run_experiment, run_experiment_full, sweep, ExperimentConfig,
    PaddingComparison, ReportRow, SweepAxis,
};
pub use metrics::{
    arithmetic_intensity, gbps, improvement_pct, padding_overhead, tflops, PerfRecord,
};
pub use model::{
    coords_to_tile_index, flops_and_bytes, padded_shape, tile_grid, tile_index_to_coords,
    MachineModel, ProblemShape, TileConfig, TileGrid,
};
