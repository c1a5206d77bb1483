//! Planning and simulation of heterogeneous GPU+NPU LLM inference on mobile SoCs.
//!
//! The pipeline mirrors an offline profiler → solver → engine flow:
//!
//! * [`hwmodel`] holds analytic cost models for the GPU, the systolic-array NPU,
//!   shared DRAM bandwidth, synchronization and NPU graph generation.
//! * [`profiler`] builds (or imports) operator latency tables and estimates
//!   latency at sequence lengths that were not profiled.
//! * [`modelspec`] expands a decoder-only model description into operators.
//! * [`planner`] enumerates tensor-partitioning candidates per operator and
//!   picks the cheapest one, or applies one of the baseline policies.
//! * [`simengine`] replays a plan as a deterministic discrete-event timeline.

pub mod error;
pub mod hwmodel;
pub mod modelspec;
pub mod planner;
pub mod profiler;
pub mod simengine;

pub use error::{Error, Result};
pub use hwmodel::{Device, HardwareConfig, MatmulSpec, TensorShape};
pub use modelspec::{LayerOp, ModelSpec, OpKind, Phase, WeightPrecision};
pub use planner::{ExecutionPlan, Mode, PartitionStrategy, SolverConfig};
pub use profiler::ProfileTable;
pub use simengine::{SimResult, SyncMode};
