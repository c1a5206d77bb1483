//! Per-operator partition solver and whole-model execution plans.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwmodel::{npu_matmul_latency, Device, GpuParams, HardwareConfig, MatmulSpec, NpuParams, SyncKind};
use crate::modelspec::{matmul_for, ops_for_layer, LayerOp, ModelSpec, Phase, ACTIVATION_BYTES};
use crate::profiler::ProfileTable;

/// `[M, N] x [N, K]` becomes `[K, N] x [N, M]`, whose transpose is the
/// original product.
pub fn order_exchange(spec: &MatmulSpec) -> MatmulSpec {
    spec.exchanged()
}

/// NPU latency of the faster operand order. Ties keep the original order.
pub fn npu_best_latency(spec: &MatmulSpec, npu: &NpuParams) -> Result<f64> {
    let natural = npu_matmul_latency(spec, npu)?;
    let swapped = npu_matmul_latency(&order_exchange(spec), npu)?;
    Ok(if swapped < natural { swapped } else { natural })
}

/// Greedy largest-first split of `seq_len` into standard lengths plus a
/// remainder smaller than the smallest standard length.
pub fn standard_decomposition(seq_len: u64, standard_lengths: &BTreeSet<u64>) -> (Vec<u64>, u64) {
    let mut segments = Vec::new();
    let mut left = seq_len;
    while left > 0 {
        let Some(&s) = standard_lengths.range(1..=left).next_back() else { break };
        segments.push(s);
        left -= s;
    }
    (segments, left)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy")]
pub enum PartitionStrategy {
    NoPartitionGpu,
    NoPartitionNpu,
    Padding { padded_len: u64 },
    WeightCentric { gpu_rows: u64, npu_rows: u64 },
    ActivationCentric { npu_segments: Vec<u64>, gpu_dynamic_len: u64 },
    Hybrid { npu_segments: Vec<u64>, padded_remainder: u64, weight_gpu_rows: u64, weight_npu_rows: u64 },
}

impl PartitionStrategy {
    /// Tie-break rank: lower wins at equal cost.
    pub fn rank(&self) -> u8 {
        match self {
            PartitionStrategy::NoPartitionNpu => 0,
            PartitionStrategy::NoPartitionGpu => 1,
            PartitionStrategy::WeightCentric { .. } => 2,
            PartitionStrategy::ActivationCentric { .. } => 3,
            PartitionStrategy::Hybrid { .. } => 4,
            PartitionStrategy::Padding { .. } => 5,
        }
    }

    pub fn class_name(&self) -> &'static str {
        match self {
            PartitionStrategy::NoPartitionGpu => "NoPartitionGpu",
            PartitionStrategy::NoPartitionNpu => "NoPartitionNpu",
            PartitionStrategy::Padding { .. } => "Padding",
            PartitionStrategy::WeightCentric { .. } => "WeightCentric",
            PartitionStrategy::ActivationCentric { .. } => "ActivationCentric",
            PartitionStrategy::Hybrid { .. } => "Hybrid",
        }
    }

    pub fn uses_npu(&self) -> bool {
        !matches!(self, PartitionStrategy::NoPartitionGpu)
    }

    pub fn uses_gpu(&self) -> bool {
        match self {
            PartitionStrategy::NoPartitionNpu | PartitionStrategy::Padding { .. } => false,
            PartitionStrategy::WeightCentric { gpu_rows, .. } => *gpu_rows > 0,
            PartitionStrategy::ActivationCentric { gpu_dynamic_len, .. } => *gpu_dynamic_len > 0,
            PartitionStrategy::Hybrid { weight_gpu_rows, .. } => *weight_gpu_rows > 0,
            PartitionStrategy::NoPartitionGpu => true,
        }
    }

    /// GPU share of the weight rows, for weight splits.
    pub fn gpu_fraction(&self) -> Option<f64> {
        match *self {
            PartitionStrategy::WeightCentric { gpu_rows, npu_rows } => {
                Some(gpu_rows as f64 / (gpu_rows + npu_rows) as f64)
            }
            PartitionStrategy::Hybrid { weight_gpu_rows, weight_npu_rows, .. } => {
                Some(weight_gpu_rows as f64 / (weight_gpu_rows + weight_npu_rows) as f64)
            }
            _ => None,
        }
    }

    /// NPU activation lengths this strategy launches, one kernel each.
    pub fn npu_lengths(&self, seq_len: u64) -> Vec<u64> {
        match self {
            PartitionStrategy::NoPartitionGpu => vec![],
            PartitionStrategy::NoPartitionNpu | PartitionStrategy::WeightCentric { .. } => vec![seq_len],
            PartitionStrategy::Padding { padded_len } => vec![*padded_len],
            PartitionStrategy::ActivationCentric { npu_segments, .. } => npu_segments.clone(),
            PartitionStrategy::Hybrid { npu_segments, padded_remainder, .. } => {
                let mut v = npu_segments.clone();
                if *padded_remainder > 0 {
                    v.push(*padded_remainder);
                }
                v
            }
        }
    }
}

fn join(lens: &[u64]) -> String {
    lens.iter().map(u64::to_string).collect::<Vec<_>>().join("+")
}

impl fmt::Display for PartitionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionStrategy::NoPartitionGpu => write!(f, "GPU-only"),
            PartitionStrategy::NoPartitionNpu => write!(f, "NPU-only"),
            PartitionStrategy::Padding { padded_len } => write!(f, "Padding to {padded_len}"),
            PartitionStrategy::WeightCentric { gpu_rows, npu_rows } => {
                write!(f, "Weight-centric {gpu_rows}:{npu_rows} rows")
            }
            PartitionStrategy::ActivationCentric { npu_segments, gpu_dynamic_len } => {
                write!(f, "Activation-centric NPU {} + GPU {gpu_dynamic_len}", join(npu_segments))
            }
            PartitionStrategy::Hybrid { npu_segments, padded_remainder, weight_gpu_rows, weight_npu_rows } => {
                let mut lens = npu_segments.clone();
                lens.push(*padded_remainder);
                write!(f, "Hybrid NPU {} weight {weight_gpu_rows}:{weight_npu_rows} rows", join(&lens))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvaluation {
    pub strategy: PartitionStrategy,
    pub t_gpu: f64,
    pub t_npu: f64,
    pub t_sync: f64,
    pub t_copy: f64,
    pub t_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpPlan {
    pub op: LayerOp,
    pub chosen: CandidateEvaluation,
    pub alternatives: Vec<CandidateEvaluation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    GpuOnly,
    NpuOnly,
    HeteroLayer,
    HeteroTensor,
    OnlinePrepare,
    PaddingBaseline,
    NpuPipe,
    ChunkedPrefill,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::GpuOnly,
        Mode::NpuOnly,
        Mode::HeteroLayer,
        Mode::HeteroTensor,
        Mode::OnlinePrepare,
        Mode::PaddingBaseline,
        Mode::NpuPipe,
        Mode::ChunkedPrefill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::GpuOnly => "gpu-only",
            Mode::NpuOnly => "npu-only",
            Mode::HeteroLayer => "hetero-layer",
            Mode::HeteroTensor => "hetero-tensor",
            Mode::OnlinePrepare => "online-prepare",
            Mode::PaddingBaseline => "padding",
            Mode::NpuPipe => "npu-pipe",
            Mode::ChunkedPrefill => "chunked-prefill",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_lowercase();
        Mode::ALL
            .into_iter()
            .find(|m| {
                let a: String = m.name().chars().filter(|c| *c != '-').collect();
                let b = format!("{m:?}").to_lowercase();
                norm == a || norm == b
            })
            .ok_or_else(|| Error::InvalidInput(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub phase: Phase,
    pub seq_len: u64,
    pub mode: Mode,
    pub sync_kind: SyncKind,
    pub layers: Vec<Vec<OpPlan>>,
}

impl ExecutionPlan {
    pub fn ops(&self) -> impl Iterator<Item = &OpPlan> {
        self.layers.iter().flatten()
    }

    /// Sum of per-operator predicted totals; ignores cross-operator overlap.
    pub fn predicted_total_us(&self) -> f64 {
        self.ops().map(|p| p.chosen.t_total).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Weight rows are split in steps of `rows / grid_divisions`.
    pub grid_divisions: u64,
    /// Each side of a weight split keeps at least this share of the rows.
    pub min_split_fraction: f64,
    pub chunk_len: u64,
    pub sync_kind: SyncKind,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { grid_divisions: 16, min_split_fraction: 0.25, chunk_len: 256, sync_kind: SyncKind::Fast }
    }
}

/// Costs that do not come from the profile table.
#[derive(Debug, Clone, PartialEq)]
pub struct CostContext {
    /// Synchronization budget charged once per NPU-involving operator.
    pub sync_us: f64,
    pub copy_cost_s_per_byte: f64,
    pub unified_memory: bool,
    pub gpu: GpuParams,
}

impl CostContext {
    pub fn new(hw: &HardwareConfig, phase: Phase, kind: SyncKind) -> Self {
        Self {
            sync_us: phase_sync_budget(hw, phase, kind),
            copy_cost_s_per_byte: hw.sync.copy_cost_per_byte,
            unified_memory: hw.unified_memory,
            gpu: hw.gpu.clone(),
        }
    }
}

/// Prefill pays CPU submission on top of completion detection; decoding
/// overlaps submission with the running kernel.
pub fn phase_sync_budget(hw: &HardwareConfig, phase: Phase, kind: SyncKind) -> f64 {
    let detect = match kind {
        SyncKind::Fast => hw.sync.poll_slice,
        SyncKind::Naive => hw.sync.naive_sync,
    };
    match phase {
        Phase::Prefill => detect + hw.sync.submit_cost,
        Phase::Decoding => detect,
    }
}

/// Row step for weight splits: `rows / divisions` rounded up to a multiple
/// of the minimum NPU sub-tensor.
pub fn grid_step(rows: u64, min_sub: u64, divisions: u64) -> u64 {
    let min_sub = min_sub.max(1);
    let raw = rows.div_ceil(divisions.max(1));
    raw.div_ceil(min_sub).max(1) * min_sub
}

/// Interior weight splits as `(gpu_rows, npu_rows)`, NPU share ascending.
pub fn weight_splits(rows: u64, min_sub: u64, cfg: &SolverConfig) -> Vec<(u64, u64)> {
    let step = grid_step(rows, min_sub, cfg.grid_divisions);
    let mut out = Vec::new();
    let mut npu = step;
    while npu < rows {
        let frac = npu as f64 / rows as f64;
        if frac >= cfg.min_split_fraction - 1e-12 && 1.0 - frac >= cfg.min_split_fraction - 1e-12 {
            out.push((rows - npu, npu));
        }
        npu += step;
    }
    out
}

fn prefill_lengths(table: &ProfileTable, seq_len: u64) -> BTreeSet<u64> {
    let mut set = table.standard_lengths().clone();
    if seq_len > 1 {
        set.remove(&1);
    }
    set
}

/// Feasible strategies for a Matmul at `op.activation_len`.
pub fn enumerate_candidates(op: &LayerOp, table: &ProfileTable, cfg: &SolverConfig) -> Vec<PartitionStrategy> {
    let mut out = vec![PartitionStrategy::NoPartitionGpu];
    let Some(shape) = op.weight_shape.filter(|_| op.partitionable) else {
        return out;
    };
    let s = op.activation_len;
    let splits = weight_splits(shape.rows, table.npu_min_subtensor(), cfg);
    if table.is_standard(s) {
        out.push(PartitionStrategy::NoPartitionNpu);
        out.extend(splits.iter().map(|&(g, n)| PartitionStrategy::WeightCentric { gpu_rows: g, npu_rows: n }));
        return out;
    }
    let lengths = prefill_lengths(table, s);
    if let Some(p) = lengths.range(s..).next() {
        out.push(PartitionStrategy::Padding { padded_len: *p });
    }
    let (segments, rem) = standard_decomposition(s, &lengths);
    if rem > 0 && !segments.is_empty() {
        out.push(PartitionStrategy::ActivationCentric { npu_segments: segments.clone(), gpu_dynamic_len: rem });
    }
    if rem > 0 {
        if let Some(&padded) = lengths.range(rem..).next() {
            out.extend(splits.iter().map(|&(g, n)| PartitionStrategy::Hybrid {
                npu_segments: segments.clone(),
                padded_remainder: padded,
                weight_gpu_rows: g,
                weight_npu_rows: n,
            }));
        }
    }
    out
}

/// Prices `strategy` for `op` with the solver equation.
pub fn evaluate_candidate(
    strategy: &PartitionStrategy,
    op: &LayerOp,
    table: &ProfileTable,
    ctx: &CostContext,
) -> Result<CandidateEvaluation> {
    let s = op.activation_len;
    let Some(shape) = op.weight_shape else {
        let t = op.elementwise_latency(&ctx.gpu);
        return Ok(CandidateEvaluation {
            strategy: PartitionStrategy::NoPartitionGpu,
            t_gpu: t,
            t_npu: 0.0,
            t_sync: 0.0,
            t_copy: 0.0,
            t_total: t,
        });
    };
    let rows = shape.rows as f64;
    let gpu = |len: u64| table.estimate_latency(Device::Gpu, shape, len);
    let npu = |len: u64| table.estimate_latency(Device::Npu, shape, len);
    let npu_sum = |lens: &[u64]| -> Result<f64> { lens.iter().map(|&l| npu(l)).sum() };

    // (t_gpu, t_npu, npu tokens, npu output rows)
    let (t_gpu, t_npu, npu_tokens, npu_rows) = match strategy {
        PartitionStrategy::NoPartitionGpu => (gpu(s)?, 0.0, 0, 0),
        PartitionStrategy::NoPartitionNpu => (0.0, npu(s)?, s, shape.rows),
        PartitionStrategy::Padding { padded_len } => (0.0, npu(*padded_len)?, s, shape.rows),
        PartitionStrategy::WeightCentric { gpu_rows, npu_rows } => (
            gpu(s)? * *gpu_rows as f64 / rows,
            npu(s)? * *npu_rows as f64 / rows,
            s,
            *npu_rows,
        ),
        PartitionStrategy::ActivationCentric { npu_segments, gpu_dynamic_len } => {
            let t_gpu = if *gpu_dynamic_len > 0 { gpu(*gpu_dynamic_len)? } else { 0.0 };
            (t_gpu, npu_sum(npu_segments)?, s - gpu_dynamic_len, shape.rows)
        }
        PartitionStrategy::Hybrid { npu_segments, padded_remainder, weight_gpu_rows, weight_npu_rows } => {
            let mut lens = npu_segments.clone();
            lens.push(*padded_remainder);
            (
                gpu(s)? * *weight_gpu_rows as f64 / rows,
                npu_sum(&lens)? * *weight_npu_rows as f64 / rows,
                s,
                *weight_npu_rows,
            )
        }
    };
    let (t_sync, t_copy) = if strategy.uses_npu() {
        let copy = if ctx.unified_memory {
            0.0
        } else {
            let bytes = npu_tokens as f64 * (shape.cols + npu_rows) as f64 * ACTIVATION_BYTES;
            bytes * ctx.copy_cost_s_per_byte * 1e6
        };
        (ctx.sync_us, copy)
    } else {
        (0.0, 0.0)
    };
    let t_total = if strategy.uses_npu() { t_gpu.max(t_npu) + t_sync + t_copy } else { t_gpu };
    Ok(CandidateEvaluation { strategy: strategy.clone(), t_gpu, t_npu, t_sync, t_copy, t_total })
}

fn better(a: &CandidateEvaluation, b: &CandidateEvaluation) -> bool {
    a.t_total < b.t_total || (a.t_total == b.t_total && a.strategy.rank() < b.strategy.rank())
}

/// Picks the cheapest of `candidates`, skipping those without profile data.
pub fn choose(op: &LayerOp, candidates: &[PartitionStrategy], table: &ProfileTable, ctx: &CostContext) -> Result<OpPlan> {
    let mut evaluated = Vec::with_capacity(candidates.len());
    let mut last_err = None;
    for c in candidates {
        match evaluate_candidate(c, op, table, ctx) {
            Ok(e) => evaluated.push(e),
            Err(e @ (Error::MissingProfile(_) | Error::RequiresDecomposition { .. })) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    let mut best: Option<usize> = None;
    for (i, e) in evaluated.iter().enumerate() {
        if best.is_none_or(|b| better(e, &evaluated[b])) {
            best = Some(i);
        }
    }
    let Some(best) = best else {
        return Err(last_err.unwrap_or_else(|| Error::MissingProfile(format!("{:?}", op.kind))));
    };
    let chosen = evaluated.remove(best);
    Ok(OpPlan { op: op.clone(), chosen, alternatives: evaluated })
}

/// Cheapest strategy for one operator.
pub fn solve_op(op: &LayerOp, table: &ProfileTable, ctx: &CostContext, cfg: &SolverConfig) -> Result<OpPlan> {
    choose(op, &enumerate_candidates(op, table, cfg), table, ctx)
}

fn npu_only_strategy(op: &LayerOp, table: &ProfileTable) -> Result<PartitionStrategy> {
    let s = op.activation_len;
    if table.is_standard(s) {
        return Ok(PartitionStrategy::NoPartitionNpu);
    }
    let lengths = prefill_lengths(table, s);
    if let Some(&p) = lengths.range(s..).next() {
        return Ok(PartitionStrategy::Padding { padded_len: p });
    }
    pipe_strategy(op, table)
}

/// Standard segments plus the padded remainder, all on the NPU.
fn pipe_strategy(op: &LayerOp, table: &ProfileTable) -> Result<PartitionStrategy> {
    let s = op.activation_len;
    if table.is_standard(s) {
        return Ok(PartitionStrategy::NoPartitionNpu);
    }
    let lengths = prefill_lengths(table, s);
    let (segments, rem) = standard_decomposition(s, &lengths);
    let padded = if rem > 0 {
        *lengths
            .range(rem..)
            .next()
            .ok_or_else(|| Error::MissingProfile(format!("no standard length >= {rem}")))?
    } else {
        0
    };
    let rows = op.weight_shape.map(|w| w.rows).unwrap_or(0);
    Ok(PartitionStrategy::Hybrid { npu_segments: segments, padded_remainder: padded, weight_gpu_rows: 0, weight_npu_rows: rows })
}

fn chunk_strategy(op: &LayerOp, table: &ProfileTable, chunk: u64) -> Result<PartitionStrategy> {
    let s = op.activation_len;
    if chunk == 0 || !table.is_standard(chunk) {
        return Err(Error::InvalidConfig(format!("chunk length {chunk} is not a standard length")));
    }
    if s <= chunk && table.is_standard(s) {
        return Ok(PartitionStrategy::NoPartitionNpu);
    }
    let full = s / chunk;
    let rem = s % chunk;
    let rows = op.weight_shape.map(|w| w.rows).unwrap_or(0);
    Ok(PartitionStrategy::Hybrid {
        npu_segments: vec![chunk; full as usize],
        padded_remainder: if rem > 0 { chunk } else { 0 },
        weight_gpu_rows: 0,
        weight_npu_rows: rows,
    })
}

/// NPU-only plan at the exact sequence length, priced from the cost model
/// because no pre-generated graph exists for it.
fn online_plan(op: &LayerOp, model: &ModelSpec, hw: &HardwareConfig, ctx: &CostContext) -> Result<OpPlan> {
    let shape = op.weight_shape.expect("matmul");
    let m = matmul_for(shape, op.activation_len, model.weight_precision)?;
    let t_npu = npu_best_latency(&m, &hw.npu)?;
    let t_copy = if ctx.unified_memory {
        0.0
    } else {
        op.activation_len as f64 * (shape.cols + shape.rows) as f64 * ACTIVATION_BYTES * ctx.copy_cost_s_per_byte * 1e6
    };
    let chosen = CandidateEvaluation {
        strategy: PartitionStrategy::NoPartitionNpu,
        t_gpu: 0.0,
        t_npu,
        t_sync: ctx.sync_us,
        t_copy,
        t_total: t_npu + ctx.sync_us + t_copy,
    };
    Ok(OpPlan { op: op.clone(), chosen, alternatives: vec![] })
}

/// Plans every operator of every layer under `mode`.
pub fn solve_model(
    model: &ModelSpec,
    phase: Phase,
    seq_len: u64,
    table: &ProfileTable,
    hw: &HardwareConfig,
    mode: Mode,
    cfg: &SolverConfig,
) -> Result<ExecutionPlan> {
    model.validate()?;
    let ctx = CostContext::new(hw, phase, cfg.sync_kind);
    let mut layers = Vec::with_capacity(model.n_layers as usize);
    // The padding baseline pads the whole prompt, so GPU operators run at
    // the padded length too.
    let padded_len = match mode {
        Mode::PaddingBaseline if phase == Phase::Prefill && !table.is_standard(seq_len) => {
            prefill_lengths(table, seq_len).range(seq_len..).next().copied()
        }
        _ => None,
    };
    for layer in 0..model.n_layers {
        let ops = ops_for_layer(model, layer, phase, seq_len)?;
        let padded_ops = padded_len.map(|p| ops_for_layer(model, layer, phase, p)).transpose()?;
        let mut plans = Vec::with_capacity(ops.len());
        for (i, op) in ops.iter().enumerate() {
            if !op.partitionable {
                let mut plan = match &padded_ops {
                    Some(p) => choose(&p[i], &[PartitionStrategy::NoPartitionGpu], table, &ctx)?,
                    None => choose(op, &[PartitionStrategy::NoPartitionGpu], table, &ctx)?,
                };
                plan.op = op.clone();
                plans.push(plan);
                continue;
            }
            let plan = match mode {
                Mode::HeteroTensor => solve_op(op, table, &ctx, cfg)?,
                Mode::GpuOnly => choose(op, &[PartitionStrategy::NoPartitionGpu], table, &ctx)?,
                Mode::NpuOnly | Mode::PaddingBaseline => choose(op, &[npu_only_strategy(op, table)?], table, &ctx)?,
                Mode::HeteroLayer => {
                    let cands: Vec<_> = enumerate_candidates(op, table, cfg)
                        .into_iter()
                        .filter(|c| {
                            matches!(
                                c,
                                PartitionStrategy::NoPartitionGpu
                                    | PartitionStrategy::NoPartitionNpu
                                    | PartitionStrategy::Padding { .. }
                            )
                        })
                        .collect();
                    choose(op, &cands, table, &ctx)?
                }
                Mode::NpuPipe => choose(op, &[pipe_strategy(op, table)?], table, &ctx)?,
                Mode::ChunkedPrefill => choose(op, &[chunk_strategy(op, table, cfg.chunk_len)?], table, &ctx)?,
                Mode::OnlinePrepare => online_plan(op, model, hw, &ctx)?,
            };
            plans.push(plan);
        }
        layers.push(plans);
    }
    Ok(ExecutionPlan { phase, seq_len, mode, sync_kind: cfg.sync_kind, layers })
}
