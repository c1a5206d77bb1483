//! Discrete-event replay of an [`ExecutionPlan`] on the hardware model.
//!
//! Operators run as a dependent chain. GPU kernels go through an in-order
//! queue fed by the CPU; NPU launches and all completion detection are done by
//! the CPU thread. Any operator that touches the NPU ends with a merge, after
//! which its output is visible to both devices.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwmodel::{
    effective_bandwidth, graph_generation_latency, submit_cost, sync_cost, Device, HardwareConfig, MemoryParams,
    SyncKind,
};
use crate::modelspec::{matmul_for, ops_for_layer, ModelSpec, Phase, WeightPrecision};
use crate::planner::{solve_model, ExecutionPlan, Mode, OpPlan, PartitionStrategy, SolverConfig};
use crate::profiler::ProfileTable;

/// Graphs kept per operator in online-prepare mode.
pub const GRAPH_CACHE_CAPACITY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Submit,
    KernelStart,
    KernelEnd,
    SyncSleep,
    SyncPoll,
    GraphGen,
    Merge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub timestamp: f64,
    pub device: Device,
    pub kind: EventKind,
    pub op_id: String,
}

/// Which synchronization implementation the simulated runtime uses.
pub type SyncMode = SyncKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub phase: Phase,
    pub mode: Mode,
    pub sync_mode: SyncMode,
    pub seq_len: u64,
    pub n_decode_tokens: u64,
    pub prefill_latency: f64,
    pub decode_latency_per_token: f64,
    /// Decoding: `1e6 / decode_latency_per_token`. Prefill: prompt tokens
    /// processed per second.
    pub tokens_per_second: f64,
    pub busy_time: BTreeMap<Device, f64>,
    /// Weight bytes read per second of decoding; zero for prefill.
    pub achieved_bandwidth: f64,
    pub sync_overhead_total: f64,
    pub graph_gen_total: f64,
    /// Largest summed bandwidth allocation seen at any instant.
    pub peak_bandwidth: f64,
    pub timeline: Vec<SimEvent>,
}

impl SimResult {
    /// End-to-end latency of the simulated run.
    pub fn latency(&self) -> f64 {
        match self.phase {
            Phase::Prefill => self.prefill_latency,
            Phase::Decoding => self.decode_latency_per_token,
        }
    }

    /// Everything except the timeline, as one JSON object.
    pub fn summary_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("result serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timeline");
            obj.insert("timeline_events".into(), self.timeline.len().into());
        }
        serde_json::to_string_pretty(&v).expect("value serializes")
    }
}

/// One memory-bound kernel for [`fluid_schedule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidKernel {
    pub device: Device,
    pub start: f64,
    pub bytes: f64,
    /// Duration with unlimited bandwidth.
    pub floor: f64,
}

/// End times of concurrently running memory-bound kernels, and the peak
/// summed allocation.
///
/// Each kernel asks for `bytes / floor` and gets its share from
/// [`effective_bandwidth`]; allocations are constant between starts and
/// completions. A kernel never finishes before `start + floor`.
pub fn fluid_schedule(kernels: &[FluidKernel], mem: &MemoryParams) -> (Vec<f64>, f64) {
    let n = kernels.len();
    let mut end = vec![f64::NAN; n];
    let mut left: Vec<f64> = kernels.iter().map(|k| k.bytes.max(0.0)).collect();
    let mut peak = 0.0f64;
    for (i, k) in kernels.iter().enumerate() {
        if left[i] == 0.0 || k.floor <= 0.0 {
            end[i] = k.start + k.floor.max(0.0);
        }
    }
    let mut t = kernels.iter().map(|k| k.start).fold(f64::INFINITY, f64::min);
    while end.iter().any(|e| e.is_nan()) {
        let active: Vec<usize> = (0..n).filter(|&i| end[i].is_nan() && kernels[i].start <= t).collect();
        let next_start = (0..n)
            .filter(|&i| end[i].is_nan() && kernels[i].start > t)
            .map(|i| kernels[i].start)
            .fold(f64::INFINITY, f64::min);
        if active.is_empty() {
            t = next_start;
            continue;
        }
        // Kernels on one device share its allocation. Rates are bytes per µs.
        let mut demand: BTreeMap<Device, f64> = BTreeMap::new();
        for &i in &active {
            *demand.entry(kernels[i].device).or_default() += kernels[i].bytes / (kernels[i].floor * 1e-6);
        }
        let alloc = effective_bandwidth(&demand, mem);
        peak = peak.max(alloc.values().sum::<f64>());
        let rate = |i: usize| {
            let d = kernels[i].device;
            alloc[&d] * (kernels[i].bytes / (kernels[i].floor * 1e-6)) / demand[&d] * 1e-6
        };
        let finishes: Vec<f64> = active.iter().map(|&i| t + left[i] / rate(i)).collect();
        let step_to = finishes.iter().copied().fold(next_start, f64::min);
        for (&i, &f) in active.iter().zip(&finishes) {
            if f <= step_to {
                left[i] = 0.0;
                end[i] = step_to.max(kernels[i].start + kernels[i].floor);
            } else {
                left[i] -= rate(i) * (step_to - t);
            }
        }
        t = step_to;
    }
    (end, peak)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum WaitRole {
    Input,
    Merge,
}

/// Where the previous operator's output lives.
#[derive(Debug, Clone, Copy)]
enum Producer {
    Start,
    Gpu { start: f64, end: f64, planned: f64 },
    Merged { at: f64 },
}

struct Engine<'a> {
    hw: &'a HardwareConfig,
    phase: Phase,
    sync: SyncKind,
    online: bool,
    cpu: f64,
    gpu_free: f64,
    npu_free: f64,
    producer: Producer,
    submit_prepaid: bool,
    predictions: HashMap<(usize, WaitRole), f64>,
    graph_cache: HashMap<(u64, usize), Vec<u64>>,
    events: Vec<SimEvent>,
    busy: BTreeMap<Device, f64>,
    sync_total: f64,
    graph_total: f64,
    weight_bytes: f64,
    peak_bw: f64,
}

impl<'a> Engine<'a> {
    fn new(hw: &'a HardwareConfig, phase: Phase, sync: SyncKind, online: bool) -> Self {
        let busy = [Device::Cpu, Device::Gpu, Device::Npu].into_iter().map(|d| (d, 0.0)).collect();
        Self {
            hw,
            phase,
            sync,
            online,
            cpu: 0.0,
            gpu_free: 0.0,
            npu_free: 0.0,
            producer: Producer::Start,
            submit_prepaid: false,
            predictions: HashMap::new(),
            graph_cache: HashMap::new(),
            events: Vec::new(),
            busy,
            sync_total: 0.0,
            graph_total: 0.0,
            weight_bytes: 0.0,
            peak_bw: 0.0,
        }
    }

    fn event(&mut self, timestamp: f64, device: Device, kind: EventKind, op_id: &str) {
        self.events.push(SimEvent { timestamp, device, kind, op_id: op_id.to_string() });
    }

    fn busy_add(&mut self, d: Device, dt: f64) {
        *self.busy.get_mut(&d).unwrap() += dt;
    }

    /// Enqueues a GPU kernel and returns the earliest time it may start.
    fn submit_gpu(&mut self, id: &str) -> f64 {
        self.event(self.cpu, Device::Cpu, EventKind::Submit, id);
        if self.submit_prepaid {
            self.submit_prepaid = false;
        } else {
            let s = submit_cost(&self.hw.sync);
            self.busy_add(Device::Cpu, s);
            self.cpu += s;
        }
        self.cpu
    }

    /// CPU waits for an event at `done` that it expected `predicted` after
    /// `from`; returns the time the CPU observes it.
    fn wait(&mut self, key: (usize, WaitRole), from: f64, done: f64, fallback: f64, id: &str) -> f64 {
        let actual = (done - from).max(0.0);
        let predicted = self.predictions.get(&key).copied().unwrap_or(fallback);
        let out = sync_cost(self.sync, predicted, actual, &self.hw.sync);
        self.predictions.insert(key, actual);
        if out.slept > 0.0 {
            self.event(from, Device::Cpu, EventKind::SyncSleep, id);
        }
        let seen = from.max(done) + out.overhead;
        self.event(seen - self.hw.sync.poll_slice.min(seen - from), Device::Cpu, EventKind::SyncPoll, id);
        self.busy_add(Device::Cpu, out.polling.min(seen - from));
        self.sync_total += out.overhead;
        seen
    }

    fn run_op(&mut self, plan: &OpPlan, precision: WeightPrecision, id: &str) -> Result<()> {
        let op = &plan.op;
        let c = &plan.chosen;
        let strategy = &c.strategy;
        let decoding = self.phase == Phase::Decoding && op.weight_shape.is_some();
        let (gpu_bytes, npu_bytes) = match (op.weight_shape, strategy) {
            (Some(w), s) => {
                let total = precision.weight_bytes(w.element_count()?) as f64;
                let share = match *s {
                    PartitionStrategy::NoPartitionGpu => 1.0,
                    PartitionStrategy::WeightCentric { gpu_rows, .. } => gpu_rows as f64 / w.rows as f64,
                    PartitionStrategy::Hybrid { weight_gpu_rows, .. } => weight_gpu_rows as f64 / w.rows as f64,
                    // The dynamic GPU slice reads the full weight.
                    PartitionStrategy::ActivationCentric { gpu_dynamic_len, .. } => (gpu_dynamic_len > 0) as u8 as f64,
                    _ => 0.0,
                };
                let npu_share = if strategy.uses_npu() {
                    match *s {
                        PartitionStrategy::WeightCentric { npu_rows, .. } => npu_rows as f64 / w.rows as f64,
                        PartitionStrategy::Hybrid { weight_npu_rows, .. } => weight_npu_rows as f64 / w.rows as f64,
                        _ => 1.0,
                    }
                } else {
                    0.0
                };
                if self.phase == Phase::Decoding {
                    self.weight_bytes += total;
                }
                (total * share, total * npu_share)
            }
            (None, _) => (0.0, 0.0),
        };

        if !strategy.uses_npu() {
            let ready = match self.producer {
                Producer::Merged { at } => at,
                _ => 0.0,
            };
            let submitted = self.submit_gpu(id);
            let start = submitted.max(self.gpu_free).max(ready);
            let end = if decoding {
                let k = FluidKernel { device: Device::Gpu, start, bytes: gpu_bytes, floor: c.t_gpu };
                let (e, peak) = fluid_schedule(&[k], &self.hw.memory);
                self.peak_bw = self.peak_bw.max(peak);
                e[0]
            } else {
                start + c.t_gpu
            };
            self.event(start, Device::Gpu, EventKind::KernelStart, id);
            self.event(end, Device::Gpu, EventKind::KernelEnd, id);
            self.busy_add(Device::Gpu, end - start);
            self.gpu_free = end;
            self.producer = Producer::Gpu { start, end, planned: c.t_gpu };
            return Ok(());
        }

        // GPU part first, so its submission overlaps the NPU launch path.
        let gpu_start = if strategy.uses_gpu() {
            let submitted = self.submit_gpu(id);
            let ready = match self.producer {
                Producer::Merged { at } => at,
                _ => 0.0,
            };
            Some(submitted.max(self.gpu_free).max(ready))
        } else {
            None
        };

        let mut launch = match self.producer {
            Producer::Start => self.cpu,
            Producer::Merged { at } => self.cpu.max(at),
            Producer::Gpu { start, end, planned } => {
                let from = self.cpu;
                let fallback = (start + planned - from).max(0.0);
                self.wait((op.index, WaitRole::Input), from, end, fallback, id)
            }
        };

        if self.online {
            if let Some(w) = op.weight_shape {
                let key = (op.layer, op.index);
                let len = op.activation_len;
                let cache = self.graph_cache.entry(key).or_default();
                if let Some(pos) = cache.iter().position(|&l| l == len) {
                    let l = cache.remove(pos);
                    cache.push(l);
                } else {
                    if cache.len() == GRAPH_CACHE_CAPACITY {
                        cache.remove(0);
                    }
                    cache.push(len);
                    let gen = graph_generation_latency(&matmul_for(w, len, precision)?, &self.hw.graph_gen)?;
                    self.event(launch, Device::Cpu, EventKind::GraphGen, id);
                    self.busy_add(Device::Cpu, gen);
                    self.graph_total += gen;
                    launch += gen;
                }
            }
        }
        self.cpu = launch;
        let npu_start = launch.max(self.npu_free);

        let mut kernels = Vec::with_capacity(2);
        if let Some(s) = gpu_start {
            kernels.push(FluidKernel { device: Device::Gpu, start: s, bytes: gpu_bytes, floor: c.t_gpu });
        }
        kernels.push(FluidKernel { device: Device::Npu, start: npu_start, bytes: npu_bytes, floor: c.t_npu });
        let ends = if decoding {
            let (e, peak) = fluid_schedule(&kernels, &self.hw.memory);
            self.peak_bw = self.peak_bw.max(peak);
            e
        } else {
            kernels.iter().map(|k| k.start + k.floor).collect()
        };
        for (k, &e) in kernels.iter().zip(&ends) {
            self.event(k.start, k.device, EventKind::KernelStart, id);
            self.event(e, k.device, EventKind::KernelEnd, id);
            self.busy_add(k.device, e - k.start);
        }
        let npu_end = *ends.last().unwrap();
        self.npu_free = npu_end;
        if gpu_start.is_some() {
            self.gpu_free = ends[0];
        }
        let done = ends.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let from = self.cpu;
        let fallback = (c.t_gpu.max(c.t_npu) + kernels[0].start - from).max(0.0);
        let seen = self.wait((op.index, WaitRole::Merge), from, done, fallback, id);
        let merge = match self.phase {
            Phase::Prefill => {
                let s = submit_cost(&self.hw.sync);
                self.busy_add(Device::Cpu, s);
                seen + s
            }
            Phase::Decoding => seen,
        };
        self.event(merge, Device::Cpu, EventKind::Merge, id);
        self.cpu = merge;
        self.submit_prepaid = true;
        self.producer = Producer::Merged { at: merge };
        Ok(())
    }

    fn end_time(&self) -> f64 {
        let last = match self.producer {
            Producer::Start => 0.0,
            Producer::Gpu { end, .. } => end,
            Producer::Merged { at } => at,
        };
        last.max(self.gpu_free).max(self.npu_free)
    }
}

fn check_plan(plan: &ExecutionPlan, model: &ModelSpec) -> Result<()> {
    model.validate()?;
    if plan.layers.len() as u64 != model.n_layers {
        return Err(Error::PlanMismatch(format!(
            "plan has {} layers, model {} has {}",
            plan.layers.len(),
            model.name,
            model.n_layers
        )));
    }
    for (l, ops) in plan.layers.iter().enumerate() {
        let expected = ops_for_layer(model, l as u64, plan.phase, plan.seq_len)?;
        if ops.len() != expected.len() {
            return Err(Error::PlanMismatch(format!("layer {l}: {} ops, expected {}", ops.len(), expected.len())));
        }
        for (p, e) in ops.iter().zip(&expected) {
            if p.op.kind != e.kind || p.op.weight_shape != e.weight_shape || p.op.activation_len != e.activation_len {
                return Err(Error::PlanMismatch(format!("layer {l} op {}: {:?} does not match model", e.index, p.op.kind)));
            }
        }
    }
    Ok(())
}

/// Replays `plan` under `sync`. Prefill plans run once; decoding plans run
/// `n_decode_tokens` consecutive tokens.
pub fn simulate_with(
    plan: &ExecutionPlan,
    model: &ModelSpec,
    hw: &HardwareConfig,
    n_decode_tokens: u64,
    sync: SyncMode,
) -> Result<SimResult> {
    check_plan(plan, model)?;
    replay(plan, model.weight_precision, hw, n_decode_tokens, sync)
}

/// Replays `plan` without checking it against a model. Useful for
/// hand-built plans of a few operators.
pub fn replay(
    plan: &ExecutionPlan,
    precision: WeightPrecision,
    hw: &HardwareConfig,
    n_decode_tokens: u64,
    sync: SyncMode,
) -> Result<SimResult> {
    let tokens = match plan.phase {
        Phase::Prefill => 1,
        Phase::Decoding if n_decode_tokens == 0 => {
            return Err(Error::InvalidInput("decoding needs at least one token".into()))
        }
        Phase::Decoding => n_decode_tokens,
    };
    let mut eng = Engine::new(hw, plan.phase, sync, plan.mode == Mode::OnlinePrepare);
    for t in 0..tokens {
        for op in plan.ops() {
            let id = match plan.phase {
                Phase::Prefill => format!("L{}.{}.{:?}", op.op.layer, op.op.index, op.op.kind),
                Phase::Decoding => format!("T{t}.L{}.{}.{:?}", op.op.layer, op.op.index, op.op.kind),
            };
            eng.run_op(op, precision, &id)?;
        }
    }
    let total = eng.end_time();
    let mut timeline = std::mem::take(&mut eng.events);
    timeline.sort_by(|a, b| {
        a.timestamp.total_cmp(&b.timestamp).then(a.device.cmp(&b.device)).then_with(|| a.op_id.cmp(&b.op_id))
    });
    let (prefill_latency, decode, tps, bw) = match plan.phase {
        Phase::Prefill => (total, 0.0, plan.seq_len as f64 * 1e6 / total, 0.0),
        Phase::Decoding => {
            let per = total / tokens as f64;
            (0.0, per, 1e6 / per, eng.weight_bytes / (total * 1e-6))
        }
    };
    Ok(SimResult {
        phase: plan.phase,
        mode: plan.mode,
        sync_mode: sync,
        seq_len: plan.seq_len,
        n_decode_tokens: if plan.phase == Phase::Decoding { tokens } else { 0 },
        prefill_latency,
        decode_latency_per_token: decode,
        tokens_per_second: tps,
        busy_time: eng.busy,
        achieved_bandwidth: bw,
        sync_overhead_total: eng.sync_total,
        graph_gen_total: eng.graph_total,
        peak_bandwidth: eng.peak_bw,
        timeline,
    })
}

/// Replays `plan` with the synchronization kind it was solved for.
pub fn simulate(plan: &ExecutionPlan, model: &ModelSpec, hw: &HardwareConfig, n_decode_tokens: u64) -> Result<SimResult> {
    simulate_with(plan, model, hw, n_decode_tokens, plan.sync_kind)
}

/// Shared inputs for mode comparisons.
#[derive(Debug, Clone)]
pub struct Scenario<'a> {
    pub model: &'a ModelSpec,
    pub hw: &'a HardwareConfig,
    pub table: &'a ProfileTable,
    pub phase: Phase,
    pub seq_len: u64,
    pub n_decode_tokens: u64,
    pub solver: SolverConfig,
}

impl Scenario<'_> {
    pub fn plan(&self, mode: Mode) -> Result<ExecutionPlan> {
        solve_model(self.model, self.phase, self.seq_len, self.table, self.hw, mode, &self.solver)
    }

    pub fn run(&self, mode: Mode) -> Result<SimResult> {
        simulate(&self.plan(mode)?, self.model, self.hw, self.n_decode_tokens)
    }
}

/// One simulation per mode, in the given order.
pub fn compare_modes(scenario: &Scenario<'_>, modes: &[Mode]) -> Result<Vec<SimResult>> {
    if modes.is_empty() {
        return Err(Error::InvalidInput("no modes to compare".into()));
    }
    modes.iter().map(|&m| scenario.run(m)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncAblation {
    pub fast: SimResult,
    pub naive: SimResult,
    /// Naive latency over fast latency.
    pub speedup: f64,
}

/// The same plan under fast and naive synchronization.
pub fn sync_ablation(scenario: &Scenario<'_>, mode: Mode) -> Result<SyncAblation> {
    let mut cfg = scenario.solver.clone();
    cfg.sync_kind = SyncKind::Fast;
    let plan = solve_model(scenario.model, scenario.phase, scenario.seq_len, scenario.table, scenario.hw, mode, &cfg)?;
    let fast = simulate_with(&plan, scenario.model, scenario.hw, scenario.n_decode_tokens, SyncKind::Fast)?;
    let naive = simulate_with(&plan, scenario.model, scenario.hw, scenario.n_decode_tokens, SyncKind::Naive)?;
    let speedup = naive.latency() / fast.latency();
    Ok(SyncAblation { fast, naive, speedup })
}

/// Newline-delimited JSON, one event per line, in timestamp order.
pub fn export_timeline(result: &SimResult) -> String {
    let mut out = String::new();
    for e in &result.timeline {
        let _ = writeln!(out, "{}", serde_json::to_string(e).expect("event serializes"));
    }
    out
}

pub fn parse_timeline(text: &str) -> Result<Vec<SimEvent>> {
    text.lines().filter(|l| !l.is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
