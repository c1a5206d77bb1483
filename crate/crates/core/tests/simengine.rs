use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;

use hetsched::hwmodel::SyncKind;
use hetsched::modelspec::{Affinity, OpKind};
use hetsched::planner::{CandidateEvaluation, OpPlan};
use hetsched::profiler::{build_profile, DEFAULT_STANDARD_LENGTHS};
use hetsched::simengine::{
    export_timeline, parse_timeline, replay, simulate, sync_ablation, EventKind, Scenario, SimResult,
};
use hetsched::*;

struct Fixture {
    hw: HardwareConfig,
    model: ModelSpec,
    table: ProfileTable,
}

fn fixture() -> Fixture {
    let hw = HardwareConfig::default();
    let model = ModelSpec::llama8b();
    let table = build_profile(&hw, &model.profile_shapes(), &DEFAULT_STANDARD_LENGTHS, model.weight_precision).unwrap();
    Fixture { hw, model, table }
}

impl Fixture {
    fn scenario(&self, phase: Phase, seq_len: u64) -> Scenario<'_> {
        Scenario {
            model: &self.model,
            hw: &self.hw,
            table: &self.table,
            phase,
            seq_len,
            n_decode_tokens: 4,
            solver: SolverConfig::default(),
        }
    }
}

fn single_op_plan(strategy: PartitionStrategy, t_gpu: f64, t_npu: f64, t_sync: f64) -> ExecutionPlan {
    let t_total = if strategy.uses_npu() { t_gpu.max(t_npu) + t_sync } else { t_gpu };
    let op = LayerOp {
        layer: 0,
        index: 0,
        kind: OpKind::OProj,
        weight_shape: Some(TensorShape::new(4096, 4096).unwrap()),
        activation_len: 256,
        partitionable: true,
        affinity: Affinity::Either,
        io_bytes: 0.0,
        order_exchanged: false,
    };
    let chosen = CandidateEvaluation { strategy, t_gpu, t_npu, t_sync, t_copy: 0.0, t_total };
    ExecutionPlan {
        phase: Phase::Prefill,
        seq_len: 256,
        mode: Mode::HeteroTensor,
        sync_kind: SyncKind::Fast,
        layers: vec![vec![OpPlan { op, chosen, alternatives: vec![] }]],
    }
}

fn run_single(plan: &ExecutionPlan, hw: &HardwareConfig) -> SimResult {
    replay(plan, WeightPrecision::W4A16, hw, 1, SyncKind::Fast).unwrap()
}

#[test]
fn single_gpu_op_costs_kernel_plus_submit() {
    let hw = HardwareConfig::default();
    let r = run_single(&single_op_plan(PartitionStrategy::NoPartitionGpu, 511.0, 0.0, 0.0), &hw);
    assert_eq!(r.prefill_latency, 541.0);
    let kinds: Vec<EventKind> = r.timeline.iter().map(|e| e.kind).collect();
    assert_eq!(kinds, [EventKind::Submit, EventKind::KernelStart, EventKind::KernelEnd]);
    assert_eq!(r.sync_overhead_total, 0.0);
}

#[test]
fn empty_timeline_exports_nothing() {
    let hw = HardwareConfig::default();
    let mut r = run_single(&single_op_plan(PartitionStrategy::NoPartitionGpu, 511.0, 0.0, 0.0), &hw);
    r.timeline.clear();
    assert_eq!(export_timeline(&r), "");
}

proptest! {
    // A lone partitioned op ends where the solver equation says, plus the
    // GPU submission that precedes it.
    #[test]
    fn single_op_matches_solver_equation(t_gpu in 1.0f64..50_000.0, t_npu in 1.0f64..50_000.0, npu_rows in 1u64..16) {
        let hw = HardwareConfig::default();
        let t_sync = hw.sync.poll_slice + hw.sync.submit_cost;
        let wc = PartitionStrategy::WeightCentric { gpu_rows: 4096 - npu_rows * 256, npu_rows: npu_rows * 256 };
        for s in [wc, PartitionStrategy::NoPartitionNpu] {
            let plan = single_op_plan(s.clone(), if s.uses_gpu() { t_gpu } else { 0.0 }, t_npu, t_sync);
            let r = run_single(&plan, &hw);
            let lead = if s.uses_gpu() { hw.sync.submit_cost } else { 0.0 };
            let want = plan.layers[0][0].chosen.t_total + lead;
            prop_assert!((r.prefill_latency - want).abs() <= 1e-9, "{s}: {} vs {want}", r.prefill_latency);
        }
    }
}

fn kernel_intervals(r: &SimResult) -> BTreeMap<Device, Vec<(f64, f64)>> {
    let mut open: HashMap<(Device, &str), f64> = HashMap::new();
    let mut out: BTreeMap<Device, Vec<(f64, f64)>> = BTreeMap::new();
    for e in &r.timeline {
        match e.kind {
            EventKind::KernelStart => {
                open.insert((e.device, &e.op_id), e.timestamp);
            }
            EventKind::KernelEnd => {
                let start = open.remove(&(e.device, e.op_id.as_str())).expect("start before end");
                out.entry(e.device).or_default().push((start, e.timestamp));
            }
            _ => {}
        }
    }
    assert!(open.is_empty(), "unterminated kernels");
    out
}

fn all_runs(fx: &Fixture) -> Vec<SimResult> {
    let mut out = Vec::new();
    for (phase, len) in [(Phase::Decoding, 1), (Phase::Prefill, 256), (Phase::Prefill, 300), (Phase::Prefill, 135)] {
        for mode in Mode::ALL {
            out.push(fx.scenario(phase, len).run(mode).unwrap());
        }
    }
    out
}

#[test]
fn timeline_invariants_hold_for_every_mode() {
    let fx = fixture();
    for r in all_runs(&fx) {
        let label = format!("{:?} {} {}", r.phase, r.mode, r.seq_len);
        assert!(r.timeline.windows(2).all(|w| w[0].timestamp <= w[1].timestamp), "{label}: unsorted");
        assert!(r.timeline.iter().all(|e| e.timestamp >= 0.0), "{label}: negative time");

        for (device, mut spans) in kernel_intervals(&r) {
            spans.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in spans.windows(2) {
                assert!(w[0].1 <= w[1].0 + 1e-9, "{label}: {device:?} kernels overlap {w:?}");
            }
        }

        let mut kernel_end: HashMap<&str, f64> = HashMap::new();
        for e in r.timeline.iter().filter(|e| e.kind == EventKind::KernelEnd) {
            let v = kernel_end.entry(&e.op_id).or_insert(f64::NEG_INFINITY);
            *v = v.max(e.timestamp);
        }
        for m in r.timeline.iter().filter(|e| e.kind == EventKind::Merge) {
            assert!(m.timestamp >= kernel_end[m.op_id.as_str()], "{label}: merge before kernel end");
        }

        let latency = match r.phase {
            Phase::Prefill => r.prefill_latency,
            Phase::Decoding => r.decode_latency_per_token * r.n_decode_tokens as f64,
        };
        for (d, busy) in &r.busy_time {
            assert!(*busy <= latency + 1e-6, "{label}: {d:?} busy {busy} > {latency}");
        }
        assert!(r.peak_bandwidth <= fx.hw.memory.soc_bandwidth_cap * (1.0 + 1e-9), "{label}: bandwidth over cap");
        if r.phase == Phase::Decoding {
            assert_eq!(r.tokens_per_second, 1e6 / r.decode_latency_per_token);
        }
    }
}

#[test]
fn simulation_is_deterministic() {
    let fx = fixture();
    assert_eq!(all_runs(&fx), all_runs(&fx));
}

#[test]
fn timeline_round_trips() {
    let fx = fixture();
    let r = fx.scenario(Phase::Prefill, 300).run(Mode::HeteroTensor).unwrap();
    let text = export_timeline(&r);
    assert_eq!(text.lines().count(), r.timeline.len());
    assert_eq!(parse_timeline(&text).unwrap(), r.timeline);
}

#[test]
fn gpu_only_has_nothing_to_ablate() {
    let fx = fixture();
    for (phase, len) in [(Phase::Decoding, 1), (Phase::Prefill, 256)] {
        let a = sync_ablation(&fx.scenario(phase, len), Mode::GpuOnly).unwrap();
        assert_eq!(a.speedup, 1.0);
        assert_eq!(a.fast.busy_time[&Device::Npu], 0.0);
    }
}

#[test]
fn online_prepare_pays_graph_generation() {
    let fx = fixture();
    let sc = fx.scenario(Phase::Prefill, 135);
    let online = sc.run(Mode::OnlinePrepare).unwrap();
    let ms = online.graph_gen_total / 1e3;
    assert!((350.0..=470.0).contains(&ms), "graph generation {ms} ms");
    assert!(online.prefill_latency > sc.run(Mode::HeteroTensor).unwrap().prefill_latency);
    assert_eq!(sc.run(Mode::HeteroTensor).unwrap().graph_gen_total, 0.0);
}

#[test]
fn plan_for_another_model_is_rejected() {
    let fx = fixture();
    let plan = fx.scenario(Phase::Prefill, 256).plan(Mode::HeteroTensor).unwrap();
    let mut short = fx.model.clone();
    short.n_layers = 2;
    assert!(matches!(simulate(&plan, &short, &fx.hw, 1), Err(Error::PlanMismatch(_))));

    let mut other_len = plan.clone();
    other_len.seq_len = 128;
    assert!(matches!(simulate(&other_len, &fx.model, &fx.hw, 1), Err(Error::PlanMismatch(_))));
}

#[test]
fn decoding_needs_a_token() {
    let fx = fixture();
    let plan = fx.scenario(Phase::Decoding, 1).plan(Mode::GpuOnly).unwrap();
    assert!(simulate(&plan, &fx.model, &fx.hw, 0).is_err());
}
