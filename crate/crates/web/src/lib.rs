//! Browser bindings for the interactive demo in `www/`.
//!
//! The plain functions hold the logic and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors into JS exceptions.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use hetsched::hwmodel::npu_matmul_latency;
use hetsched::profiler::{build_profile, DEFAULT_STANDARD_LENGTHS};
use hetsched::simengine::Scenario;
use hetsched::{HardwareConfig, MatmulSpec, Mode, ModelSpec, Phase, ProfileTable, SolverConfig};

#[derive(Debug, Serialize)]
pub struct StagePoint {
    pub m: u64,
    pub latency_us: f64,
}

/// NPU latency of `[M, n] x [n, k]` for `M = 1..=max_m`.
pub fn stage_sweep(n: u64, k: u64, max_m: u64) -> Result<Vec<StagePoint>, String> {
    let npu = HardwareConfig::default().npu;
    (1..=max_m)
        .map(|m| {
            let spec = MatmulSpec::fp16(m, n, k).map_err(|e| e.to_string())?;
            let latency_us = npu_matmul_latency(&spec, &npu).map_err(|e| e.to_string())?;
            Ok(StagePoint { m, latency_us })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct OrderPoint {
    pub k: u64,
    /// `[K, hidden] x [hidden, ffn]`
    pub activation_streamed_us: f64,
    /// `[ffn, hidden] x [hidden, K]`
    pub weight_streamed_us: f64,
    pub ratio: f64,
}

/// Both operand orders of the FFN projection for each `k`.
pub fn order_sweep(hidden: u64, ffn: u64, ks: &[u64]) -> Result<Vec<OrderPoint>, String> {
    let npu = HardwareConfig::default().npu;
    let lat = |m, n, k| -> Result<f64, String> {
        let spec = MatmulSpec::fp16(m, n, k).map_err(|e| e.to_string())?;
        npu_matmul_latency(&spec, &npu).map_err(|e| e.to_string())
    };
    ks.iter()
        .map(|&k| {
            let a = lat(k, hidden, ffn)?;
            let w = lat(ffn, hidden, k)?;
            Ok(OrderPoint { k, activation_streamed_us: a, weight_streamed_us: w, ratio: a / w })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct PrefillPoint {
    pub seq_len: u64,
    pub padding_ms: f64,
    pub hetero_tensor_ms: f64,
    pub gpu_only_ms: f64,
}

fn default_inputs() -> (HardwareConfig, ModelSpec, Result<ProfileTable, String>) {
    let hw = HardwareConfig::default();
    let model = ModelSpec::llama8b();
    let table = build_profile(&hw, &model.profile_shapes(), &DEFAULT_STANDARD_LENGTHS, model.weight_precision)
        .map_err(|e| e.to_string());
    (hw, model, table)
}

/// Simulated prefill latency of three modes for `from..=to` in `step`s.
pub fn prefill_curve(from: u64, to: u64, step: u64, sync_us_scale: f64) -> Result<Vec<PrefillPoint>, String> {
    if from == 0 || step == 0 || from > to {
        return Err(format!("bad range {from}..={to} step {step}"));
    }
    let (mut hw, model, table) = default_inputs();
    let table = table?;
    hw.sync.poll_slice *= sync_us_scale;
    hw.sync.submit_cost *= sync_us_scale;
    hw.sync.naive_sync *= sync_us_scale;
    let mut out = Vec::new();
    for seq_len in (from..=to).step_by(step as usize) {
        let sc = Scenario {
            model: &model,
            hw: &hw,
            table: &table,
            phase: Phase::Prefill,
            seq_len,
            n_decode_tokens: 1,
            solver: SolverConfig::default(),
        };
        let ms = |m: Mode| sc.run(m).map(|r| r.prefill_latency / 1e3).map_err(|e| e.to_string());
        out.push(PrefillPoint {
            seq_len,
            padding_ms: ms(Mode::PaddingBaseline)?,
            hetero_tensor_ms: ms(Mode::HeteroTensor)?,
            gpu_only_ms: ms(Mode::GpuOnly)?,
        });
    }
    Ok(out)
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

/// JSON array of `{m, latency_us}`.
#[wasm_bindgen(js_name = stageSweep)]
pub fn stage_sweep_js(n: u32, k: u32, max_m: u32) -> Result<String, JsValue> {
    to_js(stage_sweep(n.into(), k.into(), max_m.into()))
}

/// JSON array of `{k, activation_streamed_us, weight_streamed_us, ratio}`.
#[wasm_bindgen(js_name = orderSweep)]
pub fn order_sweep_js(hidden: u32, ffn: u32, ks: Vec<u32>) -> Result<String, JsValue> {
    let ks: Vec<u64> = ks.into_iter().map(u64::from).collect();
    to_js(order_sweep(hidden.into(), ffn.into(), &ks))
}

/// JSON array of `{seq_len, padding_ms, hetero_tensor_ms, gpu_only_ms}`.
#[wasm_bindgen(js_name = prefillCurve)]
pub fn prefill_curve_js(from: u32, to: u32, step: u32, sync_us_scale: f64) -> Result<String, JsValue> {
    to_js(prefill_curve(from.into(), to.into(), step.into(), sync_us_scale))
}
