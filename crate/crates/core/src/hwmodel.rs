//! Analytic cost models for the GPU, the systolic-array NPU, shared DRAM
//! bandwidth, CPU-side synchronization and NPU graph generation.
//!
//! All latencies are in microseconds and carried as `f64` without rounding.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schema tag carried by serialized hardware configurations.
pub const HARDWARE_SCHEMA: &str = "hetsched.hardware/v1";

const US_PER_S: f64 = 1e6;

/// Processing units of the SoC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Device {
    #[serde(rename = "CPU")]
    Cpu,
    #[serde(rename = "GPU")]
    Gpu,
    #[serde(rename = "NPU")]
    Npu,
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Device::Cpu => "CPU",
            Device::Gpu => "GPU",
            Device::Npu => "NPU",
        })
    }
}

impl FromStr for Device {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CPU" => Ok(Device::Cpu),
            "GPU" => Ok(Device::Gpu),
            "NPU" => Ok(Device::Npu),
            other => Err(Error::InvalidInput(format!("unknown device {other:?}"))),
        }
    }
}

/// A 2-D tensor shape in elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub rows: u64,
    pub cols: u64,
}

impl TensorShape {
    pub fn new(rows: u64, cols: u64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(format!("[{rows}, {cols}] has a zero dimension")));
        }
        Ok(Self { rows, cols })
    }

    pub fn element_count(&self) -> Result<u64> {
        self.rows
            .checked_mul(self.cols)
            .ok_or_else(|| Error::Overflow(self.to_string()))
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.rows, self.cols)
    }
}

/// `[M, N] x [N, K]` with per-operand element widths in bytes.
///
/// On the NPU the second operand is the stationary one (held in the array)
/// and the first operand is streamed through it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatmulSpec {
    pub a: TensorShape,
    pub b: TensorShape,
    pub bytes_a: f64,
    pub bytes_b: f64,
    pub bytes_out: f64,
}

impl MatmulSpec {
    pub fn new(a: TensorShape, b: TensorShape, bytes_a: f64, bytes_b: f64, bytes_out: f64) -> Result<Self> {
        if a.cols != b.rows {
            return Err(Error::InvalidShape(format!("inner dimensions differ: {a} x {b}")));
        }
        for w in [bytes_a, bytes_b, bytes_out] {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidShape(format!("element width {w} must be positive")));
            }
        }
        Ok(Self { a, b, bytes_a, bytes_b, bytes_out })
    }

    /// fp16 operands and output.
    pub fn fp16(m: u64, n: u64, k: u64) -> Result<Self> {
        Self::new(TensorShape::new(m, n)?, TensorShape::new(n, k)?, 2.0, 2.0, 2.0)
    }

    pub fn m(&self) -> u64 {
        self.a.rows
    }

    pub fn n(&self) -> u64 {
        self.a.cols
    }

    pub fn k(&self) -> u64 {
        self.b.cols
    }

    pub fn output_shape(&self) -> TensorShape {
        TensorShape { rows: self.m(), cols: self.k() }
    }

    /// `2·M·N·K`, exact as long as it fits in a `u64`.
    pub fn flops(&self) -> Result<u64> {
        self.m()
            .checked_mul(self.n())
            .and_then(|x| x.checked_mul(self.k()))
            .and_then(|x| x.checked_mul(2))
            .ok_or_else(|| Error::Overflow(format!("{} x {}", self.a, self.b)))
    }

    /// Element counts of (A, B, output).
    pub fn element_counts(&self) -> Result<(u64, u64, u64)> {
        Ok((self.a.element_count()?, self.b.element_count()?, self.output_shape().element_count()?))
    }

    pub fn total_bytes(&self) -> Result<f64> {
        let (ea, eb, eo) = self.element_counts()?;
        Ok(ea as f64 * self.bytes_a + eb as f64 * self.bytes_b + eo as f64 * self.bytes_out)
    }

    /// The transpose-equivalent product `[K, N] x [N, M]`.
    pub fn exchanged(&self) -> Self {
        Self {
            a: TensorShape { rows: self.k(), cols: self.n() },
            b: TensorShape { rows: self.n(), cols: self.m() },
            bytes_a: self.bytes_b,
            bytes_b: self.bytes_a,
            bytes_out: self.bytes_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuParams {
    #[serde(rename = "peak_flops_per_s")]
    pub peak_flops_effective: f64,
    #[serde(rename = "mem_bandwidth_bytes_per_s")]
    pub mem_bandwidth: f64,
    #[serde(rename = "fixed_kernel_overhead_us")]
    pub fixed_kernel_overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpuParams {
    pub array_dim: u64,
    pub array_count: u64,
    #[serde(rename = "peak_flops_per_s")]
    pub peak_flops_effective: f64,
    /// Rate at which the stationary operand is (re)loaded into the arrays.
    #[serde(rename = "weight_stream_bandwidth_bytes_per_s")]
    pub weight_stream_bandwidth: f64,
    /// Rate at which the streamed operand is fed through the arrays.
    #[serde(rename = "input_stream_bandwidth_bytes_per_s")]
    pub input_stream_bandwidth: f64,
    pub input_buffer_rows: u64,
    #[serde(rename = "fixed_kernel_overhead_us")]
    pub fixed_kernel_overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryParams {
    #[serde(rename = "soc_bandwidth_cap_bytes_per_s")]
    pub soc_bandwidth_cap: f64,
    #[serde(rename = "per_device_cap_bytes_per_s")]
    pub per_device_cap: BTreeMap<Device, f64>,
    #[serde(rename = "theoretical_bandwidth_bytes_per_s")]
    pub theoretical_bandwidth: f64,
}

impl MemoryParams {
    /// Cap for `device`; devices without an entry are limited only by the SoC cap.
    pub fn device_cap(&self, device: Device) -> f64 {
        self.per_device_cap.get(&device).copied().unwrap_or(self.soc_bandwidth_cap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncParams {
    #[serde(rename = "naive_sync_us")]
    pub naive_sync: f64,
    #[serde(rename = "sleep_quantum_us")]
    pub sleep_quantum: f64,
    #[serde(rename = "poll_slice_us")]
    pub poll_slice: f64,
    #[serde(rename = "submit_cost_us")]
    pub submit_cost: f64,
    #[serde(rename = "copy_cost_s_per_byte")]
    pub copy_cost_per_byte: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphGenParams {
    #[serde(rename = "base_us")]
    pub base: f64,
    #[serde(rename = "per_element_us")]
    pub per_element: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareConfig {
    pub schema: String,
    pub gpu: GpuParams,
    pub npu: NpuParams,
    pub memory: MemoryParams,
    pub sync: SyncParams,
    pub graph_gen: GraphGenParams,
    pub unified_memory: bool,
}

impl Default for HardwareConfig {
    /// Snapdragon 8 Gen 3 class calibration. The bandwidth, sync and peak
    /// compute values are measured characteristics; the NPU stream/reload
    /// rates, buffer depth, kernel overheads and graph-generation costs are fits.
    fn default() -> Self {
        let gbps = 1e9;
        Self {
            schema: HARDWARE_SCHEMA.to_string(),
            gpu: GpuParams {
                peak_flops_effective: 1e12,
                mem_bandwidth: 45.0 * gbps,
                fixed_kernel_overhead: 10.0,
            },
            npu: NpuParams {
                array_dim: 32,
                array_count: 8,
                peak_flops_effective: 1e13,
                weight_stream_bandwidth: 7.7 * gbps,
                input_stream_bandwidth: 45.0 * gbps,
                input_buffer_rows: 16384,
                fixed_kernel_overhead: 100.0,
            },
            memory: MemoryParams {
                soc_bandwidth_cap: 61.9 * gbps,
                per_device_cap: BTreeMap::from([(Device::Gpu, 45.0 * gbps), (Device::Npu, 45.0 * gbps)]),
                theoretical_bandwidth: 68.0 * gbps,
            },
            sync: SyncParams {
                naive_sync: 400.0,
                sleep_quantum: 100.0,
                poll_slice: 5.0,
                submit_cost: 30.0,
                copy_cost_per_byte: 1.0 / (10.0 * gbps),
            },
            graph_gen: GraphGenParams { base: 500.0, per_element: 4.5e-5 },
            unified_memory: true,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")))
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != HARDWARE_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "schema {:?} is not {HARDWARE_SCHEMA:?}",
                self.schema
            )));
        }
        positive("gpu.peak_flops_per_s", self.gpu.peak_flops_effective)?;
        positive("gpu.mem_bandwidth_bytes_per_s", self.gpu.mem_bandwidth)?;
        non_negative("gpu.fixed_kernel_overhead_us", self.gpu.fixed_kernel_overhead)?;

        if self.npu.array_dim == 0 || self.npu.array_count == 0 || self.npu.input_buffer_rows == 0 {
            return Err(Error::InvalidConfig("npu array_dim, array_count and input_buffer_rows must be >= 1".into()));
        }
        positive("npu.peak_flops_per_s", self.npu.peak_flops_effective)?;
        positive("npu.weight_stream_bandwidth_bytes_per_s", self.npu.weight_stream_bandwidth)?;
        positive("npu.input_stream_bandwidth_bytes_per_s", self.npu.input_stream_bandwidth)?;
        non_negative("npu.fixed_kernel_overhead_us", self.npu.fixed_kernel_overhead)?;

        let m = &self.memory;
        positive("memory.theoretical_bandwidth_bytes_per_s", m.theoretical_bandwidth)?;
        positive("memory.soc_bandwidth_cap_bytes_per_s", m.soc_bandwidth_cap)?;
        if m.soc_bandwidth_cap > m.theoretical_bandwidth {
            return Err(Error::InvalidConfig("soc bandwidth cap exceeds theoretical bandwidth".into()));
        }
        for (d, cap) in &m.per_device_cap {
            positive(&format!("memory.per_device_cap[{d}]"), *cap)?;
            if *cap > m.theoretical_bandwidth {
                return Err(Error::InvalidConfig(format!("{d} bandwidth cap exceeds theoretical bandwidth")));
            }
        }

        let s = &self.sync;
        non_negative("sync.poll_slice_us", s.poll_slice)?;
        non_negative("sync.submit_cost_us", s.submit_cost)?;
        non_negative("sync.copy_cost_s_per_byte", s.copy_cost_per_byte)?;
        if !(s.naive_sync > s.sleep_quantum && s.sleep_quantum > s.poll_slice) {
            return Err(Error::InvalidConfig("sync costs must satisfy naive > sleep_quantum > poll_slice".into()));
        }

        non_negative("graph_gen.base_us", self.graph_gen.base)?;
        non_negative("graph_gen.per_element_us", self.graph_gen.per_element)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hardware config is always serializable")
    }
}

fn pad_to(x: u64, multiple: u64) -> Result<u64> {
    x.div_ceil(multiple)
        .checked_mul(multiple)
        .ok_or_else(|| Error::Overflow(format!("padding {x} to {multiple}")))
}

/// Roofline GPU latency: `max(compute, memory) + fixed overhead`.
pub fn gpu_matmul_latency(spec: &MatmulSpec, gpu: &GpuParams) -> Result<f64> {
    let compute = spec.flops()? as f64 / gpu.peak_flops_effective * US_PER_S;
    let memory = spec.total_bytes()? / gpu.mem_bandwidth * US_PER_S;
    Ok(compute.max(memory) + gpu.fixed_kernel_overhead)
}

/// Weight-stationary systolic-array latency.
///
/// Every dimension is padded to the array edge. Streaming the first operand
/// overlaps with compute; reloading the stationary operand once per
/// `input_buffer_rows` streamed rows is serialized.
pub fn npu_matmul_latency(spec: &MatmulSpec, npu: &NpuParams) -> Result<f64> {
    let d = npu.array_dim;
    let m = pad_to(spec.m(), d)?;
    let n = pad_to(spec.n(), d)?;
    let k = pad_to(spec.k(), d)?;
    let padded_flops = m
        .checked_mul(n)
        .and_then(|x| x.checked_mul(k))
        .and_then(|x| x.checked_mul(2))
        .ok_or_else(|| Error::Overflow(format!("padded {m}x{n}x{k}")))?;
    let (m, n, k) = (m as f64, n as f64, k as f64);

    let compute = padded_flops as f64 / npu.peak_flops_effective * US_PER_S;
    let stream = m * n * spec.bytes_a / npu.input_stream_bandwidth * US_PER_S;
    let passes = (m / npu.input_buffer_rows as f64).ceil();
    let reload = passes * n * k * spec.bytes_b / npu.weight_stream_bandwidth * US_PER_S;
    Ok(compute.max(stream) + reload + npu.fixed_kernel_overhead)
}

/// Time to build a static NPU graph for one operator shape.
pub fn graph_generation_latency(spec: &MatmulSpec, g: &GraphGenParams) -> Result<f64> {
    let (ea, eb, eo) = spec.element_counts()?;
    let total = ea
        .checked_add(eb)
        .and_then(|x| x.checked_add(eo))
        .ok_or_else(|| Error::Overflow(format!("{} x {}", spec.a, spec.b)))?;
    Ok(g.base + g.per_element * total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyncKind {
    /// Blocking driver-level finish.
    Naive,
    /// Sleep for the predicted wait, then poll a completion flag.
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncOutcome {
    /// Delay between the kernel's true completion and the waiter observing it.
    pub overhead: f64,
    /// Idle time caused by waking after the kernel had already finished.
    pub wake_error: f64,
    /// Time spent asleep.
    pub slept: f64,
    /// CPU time spent polling, including the final slice.
    pub polling: f64,
}

/// Cost of waiting for a kernel whose remaining run time is `actual_wait`,
/// given the waiter's prediction `predicted_wait`.
///
/// The fast path sleeps whole quanta but stops one quantum short of the
/// prediction, since a sleep can overshoot by up to a quantum; it then polls.
/// With a prediction error below one quantum the waiter is always awake before
/// the kernel ends and pays only the final poll slice.
pub fn sync_cost(kind: SyncKind, predicted_wait: f64, actual_wait: f64, s: &SyncParams) -> SyncOutcome {
    let predicted = predicted_wait.max(0.0);
    let actual = actual_wait.max(0.0);
    match kind {
        SyncKind::Naive => SyncOutcome { overhead: s.naive_sync, wake_error: 0.0, slept: 0.0, polling: 0.0 },
        SyncKind::Fast => {
            let quanta = (predicted / s.sleep_quantum).floor() - 1.0;
            let slept = quanta.max(0.0) * s.sleep_quantum;
            let wake_error = (slept - actual).max(0.0);
            SyncOutcome {
                overhead: s.poll_slice + wake_error,
                wake_error,
                slept,
                polling: (actual - slept).max(0.0) + s.poll_slice,
            }
        }
    }
}

/// Splits the shared DRAM bandwidth among concurrently active devices.
///
/// Each demand is clipped to its device cap; if the clipped total exceeds the
/// SoC cap every allocation is scaled down by the same factor.
pub fn effective_bandwidth(demands: &BTreeMap<Device, f64>, m: &MemoryParams) -> BTreeMap<Device, f64> {
    let clipped: BTreeMap<Device, f64> = demands
        .iter()
        .map(|(&d, &demand)| (d, demand.max(0.0).min(m.device_cap(d))))
        .collect();
    let total: f64 = clipped.values().sum();
    if total > m.soc_bandwidth_cap {
        let scale = m.soc_bandwidth_cap / total;
        clipped.into_iter().map(|(d, v)| (d, v * scale)).collect()
    } else {
        clipped
    }
}

/// Cost of enqueueing one GPU kernel.
pub fn submit_cost(s: &SyncParams) -> f64 {
    s.submit_cost
}
