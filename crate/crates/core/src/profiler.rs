//! Operator latency tables over the constrained shape space, and latency
//! estimation at sequence lengths that were not profiled.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwmodel::{gpu_matmul_latency, Device, HardwareConfig, TensorShape};
use crate::modelspec::{matmul_for, WeightPrecision};
use crate::planner::npu_best_latency;

pub const CSV_HEADER: &str = "device,weight_rows,weight_cols,activation_len,latency_us,bandwidth_bytes_per_s,source";

/// Default NPU graph lengths; 1 is added for decoding.
pub const DEFAULT_STANDARD_LENGTHS: [u64; 6] = [32, 64, 128, 256, 512, 1024];

pub const DEFAULT_NPU_MIN_SUBTENSOR: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProfileKey {
    pub device: Device,
    pub weight_shape: TensorShape,
    pub activation_len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Synthetic,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub key: ProfileKey,
    pub latency_us: f64,
    pub bandwidth_observed: Option<f64>,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProfileTable {
    entries: BTreeMap<ProfileKey, ProfileEntry>,
    standard_lengths: BTreeSet<u64>,
    npu_min_subtensor: u64,
}

impl ProfileTable {
    /// Builds a table from entries. Standard lengths are the activation
    /// lengths that carry NPU entries.
    pub fn from_entries(entries: impl IntoIterator<Item = ProfileEntry>, npu_min_subtensor: u64) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in entries {
            if e.key.activation_len == 0 {
                return Err(Error::InvalidInput(format!("activation_len must be >= 1 in {:?}", e.key)));
            }
            if !(e.latency_us.is_finite() && e.latency_us > 0.0) {
                return Err(Error::InvalidInput(format!("latency must be > 0 in {:?}", e.key)));
            }
            if e.key.device == Device::Cpu {
                return Err(Error::InvalidInput("CPU entries are not profiled".into()));
            }
            let key = e.key;
            if map.insert(key, e).is_some() {
                return Err(Error::DuplicateKey(format_key(&key)));
            }
        }
        let standard_lengths = map
            .keys()
            .filter(|k| k.device == Device::Npu)
            .map(|k| k.activation_len)
            .collect();
        Ok(Self { entries: map, standard_lengths, npu_min_subtensor })
    }

    pub fn entries(&self) -> impl Iterator<Item = &ProfileEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &ProfileKey) -> Option<&ProfileEntry> {
        self.entries.get(key)
    }

    pub fn standard_lengths(&self) -> &BTreeSet<u64> {
        &self.standard_lengths
    }

    pub fn npu_min_subtensor(&self) -> u64 {
        self.npu_min_subtensor
    }

    pub fn is_standard(&self, len: u64) -> bool {
        self.standard_lengths.contains(&len)
    }

    /// Smallest standard length `>= len`.
    pub fn pad_length(&self, len: u64) -> Option<u64> {
        self.standard_lengths.range(len..).next().copied()
    }

    fn points(&self, device: Device, shape: TensorShape) -> Vec<(u64, f64)> {
        let lo = ProfileKey { device, weight_shape: shape, activation_len: 0 };
        let hi = ProfileKey { device, weight_shape: shape, activation_len: u64::MAX };
        self.entries.range(lo..=hi).map(|(k, e)| (k.activation_len, e.latency_us)).collect()
    }

    /// Latency of the full weight `shape` on `device` at `seq_len`.
    ///
    /// GPU: piecewise-linear through `(0, 0)` and the profiled points,
    /// extending the last segment beyond the largest profiled length.
    /// NPU: the value at the smallest profiled length `>= seq_len`.
    pub fn estimate_latency(&self, device: Device, shape: TensorShape, seq_len: u64) -> Result<f64> {
        let pts = self.points(device, shape);
        if pts.is_empty() {
            return Err(Error::MissingProfile(format!("{device} {shape}")));
        }
        match device {
            Device::Npu => pts
                .iter()
                .find(|(len, _)| *len >= seq_len)
                .map(|&(_, t)| t)
                .ok_or(Error::RequiresDecomposition { seq_len, max: pts.last().unwrap().0 }),
            _ => Ok(interpolate(&pts, seq_len as f64)),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.entries.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for e in self.entries.values() {
            let bw = e.bandwidth_observed.map(|b| b.to_string()).unwrap_or_default();
            let source = match e.source {
                Source::Synthetic => "Synthetic",
                Source::Imported => "Imported",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.key.device,
                e.key.weight_shape.rows,
                e.key.weight_shape.cols,
                e.key.activation_len,
                e.latency_us,
                bw,
                source
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end_matches('\r') == CSV_HEADER => {}
            Some((_, h)) => {
                return Err(Error::Csv { line: 1, msg: format!("expected header {CSV_HEADER:?}, got {h:?}") })
            }
            None => return Err(Error::Csv { line: 1, msg: "missing header".into() }),
        }
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in lines {
            let line = i + 1;
            let raw = raw.trim_end_matches('\r');
            if raw.is_empty() {
                continue;
            }
            let e = parse_row(raw).map_err(|msg| Error::Csv { line, msg })?;
            if !seen.insert(e.key) {
                return Err(Error::Csv { line, msg: format!("duplicate key {}", format_key(&e.key)) });
            }
            entries.push(e);
        }
        Self::from_entries(entries, DEFAULT_NPU_MIN_SUBTENSOR)
    }
}

fn interpolate(pts: &[(u64, f64)], x: f64) -> f64 {
    let mut prev = (0.0, 0.0);
    for &(len, t) in pts {
        let (lx, ly) = (len as f64, t);
        if x == lx {
            return ly;
        }
        if x < lx {
            return prev.1 + (ly - prev.1) * (x - prev.0) / (lx - prev.0);
        }
        prev = (lx, ly);
    }
    // Beyond the last knot: continue the final segment.
    let n = pts.len();
    let (x1, y1) = (pts[n - 1].0 as f64, pts[n - 1].1);
    let (x0, y0) = if n >= 2 { (pts[n - 2].0 as f64, pts[n - 2].1) } else { (0.0, 0.0) };
    y1 + (y1 - y0) / (x1 - x0) * (x - x1)
}

fn format_key(k: &ProfileKey) -> String {
    format!("{} {} @ {}", k.device, k.weight_shape, k.activation_len)
}

fn parse_row(raw: &str) -> std::result::Result<ProfileEntry, String> {
    let f: Vec<&str> = raw.split(',').collect();
    if f.len() != 7 {
        return Err(format!("expected 7 fields, got {}", f.len()));
    }
    let device: Device = f[0].parse().map_err(|e: Error| e.to_string())?;
    let int = |name: &str, s: &str| s.parse::<u64>().map_err(|e| format!("{name}: {e}"));
    let rows = int("weight_rows", f[1])?;
    let cols = int("weight_cols", f[2])?;
    let activation_len = int("activation_len", f[3])?;
    if activation_len == 0 {
        return Err("activation_len must be >= 1".into());
    }
    let weight_shape = TensorShape::new(rows, cols).map_err(|e| e.to_string())?;
    let latency_us: f64 = f[4].parse().map_err(|e| format!("latency_us: {e}"))?;
    if !(latency_us.is_finite() && latency_us > 0.0) {
        return Err("latency_us must be > 0".into());
    }
    let bandwidth_observed = if f[5].is_empty() {
        None
    } else {
        Some(f[5].parse::<f64>().map_err(|e| format!("bandwidth_bytes_per_s: {e}"))?)
    };
    let source = match f[6] {
        "Synthetic" => Source::Synthetic,
        "Imported" => Source::Imported,
        other => return Err(format!("unknown source {other:?}")),
    };
    Ok(ProfileEntry {
        key: ProfileKey { device, weight_shape, activation_len },
        latency_us,
        bandwidth_observed,
        source,
    })
}

/// Profiles every `weight_shape` on both devices at every standard length
/// and at activation length 1, using the analytic cost models.
///
/// NPU entries use whichever operand order is faster and are skipped for
/// weights with fewer rows than the minimum NPU sub-tensor.
pub fn build_profile(
    hw: &HardwareConfig,
    weight_shapes: &[TensorShape],
    standard_lengths: &[u64],
    precision: WeightPrecision,
) -> Result<ProfileTable> {
    if weight_shapes.is_empty() {
        return Err(Error::InvalidInput("no weight shapes to profile".into()));
    }
    if standard_lengths.is_empty() {
        return Err(Error::InvalidInput("no standard lengths".into()));
    }
    if standard_lengths.contains(&0) || standard_lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("standard lengths must be >= 1 and strictly ascending".into()));
    }
    hw.validate()?;
    let min_sub = DEFAULT_NPU_MIN_SUBTENSOR.max(hw.npu.array_dim);
    let mut lengths: BTreeSet<u64> = standard_lengths.iter().copied().collect();
    lengths.insert(1);

    let mut entries = Vec::new();
    for &shape in weight_shapes {
        let weight_bytes = precision.weight_bytes(shape.element_count()?) as f64;
        for &len in &lengths {
            let spec = matmul_for(shape, len, precision)?;
            let mut push = |device, latency_us: f64| {
                entries.push(ProfileEntry {
                    key: ProfileKey { device, weight_shape: shape, activation_len: len },
                    latency_us,
                    bandwidth_observed: Some(weight_bytes / (latency_us * 1e-6)),
                    source: Source::Synthetic,
                })
            };
            push(Device::Gpu, gpu_matmul_latency(&spec, &hw.gpu)?);
            if shape.rows >= min_sub {
                push(Device::Npu, npu_best_latency(&spec, &hw.npu)?);
            }
        }
    }
    ProfileTable::from_entries(entries, min_sub)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(r: u64, c: u64) -> TensorShape {
        TensorShape::new(r, c).unwrap()
    }

    fn default_table() -> ProfileTable {
        let shapes = crate::modelspec::ModelSpec::llama8b().profile_shapes();
        build_profile(&HardwareConfig::default(), &shapes, &DEFAULT_STANDARD_LENGTHS, WeightPrecision::W4A16).unwrap()
    }

    fn imported(rows: &[(Device, u64, u64, u64, f64)]) -> ProfileTable {
        ProfileTable::from_entries(
            rows.iter().map(|&(device, r, c, len, t)| ProfileEntry {
                key: ProfileKey { device, weight_shape: shape(r, c), activation_len: len },
                latency_us: t,
                bandwidth_observed: None,
                source: Source::Imported,
            }),
            32,
        )
        .unwrap()
    }

    #[test]
    fn entry_counts() {
        let t = default_table();
        assert_eq!(t.len(), 5 * 7 * 2);
        let one = build_profile(&HardwareConfig::default(), &[shape(64, 64)], &[16], WeightPrecision::FP16).unwrap();
        // GPU@16, GPU@1, NPU@16 and NPU@1 (1 always joins the standard set).
        assert_eq!(one.len(), 4);
        let narrow = build_profile(&HardwareConfig::default(), &[shape(8, 64)], &[16], WeightPrecision::FP16).unwrap();
        assert_eq!(narrow.len(), 2);
    }

    #[test]
    fn build_rejects_empty_or_unsorted() {
        let hw = HardwareConfig::default();
        assert!(build_profile(&hw, &[], &[32], WeightPrecision::FP16).is_err());
        assert!(build_profile(&hw, &[shape(4, 4)], &[], WeightPrecision::FP16).is_err());
        assert!(build_profile(&hw, &[shape(4, 4)], &[64, 32], WeightPrecision::FP16).is_err());
    }

    #[test]
    fn build_is_fast() {
        let start = std::time::Instant::now();
        let _ = default_table();
        assert!(start.elapsed().as_secs_f64() < 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let t = default_table();
        let text = t.to_csv();
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(ProfileTable::from_csv(&text).unwrap(), t);
    }

    #[test]
    fn csv_imported_row() {
        let text = format!("{CSV_HEADER}\nNPU,4096,4096,256,1884,,Imported\n");
        let t = ProfileTable::from_csv(&text).unwrap();
        let key = ProfileKey { device: Device::Npu, weight_shape: shape(4096, 4096), activation_len: 256 };
        let e = t.get(&key).unwrap();
        assert_eq!(e.latency_us, 1884.0);
        assert_eq!(e.bandwidth_observed, None);
        assert_eq!(e.source, Source::Imported);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let bad = format!("{CSV_HEADER}\nGPU,4096,4096,1,511,,Imported\nNPU,4096,4096,0,10,,Imported\n");
        match ProfileTable::from_csv(&bad) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let dup = format!("{CSV_HEADER}\nGPU,4096,4096,1,511,,Imported\nGPU,4096,4096,1,512,,Imported\n");
        assert!(matches!(ProfileTable::from_csv(&dup), Err(Error::Csv { line: 3, .. })));
        let reordered = "weight_rows,device,weight_cols,activation_len,latency_us,bandwidth_bytes_per_s,source\n";
        assert!(matches!(ProfileTable::from_csv(reordered), Err(Error::Csv { line: 1, .. })));
        let short = format!("{CSV_HEADER}\nGPU,4096,4096,1,511,Imported\n");
        assert!(ProfileTable::from_csv(&short).is_err());
    }

    #[test]
    fn gpu_interpolation_between_knots() {
        let t = imported(&[
            (Device::Gpu, 4096, 4096, 256, 10841.0),
            (Device::Gpu, 4096, 4096, 512, 20000.0),
        ]);
        let s = shape(4096, 4096);
        assert_eq!(t.estimate_latency(Device::Gpu, s, 256).unwrap(), 10841.0);
        let mid = t.estimate_latency(Device::Gpu, s, 300).unwrap();
        let expected = 10841.0 + (20000.0 - 10841.0) * 44.0 / 256.0;
        assert!((mid - expected).abs() < 1e-9);
        let beyond = t.estimate_latency(Device::Gpu, s, 768).unwrap();
        assert!((beyond - (20000.0 + (20000.0 - 10841.0))).abs() < 1e-9);
    }

    #[test]
    fn npu_step_semantics() {
        let t = imported(&[
            (Device::Npu, 4096, 4096, 128, 912.0),
            (Device::Npu, 4096, 4096, 256, 1884.0),
        ]);
        let s = shape(4096, 4096);
        for len in 193..=255 {
            assert_eq!(t.estimate_latency(Device::Npu, s, len).unwrap(), 1884.0);
        }
        assert_eq!(t.estimate_latency(Device::Npu, s, 128).unwrap(), 912.0);
        assert!(matches!(
            t.estimate_latency(Device::Npu, s, 257),
            Err(Error::RequiresDecomposition { seq_len: 257, max: 256 })
        ));
        assert!(matches!(t.estimate_latency(Device::Npu, shape(8, 8), 1), Err(Error::MissingProfile(_))));
    }

    proptest! {
        #[test]
        fn estimates_are_monotone_and_exact_at_knots(len in 1u64..1500, d in 1u64..64) {
            let t = default_table();
            let s = shape(4096, 4096);
            let a = t.estimate_latency(Device::Gpu, s, len).unwrap();
            let b = t.estimate_latency(Device::Gpu, s, len + d).unwrap();
            prop_assert!(b >= a);
            prop_assert!((b - a) <= d as f64 * 100.0);
            if len + d <= 1024 {
                let na = t.estimate_latency(Device::Npu, s, len).unwrap();
                let nb = t.estimate_latency(Device::Npu, s, len + d).unwrap();
                prop_assert!(nb >= na);
            }
            for e in t.entries() {
                let k = e.key;
                prop_assert_eq!(t.estimate_latency(k.device, k.weight_shape, k.activation_len).unwrap(), e.latency_us);
            }
        }
    }
}
