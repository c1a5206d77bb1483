//! Decoder-only model descriptions and their per-layer operator lists.
//!
//! Weight shapes use the `[out_features, in_features]` layout, so splitting a
//! weight by rows splits the output features and needs no reduction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwmodel::{GpuParams, MatmulSpec, NpuParams, TensorShape};

pub const MODEL_SCHEMA: &str = "hetsched.model/v1";

/// Bytes per fp16 activation element.
pub const ACTIVATION_BYTES: f64 = 2.0;

/// Elements sharing one fp16 scale in W4A16 storage.
pub const W4A16_GROUP: u64 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decoding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightPrecision {
    W4A16,
    FP16,
}

impl WeightPrecision {
    /// Average storage bytes per weight element, scales included.
    pub fn bytes_per_element(self) -> f64 {
        match self {
            WeightPrecision::W4A16 => 0.5 + 2.0 / W4A16_GROUP as f64,
            WeightPrecision::FP16 => 2.0,
        }
    }

    pub fn weight_bytes(self, elements: u64) -> u64 {
        match self {
            WeightPrecision::W4A16 => elements / 2 + elements.div_ceil(W4A16_GROUP) * 2,
            WeightPrecision::FP16 => elements * 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub schema: String,
    pub name: String,
    pub n_layers: u64,
    pub hidden_dim: u64,
    pub ffn_dim: u64,
    pub n_heads: u64,
    pub n_kv_heads: u64,
    pub vocab_size: u64,
    pub weight_precision: WeightPrecision,
    /// Count the embedding table and LM head in [`ModelSpec::weight_bytes`].
    #[serde(default)]
    pub include_lm_head: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    RmsNorm,
    QkvProj,
    AttentionGlue,
    OProj,
    FfnUp,
    FfnGate,
    SwiGlu,
    FfnDown,
}

impl OpKind {
    pub fn is_matmul(self) -> bool {
        matches!(self, OpKind::QkvProj | OpKind::OProj | OpKind::FfnUp | OpKind::FfnGate | OpKind::FfnDown)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Affinity {
    Gpu,
    Npu,
    Either,
}

/// One operator of a decoder layer with its activation length bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOp {
    pub layer: u64,
    pub index: usize,
    pub kind: OpKind,
    /// `[out_features, in_features]`; `None` for non-Matmul operators.
    pub weight_shape: Option<TensorShape>,
    pub activation_len: u64,
    pub partitionable: bool,
    pub affinity: Affinity,
    /// Bytes read and written by non-Matmul operators.
    pub io_bytes: f64,
    /// NPU runs this operator as `W x X^T` rather than `X x W^T`.
    pub order_exchanged: bool,
}

impl LayerOp {
    /// `[S, in] x [in, out]`: activation streamed, weight stationary.
    pub fn matmul_spec(&self, precision: WeightPrecision) -> Option<Result<MatmulSpec>> {
        let w = self.weight_shape?;
        Some(matmul_for(w, self.activation_len, precision))
    }

    /// Latency of a non-Matmul operator on the GPU (memory bound).
    pub fn elementwise_latency(&self, gpu: &GpuParams) -> f64 {
        self.io_bytes / gpu.mem_bandwidth * 1e6 + gpu.fixed_kernel_overhead
    }
}

/// The natural product for an activation of `len` rows against weight `w`.
pub fn matmul_for(w: TensorShape, len: u64, precision: WeightPrecision) -> Result<MatmulSpec> {
    MatmulSpec::new(
        TensorShape::new(len, w.cols)?,
        TensorShape::new(w.cols, w.rows)?,
        ACTIVATION_BYTES,
        precision.bytes_per_element(),
        ACTIVATION_BYTES,
    )
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schema != MODEL_SCHEMA {
            return Err(Error::InvalidConfig(format!("schema {:?} is not {MODEL_SCHEMA:?}", self.schema)));
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig("hidden_dim must be divisible by n_heads".into()));
        }
        if self.n_kv_heads > self.n_heads {
            return Err(Error::InvalidConfig("n_kv_heads must not exceed n_heads".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec is always serializable")
    }

    /// Llama-3-8B public dimensions.
    pub fn llama8b() -> Self {
        Self {
            schema: MODEL_SCHEMA.into(),
            name: "llama-8b".into(),
            n_layers: 32,
            hidden_dim: 4096,
            ffn_dim: 14336,
            n_heads: 32,
            n_kv_heads: 8,
            vocab_size: 128256,
            weight_precision: WeightPrecision::W4A16,
            include_lm_head: false,
        }
    }

    pub fn qkv_out(&self) -> u64 {
        self.hidden_dim + 2 * self.hidden_dim * self.n_kv_heads / self.n_heads
    }

    /// Weight shapes of the partitionable operators of one layer, in
    /// operator order (up and gate share a shape).
    pub fn weight_shapes(&self) -> Vec<(OpKind, TensorShape)> {
        let h = self.hidden_dim;
        let f = self.ffn_dim;
        vec![
            (OpKind::QkvProj, TensorShape { rows: self.qkv_out(), cols: h }),
            (OpKind::OProj, TensorShape { rows: h, cols: h }),
            (OpKind::FfnUp, TensorShape { rows: f, cols: h }),
            (OpKind::FfnGate, TensorShape { rows: f, cols: h }),
            (OpKind::FfnDown, TensorShape { rows: h, cols: f }),
        ]
    }

    /// Distinct partitionable weight shapes, sorted.
    pub fn distinct_weight_shapes(&self) -> Vec<TensorShape> {
        let mut v: Vec<_> = self.weight_shapes().into_iter().map(|(_, s)| s).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Shapes worth profiling: the distinct operator shapes plus the fused
    /// gate/up projection `[2 * ffn, hidden]` that many engines run as one
    /// kernel.
    pub fn profile_shapes(&self) -> Vec<TensorShape> {
        let mut v = self.distinct_weight_shapes();
        v.push(TensorShape { rows: 2 * self.ffn_dim, cols: self.hidden_dim });
        v.sort();
        v.dedup();
        v
    }

    /// Total weight storage in bytes under the model's precision.
    pub fn weight_bytes(&self) -> Result<u64> {
        let mut per_layer = 0u64;
        for (_, s) in self.weight_shapes() {
            per_layer += self.weight_precision.weight_bytes(s.element_count()?);
        }
        let mut total = per_layer
            .checked_mul(self.n_layers)
            .ok_or_else(|| Error::Overflow("model weight bytes".into()))?;
        if self.include_lm_head {
            let table = self.vocab_size * self.hidden_dim;
            total += 2 * self.weight_precision.weight_bytes(table);
        }
        Ok(total)
    }
}

/// Operators of layer `layer` for the given phase.
///
/// Decoding always binds an activation length of 1.
pub fn ops_for_layer(spec: &ModelSpec, layer: u64, phase: Phase, seq_len: u64) -> Result<Vec<LayerOp>> {
    spec.validate()?;
    if seq_len == 0 {
        return Err(Error::InvalidInput("seq_len must be >= 1".into()));
    }
    let s = match phase {
        Phase::Prefill => seq_len,
        Phase::Decoding => 1,
    };
    let h = spec.hidden_dim as f64;
    let f = spec.ffn_dim as f64;
    let act = s as f64 * ACTIVATION_BYTES;
    let shapes = spec.weight_shapes();
    let shape_of = |k: OpKind| shapes.iter().find(|(kind, _)| *kind == k).map(|(_, s)| *s);

    let kinds = [
        OpKind::RmsNorm,
        OpKind::QkvProj,
        OpKind::AttentionGlue,
        OpKind::OProj,
        OpKind::RmsNorm,
        OpKind::FfnUp,
        OpKind::FfnGate,
        OpKind::SwiGlu,
        OpKind::FfnDown,
    ];
    Ok(kinds
        .iter()
        .enumerate()
        .map(|(index, &kind)| {
            let io_bytes = match kind {
                OpKind::RmsNorm => 2.0 * act * h,
                OpKind::AttentionGlue => act * h,
                OpKind::SwiGlu => 3.0 * act * f,
                _ => 0.0,
            };
            LayerOp {
                layer,
                index,
                kind,
                weight_shape: shape_of(kind),
                activation_len: s,
                partitionable: kind.is_matmul(),
                affinity: if kind.is_matmul() { Affinity::Either } else { Affinity::Gpu },
                io_bytes,
                order_exchanged: false,
            }
        })
        .collect())
}

/// Like [`ops_for_layer`], with each Matmul marked for order exchange when
/// the swapped product is strictly faster on the NPU.
pub fn ops_for_layer_npu(
    spec: &ModelSpec,
    layer: u64,
    phase: Phase,
    seq_len: u64,
    npu: &NpuParams,
) -> Result<Vec<LayerOp>> {
    let mut ops = ops_for_layer(spec, layer, phase, seq_len)?;
    for op in &mut ops {
        if let Some(m) = op.matmul_spec(spec.weight_precision) {
            let m = m?;
            op.order_exchanged = crate::planner::order_exchange(&m) != m
                && crate::planner::npu_best_latency(&m, npu)? < crate::hwmodel::npu_matmul_latency(&m, npu)?;
        }
    }
    Ok(ops)
}

/// Operators of every layer, in execution order.
pub fn ops_for_model(spec: &ModelSpec, phase: Phase, seq_len: u64) -> Result<Vec<LayerOp>> {
    let mut all = Vec::new();
    for layer in 0..spec.n_layers {
        all.extend(ops_for_layer(spec, layer, phase, seq_len)?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn llama8b_ffn_down_is_wide() {
        let m = ModelSpec::llama8b();
        let ops = ops_for_layer(&m, 0, Phase::Prefill, 256).unwrap();
        let down = ops.iter().find(|o| o.kind == OpKind::FfnDown).unwrap();
        // in_features (shared dimension) larger than out_features.
        assert_eq!(down.weight_shape, Some(TensorShape { rows: 4096, cols: 14336 }));
    }

    #[test]
    fn single_layer_decoding_has_nine_ops() {
        let mut m = ModelSpec::llama8b();
        m.n_layers = 1;
        let ops = ops_for_model(&m, Phase::Decoding, 999).unwrap();
        assert_eq!(ops.len(), 9);
        assert!(ops.iter().all(|o| o.activation_len == 1));
        let partitionable = ops.iter().filter(|o| o.partitionable).count();
        assert_eq!(partitionable, 5);
        for o in &ops {
            assert_eq!(o.partitionable, o.kind.is_matmul());
            if !o.partitionable {
                assert_eq!(o.affinity, Affinity::Gpu);
            }
        }
    }

    #[test]
    fn qkv_width_with_equal_heads() {
        let mut m = ModelSpec::llama8b();
        m.hidden_dim = 2048;
        m.ffn_dim = 8192;
        m.n_heads = 16;
        m.n_kv_heads = 16;
        assert_eq!(m.weight_shapes()[0].1, TensorShape { rows: 6144, cols: 2048 });
    }

    #[test]
    fn weight_bytes_examples() {
        assert_eq!(WeightPrecision::W4A16.weight_bytes(4096 * 4096), 8_650_752);
        assert_eq!(WeightPrecision::FP16.weight_bytes(4096 * 4096), 33_554_432);
        let mut m = ModelSpec::llama8b();
        m.n_layers = 0;
        assert_eq!(m.weight_bytes().unwrap(), 0);
    }

    #[test]
    fn weight_bytes_additive_over_layers() {
        let mut m = ModelSpec::llama8b();
        m.n_layers = 1;
        let one = m.weight_bytes().unwrap();
        m.n_layers = 32;
        assert_eq!(m.weight_bytes().unwrap(), 32 * one);
    }

    #[test]
    fn json_parse_and_errors() {
        let m = ModelSpec::llama8b();
        let text = m.to_json();
        assert_eq!(ModelSpec::from_json(&text).unwrap(), m);

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("ffn_dim");
        let err = ModelSpec::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("ffn_dim"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().insert("bogus".into(), 1.into());
        assert!(ModelSpec::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn shipped_model_files_parse() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/models");
        let llama = std::fs::read_to_string(format!("{dir}/llama8b.json")).unwrap();
        let m = ModelSpec::from_json(&llama).unwrap();
        assert_eq!((m.n_layers, m.hidden_dim, m.ffn_dim), (32, 4096, 14336));
        for entry in std::fs::read_dir(dir).unwrap() {
            let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
            ModelSpec::from_json(&text).unwrap();
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut m = ModelSpec::llama8b();
        m.n_heads = 3;
        assert!(ops_for_layer(&m, 0, Phase::Prefill, 8).is_err());
        assert!(ops_for_layer(&ModelSpec::llama8b(), 0, Phase::Prefill, 0).is_err());
    }

    proptest! {
        #[test]
        fn prefill_flops_match_hand_formula(
            heads in 1u64..8, head_dim in 1u64..64, kv in 1u64..8, ffn in 1u64..4096, s in 1u64..512
        ) {
            prop_assume!(kv <= heads);
            let mut m = ModelSpec::llama8b();
            m.n_heads = heads;
            m.n_kv_heads = kv;
            m.hidden_dim = heads * head_dim;
            m.ffn_dim = ffn;
            let h = m.hidden_dim;
            let qkv = h + 2 * h * kv / heads;
            let oracle = 2 * s * (h * qkv + h * h + 2 * h * ffn + ffn * h);
            let ops = ops_for_layer(&m, 0, Phase::Prefill, s).unwrap();
            let total: u64 = ops
                .iter()
                .filter_map(|o| o.matmul_spec(m.weight_precision))
                .map(|r| r.unwrap().flops().unwrap())
                .sum();
            prop_assert_eq!(total, oracle);
            prop_assert_eq!(ops, ops_for_layer(&m, 0, Phase::Prefill, s).unwrap());
        }
    }
}
