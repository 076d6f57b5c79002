//! The four delta-module families: LoRA, bottleneck adapter, bias tuning
//! (BitFit) and prefix tuning, plus runtime initialization by shape capture.
//!
//! LoRA and BitFit size themselves from the target node's own parameter
//! shapes. Adapters and prefixes depend on hidden-state extents that are
//! only observable at run time, so they are sized from a pseudo-input
//! forward pass ([`capture_shapes`]).

use std::collections::BTreeMap;
use std::rc::Rc;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::modtree::{get_by_path, run_forward, Behavior, CaptureSlot, ForwardCtx, NodeRef};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaKind {
    Lora,
    Adapter,
    Bitfit,
    Prefix,
}

impl DeltaKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Lora => "lora",
            Self::Adapter => "adapter",
            Self::Bitfit => "bitfit",
            Self::Prefix => "prefix",
        }
    }
}

impl FromStr for DeltaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Self::Lora),
            "adapter" => Ok(Self::Adapter),
            "bitfit" => Ok(Self::Bitfit),
            "prefix" => Ok(Self::Prefix),
            other => Err(Error::Config(format!("unknown delta type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Gelu => "gelu",
            Self::Relu => "relu",
        }
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        match self {
            Self::Gelu => t.gelu(),
            Self::Relu => t.relu(),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Self::Gelu),
            "relu" => Ok(Self::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Delta hyperparameters with their fixed config-file names.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub rank: usize,
    pub alpha: f64,
    pub bottleneck: usize,
    pub activation: Activation,
    pub prefix_len: usize,
    pub prefix_dp: usize,
    pub prefix_mid: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            bottleneck: 8,
            activation: Activation::Gelu,
            prefix_len: 4,
            prefix_dp: 16,
            prefix_mid: 16,
        }
    }
}

fn as_usize(key: &str, v: &serde_json::Value) -> Result<usize> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| Error::Config(format!("hyperparameter {key:?} must be a non-negative integer")))
}

impl Hyperparams {
    pub fn from_map(map: &BTreeMap<String, serde_json::Value>) -> Result<Self> {
        let mut hp = Self::default();
        for (key, value) in map {
            match key.as_str() {
                "rank" => hp.rank = as_usize(key, value)?,
                "alpha" => {
                    hp.alpha = value
                        .as_f64()
                        .ok_or_else(|| Error::Config("hyperparameter \"alpha\" must be a number".into()))?
                }
                "bottleneck" => hp.bottleneck = as_usize(key, value)?,
                "activation" => {
                    let s = value.as_str().ok_or_else(|| {
                        Error::Config("hyperparameter \"activation\" must be a string".into())
                    })?;
                    hp.activation = s.parse()?;
                }
                "prefix_len" => hp.prefix_len = as_usize(key, value)?,
                "prefix_dp" => hp.prefix_dp = as_usize(key, value)?,
                "prefix_mid" => hp.prefix_mid = as_usize(key, value)?,
                other => return Err(Error::Config(format!("unknown hyperparameter {other:?}"))),
            }
        }
        Ok(hp)
    }

    /// Serializable map holding only the names relevant to `kind`.
    pub fn to_map(&self, kind: DeltaKind) -> BTreeMap<String, serde_json::Value> {
        let mut map = BTreeMap::new();
        match kind {
            DeltaKind::Lora => {
                map.insert("rank".into(), serde_json::json!(self.rank));
                map.insert("alpha".into(), serde_json::json!(self.alpha));
            }
            DeltaKind::Adapter => {
                map.insert("bottleneck".into(), serde_json::json!(self.bottleneck));
                map.insert("activation".into(), serde_json::json!(self.activation.as_str()));
            }
            DeltaKind::Bitfit => {}
            DeltaKind::Prefix => {
                map.insert("prefix_len".into(), serde_json::json!(self.prefix_len));
                map.insert("prefix_dp".into(), serde_json::json!(self.prefix_dp));
                map.insert("prefix_mid".into(), serde_json::json!(self.prefix_mid));
            }
        }
        map
    }
}

// ── delta module families ────────────────────────────────────────────

/// Low-rank update `scale * (h_in A B)`, applied in parallel to a linear map.
/// `B` starts at zero so a fresh module contributes nothing.
#[derive(Debug)]
pub struct LoraModule {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub scale: f64,
}

/// Bottleneck transform `act(h W1 + b1) W2 + b2` applied to an output hidden
/// state. `W2`/`b2` start at zero.
#[derive(Debug)]
pub struct AdapterModule {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

/// A single bias vector added to an output hidden state; starts at zero.
#[derive(Debug)]
pub struct BitfitModule {
    pub bias: Tensor,
}

/// Learned rows `MLP(p)` prepended to an attention key/value projection
/// output; the module returns the full concatenation.
#[derive(Debug)]
pub struct PrefixModule {
    pub p: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

#[derive(Debug)]
pub enum DeltaModule {
    Lora(LoraModule),
    Adapter(AdapterModule),
    Bitfit(BitfitModule),
    Prefix(PrefixModule),
}

pub type DeltaRef = Rc<DeltaModule>;

impl DeltaModule {
    pub fn kind(&self) -> DeltaKind {
        match self {
            Self::Lora(_) => DeltaKind::Lora,
            Self::Adapter(_) => DeltaKind::Adapter,
            Self::Bitfit(_) => DeltaKind::Bitfit,
            Self::Prefix(_) => DeltaKind::Prefix,
        }
    }

    pub fn expected_input_dim(&self) -> usize {
        match self {
            Self::Lora(m) => m.a.shape()[0],
            Self::Adapter(m) => m.w1.shape()[0],
            Self::Bitfit(m) => m.bias.shape()[0],
            Self::Prefix(m) => m.mlp_w2.shape()[1],
        }
    }

    /// The delta formula of the family; differentiable.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let expected = self.expected_input_dim();
        let got = h.shape().last().copied().unwrap_or(0);
        if got != expected {
            return Err(Error::Shape {
                op: "delta_forward",
                detail: format!(
                    "{} expects trailing dim {expected}, got {:?}",
                    self.kind().as_str(),
                    h.shape()
                ),
            });
        }
        match self {
            Self::Lora(m) => Ok(h.matmul(&m.a)?.matmul(&m.b)?.scale(m.scale)),
            Self::Adapter(m) => {
                let hidden = m.activation.apply(&h.matmul(&m.w1)?.add(&m.b1)?);
                hidden.matmul(&m.w2)?.add(&m.b2)
            }
            Self::Bitfit(m) => Ok(m.bias.clone()),
            Self::Prefix(m) => {
                if h.ndim() < 2 {
                    return Err(Error::Shape {
                        op: "delta_forward",
                        detail: format!("prefix needs row-shaped input, got {:?}", h.shape()),
                    });
                }
                let rows = m
                    .p
                    .matmul(&m.mlp_w1)?
                    .add(&m.mlp_b1)?
                    .gelu()
                    .matmul(&m.mlp_w2)?
                    .add(&m.mlp_b2)?;
                let leading = &h.shape()[..h.ndim() - 2];
                let broadcast = rows.expand_leading(leading);
                broadcast.concat_rows(h)
            }
        }
    }

    pub fn named_params(&self) -> Vec<(&'static str, Tensor)> {
        match self {
            Self::Lora(m) => vec![("a", m.a.clone()), ("b", m.b.clone())],
            Self::Adapter(m) => vec![
                ("w1", m.w1.clone()),
                ("b1", m.b1.clone()),
                ("w2", m.w2.clone()),
                ("b2", m.b2.clone()),
            ],
            Self::Bitfit(m) => vec![("bias", m.bias.clone())],
            Self::Prefix(m) => vec![
                ("p", m.p.clone()),
                ("mlp_w1", m.mlp_w1.clone()),
                ("mlp_b1", m.mlp_b1.clone()),
                ("mlp_w2", m.mlp_w2.clone()),
                ("mlp_b2", m.mlp_b2.clone()),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Forward behavior for the tree node a delta module is registered under.
pub struct DeltaNodeBehavior {
    pub module: DeltaRef,
}

impl Behavior for DeltaNodeBehavior {
    fn forward(&self, _node: &NodeRef, _ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        self.module.forward(input)
    }
}

fn uniform(rng: &mut SplitMix64, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::param(shape.to_vec(), (0..n).map(|_| rng.uniform(-0.1, 0.1)).collect())
}

fn zero_param(shape: &[usize]) -> Result<Tensor> {
    Tensor::param(shape.to_vec(), vec![0.0; shape.iter().product()])
}

/// Allocates and initializes a delta module for a target with the given
/// feature extents. Write-back weights start at zero so additive deltas are
/// exact identities at creation.
pub fn create_delta(
    kind: DeltaKind,
    d_in: usize,
    d_out: usize,
    hp: &Hyperparams,
    seed: u64,
) -> Result<DeltaModule> {
    if d_in == 0 || d_out == 0 {
        return Err(Error::Config(format!(
            "delta dims must be positive, got {d_in}x{d_out}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    match kind {
        DeltaKind::Lora => {
            if hp.rank == 0 {
                return Err(Error::Config("lora rank must be >= 1".into()));
            }
            Ok(DeltaModule::Lora(LoraModule {
                a: uniform(&mut rng, &[d_in, hp.rank])?,
                b: zero_param(&[hp.rank, d_out])?,
                rank: hp.rank,
                scale: hp.alpha / hp.rank as f64,
            }))
        }
        DeltaKind::Adapter => {
            if hp.bottleneck == 0 {
                return Err(Error::Config("adapter bottleneck must be >= 1".into()));
            }
            Ok(DeltaModule::Adapter(AdapterModule {
                w1: uniform(&mut rng, &[d_out, hp.bottleneck])?,
                b1: zero_param(&[hp.bottleneck])?,
                w2: zero_param(&[hp.bottleneck, d_out])?,
                b2: zero_param(&[d_out])?,
                activation: hp.activation,
            }))
        }
        DeltaKind::Bitfit => Ok(DeltaModule::Bitfit(BitfitModule {
            bias: zero_param(&[d_out])?,
        })),
        DeltaKind::Prefix => {
            if hp.prefix_len == 0 || hp.prefix_dp == 0 || hp.prefix_mid == 0 {
                return Err(Error::Config("prefix extents must be >= 1".into()));
            }
            Ok(DeltaModule::Prefix(PrefixModule {
                p: uniform(&mut rng, &[hp.prefix_len, hp.prefix_dp])?,
                mlp_w1: uniform(&mut rng, &[hp.prefix_dp, hp.prefix_mid])?,
                mlp_b1: zero_param(&[hp.prefix_mid])?,
                mlp_w2: uniform(&mut rng, &[hp.prefix_mid, d_out])?,
                mlp_b2: zero_param(&[d_out])?,
            }))
        }
    }
}

/// Feature extents read off a node's own parameters: 2-d `weight` gives
/// `(rows, cols)`, 1-d `weight` or `bias` gives `(d, d)`.
pub fn dims_from_params(node: &NodeRef) -> Option<(usize, usize)> {
    let n = node.borrow();
    if let Some(w) = n.param("weight") {
        return match w.ndim() {
            2 => Some((w.shape()[0], w.shape()[1])),
            1 => Some((w.shape()[0], w.shape()[0])),
            _ => None,
        };
    }
    if let Some(b) = n.param("bias") {
        if b.ndim() == 1 {
            return Some((b.shape()[0], b.shape()[0]));
        }
    }
    None
}

/// Observed feature extents per target path: `(input dim, output dim)`.
#[derive(Debug, Clone, Default)]
pub struct ShapeRecord {
    dims: BTreeMap<String, (usize, usize)>,
}

impl ShapeRecord {
    pub fn get(&self, path: &str) -> Option<(usize, usize)> {
        self.dims.get(path).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &(usize, usize))> {
        self.dims.iter()
    }
}

/// Runs one forward pass with a pseudo input (batch 1, sequence length 4,
/// token ids all zero) and records the last-axis extents flowing through
/// each target. The pass is discarded: no gradients, no parameter changes.
pub fn capture_shapes(model: &NodeRef, target_paths: &[String]) -> Result<ShapeRecord> {
    let mut armed: Vec<(String, NodeRef, Rc<CaptureSlot>)> = Vec::with_capacity(target_paths.len());
    for path in target_paths {
        let node = get_by_path(model, path)?;
        let slot = node.borrow_mut().arm_capture();
        armed.push((path.clone(), node, slot));
    }
    let ids = Tensor::new(vec![1, 4], vec![0.0; 4]);
    let ctx = ForwardCtx::with_mask(vec![vec![true; 4]]);
    let outcome = ids.and_then(|ids| run_forward(model, &ctx, &ids));
    for (_, node, _) in &armed {
        node.borrow_mut().disarm_capture();
    }
    outcome?;
    let mut record = ShapeRecord::default();
    for (path, _, slot) in armed {
        let dims = slot.dims().ok_or_else(|| Error::Capture(path.clone()))?;
        record.dims.insert(path, dims);
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{build_toyformer, NamingConvention, ToyformerConfig};

    fn toy_a() -> NodeRef {
        build_toyformer(&ToyformerConfig::default(), NamingConvention::A).unwrap()
    }

    #[test]
    fn capture_reads_ffn_and_query_dims() {
        let model = toy_a();
        let record = capture_shapes(
            &model,
            &[
                "encoder.layer.0.intermediate.dense".to_string(),
                "encoder.layer.0.attention.self.query".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(record.get("encoder.layer.0.intermediate.dense"), Some((32, 64)));
        assert_eq!(record.get("encoder.layer.0.attention.self.query"), Some((32, 32)));
    }

    #[test]
    fn capture_of_unexecuted_node_fails() {
        let model = toy_a();
        // the embedding tables are read directly, never run as modules
        let err = capture_shapes(&model, &["embeddings.word_embeddings".to_string()]).unwrap_err();
        match err {
            Error::Capture(path) => assert_eq!(path, "embeddings.word_embeddings"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lora_shapes_counts_and_zero_init() {
        let hp = Hyperparams::default();
        let m = create_delta(DeltaKind::Lora, 32, 32, &hp, 9).unwrap();
        let DeltaModule::Lora(ref lora) = m else { panic!() };
        assert_eq!(lora.a.shape(), &[32, 4]);
        assert_eq!(lora.b.shape(), &[4, 32]);
        assert_eq!(m.param_count(), 256);
        assert!(lora.b.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(lora.scale, 1.0);
        // B = 0 makes the module a zero map
        let h = Tensor::new(vec![2, 32], (0..64).map(|i| i as f64).collect()).unwrap();
        assert!(m.forward(&h).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_param_count_and_identity_at_init() {
        let hp = Hyperparams::default();
        let m = create_delta(DeltaKind::Adapter, 32, 32, &hp, 9).unwrap();
        assert_eq!(m.param_count(), 32 * 8 + 8 + 8 * 32 + 32);
        let h = Tensor::new(vec![1, 32], vec![0.5; 32]).unwrap();
        assert!(m.forward(&h).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bitfit_is_zero_vector() {
        let m = create_delta(DeltaKind::Bitfit, 32, 32, &Hyperparams::default(), 9).unwrap();
        assert_eq!(m.param_count(), 32);
        let DeltaModule::Bitfit(ref b) = m else { panic!() };
        assert_eq!(b.bias.to_vec(), vec![0.0; 32]);
    }

    #[test]
    fn prefix_prepends_mlp_rows() {
        let hp = Hyperparams::default();
        let m = create_delta(DeltaKind::Prefix, 16, 8, &hp, 9).unwrap();
        let h = Tensor::new(vec![1, 6, 8], vec![0.25; 48]).unwrap();
        let out = m.forward(&h).unwrap();
        assert_eq!(out.shape(), &[1, 10, 8]);
        // the first prefix_len rows equal MLP(p) directly
        let DeltaModule::Prefix(ref pm) = m else { panic!() };
        let rows = pm
            .p
            .matmul(&pm.mlp_w1)
            .unwrap()
            .add(&pm.mlp_b1)
            .unwrap()
            .gelu()
            .matmul(&pm.mlp_w2)
            .unwrap()
            .add(&pm.mlp_b2)
            .unwrap();
        assert_eq!(&out.to_vec()[..32], &rows.to_vec()[..]);
        // trailing rows are the original hidden state
        assert_eq!(&out.to_vec()[32..], &h.to_vec()[..]);
    }

    #[test]
    fn delta_forward_checks_trailing_dim() {
        let m = create_delta(DeltaKind::Lora, 8, 8, &Hyperparams::default(), 1).unwrap();
        let h = Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap();
        assert!(matches!(m.forward(&h), Err(Error::Shape { .. })));
    }

    #[test]
    fn dims_from_params_reads_linear_and_norm_nodes() {
        let model = toy_a();
        let linear = get_by_path(&model, "encoder.layer.0.intermediate.dense").unwrap();
        assert_eq!(dims_from_params(&linear), Some((32, 64)));
        let norm = get_by_path(&model, "embeddings.LayerNorm").unwrap();
        assert_eq!(dims_from_params(&norm), Some((32, 32)));
        let container = get_by_path(&model, "encoder").unwrap();
        assert_eq!(dims_from_params(&container), None);
    }

    #[test]
    fn hyperparams_roundtrip_and_unknown_keys() {
        let mut map = BTreeMap::new();
        map.insert("rank".to_string(), serde_json::json!(2));
        map.insert("alpha".to_string(), serde_json::json!(8.0));
        let hp = Hyperparams::from_map(&map).unwrap();
        assert_eq!(hp.rank, 2);
        assert_eq!(hp.alpha, 8.0);
        assert_eq!(hp.bottleneck, 8);

        let mut bad = BTreeMap::new();
        bad.insert("mystery".to_string(), serde_json::json!(1));
        assert!(matches!(Hyperparams::from_map(&bad), Err(Error::Config(_))));

        let round = Hyperparams::from_map(&hp.to_map(DeltaKind::Lora)).unwrap();
        assert_eq!(round.rank, 2);
        assert_eq!(round.alpha, 8.0);
    }

    use crate::modtree::get_by_path;
}
