//! Toy transformer encoder backbones.
//!
//! Two deterministic encoders built from the same config but with different
//! sub-module naming conventions: `A` follows BERT-style names
//! (`encoder.layer.N.attention.self.query`, post-norm, gelu) and `B` follows
//! T5-style names (`encoder.block.N.layer.0.SelfAttention.q`, pre-norm,
//! relu). The construction code knows nothing about delta modules; hidden
//! states flow through plain [`ModuleNode`]s.

use std::rc::Rc;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::modtree::{
    add_child, add_param, run_forward, Behavior, ForwardCtx, ModuleNode, Namespace, NodeRef,
    NodeRole, ANNOTATION_CONVENTION, ANNOTATION_SEED,
};
use crate::rng::SplitMix64;
use crate::tensor::{embedding_lookup, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for ToyformerConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_layers: 2,
            vocab: 64,
            max_len: 16,
            n_classes: 2,
            seed: 1,
        }
    }
}

impl ToyformerConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.n_layers,
            self.vocab,
            self.max_len,
            self.n_classes,
        ];
        if extents.contains(&0) {
            return Err(Error::Config(format!("all extents must be >= 1: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NamingConvention {
    A,
    B,
}

impl NamingConvention {
    pub fn id(&self) -> &'static str {
        match self {
            Self::A => "A",
            Self::B => "B",
        }
    }
}

impl FromStr for NamingConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            other => Err(Error::Config(format!(
                "unknown naming convention {other:?} (expected A or B)"
            ))),
        }
    }
}

// ── shared pieces ────────────────────────────────────────────────────

fn ids_from_tensor(t: &Tensor) -> Result<(Vec<usize>, usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::Contract(format!(
            "token ids must form a 2-d tensor, got {:?}",
            t.shape()
        )));
    }
    let (batch, seq) = (t.shape()[0], t.shape()[1]);
    let ids = t.data().iter().map(|&v| v as usize).collect();
    Ok((ids, batch, seq))
}

/// Additive attention mask of shape `(batch, q_rows, k_rows)`. The padding
/// mask covers the trailing `mask_len` key columns; key rows beyond it
/// (prepended by interceptors) are always attendable.
fn build_mask(
    ctx: &ForwardCtx,
    batch: usize,
    q_rows: usize,
    k_rows: usize,
) -> Result<Option<Tensor>> {
    let Some(pad) = &ctx.pad_mask else {
        return Ok(None);
    };
    if pad.len() != batch {
        return Err(Error::Contract(format!(
            "pad mask has {} rows for batch {batch}",
            pad.len()
        )));
    }
    let mask_len = pad.first().map_or(0, Vec::len);
    if mask_len > k_rows {
        return Err(Error::Contract(format!(
            "pad mask covers {mask_len} key positions but only {k_rows} exist"
        )));
    }
    let extra = k_rows - mask_len;
    let mut data = vec![0.0; batch * q_rows * k_rows];
    for (b, row) in pad.iter().enumerate() {
        if row.len() != mask_len {
            return Err(Error::Contract("ragged pad mask".into()));
        }
        for (c, &visible) in row.iter().enumerate() {
            if !visible {
                for q in 0..q_rows {
                    data[(b * q_rows + q) * k_rows + extra + c] = MASKED_LOGIT;
                }
            }
        }
    }
    Ok(Some(Tensor::new(vec![batch, q_rows, k_rows], data)?))
}

/// Scaled dot-product attention over `n_heads` contiguous column blocks.
fn multi_head_attention(
    ctx: &ForwardCtx,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
) -> Result<Tensor> {
    let d = *q.shape().last().unwrap();
    let dh = d / n_heads;
    let batch = q.shape()[0];
    let q_rows = q.shape()[q.ndim() - 2];
    let k_rows = k.shape()[k.ndim() - 2];
    let mask = build_mask(ctx, batch, q_rows, k_rows)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let qi = q.slice_last(i * dh, dh)?;
        let ki = k.slice_last(i * dh, dh)?;
        let vi = v.slice_last(i * dh, dh)?;
        let mut scores = qi.bmm(&ki.transpose_last2()?)?.scale(scale);
        if let Some(m) = &mask {
            scores = scores.add(m)?;
        }
        let probs = scores.softmax()?;
        heads.push(probs.bmm(&vi)?);
    }
    Tensor::concat_last(&heads)
}

// ── behaviors ────────────────────────────────────────────────────────

struct Linear {
    role: NodeRole,
}

impl Behavior for Linear {
    fn forward(&self, node: &NodeRef, _ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let (weight, bias) = {
            let n = node.borrow();
            (
                n.param("weight").ok_or_else(|| {
                    Error::Contract(format!("linear module {:?} lost its weight", n.path()))
                })?,
                n.param("bias"),
            )
        };
        let out = input.matmul(&weight)?;
        match bias {
            Some(b) => out.add(&b),
            None => Ok(out),
        }
    }

    fn role(&self) -> NodeRole {
        self.role
    }
}

struct LayerNormNode;

impl Behavior for LayerNormNode {
    fn forward(&self, node: &NodeRef, _ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let (gain, bias) = {
            let n = node.borrow();
            (n.param("weight").unwrap(), n.param("bias").unwrap())
        };
        input.layer_norm(&gain, &bias, LAYER_NORM_EPS)
    }
}

/// Token + learned positional embedding followed by layer norm (A style).
struct EmbeddingsA;

impl Behavior for EmbeddingsA {
    fn forward(&self, node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let (ids, batch, seq) = ids_from_tensor(input)?;
        let (word, pos, ln) = {
            let n = node.borrow();
            (
                n.child("word_embeddings").unwrap().borrow().param("weight").unwrap(),
                n.child("position_embeddings").unwrap().borrow().param("weight").unwrap(),
                n.child("LayerNorm").unwrap(),
            )
        };
        let tok = embedding_lookup(&word, &ids, &[batch, seq])?;
        let positions: Vec<usize> = (0..seq).collect();
        let pos_rows = embedding_lookup(&pos, &positions, &[seq])?;
        let summed = tok.add(&pos_rows)?;
        run_forward(&ln, ctx, &summed)
    }
}

/// BERT-style attention block: projections, heads, output projection,
/// residual and post layer norm.
struct AttentionA {
    n_heads: usize,
}

impl Behavior for AttentionA {
    fn forward(&self, node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let (query, key, value, out_dense, out_ln) = {
            let n = node.borrow();
            let selfn = n.child("self").unwrap();
            let s = selfn.borrow();
            let out = n.child("output").unwrap();
            let o = out.borrow();
            (
                s.child("query").unwrap(),
                s.child("key").unwrap(),
                s.child("value").unwrap(),
                o.child("dense").unwrap(),
                o.child("LayerNorm").unwrap(),
            )
        };
        let q = run_forward(&query, ctx, input)?;
        let k = run_forward(&key, ctx, input)?;
        let v = run_forward(&value, ctx, input)?;
        let mixed = multi_head_attention(ctx, &q, &k, &v, self.n_heads)?;
        let projected = run_forward(&out_dense, ctx, &mixed)?;
        let residual = projected.add(input)?;
        run_forward(&out_ln, ctx, &residual)
    }
}

/// First FFN linear plus activation (BERT's "intermediate").
struct FfnIntermediateA;

impl Behavior for FfnIntermediateA {
    fn forward(&self, node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let dense = node.borrow().child("dense").unwrap();
        Ok(run_forward(&dense, ctx, input)?.gelu())
    }
}

struct LayerA;

impl Behavior for LayerA {
    fn forward(&self, node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let (attention, intermediate, out_dense, out_ln) = {
            let n = node.borrow();
            let out = n.child("output").unwrap();
            let o = out.borrow();
            (
                n.child("attention").unwrap(),
                n.child("intermediate").unwrap(),
                o.child("dense").unwrap(),
                o.child("LayerNorm").unwrap(),
            )
        };
        let attended = run_forward(&attention, ctx, input)?;
        let hidden = run_forward(&intermediate, ctx, &attended)?;
        let projected = run_forward(&out_dense, ctx, &hidden)?;
        let residual = projected.add(&attended)?;
        run_forward(&out_ln, ctx, &residual)
    }
}

/// Runs the children of a named list child in registration order.
struct SequentialOver {
    list_child: &'static str,
}

impl Behavior for SequentialOver {
    fn forward(&self, node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let list = node.borrow().child(self.list_child).unwrap();
        let entries: Vec<NodeRef> = list.borrow().children().iter().map(|(_, c)| c.clone()).collect();
        let mut h = input.clone();
        for entry in entries {
            h = run_forward(&entry, ctx, &h)?;
        }
        Ok(h)
    }
}

/// First-token pooler: dense + tanh over position 0.
struct Pooler;

impl Behavior for Pooler {
    fn forward(&self, node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let dense = node.borrow().child("dense").unwrap();
        let first = input.take_row(0)?;
        Ok(run_forward(&dense, ctx, &first)?.tanh())
    }
}

struct ModelA;

impl Behavior for ModelA {
    fn forward(&self, node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let (embeddings, encoder, pooler, classifier) = {
            let n = node.borrow();
            (
                n.child("embeddings").unwrap(),
                n.child("encoder").unwrap(),
                n.child("pooler").unwrap(),
                n.child("classifier").unwrap(),
            )
        };
        let embedded = run_forward(&embeddings, ctx, input)?;
        let encoded = run_forward(&encoder, ctx, &embedded)?;
        let pooled = run_forward(&pooler, ctx, &encoded)?;
        run_forward(&classifier, ctx, &pooled)
    }
}

/// T5-style self-attention container: projections, heads, output projection.
struct SelfAttentionB {
    n_heads: usize,
}

impl Behavior for SelfAttentionB {
    fn forward(&self, node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let (q_node, k_node, v_node, o_node) = {
            let n = node.borrow();
            (
                n.child("q").unwrap(),
                n.child("k").unwrap(),
                n.child("v").unwrap(),
                n.child("o").unwrap(),
            )
        };
        let q = run_forward(&q_node, ctx, input)?;
        let k = run_forward(&k_node, ctx, input)?;
        let v = run_forward(&v_node, ctx, input)?;
        let mixed = multi_head_attention(ctx, &q, &k, &v, self.n_heads)?;
        run_forward(&o_node, ctx, &mixed)
    }
}

/// Pre-norm residual sub-layer around a named inner child.
struct PreNormResidual {
    inner: &'static str,
}

impl Behavior for PreNormResidual {
    fn forward(&self, node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let (norm, inner) = {
            let n = node.borrow();
            (n.child("layer_norm").unwrap(), n.child(self.inner).unwrap())
        };
        let normed = run_forward(&norm, ctx, input)?;
        let transformed = run_forward(&inner, ctx, &normed)?;
        transformed.add(input)
    }
}

struct DenseReluDenseB;

impl Behavior for DenseReluDenseB {
    fn forward(&self, node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let (wi, wo) = {
            let n = node.borrow();
            (n.child("wi").unwrap(), n.child("wo").unwrap())
        };
        let hidden = run_forward(&wi, ctx, input)?.relu();
        run_forward(&wo, ctx, &hidden)
    }
}

struct BlockB;

impl Behavior for BlockB {
    fn forward(&self, node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let (attn, ffn) = {
            let n = node.borrow();
            let layer = n.child("layer").unwrap();
            let l = layer.borrow();
            (l.child("0").unwrap(), l.child("1").unwrap())
        };
        let h = run_forward(&attn, ctx, input)?;
        run_forward(&ffn, ctx, &h)
    }
}

struct ModelB;

impl Behavior for ModelB {
    fn forward(&self, node: &NodeRef, ctx: &ForwardCtx, input: &Tensor) -> Result<Tensor> {
        let (shared, pos, encoder, final_ln, pooler, classifier) = {
            let n = node.borrow();
            (
                n.child("shared").unwrap().borrow().param("weight").unwrap(),
                n.child("pos_embedding").unwrap().borrow().param("weight").unwrap(),
                n.child("encoder").unwrap(),
                n.child("final_layer_norm").unwrap(),
                n.child("pooler").unwrap(),
                n.child("classifier").unwrap(),
            )
        };
        let (ids, batch, seq) = ids_from_tensor(input)?;
        let tok = embedding_lookup(&shared, &ids, &[batch, seq])?;
        let positions: Vec<usize> = (0..seq).collect();
        let pos_rows = embedding_lookup(&pos, &positions, &[seq])?;
        let mut h = tok.add(&pos_rows)?;
        h = run_forward(&encoder, ctx, &h)?;
        h = run_forward(&final_ln, ctx, &h)?;
        let pooled = run_forward(&pooler, ctx, &h)?;
        run_forward(&classifier, ctx, &pooled)
    }
}

// ── construction ─────────────────────────────────────────────────────

fn uniform_data(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-0.1, 0.1)).collect()
}

fn linear_node(
    rng: &mut SplitMix64,
    name: &str,
    d_in: usize,
    d_out: usize,
    role: NodeRole,
) -> Result<NodeRef> {
    let node = ModuleNode::new(name, Rc::new(Linear { role }))?;
    add_param(
        &node,
        "weight",
        Tensor::param(vec![d_in, d_out], uniform_data(rng, d_in * d_out))?,
    )?;
    add_param(&node, "bias", Tensor::param(vec![d_out], vec![0.0; d_out])?)?;
    Ok(node)
}

fn layer_norm_leaf(name: &str, d: usize) -> Result<NodeRef> {
    let node = ModuleNode::new(name, Rc::new(LayerNormNode))?;
    add_param(&node, "weight", Tensor::param(vec![d], vec![1.0; d])?)?;
    add_param(&node, "bias", Tensor::param(vec![d], vec![0.0; d])?)?;
    Ok(node)
}

fn embedding_leaf(rng: &mut SplitMix64, name: &str, rows: usize, d: usize) -> Result<NodeRef> {
    let node = ModuleNode::new(name, Rc::new(Namespace))?;
    add_param(
        &node,
        "weight",
        Tensor::param(vec![rows, d], uniform_data(rng, rows * d))?,
    )?;
    Ok(node)
}

fn build_a(config: &ToyformerConfig) -> Result<NodeRef> {
    let mut rng = SplitMix64::new(config.seed);
    let d = config.d_model;
    let root = ModuleNode::new_root(Rc::new(ModelA));

    let embeddings = ModuleNode::new("embeddings", Rc::new(EmbeddingsA))?;
    add_child(&embeddings, embedding_leaf(&mut rng, "word_embeddings", config.vocab, d)?)?;
    add_child(&embeddings, embedding_leaf(&mut rng, "position_embeddings", config.max_len, d)?)?;
    add_child(&embeddings, layer_norm_leaf("LayerNorm", d)?)?;
    add_child(&root, embeddings)?;

    let encoder = ModuleNode::new("encoder", Rc::new(SequentialOver { list_child: "layer" }))?;
    let layer_list = ModuleNode::new("layer", Rc::new(Namespace))?;
    for i in 0..config.n_layers {
        let layer = ModuleNode::new(&i.to_string(), Rc::new(LayerA))?;

        let attention = ModuleNode::new("attention", Rc::new(AttentionA { n_heads: config.n_heads }))?;
        let self_holder = ModuleNode::new("self", Rc::new(Namespace))?;
        add_child(&self_holder, linear_node(&mut rng, "query", d, d, NodeRole::Generic)?)?;
        add_child(&self_holder, linear_node(&mut rng, "key", d, d, NodeRole::AttentionKey)?)?;
        add_child(&self_holder, linear_node(&mut rng, "value", d, d, NodeRole::AttentionValue)?)?;
        add_child(&attention, self_holder)?;
        let attn_output = ModuleNode::new("output", Rc::new(Namespace))?;
        add_child(&attn_output, linear_node(&mut rng, "dense", d, d, NodeRole::Generic)?)?;
        add_child(&attn_output, layer_norm_leaf("LayerNorm", d)?)?;
        add_child(&attention, attn_output)?;
        add_child(&layer, attention)?;

        let intermediate = ModuleNode::new("intermediate", Rc::new(FfnIntermediateA))?;
        add_child(&intermediate, linear_node(&mut rng, "dense", d, config.d_ff, NodeRole::Generic)?)?;
        add_child(&layer, intermediate)?;

        let ffn_output = ModuleNode::new("output", Rc::new(Namespace))?;
        add_child(&ffn_output, linear_node(&mut rng, "dense", config.d_ff, d, NodeRole::Generic)?)?;
        add_child(&ffn_output, layer_norm_leaf("LayerNorm", d)?)?;
        add_child(&layer, ffn_output)?;

        add_child(&layer_list, layer)?;
    }
    add_child(&encoder, layer_list)?;
    add_child(&root, encoder)?;

    let pooler = ModuleNode::new("pooler", Rc::new(Pooler))?;
    add_child(&pooler, linear_node(&mut rng, "dense", d, d, NodeRole::Generic)?)?;
    add_child(&root, pooler)?;

    add_child(&root, linear_node(&mut rng, "classifier", d, config.n_classes, NodeRole::Generic)?)?;
    Ok(root)
}

fn build_b(config: &ToyformerConfig) -> Result<NodeRef> {
    let mut rng = SplitMix64::new(config.seed);
    let d = config.d_model;
    let root = ModuleNode::new_root(Rc::new(ModelB));

    add_child(&root, embedding_leaf(&mut rng, "shared", config.vocab, d)?)?;
    add_child(&root, embedding_leaf(&mut rng, "pos_embedding", config.max_len, d)?)?;

    let encoder = ModuleNode::new("encoder", Rc::new(SequentialOver { list_child: "block" }))?;
    let block_list = ModuleNode::new("block", Rc::new(Namespace))?;
    for i in 0..config.n_layers {
        let block = ModuleNode::new(&i.to_string(), Rc::new(BlockB))?;
        let layer = ModuleNode::new("layer", Rc::new(Namespace))?;

        let attn_sub = ModuleNode::new("0", Rc::new(PreNormResidual { inner: "SelfAttention" }))?;
        let self_attn = ModuleNode::new("SelfAttention", Rc::new(SelfAttentionB { n_heads: config.n_heads }))?;
        add_child(&self_attn, linear_node(&mut rng, "q", d, d, NodeRole::Generic)?)?;
        add_child(&self_attn, linear_node(&mut rng, "k", d, d, NodeRole::AttentionKey)?)?;
        add_child(&self_attn, linear_node(&mut rng, "v", d, d, NodeRole::AttentionValue)?)?;
        add_child(&self_attn, linear_node(&mut rng, "o", d, d, NodeRole::Generic)?)?;
        add_child(&attn_sub, self_attn)?;
        add_child(&attn_sub, layer_norm_leaf("layer_norm", d)?)?;
        add_child(&layer, attn_sub)?;

        let ffn_sub = ModuleNode::new("1", Rc::new(PreNormResidual { inner: "DenseReluDense" }))?;
        let dense_block = ModuleNode::new("DenseReluDense", Rc::new(DenseReluDenseB))?;
        add_child(&dense_block, linear_node(&mut rng, "wi", d, config.d_ff, NodeRole::Generic)?)?;
        add_child(&dense_block, linear_node(&mut rng, "wo", config.d_ff, d, NodeRole::Generic)?)?;
        add_child(&ffn_sub, dense_block)?;
        add_child(&ffn_sub, layer_norm_leaf("layer_norm", d)?)?;
        add_child(&layer, ffn_sub)?;

        add_child(&block, layer)?;
        add_child(&block_list, block)?;
    }
    add_child(&encoder, block_list)?;
    add_child(&root, encoder)?;

    add_child(&root, layer_norm_leaf("final_layer_norm", d)?)?;

    let pooler = ModuleNode::new("pooler", Rc::new(Pooler))?;
    add_child(&pooler, linear_node(&mut rng, "dense", d, d, NodeRole::Generic)?)?;
    add_child(&root, pooler)?;

    add_child(&root, linear_node(&mut rng, "classifier", d, config.n_classes, NodeRole::Generic)?)?;
    Ok(root)
}

/// Builds a full encoder under the given naming convention. Weight matrices
/// draw from a seeded generator; biases start at zero, layer-norm gains at
/// one, so the same config and seed always reproduce the same parameters.
pub fn build_toyformer(config: &ToyformerConfig, convention: NamingConvention) -> Result<NodeRef> {
    config.validate()?;
    let root = match convention {
        NamingConvention::A => build_a(config)?,
        NamingConvention::B => build_b(config)?,
    };
    {
        let mut r = root.borrow_mut();
        r.set_annotation(ANNOTATION_CONVENTION, convention.id());
        r.set_annotation(ANNOTATION_SEED, &config.seed.to_string());
    }
    Ok(root)
}

/// Runs the encoder on a batch of token id rows. Attention scores at padded
/// key positions are masked before softmax; the pooler reads position 0.
pub fn forward(model: &NodeRef, token_ids: &[Vec<usize>], pad_mask: &[Vec<bool>]) -> Result<Tensor> {
    let batch = token_ids.len();
    let seq = token_ids.first().map_or(0, Vec::len);
    if pad_mask.len() != batch {
        return Err(Error::Contract(format!(
            "pad mask batch {} != token batch {batch}",
            pad_mask.len()
        )));
    }
    let mut flat = Vec::with_capacity(batch * seq);
    for (row, mask_row) in token_ids.iter().zip(pad_mask) {
        if row.len() != seq || mask_row.len() != seq {
            return Err(Error::Contract("ragged token or mask rows".into()));
        }
        flat.extend(row.iter().map(|&id| id as f64));
    }
    let ids = Tensor::new(vec![batch, seq], flat)?;
    let ctx = ForwardCtx::with_mask(pad_mask.to_vec());
    run_forward(model, &ctx, &ids)
}

/// Convenience for fully visible inputs.
pub fn forward_unpadded(model: &NodeRef, token_ids: &[Vec<usize>]) -> Result<Tensor> {
    let mask: Vec<Vec<bool>> = token_ids.iter().map(|r| vec![true; r.len()]).collect();
    forward(model, token_ids, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::{enumerate_paths, resolve, AddressPattern};
    use crate::modtree::{get_by_path, named_parameters, param_count, snapshot};

    fn toy_a() -> NodeRef {
        build_toyformer(&ToyformerConfig::default(), NamingConvention::A).unwrap()
    }

    fn toy_b() -> NodeRef {
        build_toyformer(&ToyformerConfig::default(), NamingConvention::B).unwrap()
    }

    fn sample_batch() -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
        let ids = vec![vec![1, 2, 3, 4, 5, 6], vec![7, 8, 9, 10, 0, 0]];
        let mask = vec![vec![true; 6], vec![true, true, true, true, false, false]];
        (ids, mask)
    }

    #[test]
    fn config_validation() {
        let uneven_heads = ToyformerConfig { n_heads: 5, ..Default::default() };
        assert!(matches!(
            build_toyformer(&uneven_heads, NamingConvention::A),
            Err(Error::Config(_))
        ));
        let no_layers = ToyformerConfig { n_layers: 0, ..Default::default() };
        assert!(no_layers.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let snap1 = snapshot(&toy_a(), false);
        let snap2 = snapshot(&toy_a(), false);
        assert_eq!(snap1, snap2);
    }

    #[test]
    fn expected_paths_exist_per_convention() {
        let a_paths = enumerate_paths(&toy_a());
        assert!(a_paths.contains(&"encoder.layer.0.attention.self.query".to_string()));
        assert!(a_paths.contains(&"encoder.layer.1.output.dense".to_string()));
        let b_paths = enumerate_paths(&toy_b());
        assert!(b_paths.contains(&"encoder.block.0.layer.0.SelfAttention.q".to_string()));
        assert!(b_paths.contains(&"encoder.block.1.layer.1.DenseReluDense.wi".to_string()));
    }

    #[test]
    fn first_query_path_in_traversal_order() {
        let model = toy_a();
        let first_query = enumerate_paths(&model)
            .into_iter()
            .find(|p| p.ends_with("query"))
            .unwrap();
        assert_eq!(first_query, "encoder.layer.0.attention.self.query");
    }

    #[test]
    fn missing_layer_reports_longest_prefix() {
        let model = toy_a();
        match get_by_path(&model, "encoder.layer.9").unwrap_err() {
            Error::PathNotFound { prefix, .. } => assert_eq!(prefix, "encoder.layer"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn param_count_matches_shape_sum_oracle() {
        let config = ToyformerConfig::default();
        let (d, ff, v, ml, c, l) = (
            config.d_model,
            config.d_ff,
            config.vocab,
            config.max_len,
            config.n_classes,
            config.n_layers,
        );
        // independent closed-form count
        let per_layer = 4 * (d * d + d)      // q, k, v, attention projection
            + 2 * d                          // attention layer norm
            + (d * ff + ff) + (ff * d + d)   // ffn linears
            + 2 * d; // ffn layer norm
        let expected = v * d + ml * d + 2 * d   // embeddings + embedding norm
            + l * per_layer
            + (d * d + d)                       // pooler
            + (d * c + c); // classifier
        assert_eq!(param_count(&toy_a()), expected);
        // sum over declared shapes agrees
        let shape_sum: usize = named_parameters(&toy_a())
            .iter()
            .map(|(_, t)| t.shape().iter().product::<usize>())
            .sum();
        assert_eq!(shape_sum, expected);
    }

    #[test]
    fn conventions_have_equal_param_counts() {
        assert_eq!(param_count(&toy_a()), param_count(&toy_b()));
    }

    #[test]
    fn snapshot_load_transfers_forward_behavior_across_seeds() {
        use crate::modtree::{load_snapshot, snapshot};
        let source = toy_a();
        let (ids, mask) = sample_batch();
        let want = forward(&source, &ids, &mask).unwrap().to_vec();

        let other_config = ToyformerConfig { seed: 99, ..Default::default() };
        let target = build_toyformer(&other_config, NamingConvention::A).unwrap();
        assert_ne!(forward(&target, &ids, &mask).unwrap().to_vec(), want);

        let report = load_snapshot(&target, &snapshot(&source, false), true).unwrap();
        assert!(report.missing.is_empty() && report.unexpected.is_empty());
        let got = forward(&target, &ids, &mask).unwrap().to_vec();
        assert_eq!(got, want);
    }

    #[test]
    fn paths_are_unique_and_stable_across_rebuilds() {
        for model in [toy_a(), toy_b()] {
            let paths = enumerate_paths(&model);
            let unique: std::collections::HashSet<&String> = paths.iter().collect();
            assert_eq!(unique.len(), paths.len());
        }
        assert_eq!(enumerate_paths(&toy_a()), enumerate_paths(&toy_a()));
    }

    #[test]
    fn attention_projection_tails_differ_between_conventions() {
        let a_tails: Vec<String> = enumerate_paths(&toy_a())
            .into_iter()
            .filter(|p| p.contains("attention.self."))
            .map(|p| p.rsplit('.').next().unwrap().to_string())
            .collect();
        let b_tails: Vec<String> = enumerate_paths(&toy_b())
            .into_iter()
            .filter(|p| p.contains("SelfAttention."))
            .map(|p| p.rsplit('.').next().unwrap().to_string())
            .collect();
        assert!(a_tails.iter().all(|t| !b_tails.contains(t)));
    }

    #[test]
    fn fig2_patterns_resolve_to_six_paths_on_two_layer_a() {
        let model = toy_a();
        let patterns = [
            AddressPattern::parse("output.dense").unwrap(),
            AddressPattern::parse("query").unwrap(),
        ];
        let res = resolve(&model, &patterns);
        assert_eq!(res.union.len(), 6, "{:?}", res.union);
        for expected in [
            "encoder.layer.0.attention.output.dense",
            "encoder.layer.0.attention.self.query",
            "encoder.layer.0.output.dense",
            "encoder.layer.1.attention.output.dense",
            "encoder.layer.1.attention.self.query",
            "encoder.layer.1.output.dense",
        ] {
            assert!(res.union.iter().any(|p| p == expected), "missing {expected}");
        }
    }

    #[test]
    fn attention_tail_matches_each_layer_attention_node_only() {
        let model = toy_a();
        let res = resolve(&model, &[AddressPattern::parse("attention").unwrap()]);
        assert_eq!(
            res.union,
            vec!["encoder.layer.0.attention", "encoder.layer.1.attention"]
        );
    }

    #[test]
    fn forward_is_pure_and_batch_independent() {
        let model = toy_a();
        let (ids, mask) = sample_batch();
        let out1 = forward(&model, &ids, &mask).unwrap();
        let out2 = forward(&model, &ids, &mask).unwrap();
        assert_eq!(out1.to_vec(), out2.to_vec());
        assert_eq!(out1.shape(), &[2, 2]);

        // identical rows produce identical logits
        let twin = vec![ids[0].clone(), ids[0].clone()];
        let twin_mask = vec![mask[0].clone(), mask[0].clone()];
        let out = forward(&model, &twin, &twin_mask).unwrap();
        let data = out.to_vec();
        assert_eq!(data[0..2], data[2..4]);

        // permuting the batch permutes the logits identically
        let swapped_ids = vec![ids[1].clone(), ids[0].clone()];
        let swapped_mask = vec![mask[1].clone(), mask[0].clone()];
        let swapped = forward(&model, &swapped_ids, &swapped_mask).unwrap().to_vec();
        let orig = forward(&model, &ids, &mask).unwrap().to_vec();
        assert_eq!(&swapped[0..2], &orig[2..4]);
        assert_eq!(&swapped[2..4], &orig[0..2]);
    }

    #[test]
    fn padded_positions_do_not_influence_logits() {
        let model = toy_b();
        let mask = vec![vec![true, true, true, false]];
        let a = forward(&model, &[vec![1, 2, 3, 4]], &mask).unwrap();
        let b = forward(&model, &[vec![1, 2, 3, 9]], &mask).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn id_and_length_violations_are_index_errors() {
        let model = toy_a();
        let err = forward_unpadded(&model, &[vec![64, 0, 0, 0]]).unwrap_err();
        assert!(matches!(err, Error::Index { value: 64, .. }));
        let too_long: Vec<usize> = vec![0; 17];
        assert!(matches!(
            forward_unpadded(&model, &[too_long]).unwrap_err(),
            Error::Index { .. }
        ));
    }

    #[test]
    fn forward_ignores_requires_grad_flags() {
        let model = toy_a();
        let (ids, mask) = sample_batch();
        let before = forward(&model, &ids, &mask).unwrap().to_vec();
        let flags: Vec<bool> = named_parameters(&model)
            .iter()
            .map(|(_, t)| t.requires_grad())
            .collect();
        crate::modtree::set_trainable(&model, false, &[]);
        let frozen = forward(&model, &ids, &mask).unwrap().to_vec();
        assert_eq!(before, frozen);
        // flags were all flipped by set_trainable, not by forward
        assert!(flags.iter().all(|&f| f));
        assert!(named_parameters(&model).iter().all(|(_, t)| !t.requires_grad()));
    }
}
