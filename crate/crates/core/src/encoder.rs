//! A miniature multi-layer transformer encoder with an adapter slot at the
//! end of every layer.
//!
//! Layer arrangement (post-norm):
//!
//! ```text
//! a   = LN1(x + MultiHeadAttention(x))        attention sublayer
//! f   = FFN(a)                                 the residual handed to adapters
//! h_l = LN2(f + a)                             normalized hidden state
//! out = h_l                                    if the layer's chain is empty
//!     = LN2(chain(h_l, f) + a)                 otherwise
//! ```
//!
//! The adapter chain consumes the normalized hidden state `h_l` together with
//! the pre-norm FFN output `f` as its shared residual, and the result is
//! re-normalized with the same LN2 parameters. A freshly initialized chain
//! returns `f` exactly (zero up-projections), so `out` collapses to
//! `LN2(f + a) = h_l`: inserting fresh adapters leaves every encoding
//! bit-for-bit unchanged, and an empty chain is the standard post-norm layer.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adapters::{chain_forward, AdapterChain};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::ParamRegistry;

/// Layer-norm epsilon used everywhere in the encoder.
pub const LN_EPS: f64 = 1e-12;

/// Additive attention bias for padded key positions. Large enough that
/// `exp(bias - max)` underflows to exactly 0.0, so masked keys get strictly
/// zero attention weight.
pub const MASK_BIAS: f64 = -1e30;

/// Registry name prefix for all backbone parameters.
pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale default: big enough to learn the retrieval behaviors,
    /// small enough that full experiments run in minutes on one core.
    pub fn desk(seed: u64) -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 64,
            heads: 4,
            ffn_dim: 128,
            vocab_size: 512,
            max_positions: 192,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of head count {}",
                self.hidden, self.heads
            )));
        }
        if self.max_positions < 180 {
            return Err(Error::Config(format!(
                "max_positions {} is below the document length 180",
                self.max_positions
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "layers, ffn_dim, and vocab_size must all be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Output of one encoding pass. `hidden` covers the leading `n` positions up
/// to and including the last unmasked one; trailing padded positions are
/// dropped after encoding since every consumer ignores them by contract.
#[derive(Debug, Clone)]
pub struct EncodedText {
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub hidden: Array2<f64>,
}

/// Register all backbone parameters (embeddings, attention, FFN, layer
/// norms) under [`BACKBONE_PREFIX`].
pub fn init_backbone(registry: &mut ParamRegistry, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    let h = cfg.hidden;
    registry.add_weight("backbone.embed.tok", cfg.vocab_size, h)?;
    registry.add_weight("backbone.embed.pos", cfg.max_positions, h)?;
    registry.add_ones("backbone.embed.ln.gamma", h)?;
    registry.add_zeros("backbone.embed.ln.beta", h)?;
    for l in 0..cfg.layers {
        let p = format!("backbone.layer.{l}");
        for proj in ["wq", "wk", "wv", "wo"] {
            registry.add_weight(&format!("{p}.attn.{proj}"), h, h)?;
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            registry.add_zeros(&format!("{p}.attn.{bias}"), h)?;
        }
        registry.add_ones(&format!("{p}.attn.ln.gamma"), h)?;
        registry.add_zeros(&format!("{p}.attn.ln.beta"), h)?;
        registry.add_weight(&format!("{p}.ffn.w1"), h, cfg.ffn_dim)?;
        registry.add_zeros(&format!("{p}.ffn.b1"), cfg.ffn_dim)?;
        registry.add_weight(&format!("{p}.ffn.w2"), cfg.ffn_dim, h)?;
        registry.add_zeros(&format!("{p}.ffn.b2"), h)?;
        registry.add_ones(&format!("{p}.ffn.ln.gamma"), h)?;
        registry.add_zeros(&format!("{p}.ffn.ln.beta"), h)?;
    }
    Ok(())
}

/// Sum of token and position embeddings for one sequence.
pub fn embed(
    g: &mut Graph,
    registry: &ParamRegistry,
    cfg: &EncoderConfig,
    token_ids: &[usize],
    positions: &[usize],
) -> Result<NodeId> {
    if token_ids.len() != positions.len() {
        return Err(Error::shape("embed", &[token_ids.len()], &[positions.len()]));
    }
    if token_ids.len() > cfg.max_positions {
        return Err(Error::Config(format!(
            "sequence length {} exceeds max_positions {}",
            token_ids.len(),
            cfg.max_positions
        )));
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Config(format!(
            "token id {bad} out of vocabulary range (vocab_size {})",
            cfg.vocab_size
        )));
    }
    if let Some(&bad) = positions.iter().find(|&&p| p >= cfg.max_positions) {
        return Err(Error::Config(format!(
            "position {bad} out of range (max_positions {})",
            cfg.max_positions
        )));
    }
    let tok_table = g.param(registry, "backbone.embed.tok")?;
    let pos_table = g.param(registry, "backbone.embed.pos")?;
    let tok = g.gather(tok_table, token_ids)?;
    let pos = g.gather(pos_table, positions)?;
    g.add(tok, pos)
}

/// Additive key-mask bias row: 0 for real positions, [`MASK_BIAS`] for pads.
pub fn mask_bias_row(mask: &[bool]) -> Array2<f64> {
    Array2::from_shape_fn((1, mask.len()), |(_, j)| if mask[j] { 0.0 } else { MASK_BIAS })
}

/// One transformer layer with the layer's adapter chain applied at the end.
pub fn encoder_layer(
    g: &mut Graph,
    registry: &ParamRegistry,
    cfg: &EncoderConfig,
    x: NodeId,
    layer: usize,
    chain: &AdapterChain,
    mask_bias: NodeId,
) -> Result<NodeId> {
    let p = format!("{BACKBONE_PREFIX}layer.{layer}");
    let dk = cfg.head_dim();

    let wq = g.param(registry, &format!("{p}.attn.wq"))?;
    let bq = g.param(registry, &format!("{p}.attn.bq"))?;
    let wk = g.param(registry, &format!("{p}.attn.wk"))?;
    let bk = g.param(registry, &format!("{p}.attn.bk"))?;
    let wv = g.param(registry, &format!("{p}.attn.wv"))?;
    let bv = g.param(registry, &format!("{p}.attn.bv"))?;
    let q = g.affine(x, wq, bq)?;
    let k = g.affine(x, wk, bk)?;
    let v = g.affine(x, wv, bv)?;

    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let (lo, hi) = (i * dk, (i + 1) * dk);
        let qi = g.slice_cols(q, lo, hi)?;
        let ki = g.slice_cols(k, lo, hi)?;
        let vi = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(ki);
        let scores = g.matmul(qi, kt)?;
        let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let masked = g.add_row(scaled, mask_bias)?;
        let probs = g.softmax_rows(masked);
        heads.push(g.matmul(probs, vi)?);
    }
    let ctx = g.concat_cols(&heads)?;
    let wo = g.param(registry, &format!("{p}.attn.wo"))?;
    let bo = g.param(registry, &format!("{p}.attn.bo"))?;
    let attn_out = g.affine(ctx, wo, bo)?;

    let ln1_g = g.param(registry, &format!("{p}.attn.ln.gamma"))?;
    let ln1_b = g.param(registry, &format!("{p}.attn.ln.beta"))?;
    let res1 = g.add(x, attn_out)?;
    let a = g.layer_norm(res1, ln1_g, ln1_b, LN_EPS)?;

    let w1 = g.param(registry, &format!("{p}.ffn.w1"))?;
    let b1 = g.param(registry, &format!("{p}.ffn.b1"))?;
    let w2 = g.param(registry, &format!("{p}.ffn.w2"))?;
    let b2 = g.param(registry, &format!("{p}.ffn.b2"))?;
    let mid = g.affine(a, w1, b1)?;
    let act = g.gelu(mid);
    let f = g.affine(act, w2, b2)?;

    let ln2_g = g.param(registry, &format!("{p}.ffn.ln.gamma"))?;
    let ln2_b = g.param(registry, &format!("{p}.ffn.ln.beta"))?;
    let res2 = g.add(f, a)?;
    let h_l = g.layer_norm(res2, ln2_g, ln2_b, LN_EPS)?;

    if chain.is_empty_at(layer) {
        return Ok(h_l);
    }
    let chained = chain_forward(g, registry, chain, layer, h_l, f)?;
    let res3 = g.add(chained, a)?;
    g.layer_norm(res3, ln2_g, ln2_b, LN_EPS)
}

/// Embed and run all layers for one sequence, applying `chain` at every
/// layer. Returns the final hidden state for the leading `n` positions up to
/// the last unmasked one; trailing pads are never computed (their outputs are
/// ignored by contract, and skipping them keeps encoding cost proportional to
/// real content).
pub fn forward_tokens(
    g: &mut Graph,
    registry: &ParamRegistry,
    cfg: &EncoderConfig,
    token_ids: &[usize],
    mask: &[bool],
    chain: &AdapterChain,
) -> Result<NodeId> {
    if token_ids.len() != mask.len() {
        return Err(Error::shape("forward_tokens", &[token_ids.len()], &[mask.len()]));
    }
    let n_eff = match mask.iter().rposition(|&m| m) {
        Some(last) => last + 1,
        None => {
            return Err(Error::Config(
                "attention mask has no unmasked positions".into(),
            ))
        }
    };
    if chain.layers() != cfg.layers {
        return Err(Error::shape("adapter chain depth", &[cfg.layers], &[chain.layers()]));
    }
    let ids = &token_ids[..n_eff];
    let mask = &mask[..n_eff];
    let positions: Vec<usize> = (0..n_eff).collect();

    let summed = embed(g, registry, cfg, ids, &positions)?;
    let ln_g = g.param(registry, "backbone.embed.ln.gamma")?;
    let ln_b = g.param(registry, "backbone.embed.ln.beta")?;
    let mut x = g.layer_norm(summed, ln_g, ln_b, LN_EPS)?;

    let bias = g.input(mask_bias_row(mask));
    for l in 0..cfg.layers {
        x = encoder_layer(g, registry, cfg, x, l, chain, bias)?;
    }
    Ok(x)
}
