//! Masked-language-model pretraining for the backbone and for per-language
//! adapters.
//!
//! Corruption follows the standard BERT recipe: 15% of content positions are
//! selected; of those, 80% become the mask token, 10% a random content
//! token, 10% stay unchanged, and all selected positions are predicted. The
//! prediction head is weight-tied to the token embedding and scores only the
//! content vocabulary, so a fresh model's loss starts at
//! `ln(vocab − reserved)`.
//!
//! Backbone pretraining trains everything (embeddings, encoder, head bias)
//! on documents from every language. Language-adapter pretraining then
//! freezes all of that and trains one bottleneck-adapter set per language on
//! that language's documents alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    init_adapter_set, AdapterCatalog, AdapterChain, AdapterMeta, AdapterRole, Side,
};
use crate::corpus::{Document, MASK, RESERVED};
use crate::encoder::{forward_tokens, init_backbone, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::LANGUAGE_REDUCTION;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::pipeline::frame_sequence;
use crate::rng::stream;
use crate::tensor::ParamRegistry;

/// Registry name of the tied prediction head's bias over the content vocabulary.
pub const MLM_BIAS: &str = "mlm.bias";

/// Fraction of corruptible positions selected for prediction.
pub const MASK_RATE: f64 = 0.15;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlmTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Full framed sequence length per training example.
    pub seq_len: usize,
    pub lr: f64,
    pub seed: u64,
}

impl MlmTrainConfig {
    /// Desk-scale budget for backbone pretraining.
    pub fn desk_backbone(seed: u64) -> Self {
        MlmTrainConfig { steps: 600, batch: 16, seq_len: 48, lr: 1e-3, seed }
    }

    /// Desk-scale budget for one language-adapter pretraining run.
    pub fn desk_adapter(seed: u64) -> Self {
        MlmTrainConfig { steps: 300, batch: 16, seq_len: 48, lr: 1e-3, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if self.seq_len < 8 {
            return Err(Error::Config(format!(
                "seq_len {} is too short for masked-prediction training",
                self.seq_len
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Corrupt a framed sequence for masked prediction. Only content tokens
/// (ids ≥ [`RESERVED`], mask true) are eligible. Returns the corrupted ids
/// and the selected positions; originals stay readable from `token_ids`.
pub fn mlm_mask(
    token_ids: &[usize],
    attention_mask: &[bool],
    rate: f64,
    vocab_size: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if token_ids.len() != attention_mask.len() {
        return Err(Error::shape(
            "mlm_mask",
            &[token_ids.len()],
            &[attention_mask.len()],
        ));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("mask rate {rate} outside [0,1]")));
    }
    let mut corrupted = token_ids.to_vec();
    let mut positions = Vec::new();
    for (i, (&id, &real)) in token_ids.iter().zip(attention_mask).enumerate() {
        if !real || id < RESERVED || rng.gen::<f64>() >= rate {
            continue;
        }
        positions.push(i);
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            corrupted[i] = MASK;
        } else if roll < 0.9 {
            corrupted[i] = rng.gen_range(RESERVED..vocab_size);
        }
        // Final 10%: keep the original token; the position is still predicted.
    }
    Ok((corrupted, positions))
}

/// Sample a training window from a document and frame it to `seq_len`.
fn sample_window(
    doc: &Document,
    seq_len: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<usize>, Vec<bool>) {
    let budget = seq_len - 2;
    let tokens = &doc.token_ids;
    let window = if tokens.len() <= budget {
        &tokens[..]
    } else {
        let start = rng.gen_range(0..=tokens.len() - budget);
        &tokens[start..start + budget]
    };
    frame_sequence(window, seq_len)
}

/// Masked-prediction loss for a batch of sequences, built inside `g`.
/// Logits are tied to the token embedding and restricted to the content
/// vocabulary; the loss is the mean cross-entropy over all selected
/// positions in the batch. Returns `None` if no position was selected.
fn batch_mlm_loss(
    g: &mut Graph,
    registry: &ParamRegistry,
    cfg: &EncoderConfig,
    chain: &AdapterChain,
    batch: &[(Vec<usize>, Vec<bool>, Vec<usize>, Vec<usize>)],
) -> Result<Option<NodeId>> {
    let total_targets: usize = batch.iter().map(|(_, _, _, p)| p.len()).sum();
    if total_targets == 0 {
        return Ok(None);
    }
    let embed_t = {
        let tok = g.param(registry, "backbone.embed.tok")?;
        g.transpose(tok)
    };
    let bias = g.param(registry, MLM_BIAS)?;
    let mut total: Option<NodeId> = None;
    for (corrupted, mask, originals, positions) in batch {
        if positions.is_empty() {
            continue;
        }
        let hidden = forward_tokens(g, registry, cfg, corrupted, mask, chain)?;
        let rows = g.gather(hidden, positions)?;
        let logits = g.matmul(rows, embed_t)?;
        let content = g.slice_cols(logits, RESERVED, cfg.vocab_size)?;
        let content = g.add_row(content, bias)?;
        let targets: Vec<usize> = positions.iter().map(|&p| originals[p] - RESERVED).collect();
        let ce = g.cross_entropy_rows(content, &targets)?;
        let weighted = g.scale(ce, positions.len() as f64 / total_targets as f64);
        total = Some(match total {
            None => weighted,
            Some(t) => g.add(t, weighted)?,
        });
    }
    Ok(total)
}

fn draw_batch(
    docs: &[&Document],
    cfg: &EncoderConfig,
    opts: &MlmTrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<(Vec<usize>, Vec<bool>, Vec<usize>, Vec<usize>)>> {
    let mut batch = Vec::with_capacity(opts.batch);
    for _ in 0..opts.batch {
        let doc = docs[rng.gen_range(0..docs.len())];
        let (ids, mask) = sample_window(doc, opts.seq_len, rng);
        let (corrupted, positions) = mlm_mask(&ids, &mask, MASK_RATE, cfg.vocab_size, rng)?;
        batch.push((corrupted, mask, ids, positions));
    }
    Ok(batch)
}

fn train_mlm(
    registry: &mut ParamRegistry,
    cfg: &EncoderConfig,
    chain: &AdapterChain,
    docs: &[&Document],
    opts: &MlmTrainConfig,
    label: &str,
) -> Result<Vec<(usize, f64)>> {
    let mut rng = stream(opts.seed, label);
    let adam_cfg = AdamConfig::new(opts.lr);
    let mut adam = AdamState::new();
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        registry.zero_grads();
        let mut g = Graph::new();
        let mut batch = draw_batch(docs, cfg, opts, &mut rng)?;
        let loss = loop {
            if let Some(node) = batch_mlm_loss(&mut g, registry, cfg, chain, &batch)? {
                break node;
            }
            // Vanishingly rare at the default rate, but a batch can select
            // zero positions; redraw rather than skip the step.
            batch = draw_batch(docs, cfg, opts, &mut rng)?;
        };
        let loss_value = g.value(loss)[[0, 0]];
        g.backward(loss, registry)?;
        adam_step(registry, &mut adam, &adam_cfg)?;
        trace.push((step, loss_value));
    }
    Ok(trace)
}

/// Average masked-prediction loss over `batches` freshly drawn batches,
/// without touching any parameter. Used for held-out comparisons.
pub fn eval_mlm_loss(
    registry: &ParamRegistry,
    cfg: &EncoderConfig,
    chain: &AdapterChain,
    docs: &[&Document],
    opts: &MlmTrainConfig,
    label: &str,
) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Config("no documents to evaluate on".into()));
    }
    let mut rng = stream(opts.seed, label);
    let batches = 4;
    let mut total = 0.0;
    let mut counted = 0;
    for _ in 0..batches {
        let batch = draw_batch(docs, cfg, opts, &mut rng)?;
        let mut g = Graph::new();
        if let Some(loss) = batch_mlm_loss(&mut g, registry, cfg, chain, &batch)? {
            total += g.value(loss)[[0, 0]];
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::State("no maskable positions in evaluation batches".into()));
    }
    Ok(total / counted as f64)
}

/// Result of a pretraining run: the updated registry lives with the caller;
/// this carries the loss trace.
pub type MlmTrace = Vec<(usize, f64)>;

/// Pretrain the backbone (plus tied head bias) on documents from every
/// language. Every parameter is trainable. Returns the fresh registry and
/// the per-step loss trace.
pub fn pretrain_backbone(
    cfg: &EncoderConfig,
    docs: &[&Document],
    opts: &MlmTrainConfig,
) -> Result<(ParamRegistry, MlmTrace)> {
    cfg.validate()?;
    opts.validate()?;
    if docs.is_empty() {
        return Err(Error::Config("no documents to pretrain on".into()));
    }
    let mut registry = ParamRegistry::new(cfg.seed);
    init_backbone(&mut registry, cfg)?;
    registry.add_zeros(MLM_BIAS, cfg.vocab_size - RESERVED)?;
    let chain = AdapterChain::empty(Side::Document, cfg.layers);
    let trace = train_mlm(&mut registry, cfg, &chain, docs, opts, "mlm:backbone")?;
    Ok((registry, trace))
}

/// Pretrain one language's adapter set on that language's documents, with
/// the backbone and head bias frozen bit-identically. The trained set is
/// written to the catalog directory.
pub fn pretrain_language_adapter(
    registry: &mut ParamRegistry,
    cfg: &EncoderConfig,
    tag: &str,
    docs: &[&Document],
    opts: &MlmTrainConfig,
    catalog_dir: &std::path::Path,
) -> Result<MlmTrace> {
    cfg.validate()?;
    opts.validate()?;
    if docs.is_empty() {
        return Err(Error::Config(format!("no documents for language '{tag}'")));
    }
    if docs.iter().any(|d| d.lang != tag) {
        return Err(Error::Config(format!(
            "adapter pretraining for '{tag}' received documents from another language"
        )));
    }
    let prefix = format!("lang.{tag}");
    let set = init_adapter_set(
        registry,
        &prefix,
        cfg.hidden,
        LANGUAGE_REDUCTION,
        cfg.layers,
        AdapterRole::Language,
        Some(tag),
    )?;
    let freeze_prefix = format!("{prefix}.");
    registry.set_trainable_where(|n| n.starts_with(&freeze_prefix));

    let chain = AdapterChain::empty(Side::Document, cfg.layers).with_language_set(set)?;
    let trace = train_mlm(registry, cfg, &chain, docs, opts, &format!("mlm:adapter:{tag}"))?;

    let meta = AdapterMeta {
        role: AdapterRole::Language,
        language_tag: Some(tag.to_string()),
        reduction_factor: LANGUAGE_REDUCTION,
        hidden: cfg.hidden,
        layers: cfg.layers,
    };
    AdapterCatalog::save_language_set(registry, catalog_dir, tag, &meta)?;
    Ok(trace)
}
