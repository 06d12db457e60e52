//! Bi-encoder retrieval models over the shared frozen backbone.
//!
//! Two variants:
//!
//! * CLS models ("dpr"): separate query/document task adapter sets and
//!   separate `h → h` poolers applied to the CLS hidden state; scores are
//!   unnormalized inner products.
//! * Late-interaction models ("colbert"): one task adapter set and one
//!   `h → 128` pooler shared by both sides; every token is projected and
//!   L2-normalized, and scores sum per-query-token maxima.
//!
//! A model owns its [`ParamRegistry`]. Swapping a language adapter returns a
//! new model view so concurrent readers never observe a half-swapped chain.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::adapters::{
    adapter_set_handles, init_adapter_set, AdapterCatalog, AdapterChain, AdapterRole, Side,
};
use crate::checkpoint;
use crate::encoder::{forward_tokens, EncodedText, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::ParamRegistry;

/// Token-vector width of the late-interaction pooler.
pub const COLBERT_DIM: usize = 128;

/// Reduction factor of language adapters (fixed; task adapters are configurable).
pub const LANGUAGE_REDUCTION: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dpr,
    Colbert,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Dpr => write!(f, "dpr"),
            Variant::Colbert => write!(f, "colbert"),
        }
    }
}

/// Pooled representation consumed by the scoring functions.
#[derive(Debug, Clone, PartialEq)]
pub enum PooledRep {
    /// Projected CLS vector, length h.
    Cls(Array1<f64>),
    /// Projected, L2-normalized token vectors with their real-token mask.
    Tokens { vectors: Array2<f64>, mask: Vec<bool> },
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub text: EncodedText,
    pub rep: PooledRep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    cfg: EncoderConfig,
    variant: Variant,
    task_reduction: Option<usize>,
    loaded_tags: Vec<String>,
    query_lang: Option<String>,
    doc_lang: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BiEncoderModel {
    pub cfg: EncoderConfig,
    pub variant: Variant,
    /// `None` means no task adapters exist (full fine-tuning baseline).
    pub task_reduction: Option<usize>,
    pub registry: ParamRegistry,
    query_chain: AdapterChain,
    doc_chain: AdapterChain,
    loaded_tags: Vec<String>,
}

impl BiEncoderModel {
    /// Fresh model: backbone + (optionally) task adapters + poolers, no
    /// language adapters installed yet. With `task_reduction = None` the
    /// chains are empty and only backbone + poolers exist.
    pub fn new(cfg: EncoderConfig, variant: Variant, task_reduction: Option<usize>) -> Result<Self> {
        cfg.validate()?;
        let mut registry = ParamRegistry::new(cfg.seed);
        crate::encoder::init_backbone(&mut registry, &cfg)?;

        let mut query_chain = AdapterChain::empty(Side::Query, cfg.layers);
        let mut doc_chain = AdapterChain::empty(Side::Document, cfg.layers);

        if let Some(r) = task_reduction {
            match variant {
                Variant::Dpr => {
                    let q = init_adapter_set(&mut registry, "task.query", cfg.hidden, r, cfg.layers, AdapterRole::Task, None)?;
                    let d = init_adapter_set(&mut registry, "task.doc", cfg.hidden, r, cfg.layers, AdapterRole::Task, None)?;
                    query_chain = query_chain.with_task_set(q)?;
                    doc_chain = doc_chain.with_task_set(d)?;
                }
                Variant::Colbert => {
                    let shared = init_adapter_set(&mut registry, "task.shared", cfg.hidden, r, cfg.layers, AdapterRole::Task, None)?;
                    query_chain = query_chain.with_task_set(shared.clone())?;
                    doc_chain = doc_chain.with_task_set(shared)?;
                }
            }
        }

        match variant {
            Variant::Dpr => {
                registry.add_weight("pooler.query.w", cfg.hidden, cfg.hidden)?;
                registry.add_zeros("pooler.query.b", cfg.hidden)?;
                registry.add_weight("pooler.doc.w", cfg.hidden, cfg.hidden)?;
                registry.add_zeros("pooler.doc.b", cfg.hidden)?;
            }
            Variant::Colbert => {
                registry.add_weight("pooler.shared.w", cfg.hidden, COLBERT_DIM)?;
                registry.add_zeros("pooler.shared.b", COLBERT_DIM)?;
            }
        }

        Ok(BiEncoderModel {
            cfg,
            variant,
            task_reduction,
            registry,
            query_chain,
            doc_chain,
            loaded_tags: Vec::new(),
        })
    }

    /// Overwrite backbone parameters from a pretraining checkpoint.
    pub fn load_backbone(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.registry.restore_records(checkpoint::load(path)?)
    }

    /// Load trained language adapter sets from a catalog directory into the
    /// registry, making their tags available to [`Self::with_language`].
    pub fn load_language_adapters(&mut self, catalog_dir: &Path, tags: &[&str]) -> Result<()> {
        for tag in tags {
            if self.loaded_tags.iter().any(|t| t == tag) {
                continue;
            }
            AdapterCatalog::load_language_set(&mut self.registry, catalog_dir, tag)?;
            self.loaded_tags.push(tag.to_string());
        }
        Ok(())
    }

    pub fn loaded_tags(&self) -> &[String] {
        &self.loaded_tags
    }

    fn language_handles(&self, tag: &str) -> Result<Vec<crate::adapters::Adapter>> {
        if !self.loaded_tags.iter().any(|t| t == tag) {
            return Err(Error::lookup("language adapter", tag, self.loaded_tags.clone()));
        }
        Ok(adapter_set_handles(
            &format!("lang.{tag}"),
            self.cfg.hidden,
            LANGUAGE_REDUCTION,
            self.cfg.layers,
            AdapterRole::Language,
            Some(tag),
        ))
    }

    /// New model view with the given side's language adapters swapped to
    /// `tag`. Backbone, task adapters, and the other side are untouched.
    pub fn with_language(&self, side: Side, tag: &str) -> Result<Self> {
        let handles = self.language_handles(tag)?;
        let mut out = self.clone();
        match side {
            Side::Query => out.query_chain.set_language_set(handles)?,
            Side::Document => out.doc_chain.set_language_set(handles)?,
        }
        Ok(out)
    }

    /// New model view with no language adapter on either side (the
    /// no-language-adapter ablation and the full fine-tuning baseline).
    pub fn without_languages(&self) -> Self {
        let mut out = self.clone();
        out.query_chain.clear_language_set();
        out.doc_chain.clear_language_set();
        out
    }

    /// Install a loaded language adapter set in place. Training uses this
    /// rather than [`with_language`](Self::with_language) so updates land in
    /// the owned registry instead of a clone.
    pub fn install_language(&mut self, side: Side, tag: &str) -> Result<()> {
        let handles = self.language_handles(tag)?;
        match side {
            Side::Query => self.query_chain.set_language_set(handles),
            Side::Document => self.doc_chain.set_language_set(handles),
        }
    }

    /// Remove language adapters from both sides in place.
    pub fn clear_languages(&mut self) {
        self.query_chain.clear_language_set();
        self.doc_chain.clear_language_set();
    }

    pub fn chain(&self, side: Side) -> &AdapterChain {
        match side {
            Side::Query => &self.query_chain,
            Side::Document => &self.doc_chain,
        }
    }

    pub fn language_tag(&self, side: Side) -> Option<&str> {
        self.chain(side).language_tag()
    }

    /// Run the encoder and pooler for one sequence inside an existing graph.
    /// Returns (final hidden node, pooled node, real-token mask truncated to
    /// the encoded length). Shared by training (which differentiates through
    /// it) and inference (which just reads values).
    pub fn pooled_in_graph(
        &self,
        g: &mut Graph,
        side: Side,
        token_ids: &[usize],
        mask: &[bool],
    ) -> Result<(NodeId, NodeId, Vec<bool>)> {
        let hidden = forward_tokens(g, &self.registry, &self.cfg, token_ids, mask, self.chain(side))?;
        let n_eff = g.value(hidden).nrows();
        let eff_mask = mask[..n_eff].to_vec();
        let pooled = match self.variant {
            Variant::Dpr => {
                let prefix = match side {
                    Side::Query => "pooler.query",
                    Side::Document => "pooler.doc",
                };
                let w = g.param(&self.registry, &format!("{prefix}.w"))?;
                let b = g.param(&self.registry, &format!("{prefix}.b"))?;
                let cls = g.gather(hidden, &[0])?;
                g.affine(cls, w, b)?
            }
            Variant::Colbert => {
                let w = g.param(&self.registry, "pooler.shared.w")?;
                let b = g.param(&self.registry, "pooler.shared.b")?;
                let proj = g.affine(hidden, w, b)?;
                g.l2_normalize_rows(proj)
            }
        };
        Ok((hidden, pooled, eff_mask))
    }

    /// Encode one padded sequence for indexing or search.
    pub fn encode(&self, side: Side, token_ids: &[usize], mask: &[bool]) -> Result<Encoded> {
        let mut g = Graph::new();
        let (hidden, pooled, eff_mask) = self.pooled_in_graph(&mut g, side, token_ids, mask)?;
        let rep = match self.variant {
            Variant::Dpr => PooledRep::Cls(g.value(pooled).row(0).to_owned()),
            Variant::Colbert => PooledRep::Tokens {
                vectors: g.value(pooled).clone(),
                mask: eff_mask,
            },
        };
        Ok(Encoded {
            text: EncodedText {
                token_ids: token_ids.to_vec(),
                attention_mask: mask.to_vec(),
                hidden: g.value(hidden).clone(),
            },
            rep,
        })
    }

    /// Checksum of the entire registry; identifies the exact weights an index
    /// was built with.
    pub fn checksum(&self) -> String {
        self.registry.checksum()
    }

    pub fn backbone_checksum(&self) -> String {
        self.registry.checksum_where(|n| n.starts_with("backbone."))
    }

    pub fn language_checksum(&self, tag: &str) -> String {
        let prefix = format!("lang.{tag}.");
        self.registry.checksum_where(|n| n.starts_with(&prefix))
    }

    /// Checksum of one side's task adapter at one layer (for ColBERT the
    /// shared set, so the side is ignored).
    pub fn task_adapter_checksum(&self, side: Side, layer: usize) -> String {
        let stem = match self.variant {
            Variant::Dpr => match side {
                Side::Query => "task.query",
                Side::Document => "task.doc",
            },
            Variant::Colbert => "task.shared",
        };
        let prefix = format!("{stem}.layer.{layer}.");
        self.registry.checksum_where(|n| n.starts_with(&prefix))
    }

    /// Persist weights + metadata under `dir` (files `model.ckpt`,
    /// `model.json`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&self.registry, dir.join("model.ckpt"))?;
        let meta = ModelMeta {
            cfg: self.cfg.clone(),
            variant: self.variant,
            task_reduction: self.task_reduction,
            loaded_tags: self.loaded_tags.clone(),
            query_lang: self.language_tag(Side::Query).map(str::to_string),
            doc_lang: self.language_tag(Side::Document).map(str::to_string),
        };
        std::fs::write(
            dir.join("model.json"),
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("model.json");
        let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
            .map_err(|e| Error::Format {
                path: meta_path.display().to_string(),
                message: e.to_string(),
            })?;
        let mut model = BiEncoderModel::new(meta.cfg, meta.variant, meta.task_reduction)?;
        // Re-register language adapter slots so the checkpoint can restore
        // into them, then overwrite every value with the saved bytes.
        for tag in &meta.loaded_tags {
            init_adapter_set(
                &mut model.registry,
                &format!("lang.{tag}"),
                model.cfg.hidden,
                LANGUAGE_REDUCTION,
                model.cfg.layers,
                AdapterRole::Language,
                Some(tag),
            )?;
            model.loaded_tags.push(tag.clone());
        }
        model
            .registry
            .restore_records(checkpoint::load(dir.join("model.ckpt"))?)?;
        if let Some(tag) = &meta.query_lang {
            let handles = model.language_handles(tag)?;
            model.query_chain.set_language_set(handles)?;
        }
        if let Some(tag) = &meta.doc_lang {
            let handles = model.language_handles(tag)?;
            model.doc_chain.set_language_set(handles)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterMeta;

    fn tiny_cfg(seed: u64) -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab_size: 32,
            max_positions: 192,
            seed,
        }
    }

    const IDS: [usize; 4] = [1, 5, 9, 2];
    const MASK: [bool; 4] = [true, true, true, true];

    fn bits(rep: &PooledRep) -> Vec<u64> {
        match rep {
            PooledRep::Cls(v) => v.iter().map(|x| x.to_bits()).collect(),
            PooledRep::Tokens { vectors, .. } => vectors.iter().map(|x| x.to_bits()).collect(),
        }
    }

    #[test]
    fn dpr_sides_diverge_once_task_adapters_differ() {
        let model = {
            let mut m = BiEncoderModel::new(tiny_cfg(1), Variant::Dpr, Some(4)).unwrap();
            // Perturb only the query-side task adapter's up-projection.
            m.registry
                .get_mut("task.query.layer.0.up.w")
                .unwrap()
                .values_mut()
                .fill(0.3);
            m
        };
        let q = model.encode(Side::Query, &IDS, &MASK).unwrap();
        let d = model.encode(Side::Document, &IDS, &MASK).unwrap();
        assert_ne!(bits(&q.rep), bits(&d.rep));
    }

    #[test]
    fn colbert_sides_share_parameters_exactly() {
        let mut model = BiEncoderModel::new(tiny_cfg(2), Variant::Colbert, Some(4)).unwrap();
        model
            .registry
            .get_mut("task.shared.layer.1.up.w")
            .unwrap()
            .values_mut()
            .fill(-0.2);
        let q = model.encode(Side::Query, &IDS, &MASK).unwrap();
        let d = model.encode(Side::Document, &IDS, &MASK).unwrap();
        assert_eq!(bits(&q.rep), bits(&d.rep));
    }

    #[test]
    fn backbone_only_model_equals_plain_encoding() {
        let cfg = tiny_cfg(3);
        let model = BiEncoderModel::new(cfg.clone(), Variant::Dpr, None).unwrap();
        let enc = model.encode(Side::Document, &IDS, &MASK).unwrap();

        let mut g = Graph::new();
        let chain = AdapterChain::empty(Side::Document, cfg.layers);
        let out = forward_tokens(&mut g, &model.registry, &cfg, &IDS, &MASK, &chain).unwrap();
        assert_eq!(g.value(out), &enc.text.hidden);
    }

    #[test]
    fn colbert_rep_is_unit_norm_128_wide() {
        let model = BiEncoderModel::new(tiny_cfg(4), Variant::Colbert, Some(2)).unwrap();
        let enc = model.encode(Side::Query, &IDS, &MASK).unwrap();
        let PooledRep::Tokens { vectors, mask } = &enc.rep else {
            panic!("expected token rep")
        };
        assert_eq!(vectors.ncols(), COLBERT_DIM);
        assert_eq!(mask.len(), vectors.nrows());
        for row in vectors.rows() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    fn catalog_with_tags(dir: &Path, cfg: &EncoderConfig, tags: &[&str]) {
        for tag in tags {
            let mut reg = ParamRegistry::new(99);
            let set = init_adapter_set(
                &mut reg,
                &format!("lang.{tag}"),
                cfg.hidden,
                LANGUAGE_REDUCTION,
                cfg.layers,
                AdapterRole::Language,
                Some(tag),
            )
            .unwrap();
            // Make each language's adapters differ with certainty: positive
            // down-bias keeps every ReLU gate alive, and the up-projection
            // magnitude depends on the tag.
            for a in &set {
                reg.get_mut(&a.down_bias()).unwrap().values_mut().fill(0.6);
                reg.get_mut(&a.up_weight())
                    .unwrap()
                    .values_mut()
                    .fill(if *tag == "eng" { 0.1 } else { 0.25 });
            }
            AdapterCatalog::save_language_set(
                &reg,
                dir,
                tag,
                &AdapterMeta {
                    role: AdapterRole::Language,
                    language_tag: Some(tag.to_string()),
                    reduction_factor: LANGUAGE_REDUCTION,
                    hidden: cfg.hidden,
                    layers: cfg.layers,
                },
            )
            .unwrap();
        }
    }

    #[test]
    fn swap_is_idempotent_and_round_trips() {
        let cfg = tiny_cfg(5);
        let dir = tempfile::tempdir().unwrap();
        catalog_with_tags(dir.path(), &cfg, &["eng", "lng1"]);

        let mut model = BiEncoderModel::new(cfg, Variant::Colbert, Some(4)).unwrap();
        model.load_language_adapters(dir.path(), &["eng", "lng1"]).unwrap();
        let model = model.with_language(Side::Document, "eng").unwrap();
        let base = model.encode(Side::Document, &IDS, &MASK).unwrap();

        // Idempotent: swapping to the tag already installed changes nothing.
        let same = model.with_language(Side::Document, "eng").unwrap();
        assert_eq!(bits(&base.rep), bits(&same.encode(Side::Document, &IDS, &MASK).unwrap().rep));

        // Round trip: eng → lng1 → eng restores encodings bit-for-bit.
        let via = model
            .with_language(Side::Document, "lng1")
            .unwrap()
            .with_language(Side::Document, "eng")
            .unwrap();
        assert_eq!(bits(&base.rep), bits(&via.encode(Side::Document, &IDS, &MASK).unwrap().rep));
    }

    #[test]
    fn doc_side_swap_leaves_query_encodings_untouched() {
        let cfg = tiny_cfg(6);
        let dir = tempfile::tempdir().unwrap();
        catalog_with_tags(dir.path(), &cfg, &["eng", "lng1"]);

        let mut model = BiEncoderModel::new(cfg, Variant::Dpr, Some(4)).unwrap();
        model.load_language_adapters(dir.path(), &["eng", "lng1"]).unwrap();
        // A fresh (zero-up) task adapter maps any input to its residual, which
        // would hide the language swap entirely; nudge it off identity the way
        // training would (live gates, nonzero up-projection).
        model
            .registry
            .get_mut("task.doc.layer.0.down.b")
            .unwrap()
            .values_mut()
            .fill(0.6);
        model
            .registry
            .get_mut("task.doc.layer.0.up.w")
            .unwrap()
            .values_mut()
            .fill(0.2);
        let model = model
            .with_language(Side::Query, "eng")
            .unwrap()
            .with_language(Side::Document, "eng")
            .unwrap();

        let q_before = model.encode(Side::Query, &IDS, &MASK).unwrap();
        let d_before = model.encode(Side::Document, &IDS, &MASK).unwrap();

        let swapped = model.with_language(Side::Document, "lng1").unwrap();
        let q_after = swapped.encode(Side::Query, &IDS, &MASK).unwrap();
        let d_after = swapped.encode(Side::Document, &IDS, &MASK).unwrap();

        assert_eq!(bits(&q_before.rep), bits(&q_after.rep));
        assert_ne!(bits(&d_before.rep), bits(&d_after.rep));
    }

    #[test]
    fn unknown_tag_is_a_lookup_error_listing_choices() {
        let cfg = tiny_cfg(7);
        let dir = tempfile::tempdir().unwrap();
        catalog_with_tags(dir.path(), &cfg, &["eng"]);
        let mut model = BiEncoderModel::new(cfg, Variant::Dpr, Some(4)).unwrap();
        model.load_language_adapters(dir.path(), &["eng"]).unwrap();
        let err = model.with_language(Side::Query, "deu").unwrap_err().to_string();
        assert!(err.contains("deu") && err.contains("eng"), "{err}");
    }

    #[test]
    fn save_load_round_trip_preserves_encodings() {
        let cfg = tiny_cfg(8);
        let dir = tempfile::tempdir().unwrap();
        catalog_with_tags(dir.path(), &cfg, &["eng", "lng1"]);

        let mut model = BiEncoderModel::new(cfg, Variant::Colbert, Some(4)).unwrap();
        model.load_language_adapters(dir.path(), &["eng", "lng1"]).unwrap();
        let model = model
            .with_language(Side::Query, "eng")
            .unwrap()
            .with_language(Side::Document, "lng1")
            .unwrap();

        let model_dir = dir.path().join("model");
        model.save(&model_dir).unwrap();
        let restored = BiEncoderModel::load(&model_dir).unwrap();

        assert_eq!(model.checksum(), restored.checksum());
        assert_eq!(restored.language_tag(Side::Query), Some("eng"));
        assert_eq!(restored.language_tag(Side::Document), Some("lng1"));
        let a = model.encode(Side::Document, &IDS, &MASK).unwrap();
        let b = restored.encode(Side::Document, &IDS, &MASK).unwrap();
        assert_eq!(bits(&a.rep), bits(&b.rep));
    }
}
