//! Dense retrieval scoring, the softmax triple loss, and fine-tuning with
//! the adapter freezing contract.
//!
//! Two bi-encoder flavors are supported: CLS inner products with separate
//! query/document parameter sets, and late-interaction MaxSim over
//! L2-normalized per-token vectors with one shared parameter set. Training
//! minimizes `log(1 + exp(s_neg − s_pos))` — the cross-entropy of a
//! two-way softmax over a (positive, negative) passage pair — and freezes
//! everything except the parts the selected mode is allowed to touch.

use std::io::{BufRead, Write as _};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::Side;
use crate::corpus::{Document, Query, TripleRef};
use crate::encoder::mask_bias_row;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{BiEncoderModel, Variant};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::pipeline::{
    frame_sequence, segment_passages, DOC_LEN, PASSAGE_STRIDE, PASSAGE_WINDOW, QUERY_LEN,
};
use crate::rng::stream;

/// Unnormalized inner product of two pooled CLS vectors.
pub fn score_dpr(q: &Array1<f64>, d: &Array1<f64>) -> Result<f64> {
    if q.len() != d.len() {
        return Err(Error::shape("score_dpr", &[q.len()], &[d.len()]));
    }
    Ok(q.dot(d))
}

/// MaxSim: sum over unmasked query tokens of the maximum inner product with
/// any unmasked document token.
pub fn score_colbert(
    q: &Array2<f64>,
    q_mask: &[bool],
    d: &Array2<f64>,
    d_mask: &[bool],
) -> Result<f64> {
    if q.ncols() != d.ncols() {
        return Err(Error::shape(
            "score_colbert",
            &[q.nrows(), q.ncols()],
            &[d.nrows(), d.ncols()],
        ));
    }
    if q_mask.len() != q.nrows() {
        return Err(Error::shape("score_colbert query mask", &[q.nrows()], &[q_mask.len()]));
    }
    if d_mask.len() != d.nrows() {
        return Err(Error::shape("score_colbert doc mask", &[d.nrows()], &[d_mask.len()]));
    }
    if !q_mask.iter().any(|&m| m) {
        return Err(Error::Config("empty query: every query position is masked".into()));
    }
    if !d_mask.iter().any(|&m| m) {
        return Err(Error::Config("empty document: every document position is masked".into()));
    }
    let mut total = 0.0;
    for (i, &qm) in q_mask.iter().enumerate() {
        if !qm {
            continue;
        }
        let qi = q.row(i);
        let mut best = f64::NEG_INFINITY;
        for (j, &dm) in d_mask.iter().enumerate() {
            if dm {
                best = best.max(qi.dot(&d.row(j)));
            }
        }
        total += best;
    }
    Ok(total)
}

/// Cross-entropy of `softmax([s_pos, s_neg])` against the positive:
/// `log(1 + exp(s_neg − s_pos))`, evaluated without overflow.
pub fn triple_loss(s_pos: f64, s_neg: f64) -> f64 {
    let x = s_neg - s_pos;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// One training example with fixed-length framed sequences.
#[derive(Debug, Clone)]
pub struct Triple {
    pub query_id: String,
    pub query: (Vec<usize>, Vec<bool>),
    pub positive: (Vec<usize>, Vec<bool>),
    pub negative: (Vec<usize>, Vec<bool>),
}

/// Resolve triple references against the query set and document collection,
/// framing queries to length 32 and the first passage of each document to
/// length 180.
pub fn materialize_triples(
    refs: &[TripleRef],
    queries: &[Query],
    docs: &[Document],
) -> Result<Vec<Triple>> {
    let query_map: std::collections::HashMap<&str, &Query> =
        queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let doc_map: std::collections::HashMap<&str, &Document> =
        docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();

    let first_passage = |id: &str| -> Result<(Vec<usize>, Vec<bool>)> {
        let doc = doc_map
            .get(id)
            .ok_or_else(|| Error::lookup("document", id, vec![]))?;
        let passages = segment_passages(&doc.token_ids, PASSAGE_WINDOW, PASSAGE_STRIDE)?;
        Ok(frame_sequence(&passages[0].tokens, DOC_LEN))
    };

    refs.iter()
        .map(|r| {
            let query = query_map
                .get(r.query_id.as_str())
                .ok_or_else(|| Error::lookup("query", &r.query_id, vec![]))?;
            Ok(Triple {
                query_id: r.query_id.clone(),
                query: frame_sequence(&query.token_ids, QUERY_LEN),
                positive: first_passage(&r.positive_doc)?,
                negative: first_passage(&r.negative_doc)?,
            })
        })
        .collect()
}

/// Which parameters fine-tuning may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Task adapters + poolers only; English language adapters installed on
    /// both sides, frozen.
    #[serde(rename = "adapter")]
    Adapter,
    /// The full fine-tuning baseline: backbone + poolers, no adapters at all.
    #[serde(rename = "fmft")]
    FullFineTune,
    /// Ablation: task adapters + poolers with empty language slots.
    #[serde(rename = "adapter-no-lang")]
    AdapterNoLang,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Adapter => "adapter",
            TrainMode::FullFineTune => "fmft",
            TrainMode::AdapterNoLang => "adapter-no-lang",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk(mode: TrainMode, seed: u64) -> Self {
        TrainConfig { mode, steps: 200, batch: 4, lr: 1e-3, seed }
    }
}

/// `(step, mean batch loss)` per training step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub points: Vec<(usize, f64)>,
}

impl LossTrace {
    fn decile(&self) -> usize {
        (self.points.len() / 10).max(1)
    }

    pub fn first_decile_mean(&self) -> f64 {
        let n = self.decile();
        self.points[..n].iter().map(|p| p.1).sum::<f64>() / n as f64
    }

    pub fn last_decile_mean(&self) -> f64 {
        let n = self.decile();
        self.points[self.points.len() - n..].iter().map(|p| p.1).sum::<f64>() / n as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,loss")?;
        for (step, loss) in &self.points {
            writeln!(f, "{step},{loss}")?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut points = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, ',');
            let bad = || Error::Format {
                path: format!("{}:{}", path.display(), i + 1),
                message: "expected 'step,loss'".into(),
            };
            let step = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let loss = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            points.push((step, loss));
        }
        Ok(LossTrace { points })
    }
}

/// Build the score node for one (query, passage) pair inside the training
/// graph; mirrors the array-side scoring functions exactly.
fn score_in_graph(
    g: &mut Graph,
    variant: Variant,
    q_pooled: NodeId,
    q_mask: &[bool],
    d_pooled: NodeId,
    d_mask: &[bool],
) -> Result<NodeId> {
    match variant {
        Variant::Dpr => {
            let dt = g.transpose(d_pooled);
            g.matmul(q_pooled, dt)
        }
        Variant::Colbert => {
            let dt = g.transpose(d_pooled);
            let sim = g.matmul(q_pooled, dt)?;
            let doc_bias = g.input(mask_bias_row(d_mask));
            let biased = g.add_row(sim, doc_bias)?;
            let maxes = g.row_max(biased);
            let q_row = Array2::from_shape_fn((1, q_mask.len()), |(_, j)| {
                if q_mask[j] {
                    1.0
                } else {
                    0.0
                }
            });
            let weights = g.input(q_row);
            g.matmul(weights, maxes)
        }
    }
}

/// Fine-tune a bi-encoder on (query, positive, negative) triples.
///
/// The mode decides what is trainable; everything else keeps bit-identical
/// values. Returns the per-step loss trace.
pub fn train_retrieval(
    model: &mut BiEncoderModel,
    triples: &[Triple],
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    if triples.is_empty() {
        return Err(Error::Config("no training triples".into()));
    }
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::Config("steps and batch must be positive".into()));
    }
    if cfg.lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }

    match cfg.mode {
        TrainMode::Adapter => {
            if model.task_reduction.is_none() {
                return Err(Error::Config(
                    "adapter training mode requires a model with task adapters".into(),
                ));
            }
            for side in [Side::Query, Side::Document] {
                model.install_language(side, "eng").map_err(|e| match e {
                    Error::Lookup { .. } => Error::Config(
                        "adapter training mode requires the 'eng' language adapters on both \
                         sides, but they are not in the catalog"
                            .into(),
                    ),
                    other => other,
                })?;
            }
        }
        TrainMode::FullFineTune => {
            if model.task_reduction.is_some() {
                return Err(Error::Config(
                    "full fine-tuning expects a model built without task adapters".into(),
                ));
            }
            model.clear_languages();
        }
        TrainMode::AdapterNoLang => {
            if model.task_reduction.is_none() {
                return Err(Error::Config(
                    "adapter training mode requires a model with task adapters".into(),
                ));
            }
            model.clear_languages();
        }
    }

    match cfg.mode {
        TrainMode::Adapter | TrainMode::AdapterNoLang => model
            .registry
            .set_trainable_where(|n| n.starts_with("task.") || n.starts_with("pooler.")),
        TrainMode::FullFineTune => model
            .registry
            .set_trainable_where(|n| n.starts_with("backbone.") || n.starts_with("pooler.")),
    }

    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut rng = stream(cfg.seed, "retrieval:order");
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let adam_cfg = AdamConfig::new(cfg.lr);
    let mut adam = AdamState::new();
    let mut points = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        model.registry.zero_grads();
        let mut g = Graph::new();
        let mut total: Option<NodeId> = None;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let triple = &triples[order[cursor]];
            cursor += 1;

            let (_, q_pooled, q_mask) =
                model.pooled_in_graph(&mut g, Side::Query, &triple.query.0, &triple.query.1)?;
            let (_, p_pooled, p_mask) = model.pooled_in_graph(
                &mut g,
                Side::Document,
                &triple.positive.0,
                &triple.positive.1,
            )?;
            let (_, n_pooled, n_mask) = model.pooled_in_graph(
                &mut g,
                Side::Document,
                &triple.negative.0,
                &triple.negative.1,
            )?;

            let s_pos = score_in_graph(&mut g, model.variant, q_pooled, &q_mask, p_pooled, &p_mask)?;
            let s_neg = score_in_graph(&mut g, model.variant, q_pooled, &q_mask, n_pooled, &n_mask)?;
            let neg_pos = g.scale(s_pos, -1.0);
            let margin = g.add(s_neg, neg_pos)?;
            let loss = g.softplus(margin);
            let contribution = g.scale(loss, 1.0 / cfg.batch as f64);
            total = Some(match total {
                None => contribution,
                Some(t) => g.add(t, contribution)?,
            });
        }
        let total = total.expect("batch is non-empty");
        let loss_value = g.value(total)[[0, 0]];
        g.backward(total, &mut model.registry)?;
        adam_step(&mut model.registry, &mut adam, &adam_cfg)?;
        points.push((step, loss_value));
    }
    Ok(LossTrace { points })
}
