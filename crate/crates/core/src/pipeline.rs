//! Sequence preparation, sliding-window passage segmentation, index
//! construction, and exhaustive MaxP search across the inference-condition
//! grid.
//!
//! Documents longer than one encoder window are split into overlapping
//! passages; every passage is encoded and stored, and at search time a
//! document scores the maximum over its passages. Indexes carry the exact
//! model checksum and inference condition they were built under, and search
//! refuses stale or incompatible combinations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write as _};
use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::Side;
use crate::corpus::{Document, Query, CLS, PAD, SEP};
use crate::error::{Error, Result};
use crate::model::{BiEncoderModel, PooledRep, Variant};
use crate::retrieval::{score_colbert, score_dpr};

/// Fixed encoder input length for queries.
pub const QUERY_LEN: usize = 32;
/// Fixed encoder input length for document passages.
pub const DOC_LEN: usize = 180;
/// Sliding-window width over raw document tokens.
pub const PASSAGE_WINDOW: usize = 180;
/// Sliding-window stride.
pub const PASSAGE_STRIDE: usize = 90;

/// Pad with `pad_id` or head-truncate to exactly `target_len`. The mask is
/// true on real tokens.
pub fn pad_or_truncate(
    token_ids: &[usize],
    target_len: usize,
    pad_id: usize,
) -> (Vec<usize>, Vec<bool>) {
    let keep = token_ids.len().min(target_len);
    let mut ids = token_ids[..keep].to_vec();
    ids.resize(target_len, pad_id);
    let mut mask = vec![true; keep];
    mask.resize(target_len, false);
    (ids, mask)
}

/// Wrap raw content tokens as `[CLS] content [SEP]` and pad or truncate the
/// content so the full sequence is exactly `target_len`. Both control tokens
/// always survive truncation.
pub fn frame_sequence(content: &[usize], target_len: usize) -> (Vec<usize>, Vec<bool>) {
    debug_assert!(target_len >= 2, "frame needs room for CLS and SEP");
    let keep = content.len().min(target_len - 2);
    let mut ids = Vec::with_capacity(target_len);
    ids.push(CLS);
    ids.extend_from_slice(&content[..keep]);
    ids.push(SEP);
    pad_or_truncate(&ids, target_len, PAD)
}

/// One sliding-window slice of a document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub passage_index: usize,
    /// Offset into the raw document tokens; a multiple of the stride.
    pub offset: usize,
    pub tokens: Vec<usize>,
}

/// Split raw document tokens into overlapping windows at offsets
/// `0, stride, 2·stride, …`, stopping after the first window whose end
/// reaches the end of the document. The final passage may be short.
pub fn segment_passages(
    doc_tokens: &[usize],
    window: usize,
    stride: usize,
) -> Result<Vec<Passage>> {
    if doc_tokens.is_empty() {
        return Err(Error::Config("cannot segment an empty document".into()));
    }
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::Config(format!(
            "invalid segmentation: window {window}, stride {stride}"
        )));
    }
    let mut passages = Vec::new();
    let mut offset = 0;
    loop {
        let end = (offset + window).min(doc_tokens.len());
        passages.push(Passage {
            passage_index: passages.len(),
            offset,
            tokens: doc_tokens[offset..end].to_vec(),
        });
        if offset + window >= doc_tokens.len() {
            return Ok(passages);
        }
        offset += stride;
    }
}

/// Document score = maximum over its passage scores.
pub fn maxp(passage_scores: &[f64]) -> Result<f64> {
    passage_scores
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
        .ok_or_else(|| Error::State("cannot aggregate an empty passage score list".into()))
}

/// Which language adapters are installed at inference time. `None` on a side
/// means no language adapter there (the ablation setting, and the only
/// option for the full fine-tuning baseline).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub query_side_lang: Option<String>,
    pub doc_side_lang: Option<String>,
}

impl Condition {
    pub fn new(query_side_lang: Option<&str>, doc_side_lang: Option<&str>) -> Self {
        Condition {
            query_side_lang: query_side_lang.map(str::to_string),
            doc_side_lang: doc_side_lang.map(str::to_string),
        }
    }
}

/// The standard inference-condition grid, named relative to the document
/// language under evaluation: English adapters both sides, English queries
/// with document-language docs, document-language both sides, or none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionKind {
    EE,
    ED,
    DD,
    NoAdapter,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 4] = [
        ConditionKind::EE,
        ConditionKind::ED,
        ConditionKind::DD,
        ConditionKind::NoAdapter,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ConditionKind::EE => "E-E",
            ConditionKind::ED => "E-D",
            ConditionKind::DD => "D-D",
            ConditionKind::NoAdapter => "no-adapter",
        }
    }

    pub fn resolve(&self, doc_lang: &str) -> Condition {
        match self {
            ConditionKind::EE => Condition::new(Some("eng"), Some("eng")),
            ConditionKind::ED => Condition::new(Some("eng"), Some(doc_lang)),
            ConditionKind::DD => Condition::new(Some(doc_lang), Some(doc_lang)),
            ConditionKind::NoAdapter => Condition::new(None, None),
        }
    }
}

/// Clone the model with the condition's language adapters installed.
pub fn apply_condition(model: &BiEncoderModel, condition: &Condition) -> Result<BiEncoderModel> {
    let mut m = model.without_languages();
    if let Some(tag) = &condition.query_side_lang {
        m = m.with_language(Side::Query, tag)?;
    }
    if let Some(tag) = &condition.doc_side_lang {
        m = m.with_language(Side::Document, tag)?;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub doc_id: String,
    pub passage_index: usize,
    pub rep: PooledRep,
}

/// All encoded passages of one corpus under one inference condition,
/// stamped with the weights and wiring that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    pub variant: Variant,
    pub condition: Condition,
    pub doc_lang: String,
    pub model_checksum: String,
    pub entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexManifest {
    variant: Variant,
    condition: Condition,
    doc_lang: String,
    model_checksum: String,
    entry_count: usize,
}

/// Encode every passage of every document with the condition's document-side
/// adapters installed.
pub fn build_index(
    model: &BiEncoderModel,
    docs: &[Document],
    condition: &Condition,
) -> Result<Index> {
    if docs.is_empty() {
        return Err(Error::Config("cannot index an empty document collection".into()));
    }
    let doc_lang = docs[0].lang.clone();
    if docs.iter().any(|d| d.lang != doc_lang) {
        return Err(Error::Config(
            "all documents in one index must share a language".into(),
        ));
    }
    let m = apply_condition(model, condition)?;
    let mut jobs = Vec::new();
    for doc in docs {
        for passage in segment_passages(&doc.token_ids, PASSAGE_WINDOW, PASSAGE_STRIDE)? {
            jobs.push((doc.doc_id.clone(), passage));
        }
    }
    // Encoding is pure per passage, so the parallel map keeps index order
    // (and therefore index bytes) deterministic.
    let entries: Vec<IndexEntry> = jobs
        .into_par_iter()
        .map(|(doc_id, passage)| {
            let (ids, mask) = frame_sequence(&passage.tokens, DOC_LEN);
            let encoded = m.encode(Side::Document, &ids, &mask)?;
            Ok(IndexEntry { doc_id, passage_index: passage.passage_index, rep: encoded.rep })
        })
        .collect::<Result<_>>()?;
    Ok(Index {
        variant: model.variant,
        condition: condition.clone(),
        doc_lang,
        model_checksum: model.checksum(),
        entries,
    })
}

const INDEX_MAGIC: &[u8; 8] = b"CLIRINDX";
const INDEX_VERSION: u32 = 1;

impl Index {
    /// Write `manifest.json` and `reps.bin` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = IndexManifest {
            variant: self.variant,
            condition: self.condition.clone(),
            doc_lang: self.doc_lang.clone(),
            model_checksum: self.model_checksum.clone(),
            entry_count: self.entries.len(),
        };
        let manifest_path = dir.join("manifest.json");
        std::fs::write(
            &manifest_path,
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format {
                path: manifest_path.display().to_string(),
                message: e.to_string(),
            })?,
        )?;

        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("reps.bin"))?);
        f.write_all(INDEX_MAGIC)?;
        f.write_all(&INDEX_VERSION.to_le_bytes())?;
        f.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for entry in &self.entries {
            let id = entry.doc_id.as_bytes();
            f.write_all(&(id.len() as u32).to_le_bytes())?;
            f.write_all(id)?;
            f.write_all(&(entry.passage_index as u32).to_le_bytes())?;
            match &entry.rep {
                PooledRep::Cls(v) => {
                    f.write_all(&[0u8])?;
                    f.write_all(&(v.len() as u32).to_le_bytes())?;
                    for &x in v {
                        f.write_all(&x.to_le_bytes())?;
                    }
                }
                PooledRep::Tokens { vectors, mask } => {
                    f.write_all(&[1u8])?;
                    f.write_all(&(vectors.nrows() as u32).to_le_bytes())?;
                    f.write_all(&(vectors.ncols() as u32).to_le_bytes())?;
                    for &x in vectors {
                        f.write_all(&x.to_le_bytes())?;
                    }
                    for &m in mask {
                        f.write_all(&[m as u8])?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: IndexManifest =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?).map_err(|e| {
                Error::Format {
                    path: manifest_path.display().to_string(),
                    message: e.to_string(),
                }
            })?;

        let path = dir.join("reps.bin");
        let bad = |message: &str| Error::Format {
            path: path.display().to_string(),
            message: message.to_string(),
        };
        let mut f = BufReader::new(File::open(&path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != INDEX_MAGIC {
            return Err(bad("not an index representations file"));
        }
        let read_u32 = |f: &mut BufReader<File>| -> Result<u32> {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)
                .map_err(|_| bad("unexpected end of file"))?;
            Ok(u32::from_le_bytes(b))
        };
        let read_f64s = |f: &mut BufReader<File>, n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                f.read_exact(&mut b)
                    .map_err(|_| bad("unexpected end of file"))?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        if read_u32(&mut f)? != INDEX_VERSION {
            return Err(bad("unsupported index version"));
        }
        let count = read_u32(&mut f)? as usize;
        if count != manifest.entry_count {
            return Err(bad("entry count disagrees with manifest"));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let id_len = read_u32(&mut f)? as usize;
            let mut id = vec![0u8; id_len];
            f.read_exact(&mut id).map_err(|_| bad("unexpected end of file"))?;
            let doc_id = String::from_utf8(id).map_err(|_| bad("doc_id is not UTF-8"))?;
            let passage_index = read_u32(&mut f)? as usize;
            let mut kind = [0u8; 1];
            f.read_exact(&mut kind).map_err(|_| bad("unexpected end of file"))?;
            let rep = match kind[0] {
                0 => {
                    let dim = read_u32(&mut f)? as usize;
                    PooledRep::Cls(Array1::from_vec(read_f64s(&mut f, dim)?))
                }
                1 => {
                    let rows = read_u32(&mut f)? as usize;
                    let cols = read_u32(&mut f)? as usize;
                    let values = read_f64s(&mut f, rows * cols)?;
                    let vectors = Array2::from_shape_vec((rows, cols), values)
                        .map_err(|_| bad("bad token-matrix shape"))?;
                    let mut mask = vec![0u8; rows];
                    f.read_exact(&mut mask)
                        .map_err(|_| bad("unexpected end of file"))?;
                    PooledRep::Tokens {
                        vectors,
                        mask: mask.into_iter().map(|b| b != 0).collect(),
                    }
                }
                k => return Err(bad(&format!("unknown representation kind {k}"))),
            };
            entries.push(IndexEntry { doc_id, passage_index, rep });
        }
        Ok(Index {
            variant: manifest.variant,
            condition: manifest.condition,
            doc_lang: manifest.doc_lang,
            model_checksum: manifest.model_checksum,
            entries,
        })
    }
}

/// Score one query representation against one indexed passage.
pub fn score_pair(query: &PooledRep, doc: &PooledRep) -> Result<f64> {
    match (query, doc) {
        (PooledRep::Cls(q), PooledRep::Cls(d)) => score_dpr(q, d),
        (
            PooledRep::Tokens { vectors: q, mask: qm },
            PooledRep::Tokens { vectors: d, mask: dm },
        ) => score_colbert(q, qm, d, dm),
        _ => Err(Error::State(
            "cannot score mixed representation kinds".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedDoc {
    pub query_id: String,
    pub doc_id: String,
    /// 1-based rank.
    pub rank: usize,
    pub score: f64,
}

/// A ranked retrieval result set for a batch of queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub tag: String,
    pub entries: Vec<RankedDoc>,
}

impl Run {
    /// Entries grouped by query, in run order.
    pub fn by_query(&self) -> indexmap::IndexMap<&str, Vec<&RankedDoc>> {
        let mut map: indexmap::IndexMap<&str, Vec<&RankedDoc>> = indexmap::IndexMap::new();
        for e in &self.entries {
            map.entry(e.query_id.as_str()).or_default().push(e);
        }
        map
    }
}

/// Exhaustive search: score every query against every indexed passage, take
/// the maximum per document, and keep the top `k` documents. Ties break by
/// ascending `doc_id` so runs are deterministic.
pub fn search(
    model: &BiEncoderModel,
    index: &Index,
    queries: &[Query],
    condition: &Condition,
    k: usize,
    tag: &str,
) -> Result<Run> {
    if model.checksum() != index.model_checksum {
        return Err(Error::State(
            "index is stale: it was built from different model weights".into(),
        ));
    }
    if condition.doc_side_lang != index.condition.doc_side_lang {
        return Err(Error::Config(format!(
            "index was built with doc-side adapter {:?} but the search condition wants {:?}",
            index.condition.doc_side_lang, condition.doc_side_lang
        )));
    }
    let m = apply_condition(model, condition)?;
    let mut entries = Vec::new();
    for query in queries {
        let (ids, mask) = frame_sequence(&query.token_ids, QUERY_LEN);
        let encoded = m.encode(Side::Query, &ids, &mask)?;

        let mut per_doc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for entry in &index.entries {
            per_doc
                .entry(entry.doc_id.as_str())
                .or_default()
                .push(score_pair(&encoded.rep, &entry.rep)?);
        }
        let mut ranked: Vec<(&str, f64)> = per_doc
            .into_iter()
            .map(|(doc_id, scores)| Ok((doc_id, maxp(&scores)?)))
            .collect::<Result<_>>()?;
        // BTreeMap iteration is already ascending by doc_id, and sort_by is
        // stable, so equal scores keep ascending id order.
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        for (rank, (doc_id, score)) in ranked.into_iter().take(k).enumerate() {
            entries.push(RankedDoc {
                query_id: query.query_id.clone(),
                doc_id: doc_id.to_string(),
                rank: rank + 1,
                score,
            });
        }
    }
    Ok(Run { tag: tag.to_string(), entries })
}

pub fn write_run_trec(run: &Run, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in &run.entries {
        writeln!(f, "{} Q0 {} {} {} {}", e.query_id, e.doc_id, e.rank, e.score, run.tag)?;
    }
    Ok(())
}

pub fn read_run_trec(path: &Path) -> Result<Run> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut tag = String::new();
    let mut entries = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 || parts[1] != "Q0" {
            return Err(Error::Format {
                path: format!("{}:{}", path.display(), i + 1),
                message: "expected 'qid Q0 docid rank score tag'".into(),
            });
        }
        let field_err = |what: &str, s: &str| Error::Format {
            path: format!("{}:{}", path.display(), i + 1),
            message: format!("bad {what} field '{s}'"),
        };
        entries.push(RankedDoc {
            query_id: parts[0].to_string(),
            doc_id: parts[2].to_string(),
            rank: parts[3].parse().map_err(|_| field_err("rank", parts[3]))?,
            score: parts[4].parse().map_err(|_| field_err("score", parts[4]))?,
        });
        tag = parts[5].to_string();
    }
    Ok(Run { tag, entries })
}

/// One cell of the condition grid: a retrieval run for a (document language,
/// inference condition) pair.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub doc_lang: String,
    pub kind: ConditionKind,
    pub run: Run,
}

/// Run every requested condition for every non-English document language.
/// Indexes are shared between conditions with the same document-side adapter
/// (E-D and D-D differ only on the query side).
pub fn run_condition_grid(
    model: &BiEncoderModel,
    docs_by_lang: &indexmap::IndexMap<String, Vec<Document>>,
    queries: &[Query],
    kinds: &[ConditionKind],
    k: usize,
    tag_prefix: &str,
) -> Result<Vec<GridRun>> {
    let mut out = Vec::new();
    for (lang, docs) in docs_by_lang {
        if lang == "eng" {
            continue;
        }
        let mut indexes: Vec<(Option<String>, Index)> = Vec::new();
        for kind in kinds {
            let condition = kind.resolve(lang);
            let doc_side = condition.doc_side_lang.clone();
            if !indexes.iter().any(|(side, _)| *side == doc_side) {
                let index = build_index(model, docs, &condition)?;
                indexes.push((doc_side, index));
            }
            let index = &indexes
                .iter()
                .find(|(side, _)| *side == condition.doc_side_lang)
                .expect("index was just ensured")
                .1;
            let tag = format!("{tag_prefix}.{lang}.{}", kind.label());
            let run = search(model, index, queries, &condition, k, &tag)?;
            out.push(GridRun {
                doc_lang: lang.clone(),
                kind: *kind,
                run,
            });
        }
    }
    Ok(out)
}
