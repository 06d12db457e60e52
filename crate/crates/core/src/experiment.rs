//! Experiment orchestration: a JSON-configured pipeline that generates the
//! synthetic corpus, pretrains the backbone and language adapters, fine-tunes
//! every requested retrieval model, indexes, searches, and emits the final
//! condition-grid report with significance marks.
//!
//! Everything lives in a run directory whose artifacts are a pure function
//! of the resolved config: rerunning any phase reproduces its files bit for
//! bit, and every file's SHA-256 is recorded in `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::AdapterCatalog;
use crate::checkpoint;
use crate::corpus::{
    generate_corpus, read_documents, read_queries, read_triples, write_corpus, CorpusSpec,
    Document, SyntheticLanguage,
};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{
    average_precision, bonferroni, mean_average_precision, paired_t_test, per_query_ndcg,
    MetricRow, MetricTable, Qrels,
};
use crate::mlm::{pretrain_backbone, pretrain_language_adapter, MlmTrace, MlmTrainConfig};
use crate::model::{BiEncoderModel, Variant};
use crate::pipeline::{
    build_index, read_run_trec, search, write_run_trec, Condition, ConditionKind, Index, Run,
};
use crate::retrieval::{materialize_triples, train_retrieval, LossTrace, TrainConfig, TrainMode};
use crate::tensor::{hex, ParamRegistry};

/// Two-sided significance level for the report's marks.
pub const ALPHA: f64 = 0.05;

/// Row order of the condition grid, baseline first.
const ROW_ORDER: [&str; 5] = ["FMFT", "E-E", "E-D", "D-D", "no-adapter"];

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LanguageSection {
    pub tag: String,
    pub zipf_s: f64,
    /// Seed for the language's vocabulary permutation; unused for `eng`.
    #[serde(default)]
    pub grammar_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub seed: u64,
    pub vocab_size: usize,
    pub languages: Vec<LanguageSection>,
    pub docs_per_language: usize,
    pub tokens_per_doc: [usize; 2],
    pub topic_count: usize,
    pub topic_token_share: f64,
    pub train_queries: usize,
    pub eval_queries: usize,
    pub query_len: [usize; 2],
}

impl CorpusSection {
    pub fn to_spec(&self) -> Result<CorpusSpec> {
        if self.languages.first().map(|l| l.tag.as_str()) != Some("eng") {
            return Err(Error::Config(
                "corpus.languages: the first language must be 'eng'".into(),
            ));
        }
        let languages = self
            .languages
            .iter()
            .map(|l| {
                if l.tag == "eng" {
                    SyntheticLanguage::english(self.vocab_size, l.zipf_s)
                } else {
                    SyntheticLanguage::shuffled(&l.tag, self.vocab_size, l.zipf_s, l.grammar_seed)
                }
            })
            .collect();
        let spec = CorpusSpec {
            languages,
            docs_per_language: self.docs_per_language,
            tokens_per_doc: (self.tokens_per_doc[0], self.tokens_per_doc[1]),
            topic_count: self.topic_count,
            vocab_size: self.vocab_size,
            topic_token_share: self.topic_token_share,
            train_queries: self.train_queries,
            eval_queries: self.eval_queries,
            query_len: (self.query_len[0], self.query_len[1]),
        };
        spec.validate().map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("corpus: {msg}")),
            other => other,
        })?;
        Ok(spec)
    }

    pub fn tags(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.tag.clone()).collect()
    }

    pub fn transfer_tags(&self) -> Vec<String> {
        self.languages
            .iter()
            .filter(|l| l.tag != "eng")
            .map(|l| l.tag.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MlmSection {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub seed: u64,
}

impl MlmSection {
    fn to_config(&self) -> MlmTrainConfig {
        MlmTrainConfig {
            steps: self.steps,
            batch: self.batch,
            seq_len: self.seq_len,
            lr: self.lr,
            seed: self.seed,
        }
    }

    fn validate(&self, key: &str) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config(format!("{key}: steps and batch must be positive")));
        }
        if self.seq_len < 8 {
            return Err(Error::Config(format!("{key}.seq_len: must be at least 8")));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("{key}.lr: must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub init_seed: u64,
    pub mlm: MlmSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdaptersSection {
    pub mlm: MlmSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSection {
    pub variants: Vec<Variant>,
    pub modes: Vec<TrainMode>,
    /// Task-adapter reduction factor.
    pub r: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Ndcg,
    Map,
}

impl MetricKind {
    fn label(&self, k: usize) -> String {
        match self {
            MetricKind::Ndcg => format!("nDCG@{k}"),
            MetricKind::Map => "MAP".to_string(),
        }
    }

    fn slug(&self) -> &'static str {
        match self {
            MetricKind::Ndcg => "ndcg",
            MetricKind::Map => "map",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Ranking depth kept in run files and used for the grid metrics.
    pub k: usize,
    /// Cutoff for the monolingual sanity gate.
    pub gate_k: usize,
    pub metrics: Vec<MetricKind>,
    pub corrections: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSection,
    pub backbone: BackboneSection,
    pub adapters: AdaptersSection,
    pub retrieval: RetrievalSection,
    pub conditions: Vec<String>,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.to_spec()?;
        let b = &self.backbone;
        if b.layers == 0 || b.hidden == 0 || b.heads == 0 || b.ffn_dim == 0 {
            return Err(Error::Config(
                "backbone: layers, hidden, heads, and ffn_dim must be positive".into(),
            ));
        }
        if b.hidden % b.heads != 0 {
            return Err(Error::Config(format!(
                "backbone.heads: hidden ({}) must be divisible by heads ({})",
                b.hidden, b.heads
            )));
        }
        b.mlm.validate("backbone.mlm")?;
        self.adapters.mlm.validate("adapters.mlm")?;

        let r = &self.retrieval;
        if r.variants.is_empty() {
            return Err(Error::Config("retrieval.variants: must not be empty".into()));
        }
        if r.modes.is_empty() {
            return Err(Error::Config("retrieval.modes: must not be empty".into()));
        }
        for (name, len, deduped) in [
            ("retrieval.variants", r.variants.len(), dedup_len(&r.variants)),
            ("retrieval.modes", r.modes.len(), dedup_len(&r.modes)),
        ] {
            if len != deduped {
                return Err(Error::Config(format!("{name}: contains duplicates")));
            }
        }
        if r.r == 0 {
            return Err(Error::Config("retrieval.r: must be positive".into()));
        }
        if r.steps == 0 || r.batch == 0 {
            return Err(Error::Config("retrieval: steps and batch must be positive".into()));
        }
        if r.lr <= 0.0 {
            return Err(Error::Config("retrieval.lr: must be positive".into()));
        }

        if self.conditions.is_empty() {
            return Err(Error::Config("conditions: must not be empty".into()));
        }
        parse_conditions(&self.conditions)?;
        if self.conditions.len() != dedup_len(&self.conditions) {
            return Err(Error::Config("conditions: contains duplicates".into()));
        }

        let e = &self.eval;
        if e.k == 0 || e.gate_k == 0 {
            return Err(Error::Config("eval: k and gate_k must be positive".into()));
        }
        if e.metrics.is_empty() {
            return Err(Error::Config("eval.metrics: must not be empty".into()));
        }
        if e.metrics.len() != dedup_len(&e.metrics) {
            return Err(Error::Config("eval.metrics: contains duplicates".into()));
        }
        if e.corrections != "bonferroni" {
            return Err(Error::Config(format!(
                "eval.corrections: only 'bonferroni' is supported, got '{}'",
                e.corrections
            )));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.backbone.layers,
            hidden: self.backbone.hidden,
            heads: self.backbone.heads,
            ffn_dim: self.backbone.ffn_dim,
            vocab_size: self.corpus.vocab_size,
            max_positions: self.backbone.max_positions,
            seed: self.backbone.init_seed,
        }
    }

    /// The shipped desk-scale default: two languages, both retrieval
    /// variants, all training modes and inference conditions.
    pub fn desk() -> Self {
        ExperimentConfig {
            corpus: CorpusSection {
                seed: 11,
                vocab_size: 512,
                languages: vec![
                    LanguageSection { tag: "eng".into(), zipf_s: 1.07, grammar_seed: 0 },
                    LanguageSection { tag: "lng1".into(), zipf_s: 1.07, grammar_seed: 101 },
                ],
                docs_per_language: 120,
                tokens_per_doc: [60, 200],
                topic_count: 12,
                topic_token_share: 0.65,
                train_queries: 96,
                eval_queries: 40,
                query_len: [4, 8],
            },
            backbone: BackboneSection {
                layers: 4,
                hidden: 64,
                heads: 4,
                ffn_dim: 128,
                max_positions: 192,
                init_seed: 7,
                mlm: MlmSection { steps: 600, batch: 16, seq_len: 48, lr: 1e-3, seed: 21 },
            },
            adapters: AdaptersSection {
                mlm: MlmSection { steps: 300, batch: 16, seq_len: 48, lr: 1e-3, seed: 22 },
            },
            retrieval: RetrievalSection {
                variants: vec![Variant::Dpr, Variant::Colbert],
                modes: vec![TrainMode::Adapter, TrainMode::FullFineTune, TrainMode::AdapterNoLang],
                r: 16,
                lr: 1e-3,
                steps: 160,
                batch: 4,
                seed: 13,
            },
            conditions: vec!["E-E".into(), "E-D".into(), "D-D".into(), "no-adapter".into()],
            eval: EvalSection {
                k: 100,
                gate_k: 10,
                metrics: vec![MetricKind::Ndcg, MetricKind::Map],
                corrections: "bonferroni".into(),
            },
        }
    }
}

fn dedup_len<T: PartialEq>(items: &[T]) -> usize {
    let mut seen: Vec<&T> = Vec::new();
    for item in items {
        if !seen.contains(&&item) {
            seen.push(item);
        }
    }
    seen.len()
}

fn parse_conditions(labels: &[String]) -> Result<Vec<ConditionKind>> {
    labels
        .iter()
        .map(|l| {
            ConditionKind::ALL
                .iter()
                .copied()
                .find(|k| k.label() == l)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "conditions: unknown condition '{l}' (expected E-E, E-D, D-D, or no-adapter)"
                    ))
                })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RunMeta {
    git_describe: String,
    seeds: RunSeeds,
}

#[derive(Serialize, Deserialize)]
struct RunSeeds {
    corpus: u64,
    backbone_init: u64,
    backbone_mlm: u64,
    adapters_mlm: u64,
    retrieval: u64,
}

/// An append-only artifact directory bound to one resolved config. Every
/// written file's SHA-256 lands in `manifest.json`.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    manifest: BTreeMap<String, String>,
}

impl RunDir {
    /// Create or reopen `root` for the given config. A directory created
    /// under a different config — or containing foreign files — is refused.
    pub fn open(root: impl AsRef<Path>, cfg: &ExperimentConfig) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        let resolved = cfg.to_json_pretty();
        let config_path = root.join("config.json");
        if config_path.exists() {
            let existing = std::fs::read_to_string(&config_path)?;
            if existing != resolved {
                return Err(Error::State(format!(
                    "run directory '{}' was created with a different config; refusing to reuse it",
                    root.display()
                )));
            }
        } else {
            if std::fs::read_dir(&root)?.next().is_some() {
                return Err(Error::State(format!(
                    "run directory '{}' contains files but no config.json; refusing dirty reuse",
                    root.display()
                )));
            }
            std::fs::write(&config_path, &resolved)?;
        }

        let manifest_path = root.join("manifest.json");
        let manifest = if manifest_path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?).map_err(|e| {
                Error::Format { path: manifest_path.display().to_string(), message: e.to_string() }
            })?
        } else {
            BTreeMap::new()
        };

        let mut run = RunDir { root, manifest };
        run.record_file("config.json")?;
        if !run.rel("meta.json").exists() {
            let meta = RunMeta {
                git_describe: git_describe(),
                seeds: RunSeeds {
                    corpus: cfg.corpus.seed,
                    backbone_init: cfg.backbone.init_seed,
                    backbone_mlm: cfg.backbone.mlm.seed,
                    adapters_mlm: cfg.adapters.mlm.seed,
                    retrieval: cfg.retrieval.seed,
                },
            };
            run.write_string("meta.json", &serde_json::to_string_pretty(&meta).expect("meta"))?;
        }
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn rel(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Path of a prerequisite artifact; a phase-order error names the
    /// producing subcommand when it is missing.
    pub fn require(&self, rel: &str, produced_by: &str) -> Result<PathBuf> {
        let path = self.rel(rel);
        if !path.exists() {
            return Err(Error::State(format!(
                "phase order: '{rel}' is missing from the run directory — run `{produced_by}` first"
            )));
        }
        Ok(path)
    }

    pub fn write_string(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.rel(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, text)?;
        self.record_file(rel)
    }

    pub fn record_file(&mut self, rel: &str) -> Result<()> {
        let bytes = std::fs::read(self.rel(rel))?;
        let digest = Sha256::digest(&bytes);
        self.manifest.insert(rel.to_string(), hex(&digest));
        Ok(())
    }

    /// Record every file under `rel` (recursively, sorted).
    pub fn record_tree(&mut self, rel: &str) -> Result<()> {
        let mut files = Vec::new();
        collect_files(&self.rel(rel), &mut files)?;
        files.sort();
        for file in files {
            let relpath = file
                .strip_prefix(&self.root)
                .expect("walked file lies under root")
                .to_string_lossy()
                .replace('\\', "/");
            self.record_file(&relpath)?;
        }
        Ok(())
    }

    pub fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(self.rel("manifest.json"), text)?;
        Ok(())
    }

    pub fn manifest(&self) -> &BTreeMap<String, String> {
        &self.manifest
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

// ---------------------------------------------------------------------------
// Pipeline phases
// ---------------------------------------------------------------------------

pub fn phase_gen_corpus(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<()> {
    log::info!("generating corpus");
    let spec = cfg.corpus.to_spec()?;
    let corpus = generate_corpus(&spec, cfg.corpus.seed)?;
    write_corpus(&corpus, &run.rel("corpus"))?;
    run.record_tree("corpus")?;
    run.save_manifest()
}

fn load_docs(run: &RunDir, cfg: &ExperimentConfig) -> Result<IndexMap<String, Vec<Document>>> {
    let mut docs = IndexMap::new();
    for tag in cfg.corpus.tags() {
        let path = run.require(&format!("corpus/corpus.{tag}.jsonl"), "gen-corpus")?;
        docs.insert(tag, read_documents(&path)?);
    }
    Ok(docs)
}

pub fn phase_pretrain_backbone(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<MlmTrace> {
    log::info!("pretraining backbone ({} steps)", cfg.backbone.mlm.steps);
    let docs = load_docs(run, cfg)?;
    let refs: Vec<&Document> = docs.values().flatten().collect();
    let enc = cfg.encoder_config();
    let (registry, trace) = pretrain_backbone(&enc, &refs, &cfg.backbone.mlm.to_config())?;

    std::fs::create_dir_all(run.rel("backbone"))?;
    // Full registry (with the tied-head bias) for adapter pretraining;
    // encoder weights alone for retrieval model construction.
    checkpoint::save(&registry, run.rel("backbone/full.ckpt"))?;
    checkpoint::save_where(&registry, run.rel("backbone/encoder.ckpt"), |n| {
        n.starts_with("backbone.")
    })?;
    LossTrace { points: trace.clone() }.write_csv(&ensure_parent(run, "traces/backbone_mlm.csv")?)?;
    run.record_tree("backbone")?;
    run.record_file("traces/backbone_mlm.csv")?;
    run.save_manifest()?;
    Ok(trace)
}

fn ensure_parent(run: &RunDir, rel: &str) -> Result<PathBuf> {
    let path = run.rel(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(path)
}

pub fn phase_pretrain_adapter(run: &mut RunDir, cfg: &ExperimentConfig, tag: &str) -> Result<MlmTrace> {
    log::info!("pretraining language adapters for '{tag}' ({} steps)", cfg.adapters.mlm.steps);
    if !cfg.corpus.tags().iter().any(|t| t == tag) {
        return Err(Error::Config(format!(
            "corpus.languages: '{tag}' is not a configured language"
        )));
    }
    let ckpt = run.require("backbone/full.ckpt", "pretrain-backbone")?;
    let doc_path = run.require(&format!("corpus/corpus.{tag}.jsonl"), "gen-corpus")?;
    let docs = read_documents(&doc_path)?;
    let refs: Vec<&Document> = docs.iter().collect();

    let mut registry = ParamRegistry::new(cfg.backbone.init_seed);
    registry.absorb_records(checkpoint::load(ckpt)?)?;
    let enc = cfg.encoder_config();
    let trace = pretrain_language_adapter(
        &mut registry,
        &enc,
        tag,
        &refs,
        &cfg.adapters.mlm.to_config(),
        &run.rel("adapters"),
    )?;
    LossTrace { points: trace.clone() }
        .write_csv(&ensure_parent(run, &format!("traces/adapter_{tag}_mlm.csv"))?)?;
    run.record_tree("adapters")?;
    run.record_file(&format!("traces/adapter_{tag}_mlm.csv"))?;
    run.save_manifest()?;
    Ok(trace)
}

/// Wire an untrained retrieval model from the pretrained backbone and, for
/// adapter modes, the pretrained language-adapter catalog.
pub fn build_model(
    run: &RunDir,
    cfg: &ExperimentConfig,
    variant: Variant,
    mode: TrainMode,
) -> Result<BiEncoderModel> {
    let task_reduction = match mode {
        TrainMode::FullFineTune => None,
        _ => Some(cfg.retrieval.r),
    };
    let mut model = BiEncoderModel::new(cfg.encoder_config(), variant, task_reduction)?;
    model.load_backbone(run.require("backbone/encoder.ckpt", "pretrain-backbone")?)?;
    if mode != TrainMode::FullFineTune {
        let catalog = run.require("adapters", "pretrain-adapter")?;
        let tags = cfg.corpus.tags();
        let available = AdapterCatalog::available_tags(&catalog);
        if let Some(missing) = tags.iter().find(|t| !available.contains(t)) {
            return Err(Error::State(format!(
                "phase order: language adapters for '{missing}' are missing — run `pretrain-adapter` first"
            )));
        }
        let tag_refs: Vec<&str> = tags.iter().map(String::as_str).collect();
        model.load_language_adapters(&catalog, &tag_refs)?;
    }
    Ok(model)
}

fn model_dir(variant: Variant, mode: TrainMode) -> String {
    format!("models/{variant}.{mode}")
}

pub fn phase_train(
    run: &mut RunDir,
    cfg: &ExperimentConfig,
    variant: Variant,
    mode: TrainMode,
) -> Result<LossTrace> {
    log::info!("training {variant} in {mode} mode ({} steps)", cfg.retrieval.steps);
    let mut model = build_model(run, cfg, variant, mode)?;

    let queries = read_queries(&run.require("corpus/queries.train.jsonl", "gen-corpus")?)?;
    let docs = read_documents(&run.require("corpus/corpus.eng.jsonl", "gen-corpus")?)?;
    let refs = read_triples(&run.require("corpus/triples.train.tsv", "gen-corpus")?)?;
    let triples = materialize_triples(&refs, &queries, &docs)?;

    let tc = TrainConfig {
        mode,
        steps: cfg.retrieval.steps,
        batch: cfg.retrieval.batch,
        lr: cfg.retrieval.lr,
        seed: cfg.retrieval.seed,
    };
    let trace = train_retrieval(&mut model, &triples, &tc)?;

    let dir = model_dir(variant, mode);
    model.save(&run.rel(&dir))?;
    trace.write_csv(&ensure_parent(run, &format!("traces/{variant}.{mode}.csv"))?)?;
    run.record_tree(&dir)?;
    run.record_file(&format!("traces/{variant}.{mode}.csv"))?;
    run.save_manifest()?;
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Index & search planning
// ---------------------------------------------------------------------------

/// Which weights answer a search: a fine-tuned model, or the untrained
/// construction used as the sanity-gate baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Trained(TrainMode),
    Baseline,
}

impl ModelKind {
    fn slug(&self) -> String {
        match self {
            ModelKind::Trained(mode) => mode.to_string(),
            ModelKind::Baseline => "baseline".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexPlan {
    pub variant: Variant,
    pub model: ModelKind,
    pub doc_lang: String,
    pub doc_adapter: Option<String>,
}

impl IndexPlan {
    fn dir(&self) -> String {
        format!(
            "indexes/{}.{}/{}.{}",
            self.variant,
            self.model.slug(),
            self.doc_lang,
            self.doc_adapter.as_deref().unwrap_or("raw")
        )
    }
}

#[derive(Debug, Clone)]
pub struct SearchPlan {
    pub variant: Variant,
    pub model: ModelKind,
    /// Grid row label, or `gate-trained` / `gate-baseline`.
    pub label: String,
    pub doc_lang: String,
    pub condition: Condition,
    pub index: IndexPlan,
    pub file: String,
}

/// Every index and search the configured experiment needs. Indexes are
/// deduplicated: conditions sharing a document-side adapter share an index.
pub fn plan(cfg: &ExperimentConfig) -> Result<(Vec<IndexPlan>, Vec<SearchPlan>)> {
    let kinds = parse_conditions(&cfg.conditions)?;
    let transfer = cfg.corpus.transfer_tags();
    let mut searches = Vec::new();

    for &variant in &cfg.retrieval.variants {
        if cfg.retrieval.modes.contains(&TrainMode::Adapter) {
            // Monolingual English sanity gate: trained vs untrained under E-E.
            let condition = ConditionKind::EE.resolve("eng");
            for (model, label) in [
                (ModelKind::Trained(TrainMode::Adapter), "gate-trained"),
                (ModelKind::Baseline, "gate-baseline"),
            ] {
                searches.push(SearchPlan {
                    variant,
                    model,
                    label: label.to_string(),
                    doc_lang: "eng".to_string(),
                    condition: condition.clone(),
                    index: IndexPlan {
                        variant,
                        model,
                        doc_lang: "eng".to_string(),
                        doc_adapter: condition.doc_side_lang.clone(),
                    },
                    file: format!("runs/{variant}.{label}.eng.trec"),
                });
            }
            for lang in &transfer {
                for kind in kinds.iter().filter(|k| **k != ConditionKind::NoAdapter) {
                    let condition = kind.resolve(lang);
                    let model = ModelKind::Trained(TrainMode::Adapter);
                    searches.push(SearchPlan {
                        variant,
                        model,
                        label: kind.label().to_string(),
                        doc_lang: lang.clone(),
                        condition: condition.clone(),
                        index: IndexPlan {
                            variant,
                            model,
                            doc_lang: lang.clone(),
                            doc_adapter: condition.doc_side_lang.clone(),
                        },
                        file: format!("runs/{variant}.{}.{lang}.trec", kind.label()),
                    });
                }
            }
        }
        if cfg.retrieval.modes.contains(&TrainMode::FullFineTune) {
            for lang in &transfer {
                let model = ModelKind::Trained(TrainMode::FullFineTune);
                searches.push(SearchPlan {
                    variant,
                    model,
                    label: "FMFT".to_string(),
                    doc_lang: lang.clone(),
                    condition: Condition::new(None, None),
                    index: IndexPlan { variant, model, doc_lang: lang.clone(), doc_adapter: None },
                    file: format!("runs/{variant}.FMFT.{lang}.trec"),
                });
            }
        }
        if cfg.retrieval.modes.contains(&TrainMode::AdapterNoLang)
            && kinds.contains(&ConditionKind::NoAdapter)
        {
            for lang in &transfer {
                let model = ModelKind::Trained(TrainMode::AdapterNoLang);
                searches.push(SearchPlan {
                    variant,
                    model,
                    label: "no-adapter".to_string(),
                    doc_lang: lang.clone(),
                    condition: Condition::new(None, None),
                    index: IndexPlan { variant, model, doc_lang: lang.clone(), doc_adapter: None },
                    file: format!("runs/{variant}.no-adapter.{lang}.trec"),
                });
            }
        }
    }

    let mut indexes: Vec<IndexPlan> = Vec::new();
    for search in &searches {
        if !indexes.contains(&search.index) {
            indexes.push(search.index.clone());
        }
    }
    Ok((indexes, searches))
}

fn load_plan_model(run: &RunDir, cfg: &ExperimentConfig, variant: Variant, kind: ModelKind) -> Result<BiEncoderModel> {
    match kind {
        ModelKind::Trained(mode) => {
            let dir = run.require(&model_dir(variant, mode), "train")?;
            BiEncoderModel::load(&dir)
        }
        ModelKind::Baseline => build_model(run, cfg, variant, TrainMode::Adapter),
    }
}

pub fn phase_index(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let docs = load_docs(run, cfg)?;
    let (indexes, _) = plan(cfg)?;
    for ip in &indexes {
        log::info!("indexing {}", ip.dir());
        let model = load_plan_model(run, cfg, ip.variant, ip.model)?;
        let condition = Condition {
            query_side_lang: None,
            doc_side_lang: ip.doc_adapter.clone(),
        };
        let lang_docs = docs.get(&ip.doc_lang).ok_or_else(|| {
            Error::Config(format!("corpus has no documents for language '{}'", ip.doc_lang))
        })?;
        let index = build_index(&model, lang_docs, &condition)?;
        index.save(&run.rel(&ip.dir()))?;
        run.record_tree(&ip.dir())?;
    }
    run.save_manifest()
}

pub fn phase_search(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let queries = read_queries(&run.require("corpus/queries.eval.jsonl", "gen-corpus")?)?;
    let (_, searches) = plan(cfg)?;
    for sp in &searches {
        log::info!("searching {}", sp.file);
        let index_dir = run.require(&sp.index.dir(), "index")?;
        let index = Index::load(&index_dir)?;
        let model = load_plan_model(run, cfg, sp.variant, sp.model)?;
        let tag = sp
            .file
            .trim_start_matches("runs/")
            .trim_end_matches(".trec")
            .to_string();
        let result = search(&model, &index, &queries, &sp.condition, cfg.eval.k, &tag)?;
        write_run_trec(&result, &ensure_parent(run, &sp.file)?)?;
        run.record_file(&sp.file)?;
    }
    run.save_manifest()
}

// ---------------------------------------------------------------------------
// Evaluation & reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateResult {
    pub variant: String,
    pub untrained: f64,
    pub trained: f64,
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub gates: Vec<GateResult>,
    pub tables: Vec<MetricTable>,
    pub report: String,
}

fn ranked_ids<'a>(run: &'a Run, query_id: &str) -> Vec<&'a str> {
    run.entries
        .iter()
        .filter(|e| e.query_id == query_id)
        .map(|e| e.doc_id.as_str())
        .collect()
}

/// Per-query metric vector aligned to qrels order, for paired tests.
fn metric_vector(metric: MetricKind, run: &Run, qrels: &Qrels, k: usize) -> Result<Vec<f64>> {
    match metric {
        MetricKind::Ndcg => Ok(per_query_ndcg(run, qrels, k)?.into_iter().map(|(_, v)| v).collect()),
        MetricKind::Map => qrels
            .query_ids()
            .into_iter()
            .map(|qid| {
                let rels = qrels.for_query(qid).expect("query listed in qrels");
                let ranked = ranked_ids(run, qid);
                Ok(average_precision(&ranked, rels)?.unwrap_or(0.0))
            })
            .collect(),
    }
}

fn metric_mean(metric: MetricKind, run: &Run, qrels: &Qrels, k: usize) -> Result<f64> {
    match metric {
        MetricKind::Ndcg => {
            let per = per_query_ndcg(run, qrels, k)?;
            Ok(per.iter().map(|(_, v)| v).sum::<f64>() / per.len() as f64)
        }
        MetricKind::Map => mean_average_precision(run, qrels),
    }
}

pub fn phase_evaluate(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    log::info!("evaluating runs");
    let qrels = Qrels::read_trec(&run.require("corpus/qrels.eval.txt", "gen-corpus")?)?;
    let (_, searches) = plan(cfg)?;
    let transfer = cfg.corpus.transfer_tags();
    let m = transfer.len().max(1);

    // Load every run file up front, grouped for the grid and the gate.
    let mut grid: IndexMap<(Variant, String, String), Run> = IndexMap::new();
    let mut gate_runs: IndexMap<(Variant, String), Run> = IndexMap::new();
    for sp in &searches {
        let path = run.require(&sp.file, "search")?;
        let result = read_run_trec(&path)?;
        if sp.label.starts_with("gate-") {
            gate_runs.insert((sp.variant, sp.label.clone()), result);
        } else {
            grid.insert((sp.variant, sp.label.clone(), sp.doc_lang.clone()), result);
        }
    }

    let mut gates = Vec::new();
    for &variant in &cfg.retrieval.variants {
        let (Some(trained), Some(untrained)) = (
            gate_runs.get(&(variant, "gate-trained".to_string())),
            gate_runs.get(&(variant, "gate-baseline".to_string())),
        ) else {
            continue;
        };
        let trained_score = metric_mean(MetricKind::Ndcg, trained, &qrels, cfg.eval.gate_k)?;
        let untrained_score = metric_mean(MetricKind::Ndcg, untrained, &qrels, cfg.eval.gate_k)?;
        gates.push(GateResult {
            variant: variant.to_string(),
            untrained: untrained_score,
            trained: trained_score,
            margin: trained_score - untrained_score,
        });
    }

    let mut tables = Vec::new();
    let mut ordering_notes = Vec::new();
    for &variant in &cfg.retrieval.variants {
        let labels: Vec<&str> = ROW_ORDER
            .iter()
            .copied()
            .filter(|l| transfer.iter().any(|lang| grid.contains_key(&(variant, l.to_string(), lang.clone()))))
            .collect();
        if labels.is_empty() {
            continue;
        }
        for &metric in &cfg.eval.metrics {
            let mut table = MetricTable::new(
                &format!("{variant} {}", metric.label(cfg.eval.k)),
                &transfer,
            );
            // Per-(row, language) per-query vectors for the paired tests.
            let mut vectors: IndexMap<(String, String), Vec<f64>> = IndexMap::new();
            for &label in &labels {
                let mut row = MetricRow::new(label);
                for lang in &transfer {
                    let Some(result) = grid.get(&(variant, label.to_string(), lang.clone())) else {
                        continue;
                    };
                    row.values
                        .insert(lang.clone(), metric_mean(metric, result, &qrels, cfg.eval.k)?);
                    vectors.insert(
                        (label.to_string(), lang.clone()),
                        metric_vector(metric, result, &qrels, cfg.eval.k)?,
                    );
                }
                table.rows.push(row);
            }

            // Marks: † against the FMFT row, * between E-E and E-D.
            for row_idx in 0..table.rows.len() {
                let label = table.rows[row_idx].label.clone();
                for lang in &transfer {
                    let mut marks = String::new();
                    if label != "FMFT" {
                        if let (Some(a), Some(b)) = (
                            vectors.get(&(label.clone(), lang.clone())),
                            vectors.get(&("FMFT".to_string(), lang.clone())),
                        ) {
                            if significant(a, b, m)? {
                                marks.push('†');
                            }
                        }
                    }
                    if label == "E-D" {
                        if let (Some(a), Some(b)) = (
                            vectors.get(&(label.clone(), lang.clone())),
                            vectors.get(&("E-E".to_string(), lang.clone())),
                        ) {
                            if significant(a, b, m)? {
                                marks.push('*');
                            }
                        }
                    }
                    if !marks.is_empty() {
                        table.rows[row_idx].marks.insert(lang.clone(), marks);
                    }
                }
            }

            if metric == MetricKind::Ndcg {
                if let Some(note) = ordering_note(variant, &table) {
                    ordering_notes.push(note);
                }
            }
            run.write_string(
                &format!("reports/{variant}.{}.csv", metric.slug()),
                &table.to_csv(),
            )?;
            tables.push(table);
        }
    }

    let report = render_experiment_report(cfg, &gates, &tables, &ordering_notes, m);
    run.write_string("reports/report.txt", &report)?;
    run.write_string(
        "reports/gate.json",
        &serde_json::to_string_pretty(&gates).expect("gates serialize"),
    )?;
    run.save_manifest()?;
    Ok(ExperimentOutcome { gates, tables, report })
}

fn significant(a: &[f64], b: &[f64], m: usize) -> Result<bool> {
    let t = paired_t_test(a, b)?;
    Ok(bonferroni(t.p, m)? < ALPHA)
}

fn ordering_note(variant: Variant, table: &MetricTable) -> Option<String> {
    let avg = |label: &str| -> Option<f64> {
        table
            .rows
            .iter()
            .find(|r| r.label == label)
            .and_then(|r| table.row_average(r))
    };
    let ee = avg("E-E")?;
    let ed = avg("E-D")?;
    let relation = match ee.partial_cmp(&ed)? {
        std::cmp::Ordering::Greater => "E-E scores higher",
        std::cmp::Ordering::Less => "E-D scores higher",
        std::cmp::Ordering::Equal => "tied",
    };
    Some(format!("{variant}: E-E {ee:.4} vs E-D {ed:.4} — {relation}"))
}

fn render_experiment_report(
    cfg: &ExperimentConfig,
    gates: &[GateResult],
    tables: &[MetricTable],
    ordering_notes: &[String],
    m: usize,
) -> String {
    let mut out = String::new();
    out.push_str("adapter cross-language retrieval report\n");
    out.push_str("=======================================\n\n");

    if !gates.is_empty() {
        out.push_str(&format!(
            "monolingual English sanity gate (nDCG@{} on held-out English queries, E-E):\n",
            cfg.eval.gate_k
        ));
        for g in gates {
            out.push_str(&format!(
                "  {:<9} untrained {:.4}   trained {:.4}   margin {:+.4}\n",
                g.variant, g.untrained, g.trained, g.margin
            ));
        }
        out.push('\n');
    }

    for table in tables {
        out.push_str(&format!("## {}\n", table.metric));
        out.push_str(&table.render_text());
        out.push('\n');
    }

    if !ordering_notes.is_empty() {
        out.push_str("E-E vs E-D ordering (row averages, nDCG):\n");
        for note in ordering_notes {
            out.push_str(&format!("  {note}\n"));
        }
        out.push('\n');
    }

    out.push_str(&format!(
        "marks: † differs from FMFT, * differs from E-E \
         (paired t-test, Bonferroni x{m}, two-sided α = {ALPHA})\n"
    ));
    out
}

/// Run every phase end to end and return the evaluation outcome.
pub fn run_experiment(run: &mut RunDir, cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    phase_gen_corpus(run, cfg)?;
    phase_pretrain_backbone(run, cfg)?;
    for tag in cfg.corpus.tags() {
        phase_pretrain_adapter(run, cfg, &tag)?;
    }
    for &variant in &cfg.retrieval.variants {
        for &mode in &cfg.retrieval.modes {
            phase_train(run, cfg, variant, mode)?;
        }
    }
    phase_index(run, cfg)?;
    phase_search(run, cfg)?;
    phase_evaluate(run, cfg)
}
