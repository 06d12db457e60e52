//! Synthetic multilingual corpora with exact parallel translations.
//!
//! Documents are topic-conditioned Zipfian token streams generated in a
//! shared "concept" space (identical to the English token space), then
//! rendered into each language through a per-language vocabulary bijection.
//! Aligned documents are therefore exact translations: same length, same
//! topic statistics, token-for-token mapped ids.
//!
//! Topical structure: the content vocabulary is split into per-topic document
//! blocks, per-topic query blocks, and a filler pool. A document draws most
//! tokens from its topic's document block and the rest from the filler pool;
//! a query is phrased entirely in its topic's query block. Query ids never
//! occur in any document, so a query shares no surface tokens with its
//! relevant documents and ranking quality has to come from learned topic
//! associations rather than string overlap. Relevance grades: the query's
//! source document is highly relevant, other same-topic documents are
//! relevant, everything else is not.

use std::io::{BufRead, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
/// Ids below this are reserved control tokens, identical in every language.
pub const RESERVED: usize = 10;

/// A language is a bijective re-labeling of the shared content vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticLanguage {
    pub tag: String,
    /// `vocab_map[id]` = this language's surface id for concept `id`.
    /// Identity on reserved ids; a permutation of content ids.
    pub vocab_map: Vec<usize>,
    pub zipf_s: f64,
    pub grammar_seed: u64,
}

impl SyntheticLanguage {
    /// English: the concept space itself (identity map).
    pub fn english(vocab_size: usize, zipf_s: f64) -> Self {
        SyntheticLanguage {
            tag: "eng".to_string(),
            vocab_map: (0..vocab_size).collect(),
            zipf_s,
            grammar_seed: 0,
        }
    }

    /// A non-English language: seeded shuffle of the content ids.
    pub fn shuffled(tag: &str, vocab_size: usize, zipf_s: f64, grammar_seed: u64) -> Self {
        let mut content: Vec<usize> = (RESERVED..vocab_size).collect();
        let mut rng = stream(grammar_seed, &format!("lang:{tag}:vocab_map"));
        content.shuffle(&mut rng);
        let mut vocab_map: Vec<usize> = (0..RESERVED).collect();
        vocab_map.extend(content);
        SyntheticLanguage {
            tag: tag.to_string(),
            vocab_map,
            zipf_s,
            grammar_seed,
        }
    }

    pub fn apply(&self, concept_id: usize) -> usize {
        self.vocab_map[concept_id]
    }

    pub fn inverse_map(&self) -> Vec<usize> {
        let mut inv = vec![0; self.vocab_map.len()];
        for (concept, &surface) in self.vocab_map.iter().enumerate() {
            inv[surface] = concept;
        }
        inv
    }

    pub fn render(&self, concept_tokens: &[usize]) -> Vec<usize> {
        concept_tokens.iter().map(|&t| self.apply(t)).collect()
    }

    fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.vocab_map.len() != vocab_size {
            return Err(Error::shape(
                format!("vocab_map of '{}'", self.tag),
                &[vocab_size],
                &[self.vocab_map.len()],
            ));
        }
        let mut seen = vec![false; vocab_size];
        for (i, &v) in self.vocab_map.iter().enumerate() {
            if v >= vocab_size || seen[v] || (i < RESERVED && v != i) {
                return Err(Error::Config(format!(
                    "vocab_map of '{}' is not a reserved-preserving bijection",
                    self.tag
                )));
            }
            seen[v] = true;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub languages: Vec<SyntheticLanguage>,
    pub docs_per_language: usize,
    /// Inclusive range of content tokens per document.
    pub tokens_per_doc: (usize, usize),
    pub topic_count: usize,
    pub vocab_size: usize,
    /// Probability that a document token comes from its topic block.
    pub topic_token_share: f64,
    pub train_queries: usize,
    pub eval_queries: usize,
    /// Inclusive range of content tokens per query.
    pub query_len: (usize, usize),
}

impl CorpusSpec {
    /// Per-topic document-block width.
    pub fn topic_block(&self) -> usize {
        (self.vocab_size - RESERVED) / (2 * self.topic_count)
    }

    /// Per-topic query-block width. Queries are phrased in these ids, which
    /// never appear in documents.
    pub fn query_block(&self) -> usize {
        (self.topic_block() / 2).max(1)
    }

    /// First id after the document blocks; the query blocks start here.
    fn query_start(&self) -> usize {
        RESERVED + self.topic_count * self.topic_block()
    }

    /// First id after the query blocks; the rest of the vocabulary is the
    /// filler pool documents draw their off-topic tokens from.
    fn filler_start(&self) -> usize {
        self.query_start() + self.topic_count * self.query_block()
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.len() < 2 {
            return Err(Error::Config("need at least two languages".into()));
        }
        if !self.languages.iter().any(|l| l.tag == "eng") {
            return Err(Error::Config("one language must be tagged 'eng'".into()));
        }
        let mut tags: Vec<&str> = self.languages.iter().map(|l| l.tag.as_str()).collect();
        tags.sort();
        if tags.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate language tags".into()));
        }
        for lang in &self.languages {
            lang.validate(self.vocab_size)?;
        }
        if self.topic_count == 0 || self.topic_block() == 0 {
            return Err(Error::Config(format!(
                "vocabulary {} too small for {} topics",
                self.vocab_size, self.topic_count
            )));
        }
        if self.filler_start() >= self.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary {} leaves no filler pool after {} document and query blocks",
                self.vocab_size, self.topic_count
            )));
        }
        if self.tokens_per_doc.0 == 0 || self.tokens_per_doc.0 > self.tokens_per_doc.1 {
            return Err(Error::Config("invalid tokens_per_doc range".into()));
        }
        if self.query_len.0 == 0 || self.query_len.0 > self.query_len.1 {
            return Err(Error::Config("invalid query_len range".into()));
        }
        if !(0.0..=1.0).contains(&self.topic_token_share) {
            return Err(Error::Config("topic_token_share must be in [0,1]".into()));
        }
        if self.docs_per_language < self.topic_count {
            return Err(Error::Config(
                "docs_per_language must be at least topic_count".into(),
            ));
        }
        Ok(())
    }
}

/// Zipf sampler over ranks `0..k` with exponent `s`, by inverse CDF.
#[derive(Debug, Clone)]
pub struct Zipf {
    cum: Vec<f64>,
}

impl Zipf {
    pub fn new(k: usize, s: f64) -> Self {
        let mut cum = Vec::with_capacity(k);
        let mut total = 0.0;
        for rank in 1..=k {
            total += 1.0 / (rank as f64).powf(s);
            cum.push(total);
        }
        for c in &mut cum {
            *c /= total;
        }
        Zipf { cum }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        self.cum.partition_point(|&c| c < u).min(self.cum.len() - 1)
    }

    /// Probability of rank `i` (for goodness-of-fit checks).
    pub fn pmf(&self, i: usize) -> f64 {
        if i == 0 {
            self.cum[0]
        } else {
            self.cum[i] - self.cum[i - 1]
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub lang: String,
    pub token_ids: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub lang: String,
    pub token_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QrelRecord {
    pub query_id: String,
    pub doc_id: String,
    pub relevance: u32,
}

/// Training triple by reference; token ids are materialized at training time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleRef {
    pub query_id: String,
    pub positive_doc: String,
    pub negative_doc: String,
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    /// Language tag → documents in parallel-group order. Aligned documents
    /// share their `doc_id` across languages.
    pub docs: IndexMap<String, Vec<Document>>,
    pub queries_train: Vec<Query>,
    pub queries_eval: Vec<Query>,
    /// Relevance judgments for the evaluation queries.
    pub qrels: Vec<QrelRecord>,
    pub triples: Vec<TripleRef>,
    pub topic_count: usize,
}

impl GeneratedCorpus {
    pub fn language_tags(&self) -> Vec<String> {
        self.docs.keys().cloned().collect()
    }

    pub fn doc_topic(&self, group: usize) -> usize {
        group % self.topic_count
    }
}

fn doc_id(group: usize) -> String {
    format!("d{group:04}")
}

pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let block = spec.topic_block();
    let qblock = spec.query_block();
    let query_start = spec.query_start();
    let filler_start = spec.filler_start();
    let zipf_s = spec.languages[0].zipf_s;
    let topic_zipf = Zipf::new(block, zipf_s);
    let query_zipf = Zipf::new(qblock, zipf_s);
    let filler_zipf = Zipf::new(spec.vocab_size - filler_start, zipf_s);

    // Concept-space documents, one per parallel group. Each document draws
    // from its own seeded stream, so the parallel map is deterministic.
    let concept_docs: Vec<Vec<usize>> = (0..spec.docs_per_language)
        .into_par_iter()
        .map(|group| {
            let topic = group % spec.topic_count;
            let mut rng = stream(seed, &format!("corpus:doc:{group}"));
            let len = rng.gen_range(spec.tokens_per_doc.0..=spec.tokens_per_doc.1);
            (0..len)
                .map(|_| {
                    if rng.gen::<f64>() < spec.topic_token_share {
                        RESERVED + topic * block + topic_zipf.sample(&mut rng)
                    } else {
                        filler_start + filler_zipf.sample(&mut rng)
                    }
                })
                .collect()
        })
        .collect();

    let mut docs: IndexMap<String, Vec<Document>> = IndexMap::new();
    for lang in &spec.languages {
        let rendered: Vec<Document> = concept_docs
            .iter()
            .enumerate()
            .map(|(group, concept)| Document {
                doc_id: doc_id(group),
                lang: lang.tag.clone(),
                token_ids: lang.render(concept),
            })
            .collect();
        docs.insert(lang.tag.clone(), rendered);
    }

    // English queries: tokens drawn from the topic's query block only, so a
    // query never shares a surface token with any document.
    let make_query = |kind: &str, i: usize| -> (Query, usize) {
        let group = match kind {
            "t" => (i * 7 + 3) % spec.docs_per_language,
            _ => (i * 11 + 5) % spec.docs_per_language,
        };
        let topic = group % spec.topic_count;
        let mut rng = stream(seed, &format!("corpus:query:{kind}:{i}"));
        let len = rng.gen_range(spec.query_len.0..=spec.query_len.1);
        let tokens: Vec<usize> = (0..len)
            .map(|_| query_start + topic * qblock + query_zipf.sample(&mut rng))
            .collect();
        (
            Query {
                query_id: format!("q{kind}{i:04}"),
                lang: "eng".to_string(),
                token_ids: tokens,
            },
            group,
        )
    };

    let mut queries_train = Vec::with_capacity(spec.train_queries);
    let mut triples = Vec::with_capacity(spec.train_queries);
    for i in 0..spec.train_queries {
        let (q, group) = make_query("t", i);
        let topic = group % spec.topic_count;
        // Negative: a document from a different topic.
        let mut rng = stream(seed, &format!("corpus:negative:{i}"));
        let neg_group = loop {
            let g = rng.gen_range(0..spec.docs_per_language);
            if g % spec.topic_count != topic {
                break g;
            }
        };
        triples.push(TripleRef {
            query_id: q.query_id.clone(),
            positive_doc: doc_id(group),
            negative_doc: doc_id(neg_group),
        });
        queries_train.push(q);
    }

    let mut queries_eval = Vec::with_capacity(spec.eval_queries);
    let mut qrels = Vec::new();
    for i in 0..spec.eval_queries {
        let (q, group) = make_query("e", i);
        let topic = group % spec.topic_count;
        qrels.push(QrelRecord {
            query_id: q.query_id.clone(),
            doc_id: doc_id(group),
            relevance: 2,
        });
        for g in 0..spec.docs_per_language {
            if g != group && g % spec.topic_count == topic {
                qrels.push(QrelRecord {
                    query_id: q.query_id.clone(),
                    doc_id: doc_id(g),
                    relevance: 1,
                });
            }
        }
        queries_eval.push(q);
    }

    Ok(GeneratedCorpus {
        docs,
        queries_train,
        queries_eval,
        qrels,
        triples,
        topic_count: spec.topic_count,
    })
}

/// Write all corpus artifacts under `dir` using the documented formats:
/// per-language JSONL corpora, an alignment TSV, query JSONL files, TREC
/// qrels, and the training-triple TSV.
pub fn write_corpus(corpus: &GeneratedCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (tag, docs) in &corpus.docs {
        let mut f = std::io::BufWriter::new(std::fs::File::create(
            dir.join(format!("corpus.{tag}.jsonl")),
        )?);
        for doc in docs {
            serde_json::to_writer(&mut f, doc).map_err(|e| Error::Format {
                path: format!("corpus.{tag}.jsonl"),
                message: e.to_string(),
            })?;
            writeln!(f)?;
        }
    }

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("alignment.tsv"))?);
    for (tag, docs) in &corpus.docs {
        for (group, doc) in docs.iter().enumerate() {
            writeln!(f, "{}\t{}\t{}", doc.doc_id, tag, group)?;
        }
    }

    for (name, queries) in [
        ("queries.train.jsonl", &corpus.queries_train),
        ("queries.eval.jsonl", &corpus.queries_eval),
    ] {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
        for q in queries {
            serde_json::to_writer(&mut f, q).map_err(|e| Error::Format {
                path: name.to_string(),
                message: e.to_string(),
            })?;
            writeln!(f)?;
        }
    }

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("qrels.eval.txt"))?);
    for r in &corpus.qrels {
        writeln!(f, "{} 0 {} {}", r.query_id, r.doc_id, r.relevance)?;
    }

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("triples.train.tsv"))?);
    for t in &corpus.triples {
        writeln!(f, "{}\t{}\t{}", t.query_id, t.positive_doc, t.negative_doc)?;
    }
    Ok(())
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(docs)
}

pub fn read_queries(path: &Path) -> Result<Vec<Query>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut queries = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        queries.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(queries)
}

pub fn read_triples(path: &Path) -> Result<Vec<TripleRef>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut triples = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Format {
                path: format!("{}:{}", path.display(), i + 1),
                message: format!("expected 3 tab-separated fields, got {}", parts.len()),
            });
        }
        triples.push(TripleRef {
            query_id: parts[0].to_string(),
            positive_doc: parts[1].to_string(),
            negative_doc: parts[2].to_string(),
        });
    }
    Ok(triples)
}

/// Desk-scale default spec used by tests and the shipped experiment config.
pub fn desk_spec(vocab_size: usize) -> CorpusSpec {
    CorpusSpec {
        languages: vec![
            SyntheticLanguage::english(vocab_size, 1.1),
            SyntheticLanguage::shuffled("lng1", vocab_size, 1.1, 101),
        ],
        docs_per_language: 120,
        tokens_per_doc: (60, 200),
        topic_count: 12,
        vocab_size,
        topic_token_share: 0.65,
        train_queries: 96,
        eval_queries: 40,
        query_len: (4, 8),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CorpusSpec {
        let mut s = desk_spec(128);
        s.docs_per_language = 24;
        s.tokens_per_doc = (20, 40);
        s.topic_count = 4;
        s.train_queries = 8;
        s.eval_queries = 6;
        s
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (a, b) = (generate_corpus(&spec(), 7).unwrap(), generate_corpus(&spec(), 7).unwrap());
        assert_eq!(a.docs, b.docs);
        assert_eq!(a.queries_train, b.queries_train);
        assert_eq!(a.qrels, b.qrels);
        assert_eq!(a.triples, b.triples);
        let c = generate_corpus(&spec(), 8).unwrap();
        assert_ne!(a.docs, c.docs);
    }

    #[test]
    fn vocab_map_round_trips() {
        let lang = SyntheticLanguage::shuffled("lng1", 128, 1.1, 3);
        let inv = lang.inverse_map();
        for id in 0..128 {
            assert_eq!(inv[lang.apply(id)], id);
        }
        // Reserved ids are fixed points.
        for id in 0..RESERVED {
            assert_eq!(lang.apply(id), id);
        }
    }

    #[test]
    fn parallel_documents_are_exact_translations() {
        let corpus = generate_corpus(&spec(), 5).unwrap();
        let eng = &corpus.docs["eng"];
        let lng1 = &corpus.docs["lng1"];
        let lang = spec().languages[1].clone();
        let inv = lang.inverse_map();
        for (e, l) in eng.iter().zip(lng1) {
            assert_eq!(e.doc_id, l.doc_id);
            assert_eq!(e.token_ids.len(), l.token_ids.len());
            let back: Vec<usize> = l.token_ids.iter().map(|&t| inv[t]).collect();
            assert_eq!(back, e.token_ids);
        }
    }

    #[test]
    fn rejects_duplicate_tags_and_missing_english() {
        let mut s = spec();
        s.languages[1].tag = "eng".into();
        assert!(matches!(generate_corpus(&s, 0), Err(Error::Config(_))));

        let mut s = spec();
        s.languages[0].tag = "deu".into();
        assert!(matches!(generate_corpus(&s, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zipf_sampler_matches_pmf_by_chi_square() {
        let k = 20;
        let zipf = Zipf::new(k, 1.1);
        let n = 100_000;
        let mut rng = stream(42, "test:zipf");
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            counts[zipf.sample(&mut rng)] += 1;
        }
        let chi2: f64 = (0..k)
            .map(|i| {
                let expected = zipf.pmf(i) * n as f64;
                (counts[i] as f64 - expected).powi(2) / expected
            })
            .sum();
        // 19 degrees of freedom; the 0.999 quantile is ~43.8. Seeded, so this
        // is a regression bound rather than a flaky statistical test.
        assert!(chi2 < 43.8, "chi2 = {chi2}");
        // Rank ordering: lower ranks strictly more frequent at the head.
        assert!(counts[0] > counts[1] && counts[1] > counts[2]);
    }

    #[test]
    fn qrels_mark_source_doc_highest_and_same_topic_relevant() {
        let s = spec();
        let corpus = generate_corpus(&s, 9).unwrap();
        let docs_per_topic = s.docs_per_language / s.topic_count;
        for q in &corpus.queries_eval {
            let rels: Vec<&QrelRecord> =
                corpus.qrels.iter().filter(|r| r.query_id == q.query_id).collect();
            assert_eq!(rels.iter().filter(|r| r.relevance == 2).count(), 1);
            assert_eq!(
                rels.iter().filter(|r| r.relevance == 1).count(),
                docs_per_topic - 1
            );
        }
    }

    #[test]
    fn triples_pair_same_topic_positive_with_cross_topic_negative() {
        let s = spec();
        let corpus = generate_corpus(&s, 11).unwrap();
        let topic_of = |id: &str| -> usize {
            id[1..].parse::<usize>().unwrap() % s.topic_count
        };
        for t in &corpus.triples {
            assert_ne!(topic_of(&t.positive_doc), topic_of(&t.negative_doc));
        }
    }

    #[test]
    fn file_round_trip_preserves_documents_and_triples() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&spec(), 13).unwrap();
        write_corpus(&corpus, dir.path()).unwrap();

        let eng = read_documents(&dir.path().join("corpus.eng.jsonl")).unwrap();
        assert_eq!(&eng, &corpus.docs["eng"]);
        let qs = read_queries(&dir.path().join("queries.eval.jsonl")).unwrap();
        assert_eq!(&qs, &corpus.queries_eval);
        let ts = read_triples(&dir.path().join("triples.train.tsv")).unwrap();
        assert_eq!(&ts, &corpus.triples);
    }

    #[test]
    fn written_files_are_deterministic() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_corpus(&generate_corpus(&spec(), 21).unwrap(), d1.path()).unwrap();
        write_corpus(&generate_corpus(&spec(), 21).unwrap(), d2.path()).unwrap();
        for name in ["corpus.eng.jsonl", "corpus.lng1.jsonl", "alignment.tsv", "qrels.eval.txt"] {
            assert_eq!(
                std::fs::read(d1.path().join(name)).unwrap(),
                std::fs::read(d2.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn document_tokens_stay_in_content_range() {
        let s = spec();
        let corpus = generate_corpus(&s, 17).unwrap();
        for docs in corpus.docs.values() {
            for d in docs {
                assert!(d.token_ids.iter().all(|&t| (RESERVED..s.vocab_size).contains(&t)));
            }
        }
    }

    #[test]
    fn queries_share_no_surface_tokens_with_documents() {
        let s = spec();
        let corpus = generate_corpus(&s, 19).unwrap();
        let query_range = s.query_start()..s.filler_start();
        for q in corpus.queries_train.iter().chain(&corpus.queries_eval) {
            assert!(
                q.token_ids.iter().all(|t| query_range.contains(t)),
                "{} strayed outside the query blocks",
                q.query_id
            );
        }
        // English documents are the concept space itself, so checking them
        // covers every language: the bijections fix nothing outside RESERVED.
        for d in &corpus.docs["eng"] {
            assert!(
                d.token_ids.iter().all(|t| !query_range.contains(t)),
                "{} contains query-block ids",
                d.doc_id
            );
        }
    }
}
