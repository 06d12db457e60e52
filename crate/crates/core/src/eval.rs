//! Ranking metrics, paired significance testing, and report tables.
//!
//! Metric conventions: nDCG uses exponential gain `(2^rel − 1)/log2(i+1)`
//! with the ideal ranking drawn from all judged documents; queries with no
//! relevant documents score 0 and still count toward the nDCG mean, but are
//! excluded from mean average precision. Significance between per-query
//! metric vectors uses a two-sided paired t-test with n−1 degrees of
//! freedom, with Bonferroni correction across comparisons.

use std::io::{BufRead, Write as _};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::QrelRecord;
use crate::error::{Error, Result};
use crate::pipeline::Run;

/// Relevance judgments: query → document → graded relevance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    by_query: IndexMap<String, IndexMap<String, u32>>,
}

impl Qrels {
    pub fn from_records(records: &[QrelRecord]) -> Self {
        let mut by_query: IndexMap<String, IndexMap<String, u32>> = IndexMap::new();
        for r in records {
            by_query
                .entry(r.query_id.clone())
                .or_default()
                .insert(r.doc_id.clone(), r.relevance);
        }
        Qrels { by_query }
    }

    pub fn for_query(&self, query_id: &str) -> Option<&IndexMap<String, u32>> {
        self.by_query.get(query_id)
    }

    pub fn query_ids(&self) -> Vec<&str> {
        self.by_query.keys().map(String::as_str).collect()
    }

    /// Parse the standard four-column format `qid 0 docid rel`.
    pub fn read_trec(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::Format {
                    path: format!("{}:{}", path.display(), i + 1),
                    message: "expected 'qid 0 docid rel'".into(),
                });
            }
            records.push(QrelRecord {
                query_id: parts[0].to_string(),
                doc_id: parts[2].to_string(),
                relevance: parts[3].parse().map_err(|_| Error::Format {
                    path: format!("{}:{}", path.display(), i + 1),
                    message: format!("bad relevance '{}'", parts[3]),
                })?,
            });
        }
        Ok(Qrels::from_records(&records))
    }

    pub fn write_trec(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (qid, docs) in &self.by_query {
            for (doc_id, rel) in docs {
                writeln!(f, "{qid} 0 {doc_id} {rel}")?;
            }
        }
        Ok(())
    }
}

fn check_duplicates(ranked_docs: &[&str]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for &doc in ranked_docs {
        if !seen.insert(doc) {
            return Err(Error::Config(format!("duplicate document in ranking: '{doc}'")));
        }
    }
    Ok(())
}

/// Normalized discounted cumulative gain over the first `k` ranks.
/// Returns 0 when the query has no relevant documents.
pub fn ndcg_at_k(ranked_docs: &[&str], rels: &IndexMap<String, u32>, k: usize) -> Result<f64> {
    check_duplicates(ranked_docs)?;
    let gain = |rel: u32| (2f64.powi(rel as i32)) - 1.0;
    let dcg: f64 = ranked_docs
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, doc)| {
            let rel = rels.get(*doc).copied().unwrap_or(0);
            gain(rel) / ((i + 2) as f64).log2()
        })
        .sum();
    let mut ideal: Vec<u32> = rels.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &rel)| gain(rel) / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        Ok(0.0)
    } else {
        Ok(dcg / idcg)
    }
}

/// Average precision with binarized relevance (rel ≥ 1 counts). Returns
/// `None` when the query has no relevant documents, so callers can exclude
/// it from the mean.
pub fn average_precision(
    ranked_docs: &[&str],
    rels: &IndexMap<String, u32>,
) -> Result<Option<f64>> {
    check_duplicates(ranked_docs)?;
    let total_relevant = rels.values().filter(|&&r| r >= 1).count();
    if total_relevant == 0 {
        return Ok(None);
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, doc) in ranked_docs.iter().enumerate() {
        if rels.get(*doc).copied().unwrap_or(0) >= 1 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(Some(sum / total_relevant as f64))
}

fn ranked_ids<'a>(run: &'a Run, query_id: &str) -> Vec<&'a str> {
    run.entries
        .iter()
        .filter(|e| e.query_id == query_id)
        .map(|e| e.doc_id.as_str())
        .collect()
}

static EMPTY_RELS: std::sync::OnceLock<IndexMap<String, u32>> = std::sync::OnceLock::new();

/// nDCG@k for every query judged in the qrels, in qrels order. Queries the
/// run never answered (or with no relevant documents) score 0 and count.
pub fn per_query_ndcg(run: &Run, qrels: &Qrels, k: usize) -> Result<Vec<(String, f64)>> {
    let empty = EMPTY_RELS.get_or_init(IndexMap::new);
    qrels
        .query_ids()
        .into_iter()
        .map(|qid| {
            let rels = qrels.for_query(qid).unwrap_or(empty);
            let ranked = ranked_ids(run, qid);
            Ok((qid.to_string(), ndcg_at_k(&ranked, rels, k)?))
        })
        .collect()
}

pub fn mean_ndcg(run: &Run, qrels: &Qrels, k: usize) -> Result<f64> {
    let per_query = per_query_ndcg(run, qrels, k)?;
    if per_query.is_empty() {
        return Err(Error::Config("no judged queries to evaluate".into()));
    }
    Ok(per_query.iter().map(|p| p.1).sum::<f64>() / per_query.len() as f64)
}

/// Mean average precision over queries that have at least one relevant
/// document.
pub fn mean_average_precision(run: &Run, qrels: &Qrels) -> Result<f64> {
    let mut values = Vec::new();
    for qid in qrels.query_ids() {
        let rels = qrels.for_query(qid).expect("id came from qrels");
        if let Some(ap) = average_precision(&ranked_ids(run, qid), rels)? {
            values.push(ap);
        }
    }
    if values.is_empty() {
        return Err(Error::Config(
            "no query with relevant documents to evaluate".into(),
        ));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
}

/// Two-sided paired t-test over aligned per-query metric vectors, n−1
/// degrees of freedom. Zero-variance differences degenerate to p = 1 when
/// the mean difference is zero and p = 0 otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::shape("paired_t_test", &[a.len()], &[b.len()]));
    }
    if a.len() < 2 {
        return Err(Error::Config(format!(
            "paired t-test needs at least 2 pairs, got {}",
            a.len()
        )));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0 }
        } else {
            TTest { t: f64::INFINITY * mean.signum(), p: 0.0 }
        });
    }
    let t = mean / (var / n).sqrt();
    let df = n - 1.0;
    let p = puruspe::betai(df / 2.0, 0.5, df / (df + t * t));
    Ok(TTest { t, p })
}

/// Bonferroni correction: `min(1, p·m)` for `m` simultaneous comparisons.
pub fn bonferroni(p: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Config("Bonferroni correction over zero comparisons".into()));
    }
    Ok((p * m as f64).min(1.0))
}

/// One rendered table: a metric, per-language columns plus the derived
/// average, and one row per training/inference setting with optional
/// significance marks next to each value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub metric: String,
    pub languages: Vec<String>,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub values: IndexMap<String, f64>,
    pub marks: IndexMap<String, String>,
}

impl MetricRow {
    pub fn new(label: &str) -> Self {
        MetricRow {
            label: label.to_string(),
            values: IndexMap::new(),
            marks: IndexMap::new(),
        }
    }
}

impl MetricTable {
    pub fn new(metric: &str, languages: &[String]) -> Self {
        MetricTable {
            metric: metric.to_string(),
            languages: languages.to_vec(),
            rows: Vec::new(),
        }
    }

    /// Mean over the language columns present in the row.
    pub fn row_average(&self, row: &MetricRow) -> Option<f64> {
        let values: Vec<f64> = self
            .languages
            .iter()
            .filter_map(|l| row.values.get(l).copied())
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{}\n", self.metric));
        let width = 12;
        out.push_str(&format!("{:<12}", "condition"));
        for lang in &self.languages {
            out.push_str(&format!("{lang:>width$}"));
        }
        out.push_str(&format!("{:>width$}\n", "Avg"));
        for row in &self.rows {
            out.push_str(&format!("{:<12}", row.label));
            for lang in &self.languages {
                let cell = match row.values.get(lang) {
                    Some(v) => format!(
                        "{:.4}{}",
                        v,
                        row.marks.get(lang).map(String::as_str).unwrap_or("")
                    ),
                    None => "-".to_string(),
                };
                out.push_str(&format!("{cell:>width$}"));
            }
            let avg = match self.row_average(row) {
                Some(v) => format!("{v:.4}"),
                None => "-".to_string(),
            };
            out.push_str(&format!("{avg:>width$}\n"));
        }
        out
    }

    /// CSV with full-precision values; `from_csv` restores them exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("condition");
        for lang in &self.languages {
            out.push_str(&format!(",{lang},{lang}:mark"));
        }
        out.push_str(",avg\n");
        for row in &self.rows {
            out.push_str(&row.label);
            for lang in &self.languages {
                match row.values.get(lang) {
                    Some(v) => out.push_str(&format!(
                        ",{v},{}",
                        row.marks.get(lang).map(String::as_str).unwrap_or("")
                    )),
                    None => out.push_str(",,"),
                }
            }
            match self.row_average(row) {
                Some(v) => out.push_str(&format!(",{v}\n")),
                None => out.push_str(",\n"),
            }
        }
        out
    }

    pub fn from_csv(metric: &str, csv: &str) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: format!("metric table '{metric}'"),
            message,
        };
        let mut lines = csv.lines();
        let header = lines.next().ok_or_else(|| bad("empty table".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"condition") || cols.last() != Some(&"avg") {
            return Err(bad("header must be 'condition,<lang>,<lang>:mark,...,avg'".into()));
        }
        let languages: Vec<String> = cols[1..cols.len() - 1]
            .chunks(2)
            .map(|pair| pair[0].to_string())
            .collect();
        let mut table = MetricTable::new(metric, &languages);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(bad(format!("row has {} fields, expected {}", fields.len(), cols.len())));
            }
            let mut row = MetricRow::new(fields[0]);
            for (i, lang) in languages.iter().enumerate() {
                let value = fields[1 + 2 * i];
                let mark = fields[2 + 2 * i];
                if !value.is_empty() {
                    row.values.insert(
                        lang.clone(),
                        value.parse().map_err(|_| bad(format!("bad value '{value}'")))?,
                    );
                }
                if !mark.is_empty() {
                    row.marks.insert(lang.clone(), mark.to_string());
                }
            }
            table.rows.push(row);
        }
        Ok(table)
    }
}

/// Render a bundle of metric tables as one text report.
pub fn render_report(tables: &[MetricTable]) -> String {
    let mut out = String::new();
    for (i, table) in tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&table.render_text());
    }
    if tables.is_empty() {
        out.push_str("(no results)\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::RankedDoc;
    use approx::assert_relative_eq;

    fn rels(pairs: &[(&str, u32)]) -> IndexMap<String, u32> {
        pairs.iter().map(|(d, r)| (d.to_string(), *r)).collect()
    }

    #[test]
    fn ndcg_matches_the_hand_worked_example() {
        // Ranked: rel 1, rel 0, rel 1 → DCG = 1 + 0 + 1/2 = 1.5... the
        // worked case: rels {a:1, b:2, c:1}, ranking [a, x, b]:
        // DCG = 1/log2(2) + 0 + 3/log2(4) = 1 + 1.5 = 2.5
        // IDCG = 3/log2(2) + 1/log2(3) ... top-3 ideal = [2,1,1]:
        // 3 + 1/1.585 + 1/2 — here judged docs are a(1), b(2), c(1):
        // IDCG@3 = 3 + 0.63093 + 0.5 = 4.13093
        let judged = rels(&[("a", 1), ("b", 2), ("c", 1)]);
        let got = ndcg_at_k(&["a", "x", "b"], &judged, 3).unwrap();
        let idcg = 3.0 + 1.0 / 3f64.log2() + 1.0 / 4f64.log2();
        assert_relative_eq!(got, 2.5 / idcg, max_relative = 1e-12);
    }

    #[test]
    fn ndcg_two_level_example_pinned() {
        // Independent fixture: ranking [d1,d2,d3], rels d1=2,d3=1 judged with
        // one more relevant doc d4=1 never retrieved.
        // DCG = (2^2−1)/log2(2) + 0 + (2^1−1)/log2(4) = 3 + 0.5 = 3.5
        // IDCG = 3 + 1/log2(3) + 1/log2(4) = 3 + 0.6309297535714575 + 0.5
        let judged = rels(&[("d1", 2), ("d3", 1), ("d4", 1)]);
        let got = ndcg_at_k(&["d1", "d2", "d3"], &judged, 3).unwrap();
        assert_relative_eq!(got, 3.5 / 4.130929753571458, max_relative = 1e-12);
    }

    #[test]
    fn perfect_ranking_scores_one_and_unjudged_scores_zero() {
        let judged = rels(&[("a", 2), ("b", 1)]);
        assert_relative_eq!(ndcg_at_k(&["a", "b"], &judged, 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&["x", "y"], &rels(&[]), 10).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&[], &judged, 10).unwrap(), 0.0);
    }

    #[test]
    fn ndcg_k_truncates_the_ranking() {
        let judged = rels(&[("a", 1)]);
        // Relevant doc at rank 3 but k=2: DCG = 0.
        assert_eq!(ndcg_at_k(&["x", "y", "a"], &judged, 2).unwrap(), 0.0);
        assert!(ndcg_at_k(&["x", "y", "a"], &judged, 3).unwrap() > 0.0);
    }

    #[test]
    fn duplicate_documents_are_rejected() {
        let judged = rels(&[("a", 1)]);
        assert!(matches!(
            ndcg_at_k(&["a", "b", "a"], &judged, 10),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            average_precision(&["b", "b"], &judged),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn average_precision_hand_example() {
        // Relevant docs a, c; ranking [a, b, c]: precisions 1/1 and 2/3,
        // AP = (1 + 2/3)/2 = 5/6.
        let judged = rels(&[("a", 1), ("c", 2)]);
        let ap = average_precision(&["a", "b", "c"], &judged).unwrap().unwrap();
        assert_relative_eq!(ap, 5.0 / 6.0, max_relative = 1e-12);

        // Binarization: grade 2 counts the same as grade 1.
        let graded = rels(&[("a", 2), ("c", 1)]);
        let ap2 = average_precision(&["a", "b", "c"], &graded).unwrap().unwrap();
        assert_eq!(ap, ap2);

        // Missing relevant doc halves the attainable mass.
        let judged = rels(&[("a", 1), ("zz", 1)]);
        let ap = average_precision(&["a", "b", "c"], &judged).unwrap().unwrap();
        assert_relative_eq!(ap, 0.5, max_relative = 1e-12);

        assert_eq!(average_precision(&["a", "b"], &rels(&[("x", 0)])).unwrap(), None);
    }

    fn run_for(entries: &[(&str, &str, f64)]) -> Run {
        Run {
            tag: "test".into(),
            entries: entries
                .iter()
                .enumerate()
                .map(|(i, (q, d, s))| RankedDoc {
                    query_id: q.to_string(),
                    doc_id: d.to_string(),
                    rank: i + 1,
                    score: *s,
                })
                .collect(),
        }
    }

    #[test]
    fn zero_relevant_queries_count_for_ndcg_but_not_map() {
        let qrels = Qrels::from_records(&[
            QrelRecord { query_id: "q1".into(), doc_id: "a".into(), relevance: 1 },
            QrelRecord { query_id: "q2".into(), doc_id: "b".into(), relevance: 0 },
        ]);
        let run = run_for(&[("q1", "a", 2.0), ("q2", "a", 1.0)]);
        // q1 scores 1.0, q2 scores 0.0 and still counts → mean 0.5.
        assert_relative_eq!(mean_ndcg(&run, &qrels, 10).unwrap(), 0.5);
        // MAP sees only q1.
        assert_relative_eq!(mean_average_precision(&run, &qrels).unwrap(), 1.0);
    }

    /// Frozen two-sided paired t-test oracle (reference implementation run
    /// beforehand at tolerance 1e-6): (differences, t, p).
    const T_ORACLE: &[(&[f64], f64, f64)] = &[
        (
            &[0.1, -0.2, 0.3, 0.05, -0.05, 0.4],
            1.1065666703449764,
            0.31885766977837704,
        ),
        (&[0.05, 0.01], 1.5, 0.3743340836219976),
        (
            &[-0.12, -0.31, 0.02, -0.25, -0.18],
            -2.9541957835039856,
            0.041794680456045286,
        ),
        (
            &[0.001, -0.002, 0.0015, -0.0005, 0.0008, -0.0012, 0.0003],
            -0.029774566708770645,
            0.9772125230733688,
        ),
        (
            &[0.21, 0.17, -0.04, 0.33, 0.12, 0.08, -0.11, 0.27, 0.19, 0.05],
            2.9517151440440754,
            0.016175784213078952,
        ),
        (&[0.3, -0.3, 0.3, -0.3, 0.3, -0.3, 0.3, -0.3], 0.0, 1.0),
    ];

    #[test]
    fn paired_t_test_matches_frozen_oracle() {
        for (diffs, t_ref, p_ref) in T_ORACLE {
            let b = vec![0.0; diffs.len()];
            let result = paired_t_test(diffs, &b).unwrap();
            assert!(
                (result.t - t_ref).abs() < 1e-6,
                "t {} vs {t_ref} for {diffs:?}",
                result.t
            );
            assert!(
                (result.p - p_ref).abs() < 1e-6,
                "p {} vs {p_ref} for {diffs:?}",
                result.p
            );
        }
    }

    #[test]
    fn paired_t_test_degenerate_and_error_cases() {
        let a = [0.5, 0.6, 0.7];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));

        // Constant non-zero differences: infinitely strong evidence.
        let b = [0.4, 0.5, 0.6];
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(r.t.is_infinite() && r.t > 0.0);

        assert!(matches!(
            paired_t_test(&[1.0, 2.0], &[1.0]),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(paired_t_test(&[1.0], &[2.0]), Err(Error::Config(_))));
    }

    #[test]
    fn t_test_is_antisymmetric() {
        let a = [0.61, 0.55, 0.70, 0.48, 0.66];
        let b = [0.58, 0.59, 0.61, 0.50, 0.60];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert_relative_eq!(ab.t, -ba.t, max_relative = 1e-12);
        assert_relative_eq!(ab.p, ba.p, max_relative = 1e-12);
    }

    #[test]
    fn bonferroni_clamps_at_one() {
        assert_eq!(bonferroni(0.01, 3).unwrap(), 0.03);
        assert_eq!(bonferroni(0.4, 3).unwrap(), 1.0);
        assert_eq!(bonferroni(0.2, 1).unwrap(), 0.2);
        assert!(bonferroni(0.1, 0).is_err());
    }

    #[test]
    fn qrels_trec_round_trip() {
        let records = vec![
            QrelRecord { query_id: "q1".into(), doc_id: "d1".into(), relevance: 2 },
            QrelRecord { query_id: "q1".into(), doc_id: "d2".into(), relevance: 1 },
            QrelRecord { query_id: "q2".into(), doc_id: "d3".into(), relevance: 0 },
        ];
        let qrels = Qrels::from_records(&records);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qrels.txt");
        qrels.write_trec(&path).unwrap();
        assert_eq!(Qrels::read_trec(&path).unwrap(), qrels);
    }

    #[test]
    fn metric_table_renders_marks_and_round_trips_csv() {
        let langs = vec!["lng1".to_string(), "lng2".to_string()];
        let mut table = MetricTable::new("nDCG@100", &langs);
        let mut fmft = MetricRow::new("FMFT");
        fmft.values.insert("lng1".into(), 0.512);
        fmft.values.insert("lng2".into(), 0.43721);
        let mut ee = MetricRow::new("E-E");
        ee.values.insert("lng1".into(), 0.5518391);
        ee.values.insert("lng2".into(), 0.4912);
        ee.marks.insert("lng1".into(), "†*".into());
        table.rows.push(fmft);
        table.rows.push(ee);

        let text = table.render_text();
        assert!(text.contains("nDCG@100"));
        assert!(text.contains("†*"));
        assert!(text.contains("Avg"));

        let csv = table.to_csv();
        let back = MetricTable::from_csv("nDCG@100", &csv).unwrap();
        assert_eq!(back, table);

        let empty = MetricTable::new("MAP", &langs);
        let csv = empty.to_csv();
        assert_eq!(csv.lines().count(), 1);
        assert_eq!(MetricTable::from_csv("MAP", &csv).unwrap(), empty);
    }

    #[test]
    fn report_concatenates_tables() {
        let t1 = MetricTable::new("nDCG@100", &["lng1".to_string()]);
        let t2 = MetricTable::new("MAP", &["lng1".to_string()]);
        let report = render_report(&[t1, t2]);
        assert!(report.contains("nDCG@100") && report.contains("MAP"));
        assert_eq!(render_report(&[]), "(no results)\n");
    }
}
