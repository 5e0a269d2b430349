//! Ranked-retrieval metrics and TREC run files.
//!
//! Unjudged documents count as non-relevant. Queries without any relevant
//! judgment are skipped and tallied rather than scored as zero.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::corpus::Judgments;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Ranked results per query. Ranks are `1..=n` and scores non-increasing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunFile {
    pub tag: String,
    pub queries: BTreeMap<String, Vec<RunEntry>>,
}

impl RunFile {
    pub fn new(tag: impl Into<String>) -> Self {
        RunFile {
            tag: tag.into(),
            queries: BTreeMap::new(),
        }
    }

    /// Adds a ranking already ordered best-first; ranks are assigned 1..n.
    pub fn insert(&mut self, qid: impl Into<String>, ranked: impl IntoIterator<Item = (String, f64)>) -> Result<()> {
        let qid = qid.into();
        let entries: Vec<RunEntry> = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (doc_id, score))| RunEntry { doc_id, score, rank: i + 1 })
            .collect();
        if entries.windows(2).any(|w| w[1].score > w[0].score) {
            return Err(Error::Format(format!("scores for query {qid} are not non-increasing")));
        }
        if self.queries.insert(qid.clone(), entries).is_some() {
            return Err(Error::DuplicateId(qid));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn ranking(&self, qid: &str) -> Option<&[RunEntry]> {
        self.queries.get(qid).map(Vec::as_slice)
    }

    fn top_ids(&self, qid: &str, k: usize) -> Vec<&str> {
        self.ranking(qid)
            .unwrap_or_default()
            .iter()
            .take(k)
            .map(|e| e.doc_id.as_str())
            .collect()
    }
}

pub fn write_run(run: &RunFile, w: &mut impl Write) -> std::io::Result<()> {
    for (qid, entries) in &run.queries {
        for e in entries {
            writeln!(w, "{qid} Q0 {} {} {} {}", e.doc_id, e.rank, e.score, run.tag)?;
        }
    }
    Ok(())
}

pub fn save_run(run: &RunFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_run(run, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parses `qid Q0 docid rank score tag` lines. Ranks of each query must
/// continue 1, 2, 3, … in file order with non-increasing scores.
pub fn parse_run(reader: impl BufRead, name: &str) -> Result<RunFile> {
    let mut run = RunFile::default();
    let mut tag: Option<String> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::parse(name, lineno, format!("expected 6 fields, found {}", f.len())));
        }
        if f[1] != "Q0" {
            return Err(Error::parse(name, lineno, format!("second field must be Q0, found `{}`", f[1])));
        }
        let rank: usize = f[3]
            .parse()
            .map_err(|_| Error::parse(name, lineno, format!("bad rank `{}`", f[3])))?;
        let score: f64 = f[4]
            .parse()
            .map_err(|_| Error::parse(name, lineno, format!("bad score `{}`", f[4])))?;
        match &tag {
            None => tag = Some(f[5].to_string()),
            Some(t) if t != f[5] => return Err(Error::parse(name, lineno, format!("tag `{}` differs from `{t}`", f[5]))),
            _ => {}
        }
        let entries = run.queries.entry(f[0].to_string()).or_default();
        if rank != entries.len() + 1 {
            return Err(Error::parse(name, lineno, format!("rank {rank} out of order for query {}", f[0])));
        }
        if entries.last().is_some_and(|prev| score > prev.score) {
            return Err(Error::parse(name, lineno, format!("score increases at rank {rank} for query {}", f[0])));
        }
        if entries.iter().any(|e| e.doc_id == f[2]) {
            return Err(Error::parse(name, lineno, format!("document {} repeated for query {}", f[2], f[0])));
        }
        entries.push(RunEntry {
            doc_id: f[2].to_string(),
            score,
            rank,
        });
    }
    run.tag = tag.unwrap_or_default();
    Ok(run)
}

pub fn load_run(path: impl AsRef<Path>) -> Result<RunFile> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_run(BufReader::new(file), &path.display().to_string())
}

/// Mean of a per-query metric plus how many queries were scored and skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricValue {
    pub mean: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

fn mean_over<F>(run: &RunFile, judgments: &Judgments, mut per_query: F) -> Result<MetricValue>
where
    F: FnMut(&str, &[RunEntry]) -> f64,
{
    if run.is_empty() {
        return Err(Error::Empty("run"));
    }
    let (mut sum, mut evaluated, mut skipped) = (0.0, 0, 0);
    for (qid, entries) in &run.queries {
        if judgments.num_relevant(qid) == 0 {
            skipped += 1;
            continue;
        }
        sum += per_query(qid, entries);
        evaluated += 1;
    }
    Ok(MetricValue {
        mean: if evaluated == 0 { 0.0 } else { sum / evaluated as f64 },
        evaluated,
        skipped,
    })
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

/// NDCG@k for one ranking with gain `2^g − 1` and discount `log2(i + 1)`.
pub fn ndcg_query(judgments: &Judgments, qid: &str, ranked: &[&str], k: usize) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(judgments.grade(qid, d).unwrap_or(0)) / ((i + 2) as f64).log2())
        .sum();
    let mut grades: Vec<u32> = judgments
        .for_query(qid)
        .map(|m| m.values().copied().filter(|&g| g > 0).collect())
        .unwrap_or_default();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let ideal: f64 = grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
        .sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

pub fn ndcg_at_k(run: &RunFile, judgments: &Judgments, k: usize) -> Result<MetricValue> {
    mean_over(run, judgments, |qid, entries| {
        let ids: Vec<&str> = entries.iter().map(|e| e.doc_id.as_str()).collect();
        ndcg_query(judgments, qid, &ids, k)
    })
}

pub fn mrr_query(judgments: &Judgments, qid: &str, ranked: &[&str], k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|d| judgments.is_relevant(qid, d))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

pub fn mrr_at_k(run: &RunFile, judgments: &Judgments, k: usize) -> Result<MetricValue> {
    mean_over(run, judgments, |qid, entries| {
        let ids: Vec<&str> = entries.iter().map(|e| e.doc_id.as_str()).collect();
        mrr_query(judgments, qid, &ids, k)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecallValue {
    pub recall: f64,
    /// Fraction of queries with at least one relevant document in the top-k.
    pub coverage: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

pub fn recall_at_k(run: &RunFile, judgments: &Judgments, k: usize) -> Result<RecallValue> {
    let mut hits_any = 0.0;
    let recall = mean_over(run, judgments, |qid, entries| {
        let found = entries
            .iter()
            .take(k)
            .filter(|e| judgments.is_relevant(qid, &e.doc_id))
            .count();
        if found > 0 {
            hits_any += 1.0;
        }
        found as f64 / judgments.num_relevant(qid) as f64
    })?;
    Ok(RecallValue {
        recall: recall.mean,
        coverage: if recall.evaluated == 0 { 0.0 } else { hits_any / recall.evaluated as f64 },
        evaluated: recall.evaluated,
        skipped: recall.skipped,
    })
}

/// Mean fraction of each query's top-k carrying no judgment at all.
/// Queries with an empty ranking are ignored.
pub fn hole_rate(run: &RunFile, judgments: &Judgments, k: usize) -> f64 {
    let rates: Vec<f64> = run
        .queries
        .iter()
        .filter(|(_, e)| !e.is_empty() && k > 0)
        .map(|(qid, entries)| {
            let top = &entries[..k.min(entries.len())];
            top.iter().filter(|e| !judgments.is_judged(qid, &e.doc_id)).count() as f64 / top.len() as f64
        })
        .collect();
    if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunOverlap {
    pub mean: f64,
    pub common_queries: usize,
    /// True when the two runs do not cover the same query set.
    pub query_mismatch: bool,
}

/// Mean per-query `|top-k(A) ∩ top-k(B)| / k` over the queries both runs share.
pub fn run_overlap(a: &RunFile, b: &RunFile, k: usize) -> RunOverlap {
    let common: Vec<&String> = a.queries.keys().filter(|q| b.queries.contains_key(*q)).collect();
    let mismatch = common.len() != a.len() || common.len() != b.len();
    let mean = if common.is_empty() || k == 0 {
        0.0
    } else {
        common
            .iter()
            .map(|q| {
                let ta: HashSet<&str> = a.top_ids(q, k).into_iter().collect();
                b.top_ids(q, k).iter().filter(|d| ta.contains(*d)).count() as f64 / k as f64
            })
            .sum::<f64>()
            / common.len() as f64
    };
    RunOverlap {
        mean,
        common_queries: common.len(),
        query_mismatch: mismatch,
    }
}

/// The standard evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ndcg_10: MetricValue,
    pub mrr_10: MetricValue,
    pub recall_10: RecallValue,
    pub recall_100: RecallValue,
    pub hole_rate_10: f64,
}

pub fn evaluate(run: &RunFile, judgments: &Judgments) -> Result<EvalReport> {
    Ok(EvalReport {
        ndcg_10: ndcg_at_k(run, judgments, 10)?,
        mrr_10: mrr_at_k(run, judgments, 10)?,
        recall_10: recall_at_k(run, judgments, 10)?,
        recall_100: recall_at_k(run, judgments, 100)?,
        hole_rate_10: hole_rate(run, judgments, 10),
    })
}
