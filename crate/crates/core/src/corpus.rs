//! Collections, text featurization, passage splitting, and the synthetic
//! vocabulary-mismatch generator.
//!
//! Text reaches the encoder as a [`FeatureVector`]: lowercase alphanumeric
//! tokens (plus optional adjacent bigrams) hashed with FNV-1a 64 into a fixed
//! number of buckets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            parent_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Query {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// An immutable document collection with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if d.parent_id.as_deref() == Some(d.id.as_str()) {
                return Err(Error::Config(format!(
                    "document `{}` names itself as parent",
                    d.id
                )));
            }
            if by_id.insert(d.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(d.id.clone()));
            }
        }
        Ok(Corpus { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc(&self, idx: usize) -> &Document {
        &self.docs[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.index_of(id).map(|i| &self.docs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.docs.iter()
    }
}

/// Graded relevance labels keyed by query id then document id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Judgments {
    grades: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Judgments {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a grade, returning the previous one if the pair was already judged.
    pub fn insert(&mut self, qid: &str, doc_id: &str, grade: u32) -> Option<u32> {
        self.grades
            .entry(qid.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade)
    }

    pub fn grade(&self, qid: &str, doc_id: &str) -> Option<u32> {
        self.grades.get(qid).and_then(|m| m.get(doc_id)).copied()
    }

    pub fn is_relevant(&self, qid: &str, doc_id: &str) -> bool {
        self.grade(qid, doc_id).is_some_and(|g| g > 0)
    }

    pub fn is_judged(&self, qid: &str, doc_id: &str) -> bool {
        self.grade(qid, doc_id).is_some()
    }

    /// D⁺(q): documents with grade > 0, in ascending id order.
    pub fn relevant(&self, qid: &str) -> impl Iterator<Item = &str> {
        self.grades
            .get(qid)
            .into_iter()
            .flat_map(|m| m.iter())
            .filter(|(_, &g)| g > 0)
            .map(|(d, _)| d.as_str())
    }

    pub fn num_relevant(&self, qid: &str) -> usize {
        self.relevant(qid).count()
    }

    pub fn for_query(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.grades.get(qid)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.grades
            .iter()
            .flat_map(|(q, m)| m.iter().map(move |(d, &g)| (q.as_str(), d.as_str(), g)))
    }

    pub fn len(&self) -> usize {
        self.grades.values().map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that every referenced id exists in the given collections.
    pub fn validate(&self, corpus: &Corpus, queries: &[Query]) -> Result<()> {
        let qids: HashSet<&str> = queries.iter().map(|q| q.id.as_str()).collect();
        for (q, d, _) in self.iter() {
            if !qids.contains(q) {
                return Err(Error::UnknownId(q.to_string()));
            }
            if corpus.index_of(d).is_none() {
                return Err(Error::UnknownId(d.to_string()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tokenization and hashing
// ---------------------------------------------------------------------------

/// Lowercase tokens split on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    token_spans(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_lowercase())
        .collect()
}

/// Byte ranges of the tokens `tokenize` would produce.
fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            spans.push((s, i));
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingConfig {
    pub dim: u32,
    pub use_bigrams: bool,
}

impl Default for HashingConfig {
    fn default() -> Self {
        HashingConfig {
            dim: 65_536,
            use_bigrams: true,
        }
    }
}

impl HashingConfig {
    pub fn featurize_text(&self, text: &str) -> FeatureVector {
        featurize(&tokenize(text), self.dim, self.use_bigrams)
    }
}

/// Sparse hashed n-gram counts, sorted by feature index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    entries: Vec<(u32, f64)>,
    dim: u32,
}

impl FeatureVector {
    /// Builds a vector from arbitrary entries; duplicate indices are summed and
    /// non-positive counts dropped.
    pub fn from_entries(dim: u32, entries: impl IntoIterator<Item = (u32, f64)>) -> Result<Self> {
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        for (i, c) in entries {
            if i >= dim {
                return Err(Error::Dimension {
                    expected: dim as usize,
                    got: i as usize + 1,
                });
            }
            if !c.is_finite() {
                return Err(Error::NonFinite { stage: "feature count" });
            }
            *acc.entry(i).or_insert(0.0) += c;
        }
        Ok(FeatureVector {
            entries: acc.into_iter().filter(|&(_, c)| c > 0.0).collect(),
            dim,
        })
    }

    pub fn empty(dim: u32) -> Self {
        FeatureVector {
            entries: Vec::new(),
            dim,
        }
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, idx: u32) -> f64 {
        self.entries
            .binary_search_by_key(&idx, |&(i, _)| i)
            .map(|p| self.entries[p].1)
            .unwrap_or(0.0)
    }
}

pub fn feature_index(token: &str, dim: u32) -> u32 {
    (fnv1a64(token.as_bytes()) % u64::from(dim)) as u32
}

/// Hashes unigram (and optionally `a_b` bigram) counts into `dim` buckets.
///
/// `dim` must be at least 2.
pub fn featurize<S: AsRef<str>>(tokens: &[S], dim: u32, use_bigrams: bool) -> FeatureVector {
    assert!(dim >= 2, "feature dimension must be at least 2");
    let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
    for t in tokens {
        *acc.entry(feature_index(t.as_ref(), dim)).or_insert(0.0) += 1.0;
    }
    if use_bigrams {
        let mut buf = String::new();
        for w in tokens.windows(2) {
            buf.clear();
            buf.push_str(w[0].as_ref());
            buf.push('_');
            buf.push_str(w[1].as_ref());
            *acc.entry(feature_index(&buf, dim)).or_insert(0.0) += 1.0;
        }
    }
    FeatureVector {
        entries: acc.into_iter().collect(),
        dim,
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead, name: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(name, i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::parse(name, i + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_corpus(reader: impl BufRead, name: &str) -> Result<Corpus> {
    Corpus::new(read_jsonl(reader, name)?)
}

pub fn parse_queries(reader: impl BufRead, name: &str) -> Result<Vec<Query>> {
    let queries: Vec<Query> = read_jsonl(reader, name)?;
    let mut seen = HashSet::new();
    for q in &queries {
        if !seen.insert(q.id.as_str()) {
            return Err(Error::DuplicateId(q.id.clone()));
        }
    }
    Ok(queries)
}

/// Parses TREC qrels lines `qid 0 docid grade`.
pub fn parse_judgments(reader: impl BufRead, name: &str) -> Result<Judgments> {
    let mut j = Judgments::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(name, i + 1, e.to_string()))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::parse(name, i + 1, format!("expected 4 fields, got {}", fields.len())));
        }
        let grade: u32 = fields[3]
            .parse()
            .map_err(|_| Error::parse(name, i + 1, format!("bad grade `{}`", fields[3])))?;
        if j.insert(fields[0], fields[2], grade).is_some() {
            return Err(Error::parse(
                name,
                i + 1,
                format!("duplicate judgment for ({}, {})", fields[0], fields[2]),
            ));
        }
    }
    Ok(j)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    parse_corpus(open(path)?, &path.display().to_string())
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    parse_queries(open(path)?, &path.display().to_string())
}

pub fn load_judgments(path: impl AsRef<Path>) -> Result<Judgments> {
    let path = path.as_ref();
    parse_judgments(open(path)?, &path.display().to_string())
}

fn write_lines(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(w: &mut impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), |w| write_jsonl(w, corpus.docs()))
}

pub fn save_queries(queries: &[Query], path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), |w| write_jsonl(w, queries))
}

pub fn save_judgments(judgments: &Judgments, path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), |w| {
        for (q, d, g) in judgments.iter() {
            writeln!(w, "{q} 0 {d} {g}")?;
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Passages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageConfig {
    pub window: usize,
    pub stride: usize,
    pub max_passages: usize,
}

impl Default for PassageConfig {
    fn default() -> Self {
        PassageConfig {
            window: 64,
            stride: 64,
            max_passages: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PassageMode {
    /// Only the first window of each document.
    FirstP,
    /// Up to `max_passages` windows per document, pooled by max at search time.
    MaxP,
}

/// Splits a document into token windows with ids `{id}#p{k}`.
///
/// Passage text is the slice of the original text covering the window's
/// tokens, so re-tokenizing a passage yields exactly its window.
pub fn split_passages(doc: &Document, cfg: &PassageConfig) -> Result<Vec<Document>> {
    if cfg.window == 0 || cfg.stride == 0 || cfg.stride > cfg.window || cfg.max_passages == 0 {
        return Err(Error::Config(format!(
            "passage window {} / stride {} / max {} out of range",
            cfg.window, cfg.stride, cfg.max_passages
        )));
    }
    let spans = token_spans(&doc.text);
    let passage = |k: usize, text: &str| Document {
        id: format!("{}#p{k}", doc.id),
        text: text.to_string(),
        parent_id: Some(doc.id.clone()),
    };
    if spans.len() <= cfg.window {
        return Ok(vec![passage(0, &doc.text)]);
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < spans.len() && out.len() < cfg.max_passages {
        let end = (start + cfg.window).min(spans.len());
        let text = &doc.text[spans[start].0..spans[end - 1].1];
        out.push(passage(out.len(), text));
        if end == spans.len() {
            break;
        }
        start += cfg.stride;
    }
    Ok(out)
}

/// Expands a corpus into passages according to `mode`.
pub fn passage_corpus(corpus: &Corpus, mode: PassageMode, cfg: &PassageConfig) -> Result<Corpus> {
    let mut out = Vec::new();
    for doc in corpus.iter() {
        let mut ps = split_passages(doc, cfg)?;
        if mode == PassageMode::FirstP {
            ps.truncate(1);
        }
        out.extend(ps);
    }
    Corpus::new(out)
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Parameters of the synthetic vocabulary-mismatch benchmark.
///
/// Every topic owns a query pool, a document pool and a shared pool, each of
/// `pool_size` concept-aligned tokens: concept `j` of topic `t` is spelled
/// `t{t}q{j}` in queries, `t{t}d{j}` in documents and `t{t}s{j}` in both.
/// A query and its relevant document draw concepts from the same
/// `focus_size`-sized subset; each token uses the topic-private spelling with
/// probability `mismatch_rate` and the shared spelling otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub corpus_size: usize,
    pub num_queries: usize,
    pub num_topics: usize,
    pub doc_len: usize,
    pub query_len: usize,
    pub mismatch_rate: f64,
    pub seed: u64,
    pub pool_size: usize,
    pub focus_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            corpus_size: 2000,
            num_queries: 250,
            num_topics: 20,
            doc_len: 48,
            query_len: 8,
            mismatch_rate: 0.8,
            seed: 7,
            pool_size: 40,
            focus_size: 4,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_topics == 0 || self.corpus_size < self.num_topics {
            return bad("need corpus_size >= num_topics >= 1");
        }
        if !(0.0..=1.0).contains(&self.mismatch_rate) {
            return bad("mismatch_rate must lie in [0, 1]");
        }
        if self.num_queries > self.corpus_size {
            return bad("each query needs its own relevant document");
        }
        if self.doc_len == 0 || self.query_len == 0 {
            return bad("doc_len and query_len must be positive");
        }
        if self.focus_size == 0 || self.focus_size > self.pool_size {
            return bad("need 1 <= focus_size <= pool_size");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    pub judgments: Judgments,
    /// Topic of every document, aligned with `corpus.docs()`.
    pub doc_topics: Vec<usize>,
    /// Topic of every query, aligned with `queries`.
    pub query_topics: Vec<usize>,
}

#[derive(Clone, Copy)]
enum Side {
    Query,
    Doc,
}

fn synth_text(rng: &mut ChaCha8Rng, topic: usize, focus: &[usize], len: usize, mu: f64, side: Side) -> String {
    let mut words = Vec::with_capacity(len);
    for _ in 0..len {
        let concept = focus[rng.gen_range(0..focus.len())];
        let private = rng.gen::<f64>() < mu;
        let tag = match (private, side) {
            (false, _) => 's',
            (true, Side::Query) => 'q',
            (true, Side::Doc) => 'd',
        };
        words.push(format!("t{topic}{tag}{concept}"));
    }
    words.join(" ")
}

/// Deterministically generates corpus, queries and one-relevant-per-query
/// judgments from `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let concepts: Vec<usize> = (0..spec.pool_size).collect();
    let focus = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut f: Vec<usize> = concepts.choose_multiple(rng, spec.focus_size).copied().collect();
        f.sort_unstable();
        f
    };

    // (text, topic, owning query)
    let mut raw_docs: Vec<(String, usize, Option<usize>)> = Vec::with_capacity(spec.corpus_size);
    let mut raw_queries = Vec::with_capacity(spec.num_queries);
    for qi in 0..spec.num_queries {
        let topic = qi % spec.num_topics;
        let f = focus(&mut rng);
        raw_queries.push((
            synth_text(&mut rng, topic, &f, spec.query_len, spec.mismatch_rate, Side::Query),
            topic,
        ));
        raw_docs.push((
            synth_text(&mut rng, topic, &f, spec.doc_len, spec.mismatch_rate, Side::Doc),
            topic,
            Some(qi),
        ));
    }
    for di in spec.num_queries..spec.corpus_size {
        // every topic gets at least one document
        let topic = if di < spec.num_topics {
            di
        } else {
            rng.gen_range(0..spec.num_topics)
        };
        let f = focus(&mut rng);
        raw_docs.push((
            synth_text(&mut rng, topic, &f, spec.doc_len, spec.mismatch_rate, Side::Doc),
            topic,
            None,
        ));
    }
    raw_docs.shuffle(&mut rng);

    let width = spec.corpus_size.to_string().len().max(5);
    let mut docs = Vec::with_capacity(raw_docs.len());
    let mut doc_topics = Vec::with_capacity(raw_docs.len());
    let mut judgments = Judgments::new();
    let qwidth = spec.num_queries.to_string().len().max(4);
    let qid = |qi: usize| format!("q{qi:0qwidth$}");
    for (i, (text, topic, owner)) in raw_docs.into_iter().enumerate() {
        let id = format!("d{i:0width$}");
        if let Some(qi) = owner {
            judgments.insert(&qid(qi), &id, 1);
        }
        docs.push(Document::new(id, text));
        doc_topics.push(topic);
    }
    let query_topics = raw_queries.iter().map(|(_, t)| *t).collect();
    let queries = raw_queries
        .into_iter()
        .enumerate()
        .map(|(qi, (text, _))| Query::new(qid(qi), text))
        .collect();
    Ok(SyntheticData {
        corpus: Corpus::new(docs)?,
        queries,
        judgments,
        doc_topics,
        query_topics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Reference FNV-1a written bytewise from the published constants.
    fn fnv_oracle(s: &str) -> u64 {
        let mut h: u64 = 14695981039346656037;
        for b in s.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(1099511628211);
        }
        h
    }

    #[test]
    fn fnv_known_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
        assert_eq!(fnv1a64("a_b".as_bytes()), fnv_oracle("a_b"));
    }

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Dense-Retrieval 2019"), vec!["dense", "retrieval", "2019"]);
        assert_eq!(tokenize("BM25"), vec!["bm25"]);
        assert_eq!(tokenize("  --a,,B  "), vec!["a", "b"]);
    }

    #[test]
    fn featurize_examples() {
        let empty: Vec<&str> = vec![];
        let fv = featurize(&empty, 1024, true);
        assert_eq!(fv.nnz(), 0);
        assert_eq!(fv.dim(), 1024);

        let dim = 1 << 16;
        let ia = (fnv_oracle("a") % dim as u64) as u32;
        let ib = (fnv_oracle("b") % dim as u64) as u32;
        let iab = (fnv_oracle("a_b") % dim as u64) as u32;
        let fv = featurize(&["a", "a", "b"], dim, false);
        assert_eq!(fv.nnz(), 2);
        assert_eq!(fv.get(ia), 2.0);
        assert_eq!(fv.get(ib), 1.0);

        let fv = featurize(&["a", "b"], dim, true);
        assert_eq!(fv.nnz(), 3);
        for i in [ia, ib, iab] {
            assert_eq!(fv.get(i), 1.0);
        }
    }

    #[test]
    fn featurize_collisions_merge() {
        let fv = featurize(&["a", "b", "c", "d", "e"], 2, false);
        let total: f64 = fv.entries().iter().map(|e| e.1).sum();
        assert_eq!(total, 5.0);
        assert!(fv.entries().iter().all(|&(i, c)| i < 2 && c > 0.0));
    }

    #[test]
    fn load_examples() {
        let c = parse_corpus(r#"{"id":"d1","text":"hello"}"#.as_bytes(), "c").unwrap();
        assert_eq!(c.doc(0), &Document::new("d1", "hello"));

        let j = parse_judgments("q1 0 d1 2\n".as_bytes(), "qrels").unwrap();
        assert_eq!(j.grade("q1", "d1"), Some(2));

        let dup = "{\"id\":\"d1\",\"text\":\"a\"}\n{\"id\":\"d1\",\"text\":\"b\"}\n";
        match parse_corpus(dup.as_bytes(), "c") {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "d1"),
            other => panic!("expected duplicate id, got {other:?}"),
        }
        let dupq = "{\"id\":\"q\",\"text\":\"a\"}\n{\"id\":\"q\",\"text\":\"b\"}\n";
        assert!(matches!(parse_queries(dupq.as_bytes(), "q"), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        let bad = "{\"id\":\"d1\",\"text\":\"a\"}\n{not json}\n";
        match parse_corpus(bad.as_bytes(), "c") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_judgments("q1 0 d1 1\nq1 0 d2\n".as_bytes(), "qrels") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_judgments("q1 0 d1 -1\n".as_bytes(), "qrels").is_err());
    }

    #[test]
    fn self_parent_rejected() {
        let d = Document {
            id: "x".into(),
            text: String::new(),
            parent_id: Some("x".into()),
        };
        assert!(Corpus::new(vec![d]).is_err());
    }

    #[test]
    fn judgments_relevant_and_validation() {
        let mut j = Judgments::new();
        j.insert("q1", "d2", 0);
        j.insert("q1", "d1", 1);
        j.insert("q1", "d3", 3);
        assert_eq!(j.relevant("q1").collect::<Vec<_>>(), vec!["d1", "d3"]);
        assert!(j.is_judged("q1", "d2") && !j.is_relevant("q1", "d2"));
        let corpus = Corpus::new(vec![Document::new("d1", ""), Document::new("d2", "")]).unwrap();
        let qs = vec![Query::new("q1", "")];
        assert!(matches!(j.validate(&corpus, &qs), Err(Error::UnknownId(id)) if id == "d3"));
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn passages_examples() {
        let cfg = PassageConfig {
            window: 512,
            stride: 512,
            max_passages: 4,
        };
        let short = Document::new("d", "Three short tokens!");
        let ps = split_passages(&short, &cfg).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].text, short.text);
        assert_eq!(ps[0].id, "d#p0");
        assert_eq!(ps[0].parent_id.as_deref(), Some("d"));

        let doc = Document::new("d", words(1024));
        let ps = split_passages(&doc, &cfg).unwrap();
        assert_eq!(ps.len(), 2);
        let toks = tokenize(&doc.text);
        assert_eq!(tokenize(&ps[0].text), toks[0..512]);
        assert_eq!(tokenize(&ps[1].text), toks[512..1024]);
        assert_eq!(ps[1].id, "d#p1");

        let long = Document::new("d", words(4096));
        assert_eq!(split_passages(&long, &cfg).unwrap().len(), 4);
    }

    #[test]
    fn overlapping_stride() {
        let cfg = PassageConfig {
            window: 4,
            stride: 2,
            max_passages: 10,
        };
        let doc = Document::new("d", words(8));
        let ps = split_passages(&doc, &cfg).unwrap();
        let starts: Vec<String> = ps.iter().map(|p| tokenize(&p.text)[0].clone()).collect();
        assert_eq!(starts, vec!["w0", "w2", "w4"]);
        assert_eq!(tokenize(&ps[2].text), vec!["w4", "w5", "w6", "w7"]);
    }

    #[test]
    fn passage_config_errors() {
        let doc = Document::new("d", "a b");
        for (w, s) in [(0, 1), (2, 0), (2, 3)] {
            let cfg = PassageConfig {
                window: w,
                stride: s,
                max_passages: 4,
            };
            assert!(split_passages(&doc, &cfg).is_err());
        }
    }

    #[test]
    fn firstp_keeps_one_passage_per_doc() {
        let corpus = Corpus::new(vec![Document::new("a", words(200)), Document::new("b", words(10))]).unwrap();
        let cfg = PassageConfig::default();
        let first = passage_corpus(&corpus, PassageMode::FirstP, &cfg).unwrap();
        assert_eq!(first.len(), 2);
        let maxp = passage_corpus(&corpus, PassageMode::MaxP, &cfg).unwrap();
        assert_eq!(maxp.len(), 4 + 1);
    }

    fn tiny_spec(mu: f64) -> SyntheticSpec {
        SyntheticSpec {
            corpus_size: 60,
            num_queries: 20,
            num_topics: 5,
            doc_len: 20,
            query_len: 6,
            mismatch_rate: mu,
            seed: 11,
            pool_size: 10,
            focus_size: 3,
        }
    }

    #[test]
    fn synthetic_mu_one_has_no_overlap() {
        let data = generate_synthetic(&tiny_spec(1.0)).unwrap();
        for q in &data.queries {
            let qt: HashSet<String> = tokenize(&q.text).into_iter().collect();
            for d in data.judgments.relevant(&q.id) {
                let dt: HashSet<String> = tokenize(&data.corpus.get(d).unwrap().text).into_iter().collect();
                assert!(qt.is_disjoint(&dt));
            }
        }
    }

    #[test]
    fn synthetic_shape_and_determinism() {
        let spec = tiny_spec(0.5);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.judgments, b.judgments);
        assert_eq!(a.corpus.len(), 60);
        assert_eq!(a.queries.len(), 20);
        for q in &a.queries {
            assert_eq!(a.judgments.num_relevant(&q.id), 1);
            assert_eq!(tokenize(&q.text).len(), 6);
        }
        assert_eq!(a.judgments.len(), 20);
        let other = generate_synthetic(&SyntheticSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.corpus, other.corpus);
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        let mut s = tiny_spec(0.5);
        s.mismatch_rate = 1.5;
        assert!(generate_synthetic(&s).is_err());
        let mut s = tiny_spec(0.5);
        s.num_topics = 0;
        assert!(generate_synthetic(&s).is_err());
        let mut s = tiny_spec(0.5);
        s.num_topics = 100;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn round_trip_files() {
        let data = generate_synthetic(&tiny_spec(0.3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (c, q, j) = (dir.path().join("c"), dir.path().join("q"), dir.path().join("j"));
        save_corpus(&data.corpus, &c).unwrap();
        save_queries(&data.queries, &q).unwrap();
        save_judgments(&data.judgments, &j).unwrap();
        assert_eq!(load_corpus(&c).unwrap(), data.corpus);
        assert_eq!(load_queries(&q).unwrap(), data.queries);
        assert_eq!(load_judgments(&j).unwrap(), data.judgments);
    }

    proptest! {
        #[test]
        fn unigram_counts_ignore_order(mut toks in proptest::collection::vec("[a-z]{1,4}", 0..20), seed in any::<u64>()) {
            let a = featurize(&toks, 997, false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            toks.shuffle(&mut rng);
            prop_assert_eq!(a, featurize(&toks, 997, false));
        }

        #[test]
        fn passages_concatenate_to_prefix(n in 0usize..300, window in 1usize..40, max in 1usize..6) {
            let doc = Document::new("d", words(n));
            let cfg = PassageConfig { window, stride: window, max_passages: max };
            let ps = split_passages(&doc, &cfg).unwrap();
            let joined: Vec<String> = ps.iter().flat_map(|p| tokenize(&p.text)).collect();
            let toks = tokenize(&doc.text);
            prop_assert_eq!(&joined[..], &toks[..toks.len().min(window * max)]);
        }
    }
}
