//! Okapi BM25 over an in-memory inverted index.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0) || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("bm25 k1={} b={} out of range", self.k1, self.b)));
        }
        Ok(())
    }
}

/// Term → postings over documents numbered in ascending doc-id order, so a
/// posting list sorted by ordinal is also sorted by doc id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    avg_doc_len: f64,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut order: Vec<&str> = corpus.iter().map(|d| d.id.as_str()).collect();
        order.sort_unstable();
        let ordinal: HashMap<&str, u32> = order.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();

        let mut doc_len = vec![0u32; order.len()];
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        for doc in corpus.iter() {
            let ord = ordinal[doc.id.as_str()];
            let toks = tokenize(&doc.text);
            doc_len[ord as usize] = toks.len() as u32;
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in toks {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((ord, c));
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable_by_key(|&(d, _)| d);
        }
        let avg_doc_len = doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64;
        Ok(InvertedIndex {
            doc_ids: order.into_iter().map(String::from).collect(),
            doc_len,
            avg_doc_len,
            postings,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        self.ordinal(doc_id).map(|o| self.doc_len[o])
    }

    /// Postings as `(doc_id, tf)` pairs in ascending doc-id order.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|l| l.iter().map(|&(d, tf)| (self.doc_ids[d as usize].as_str(), tf)).collect())
            .unwrap_or_default()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    fn ordinal(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.binary_search_by(|d| d.as_str().cmp(doc_id)).ok()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_weight(&self, params: &Bm25Params, tf: u32, ord: usize) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - params.b + params.b * self.doc_len[ord] as f64 / self.avg_doc_len.max(f64::MIN_POSITIVE);
        tf / (tf + params.k1 * norm)
    }

    /// BM25 of one document; every query token occurrence contributes.
    pub fn score<S: AsRef<str>>(&self, params: &Bm25Params, query_tokens: &[S], doc_id: &str) -> Result<f64> {
        let ord = self.ordinal(doc_id).ok_or_else(|| Error::UnknownId(doc_id.to_string()))?;
        let mut s = 0.0;
        for t in query_tokens {
            let t = t.as_ref();
            let Some(list) = self.postings.get(t) else { continue };
            if let Ok(p) = list.binary_search_by_key(&(ord as u32), |&(d, _)| d) {
                s += self.idf(t) * self.term_weight(params, list[p].1, ord);
            }
        }
        Ok(s)
    }

    /// Top-k documents with positive score, descending, ties by ascending doc id.
    pub fn topk<S: AsRef<str>>(&self, params: &Bm25Params, query_tokens: &[S], k: usize) -> Vec<(String, f64)> {
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for t in query_tokens {
            let t = t.as_ref();
            let Some(list) = self.postings.get(t) else { continue };
            let idf = self.idf(t);
            for &(d, tf) in list {
                *acc.entry(d).or_insert(0.0) += idf * self.term_weight(params, tf, d as usize);
            }
        }
        let mut hits: Vec<(u32, f64)> = acc.into_iter().filter(|&(_, s)| s > 0.0).collect();
        // ordinals follow doc-id order, so comparing them breaks ties by id
        hits.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(k);
        hits.into_iter()
            .map(|(d, s)| (self.doc_ids[d as usize].clone(), s))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(f), self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn build_inverted(corpus: &Corpus) -> Result<InvertedIndex> {
    InvertedIndex::build(corpus)
}

pub fn bm25_score<S: AsRef<str>>(
    index: &InvertedIndex,
    params: &Bm25Params,
    query_tokens: &[S],
    doc_id: &str,
) -> Result<f64> {
    index.score(params, query_tokens, doc_id)
}

pub fn sparse_topk(index: &InvertedIndex, params: &Bm25Params, query: &str, k: usize) -> Vec<(String, f64)> {
    index.topk(params, &tokenize(query), k)
}
