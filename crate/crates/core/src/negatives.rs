//! Negative construction: random and hardest in-batch, BM25 top-k, BM25 mixed
//! with random, and ANCE negatives from the (possibly stale) dense index.
//!
//! No sampler emits a document judged relevant (grade > 0) for its query.
//! When a pool is empty after removing relevant documents, samplers fall back
//! to uniform draws over the non-relevant part of the corpus.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus, FeatureVector, Judgments, Query};
use crate::dense_index::DenseIndex;
use crate::encoder::{encode, similarity, EncoderParams};
use crate::error::{Error, Result};
use crate::sparse::{Bm25Params, InvertedIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[serde(rename = "rand")]
    RandInBatch,
    #[serde(rename = "nce")]
    NceInBatch,
    #[serde(rename = "bm25")]
    Bm25Top,
    #[serde(rename = "bm25rand")]
    Bm25PlusRand,
    Ance,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 5] = [
        SamplerKind::RandInBatch,
        SamplerKind::NceInBatch,
        SamplerKind::Bm25Top,
        SamplerKind::Bm25PlusRand,
        SamplerKind::Ance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::RandInBatch => "rand",
            SamplerKind::NceInBatch => "nce",
            SamplerKind::Bm25Top => "bm25",
            SamplerKind::Bm25PlusRand => "bm25rand",
            SamplerKind::Ance => "ance",
        }
    }

    pub fn default_pool_k(self) -> usize {
        match self {
            SamplerKind::Ance => 200,
            _ => 100,
        }
    }

    pub fn is_in_batch(self) -> bool {
        matches!(self, SamplerKind::RandInBatch | SamplerKind::NceInBatch)
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampler `{s}` (rand|nce|bm25|bm25rand|ance)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub pool_k: usize,
    pub per_pos: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind) -> Self {
        SamplerConfig {
            kind,
            pool_k: kind.default_pool_k(),
            per_pos: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_k == 0 || self.per_pos == 0 {
            return Err(Error::Config("pool_k and per_pos must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything a sampler may read. Documents and queries are referred to by
/// their position in `corpus` and `queries`.
#[derive(Clone, Copy)]
pub struct SampleContext<'a> {
    pub corpus: &'a Corpus,
    pub doc_features: &'a [FeatureVector],
    pub queries: &'a [Query],
    pub query_features: &'a [FeatureVector],
    pub judgments: &'a Judgments,
    pub sparse: Option<&'a InvertedIndex>,
    pub bm25: Bm25Params,
}

impl SampleContext<'_> {
    fn qid(&self, q: usize) -> &str {
        &self.queries[q].id
    }

    pub fn is_relevant(&self, q: usize, doc: usize) -> bool {
        self.judgments.is_relevant(self.qid(q), &self.corpus.doc(doc).id)
    }

    fn relevant_in_corpus(&self, q: usize) -> usize {
        self.judgments
            .relevant(self.qid(q))
            .filter(|d| self.corpus.index_of(d).is_some())
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub query: usize,
    pub pos: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegSource {
    InBatch,
    Bm25,
    Ann,
    Random,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledNegative {
    pub doc: usize,
    /// Probability this draw had of picking `doc`.
    pub prob: f64,
    /// Size of the candidate pool the draw was made from.
    pub pool_size: usize,
    pub source: NegSource,
}

impl SampledNegative {
    /// Importance weight `1 / (N·p)`.
    pub fn weight(&self) -> f64 {
        1.0 / (self.pool_size as f64 * self.prob)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ItemNegatives {
    pub negatives: Vec<SampledNegative>,
    /// Version of the dense index the draws were made from (ANCE only).
    pub index_version: Option<u64>,
}

/// Uniform draws from `pool`: without replacement while the pool is large
/// enough, with replacement otherwise.
fn uniform_draws<R: Rng>(pool: &[usize], n: usize, source: NegSource, rng: &mut R) -> Vec<SampledNegative> {
    let size = pool.len();
    let mk = |doc| SampledNegative {
        doc,
        prob: 1.0 / size as f64,
        pool_size: size,
        source,
    };
    if size >= n {
        index::sample(rng, size, n).into_iter().map(|i| mk(pool[i])).collect()
    } else {
        (0..n).map(|_| mk(pool[rng.gen_range(0..size)])).collect()
    }
}

/// Uniform draws over every corpus document not relevant to `q`.
pub fn corpus_uniform<R: Rng>(ctx: &SampleContext, q: usize, n: usize, source: NegSource, rng: &mut R) -> Result<Vec<SampledNegative>> {
    let size = ctx.corpus.len() - ctx.relevant_in_corpus(q);
    if size == 0 {
        return Err(Error::NoCandidates(format!("every document is relevant to {}", ctx.qid(q))));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let d = rng.gen_range(0..ctx.corpus.len());
        if !ctx.is_relevant(q, d) {
            out.push(SampledNegative {
                doc: d,
                prob: 1.0 / size as f64,
                pool_size: size,
                source,
            });
        }
    }
    Ok(out)
}

fn draw_or_fallback<R: Rng>(ctx: &SampleContext, q: usize, pool: &[usize], n: usize, source: NegSource, rng: &mut R) -> Result<Vec<SampledNegative>> {
    if pool.is_empty() {
        corpus_uniform(ctx, q, n, NegSource::Fallback, rng)
    } else {
        Ok(uniform_draws(pool, n, source, rng))
    }
}

/// Distinct positives of the other batch items that are not relevant to item `i`.
pub fn in_batch_pool(ctx: &SampleContext, batch: &[BatchItem], i: usize) -> Vec<usize> {
    let q = batch[i].query;
    let mut seen = HashSet::new();
    batch
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, it)| it.pos)
        .filter(|&d| !ctx.is_relevant(q, d) && seen.insert(d))
        .collect()
}

fn check_batch(batch: &[BatchItem]) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::NoCandidates("in-batch sampling needs at least two items".into()));
    }
    Ok(())
}

pub fn sample_rand_in_batch<R: Rng>(ctx: &SampleContext, batch: &[BatchItem], per_pos: usize, rng: &mut R) -> Result<Vec<ItemNegatives>> {
    check_batch(batch)?;
    (0..batch.len())
        .map(|i| {
            let pool = in_batch_pool(ctx, batch, i);
            Ok(ItemNegatives {
                negatives: draw_or_fallback(ctx, batch[i].query, &pool, per_pos, NegSource::InBatch, rng)?,
                index_version: None,
            })
        })
        .collect()
}

/// Hardest other-item positives under `params`; ties by ascending doc id.
/// `rng` is only consumed by the empty-pool fallback.
pub fn sample_nce_in_batch<R: Rng>(
    ctx: &SampleContext,
    batch: &[BatchItem],
    params: &EncoderParams,
    per_pos: usize,
    rng: &mut R,
) -> Result<Vec<ItemNegatives>> {
    check_batch(batch)?;
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let pool = in_batch_pool(ctx, batch, i);
        let negatives = if pool.is_empty() {
            corpus_uniform(ctx, batch[i].query, per_pos, NegSource::Fallback, rng)?
        } else {
            let qe = encode(params, &ctx.query_features[batch[i].query])?;
            let mut scored = pool
                .iter()
                .map(|&d| Ok((d, similarity(params.sim, &qe.0, &encode(params, &ctx.doc_features[d])?.0))))
                .collect::<Result<Vec<(usize, f64)>>>()?;
            scored.sort_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then_with(|| ctx.corpus.doc(a.0).id.cmp(&ctx.corpus.doc(b.0).id))
            });
            let size = pool.len();
            scored
                .into_iter()
                .take(per_pos)
                .map(|(doc, _)| SampledNegative {
                    doc,
                    // nominal uniform probability: hardest-in-batch is trained unweighted
                    prob: 1.0 / size as f64,
                    pool_size: size,
                    source: NegSource::InBatch,
                })
                .collect()
        };
        out.push(ItemNegatives {
            negatives,
            index_version: None,
        });
    }
    Ok(out)
}

/// BM25 top-`pool_k` for query `q` minus its relevant documents.
pub fn bm25_pool(ctx: &SampleContext, q: usize, pool_k: usize) -> Result<Vec<usize>> {
    let sparse = ctx
        .sparse
        .ok_or_else(|| Error::Config("BM25 sampling needs a sparse index".into()))?;
    let hits = sparse.topk(&ctx.bm25, &tokenize(&ctx.queries[q].text), pool_k);
    Ok(hits
        .into_iter()
        .filter_map(|(id, _)| ctx.corpus.index_of(&id))
        .filter(|&d| !ctx.is_relevant(q, d))
        .collect())
}

pub fn sample_bm25<R: Rng>(ctx: &SampleContext, q: usize, pool_k: usize, per_pos: usize, rng: &mut R) -> Result<ItemNegatives> {
    let pool = bm25_pool(ctx, q, pool_k)?;
    Ok(ItemNegatives {
        negatives: draw_or_fallback(ctx, q, &pool, per_pos, NegSource::Bm25, rng)?,
        index_version: None,
    })
}

/// Draws alternate BM25 / corpus-uniform, starting with BM25 at even
/// `item_pos + draw` positions.
pub fn sample_bm25_plus_rand<R: Rng>(
    ctx: &SampleContext,
    q: usize,
    item_pos: usize,
    pool_k: usize,
    per_pos: usize,
    rng: &mut R,
) -> Result<ItemNegatives> {
    let n_bm25 = (0..per_pos).filter(|j| (item_pos + j).is_multiple_of(2)).count();
    let mut negatives = Vec::with_capacity(per_pos);
    let pool = bm25_pool(ctx, q, pool_k)?;
    let mut bm25 = if n_bm25 > 0 {
        draw_or_fallback(ctx, q, &pool, n_bm25, NegSource::Bm25, rng)?
    } else {
        Vec::new()
    }
    .into_iter();
    let mut random = corpus_uniform(ctx, q, per_pos - n_bm25, NegSource::Random, rng)?.into_iter();
    for j in 0..per_pos {
        let next = if (item_pos + j).is_multiple_of(2) { bm25.next() } else { random.next() };
        negatives.extend(next);
    }
    Ok(ItemNegatives {
        negatives,
        index_version: None,
    })
}

/// How the ANCE pool is retrieved from the published index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AnnSearch {
    #[default]
    Exact,
    Ivf {
        nprobe: usize,
    },
}

/// Top-`pool_k` of `index` for query `q` (encoded with the current `params`)
/// minus the query's relevant documents.
pub fn ance_pool(
    ctx: &SampleContext,
    q: usize,
    index: &DenseIndex,
    params: &EncoderParams,
    pool_k: usize,
    search: AnnSearch,
) -> Result<Vec<usize>> {
    let qe = encode(params, &ctx.query_features[q])?;
    let hits = match search {
        AnnSearch::Exact => index.search_exact(&qe.0, pool_k)?,
        AnnSearch::Ivf { nprobe } => index.search_ivf(&qe.0, pool_k, nprobe)?,
    };
    Ok(hits
        .ids()
        .filter_map(|id| ctx.corpus.index_of(id))
        .filter(|&d| !ctx.is_relevant(q, d))
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn sample_ance<R: Rng>(
    ctx: &SampleContext,
    q: usize,
    index: &DenseIndex,
    params: &EncoderParams,
    pool_k: usize,
    per_pos: usize,
    search: AnnSearch,
    rng: &mut R,
) -> Result<ItemNegatives> {
    let pool = ance_pool(ctx, q, index, params, pool_k, search)?;
    Ok(ItemNegatives {
        negatives: draw_or_fallback(ctx, q, &pool, per_pos, NegSource::Ann, rng)?,
        index_version: Some(index.version),
    })
}

/// Samples negatives for a whole batch with the configured strategy.
/// `index` is required for [`SamplerKind::Ance`].
pub fn sample_batch<R: Rng>(
    ctx: &SampleContext,
    cfg: &SamplerConfig,
    batch: &[BatchItem],
    params: &EncoderParams,
    index: Option<&DenseIndex>,
    search: AnnSearch,
    rng: &mut R,
) -> Result<Vec<ItemNegatives>> {
    cfg.validate()?;
    match cfg.kind {
        SamplerKind::RandInBatch => sample_rand_in_batch(ctx, batch, cfg.per_pos, rng),
        SamplerKind::NceInBatch => sample_nce_in_batch(ctx, batch, params, cfg.per_pos, rng),
        SamplerKind::Bm25Top => batch
            .iter()
            .map(|it| sample_bm25(ctx, it.query, cfg.pool_k, cfg.per_pos, rng))
            .collect(),
        SamplerKind::Bm25PlusRand => batch
            .iter()
            .enumerate()
            .map(|(i, it)| sample_bm25_plus_rand(ctx, it.query, i, cfg.pool_k, cfg.per_pos, rng))
            .collect(),
        SamplerKind::Ance => {
            let index = index.ok_or_else(|| Error::Config("ANCE sampling needs a published index".into()))?;
            batch
                .iter()
                .map(|it| sample_ance(ctx, it.query, index, params, cfg.pool_k, cfg.per_pos, search, rng))
                .collect()
        }
    }
}

/// Audit record for one sampled (query, positive, negative) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleLogRecord {
    pub qid: String,
    pub pos: String,
    pub neg: String,
    pub sampler: String,
    pub index_version: Option<u64>,
}
