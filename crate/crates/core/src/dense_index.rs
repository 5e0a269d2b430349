//! Versioned embedding snapshots with exact and IVF top-k search.
//!
//! Rows are stored in single precision; scores are accumulated in f64.
//! Every result list is ordered by descending score, ties by ascending id.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::corpus::{Corpus, HashingConfig};
use crate::encoder::{encode, similarity_f32, ByteReader, EncoderParams, SimKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct IvfLists {
    pub nlist: usize,
    /// Row-major `nlist × dim`.
    pub centroids: Vec<f32>,
    /// Member rows of each centroid, ascending.
    pub lists: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    pub version: u64,
    pub ids: Vec<String>,
    pub parents: Vec<Option<String>>,
    dim: usize,
    emb: Vec<f32>,
    pub sim: SimKind,
    pub ivf: Option<IvfLists>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchResult {
    pub hits: Vec<(String, f64)>,
}

impl SearchResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.0.as_str())
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

fn rank_order(a: &(usize, f64), b: &(usize, f64), ids: &[String]) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(&ids[b.0]))
}

impl DenseIndex {
    pub fn from_rows(version: u64, ids: Vec<String>, dim: usize, emb: Vec<f32>, sim: SimKind) -> Result<Self> {
        if emb.len() != ids.len() * dim {
            return Err(Error::Dimension {
                expected: ids.len() * dim,
                got: emb.len(),
            });
        }
        let parents = ids.iter().map(|id| parent_from_id(id)).collect();
        Ok(DenseIndex {
            version,
            ids,
            parents,
            dim,
            emb,
            sim,
            ivf: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.emb[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    fn check_query(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Scores of every row, in row order.
    pub fn all_scores(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.check_query(q)?;
        Ok((0..self.len()).map(|i| similarity_f32(self.sim, q, self.row(i))).collect())
    }

    fn top_rows(&self, q: &[f64], rows: impl Iterator<Item = usize>, k: usize) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = rows.map(|i| (i, similarity_f32(self.sim, q, self.row(i)))).collect();
        let ids = &self.ids;
        if scored.len() > k && k > 0 {
            scored.select_nth_unstable_by(k - 1, |a, b| rank_order(a, b, ids));
            scored.truncate(k);
        }
        scored.sort_unstable_by(|a, b| rank_order(a, b, ids));
        scored.truncate(k);
        scored
    }

    fn to_result(&self, rows: Vec<(usize, f64)>) -> SearchResult {
        SearchResult {
            hits: rows.into_iter().map(|(i, s)| (self.ids[i].clone(), s)).collect(),
        }
    }

    pub fn search_exact(&self, q: &[f64], k: usize) -> Result<SearchResult> {
        self.check_query(q)?;
        Ok(self.to_result(self.top_rows(q, 0..self.len(), k)))
    }

    /// Lloyd's k-means over the rows (squared Euclidean assignment).
    ///
    /// Centroids start at `nlist` distinct random rows; a cluster that empties
    /// is re-seeded with the row farthest from its current centroid.
    pub fn build_ivf(&mut self, nlist: usize, iters: usize, seed: u64) -> Result<()> {
        let n = self.len();
        if nlist == 0 || nlist > n {
            return Err(Error::Config(format!("nlist {nlist} must lie in 1..={n}")));
        }
        let d = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids: Vec<f64> = Vec::with_capacity(nlist * d);
        for r in index::sample(&mut rng, n, nlist).into_iter() {
            centroids.extend(self.row(r).iter().map(|&x| x as f64));
        }
        let mut assign = vec![0usize; n];
        let mut dist = vec![0.0f64; n];
        let assign_step = |centroids: &[f64], assign: &mut [usize], dist: &mut [f64]| {
            for i in 0..n {
                let row = self.row(i);
                let (best, bd) = (0..nlist)
                    .map(|c| (c, sq_dist(row, &centroids[c * d..(c + 1) * d])))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                    .unwrap();
                assign[i] = best;
                dist[i] = bd;
            }
        };
        for _ in 0..iters {
            assign_step(&centroids, &mut assign, &mut dist);
            let mut sums = vec![0.0f64; nlist * d];
            let mut counts = vec![0usize; nlist];
            for i in 0..n {
                let c = assign[i];
                counts[c] += 1;
                for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(self.row(i)) {
                    *s += x as f64;
                }
            }
            for c in 0..nlist {
                if counts[c] > 0 {
                    for k in 0..d {
                        centroids[c * d + k] = sums[c * d + k] / counts[c] as f64;
                    }
                }
            }
            for c in 0..nlist {
                if counts[c] == 0 {
                    let far = (0..n)
                        .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                        .unwrap();
                    counts[assign[far]] -= 1;
                    assign[far] = c;
                    counts[c] = 1;
                    dist[far] = 0.0;
                    for k in 0..d {
                        centroids[c * d + k] = self.row(far)[k] as f64;
                    }
                }
            }
        }
        assign_step(&centroids, &mut assign, &mut dist);
        let mut lists = vec![Vec::new(); nlist];
        for (i, &c) in assign.iter().enumerate() {
            lists[c].push(i as u32);
        }
        self.ivf = Some(IvfLists {
            nlist,
            centroids: centroids.into_iter().map(|x| x as f32).collect(),
            lists,
        });
        Ok(())
    }

    /// Scans the `nprobe` centroids most similar to `q`, then ranks exactly.
    pub fn search_ivf(&self, q: &[f64], k: usize, nprobe: usize) -> Result<SearchResult> {
        self.check_query(q)?;
        let ivf = self.ivf.as_ref().ok_or_else(|| Error::Config("index has no IVF lists".into()))?;
        if nprobe == 0 || nprobe > ivf.nlist {
            return Err(Error::Config(format!("nprobe {nprobe} must lie in 1..={}", ivf.nlist)));
        }
        let d = self.dim;
        let mut cs: Vec<(usize, f64)> = (0..ivf.nlist)
            .map(|c| (c, similarity_f32(self.sim, q, &ivf.centroids[c * d..(c + 1) * d])))
            .collect();
        cs.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let rows = cs[..nprobe]
            .iter()
            .flat_map(|&(c, _)| ivf.lists[c].iter().map(|&r| r as usize));
        Ok(self.to_result(self.top_rows(q, rows, k)))
    }

    /// Max-pools passage scores per parent document.
    pub fn search_maxp(&self, q: &[f64], k: usize) -> Result<SearchResult> {
        let scores = self.all_scores(q)?;
        let mut best: HashMap<&str, f64> = HashMap::new();
        for (i, s) in scores.into_iter().enumerate() {
            let parent = self.parents[i]
                .as_deref()
                .ok_or_else(|| Error::Config(format!("row `{}` has no parent id", self.ids[i])))?;
            let e = best.entry(parent).or_insert(f64::NEG_INFINITY);
            if s > *e {
                *e = s;
            }
        }
        let mut hits: Vec<(String, f64)> = best.into_iter().map(|(p, s)| (p.to_string(), s)).collect();
        hits.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        hits.truncate(k);
        Ok(SearchResult { hits })
    }
}

fn sq_dist(row: &[f32], c: &[f64]) -> f64 {
    row.iter().zip(c).map(|(&x, y)| (x as f64 - y).powi(2)).sum()
}

/// Passage ids produced by `split_passages` look like `{parent}#p{k}`.
fn parent_from_id(id: &str) -> Option<String> {
    let (parent, k) = id.rsplit_once("#p")?;
    (!parent.is_empty() && !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit())).then(|| parent.to_string())
}

/// Encodes every document of `corpus` with `params`.
pub fn encode_corpus(params: &EncoderParams, corpus: &Corpus, hashing: &HashingConfig, version: u64) -> Result<DenseIndex> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if hashing.dim != params.dim_in() {
        return Err(Error::Dimension {
            expected: params.dim_in() as usize,
            got: hashing.dim as usize,
        });
    }
    let de = params.dim_emb();
    let mut emb = Vec::with_capacity(corpus.len() * de);
    for doc in corpus.iter() {
        let e = encode(params, &hashing.featurize_text(&doc.text))?;
        emb.extend(e.0.iter().map(|&x| x as f32));
    }
    Ok(DenseIndex {
        version,
        ids: corpus.iter().map(|d| d.id.clone()).collect(),
        parents: corpus.iter().map(|d| d.parent_id.clone()).collect(),
        dim: de,
        emb,
        sim: params.sim,
        ivf: None,
    })
}

/// Same as [`encode_corpus`] from pre-computed feature vectors.
pub fn encode_features(
    params: &EncoderParams,
    corpus: &Corpus,
    features: &[crate::corpus::FeatureVector],
    version: u64,
) -> Result<DenseIndex> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let de = params.dim_emb();
    let mut emb = Vec::with_capacity(features.len() * de);
    for fv in features {
        emb.extend(encode(params, fv)?.0.iter().map(|&x| x as f32));
    }
    Ok(DenseIndex {
        version,
        ids: corpus.iter().map(|d| d.id.clone()).collect(),
        parents: corpus.iter().map(|d| d.parent_id.clone()).collect(),
        dim: de,
        emb,
        sim: params.sim,
        ivf: None,
    })
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

const INDEX_MAGIC: &[u8; 4] = b"ANCX";
const TAIL_IVF: u8 = 1;
const TAIL_COSINE: u8 = 2;

impl DenseIndex {
    /// `ANCX | version u32 | N u64 | D_e u32 | ids | matrix | tail flags u8 | [IVF]`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let version = u32::try_from(self.version)
            .map_err(|_| Error::Format(format!("index version {} exceeds u32", self.version)))?;
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for x in &self.emb {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let mut tail = 0u8;
        if self.ivf.is_some() {
            tail |= TAIL_IVF;
        }
        if self.sim == SimKind::Cosine {
            tail |= TAIL_COSINE;
        }
        out.push(tail);
        if let Some(ivf) = &self.ivf {
            out.extend_from_slice(&(ivf.nlist as u32).to_le_bytes());
            for x in &ivf.centroids {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for list in &ivf.lists {
                out.extend_from_slice(&(list.len() as u32).to_le_bytes());
                for r in list {
                    out.extend_from_slice(&r.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::Format("bad index magic".into()));
        }
        let version = r.u32()? as u64;
        let n = usize::try_from(r.u64()?).map_err(|_| Error::Format("row count overflow".into()))?;
        let dim = r.u32()? as usize;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(e.to_string()))?;
            ids.push(s.to_string());
        }
        let emb = r.f32s(n.checked_mul(dim).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let tail = r.u8()?;
        if tail & !(TAIL_IVF | TAIL_COSINE) != 0 {
            return Err(Error::Format(format!("unknown index flags {tail:#x}")));
        }
        let sim = if tail & TAIL_COSINE != 0 {
            SimKind::Cosine
        } else {
            SimKind::Dot
        };
        let mut index = DenseIndex::from_rows(version, ids, dim, emb, sim)?;
        if tail & TAIL_IVF != 0 {
            let nlist = r.u32()? as usize;
            let centroids = r.f32s(nlist.checked_mul(dim).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let mut lists = Vec::with_capacity(nlist.min(1 << 16));
            let mut seen = vec![false; n];
            for _ in 0..nlist {
                let len = r.u32()? as usize;
                let mut list = Vec::with_capacity(len.min(n));
                for _ in 0..len {
                    let row = r.u32()?;
                    match seen.get_mut(row as usize) {
                        Some(s) if !*s => *s = true,
                        _ => return Err(Error::Format(format!("bad IVF assignment {row}"))),
                    }
                    list.push(row);
                }
                lists.push(list);
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::Format("IVF lists do not cover every row".into()));
            }
            index.ivf = Some(IvfLists { nlist, centroids, lists });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after index".into()));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// CSV dump: id followed by the embedding coordinates.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        for i in 0..self.len() {
            write!(w, "{}", self.ids[i])?;
            for x in self.row(i) {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Fraction of `exact`'s ids present in `approx`.
pub fn recall_against(exact: &SearchResult, approx: &SearchResult) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let got: std::collections::HashSet<&str> = approx.ids().collect();
    exact.ids().filter(|id| got.contains(id)).count() as f64 / exact.len() as f64
}
