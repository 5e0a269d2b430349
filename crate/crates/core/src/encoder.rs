//! Shared dual encoder: a linear projection of hashed features followed by an
//! optional layer norm, with dot or cosine similarity and an NLL loss over a
//! positive and one or more negatives.
//!
//! Gradients are exact and analytic. Projection-weight gradients are kept
//! sparse by row, since a triple only touches the rows of its active features.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureVector;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    #[default]
    Dot,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim_in: u32,
    pub dim_emb: usize,
    pub use_layernorm: bool,
    pub sim: SimKind,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim_in: 65_536,
            dim_emb: 64,
            use_layernorm: true,
            sim: SimKind::Dot,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dim_in: u32,
    dim_emb: usize,
    /// Row-major `dim_in × dim_emb`.
    pub w: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub use_layernorm: bool,
    pub sim: SimKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A query, its positive, and weighted negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTriple {
    pub q: FeatureVector,
    pub pos: FeatureVector,
    pub negs: Vec<FeatureVector>,
    pub neg_weights: Vec<f64>,
}

impl TrainTriple {
    pub fn new(q: FeatureVector, pos: FeatureVector, negs: Vec<FeatureVector>) -> Self {
        let neg_weights = vec![1.0; negs.len()];
        TrainTriple {
            q,
            pos,
            negs,
            neg_weights,
        }
    }

    pub fn single(q: FeatureVector, pos: FeatureVector, neg: FeatureVector) -> Self {
        Self::new(q, pos, vec![neg])
    }

    pub fn validate(&self) -> Result<()> {
        if self.negs.is_empty() {
            return Err(Error::Empty("triple negatives"));
        }
        if self.negs.len() != self.neg_weights.len() {
            return Err(Error::Dimension {
                expected: self.negs.len(),
                got: self.neg_weights.len(),
            });
        }
        if self.neg_weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("negative weights must be positive and finite".into()));
        }
        Ok(())
    }
}

impl EncoderParams {
    /// Seeded init: projection uniform on ±1/√D_f, gain 1, bias 0.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        if cfg.dim_emb < 2 {
            return Err(Error::Config(format!("embedding dim {} < 2", cfg.dim_emb)));
        }
        if cfg.dim_in < 2 {
            return Err(Error::Config(format!("feature dim {} < 2", cfg.dim_in)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bound = 1.0 / (cfg.dim_in as f64).sqrt();
        let w = (0..cfg.dim_in as usize * cfg.dim_emb)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Ok(EncoderParams {
            dim_in: cfg.dim_in,
            dim_emb: cfg.dim_emb,
            w,
            ln_gain: vec![1.0; cfg.dim_emb],
            ln_bias: vec![0.0; cfg.dim_emb],
            use_layernorm: cfg.use_layernorm,
            sim: cfg.sim,
        })
    }

    pub fn dim_in(&self) -> u32 {
        self.dim_in
    }

    pub fn dim_emb(&self) -> usize {
        self.dim_emb
    }

    pub fn row(&self, feature: u32) -> &[f64] {
        let s = feature as usize * self.dim_emb;
        &self.w[s..s + self.dim_emb]
    }

    /// Number of trainable scalars: the projection, plus gain and bias when the
    /// layer norm is active.
    pub fn num_trainable(&self) -> usize {
        self.w.len() + if self.use_layernorm { 2 * self.dim_emb } else { 0 }
    }

    /// Trainable parameters flattened as `[W row-major, gain, bias]`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.w.clone();
        if self.use_layernorm {
            v.extend_from_slice(&self.ln_gain);
            v.extend_from_slice(&self.ln_bias);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_trainable() {
            return Err(Error::Dimension {
                expected: self.num_trainable(),
                got: flat.len(),
            });
        }
        let n = self.w.len();
        self.w.copy_from_slice(&flat[..n]);
        if self.use_layernorm {
            self.ln_gain.copy_from_slice(&flat[n..n + self.dim_emb]);
            self.ln_bias.copy_from_slice(&flat[n + self.dim_emb..]);
        }
        Ok(())
    }

    pub(crate) fn coord(&self, i: usize) -> f64 {
        let n = self.w.len();
        if i < n {
            self.w[i]
        } else if i < n + self.dim_emb {
            self.ln_gain[i - n]
        } else {
            self.ln_bias[i - n - self.dim_emb]
        }
    }

    pub(crate) fn coord_mut(&mut self, i: usize) -> &mut f64 {
        let n = self.w.len();
        if i < n {
            &mut self.w[i]
        } else if i < n + self.dim_emb {
            &mut self.ln_gain[i - n]
        } else {
            &mut self.ln_bias[i - n - self.dim_emb]
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.ln_gain).chain(&self.ln_bias).all(|x| x.is_finite())
    }

    /// Rounds every parameter to the nearest single-precision value, the
    /// precision checkpoints are stored at.
    pub fn round_to_f32(&mut self) {
        for x in self.w.iter_mut().chain(&mut self.ln_gain).chain(&mut self.ln_bias) {
            *x = *x as f32 as f64;
        }
    }

    fn check_dim(&self, fv: &FeatureVector) -> Result<()> {
        if fv.dim() != self.dim_in {
            return Err(Error::Dimension {
                expected: self.dim_in as usize,
                got: fv.dim() as usize,
            });
        }
        Ok(())
    }
}

struct Forward {
    xhat: Vec<f64>,
    inv_std: f64,
    out: Vec<f64>,
}

fn forward(params: &EncoderParams, fv: &FeatureVector) -> Result<Forward> {
    params.check_dim(fv)?;
    let de = params.dim_emb;
    let mut h = vec![0.0; de];
    for &(i, c) in fv.entries() {
        for (hk, wk) in h.iter_mut().zip(params.row(i)) {
            *hk += c * wk;
        }
    }
    if !params.use_layernorm {
        return Ok(Forward {
            xhat: Vec::new(),
            inv_std: 1.0,
            out: h,
        });
    }
    let mean = h.iter().sum::<f64>() / de as f64;
    let var = h.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / de as f64;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = h.iter().map(|x| (x - mean) * inv_std).collect();
    let out = xhat
        .iter()
        .zip(params.ln_gain.iter().zip(&params.ln_bias))
        .map(|(x, (g, b))| g * x + b)
        .collect();
    Ok(Forward { xhat, inv_std, out })
}

pub fn encode(params: &EncoderParams, fv: &FeatureVector) -> Result<Embedding> {
    let e = forward(params, fv)?.out;
    if e.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { stage: "encode" });
    }
    Ok(Embedding(e))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Similarity of two embeddings; cosine returns 0 when either norm is 0.
pub fn similarity(kind: SimKind, q: &[f64], d: &[f64]) -> f64 {
    match kind {
        SimKind::Dot => dot(q, d),
        SimKind::Cosine => {
            let nq = dot(q, q).sqrt();
            let nd = dot(d, d).sqrt();
            if nq == 0.0 || nd == 0.0 {
                0.0
            } else {
                dot(q, d) / (nq * nd)
            }
        }
    }
}

/// Similarity against an f32 row, accumulated in f64.
pub fn similarity_f32(kind: SimKind, q: &[f64], d: &[f32]) -> f64 {
    let mut qd = 0.0;
    let mut dd = 0.0;
    for (x, &y) in q.iter().zip(d) {
        let y = y as f64;
        qd += x * y;
        dd += y * y;
    }
    match kind {
        SimKind::Dot => qd,
        SimKind::Cosine => {
            let nq = dot(q, q).sqrt();
            let nd = dd.sqrt();
            if nq == 0.0 || nd == 0.0 {
                0.0
            } else {
                qd / (nq * nd)
            }
        }
    }
}

pub fn score(params: &EncoderParams, q: &Embedding, d: &Embedding) -> f64 {
    similarity(params.sim, &q.0, &d.0)
}

/// Gradients of the similarity w.r.t. `q` and `d`, accumulated with factor `scale`.
fn similarity_grad(kind: SimKind, q: &[f64], d: &[f64], scale: f64, gq: &mut [f64], gd: &mut [f64]) {
    match kind {
        SimKind::Dot => {
            for k in 0..q.len() {
                gq[k] += scale * d[k];
                gd[k] += scale * q[k];
            }
        }
        SimKind::Cosine => {
            let nq = dot(q, q).sqrt();
            let nd = dot(d, d).sqrt();
            if nq == 0.0 || nd == 0.0 {
                return;
            }
            let s = dot(q, d) / (nq * nd);
            for k in 0..q.len() {
                gq[k] += scale * (d[k] / (nq * nd) - s * q[k] / (nq * nq));
                gd[k] += scale * (q[k] / (nq * nd) - s * d[k] / (nd * nd));
            }
        }
    }
}

/// −log softmax of the positive over `{pos} ∪ negs`.
pub fn nll_loss(pos_score: f64, neg_scores: &[f64]) -> f64 {
    nll_loss_weighted(pos_score, neg_scores, &vec![1.0; neg_scores.len()])
}

/// NLL with per-negative weights on the partition:
/// `−log(e^{s⁺} / (e^{s⁺} + Σ_j w_j e^{s⁻_j}))`.
pub fn nll_loss_weighted(pos_score: f64, neg_scores: &[f64], weights: &[f64]) -> f64 {
    let m = neg_scores
        .iter()
        .zip(weights)
        .map(|(s, w)| s + w.ln())
        .fold(pos_score, f64::max);
    let z: f64 = (pos_score - m).exp()
        + neg_scores
            .iter()
            .zip(weights)
            .map(|(s, w)| w * (s - m).exp())
            .sum::<f64>();
    m + z.ln() - pos_score
}

/// Sparse-by-row gradient of the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    dim_emb: usize,
    pub w_rows: BTreeMap<u32, Vec<f64>>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    layernorm: bool,
}

impl GradientBuffer {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        let n = if params.use_layernorm { params.dim_emb } else { 0 };
        GradientBuffer {
            dim_emb: params.dim_emb,
            w_rows: BTreeMap::new(),
            ln_gain: vec![0.0; n],
            ln_bias: vec![0.0; n],
            layernorm: params.use_layernorm,
        }
    }

    fn row_mut(&mut self, feature: u32) -> &mut Vec<f64> {
        let de = self.dim_emb;
        self.w_rows.entry(feature).or_insert_with(|| vec![0.0; de])
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.w_rows.values().flatten().chain(&self.ln_gain).chain(&self.ln_bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w_rows
            .values_mut()
            .flatten()
            .chain(&mut self.ln_gain)
            .chain(&mut self.ln_bias)
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, alpha: f64) {
        for x in self.values_mut() {
            *x *= alpha;
        }
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, other: &GradientBuffer, alpha: f64) {
        for (&f, row) in &other.w_rows {
            for (a, b) in self.row_mut(f).iter_mut().zip(row) {
                *a += alpha * b;
            }
        }
        for (a, b) in self.ln_gain.iter_mut().zip(&other.ln_gain) {
            *a += alpha * b;
        }
        for (a, b) in self.ln_bias.iter_mut().zip(&other.ln_bias) {
            *a += alpha * b;
        }
    }

    /// Dense gradient in the order of [`EncoderParams::flat`].
    pub fn to_flat(&self, params: &EncoderParams) -> Vec<f64> {
        let mut v = vec![0.0; params.num_trainable()];
        let de = self.dim_emb;
        for (&f, row) in &self.w_rows {
            let s = f as usize * de;
            v[s..s + de].copy_from_slice(row);
        }
        if self.layernorm {
            let n = params.w.len();
            v[n..n + de].copy_from_slice(&self.ln_gain);
            v[n + de..].copy_from_slice(&self.ln_bias);
        }
        v
    }

    /// Adds `alpha · grad` to the parameters, touching only stored rows.
    pub fn apply_to(&self, params: &mut EncoderParams, alpha: f64) {
        let de = self.dim_emb;
        for (&f, row) in &self.w_rows {
            let s = f as usize * de;
            for (w, g) in params.w[s..s + de].iter_mut().zip(row) {
                *w += alpha * g;
            }
        }
        if self.layernorm {
            for (p, g) in params.ln_gain.iter_mut().zip(&self.ln_gain) {
                *p += alpha * g;
            }
            for (p, g) in params.ln_bias.iter_mut().zip(&self.ln_bias) {
                *p += alpha * g;
            }
        }
    }
}

/// Pushes `d_out` (gradient w.r.t. the encoder output) back into `grads`.
fn backprop_branch(params: &EncoderParams, fv: &FeatureVector, fwd: &Forward, d_out: &[f64], grads: &mut GradientBuffer) {
    let de = params.dim_emb;
    let dh: Vec<f64> = if params.use_layernorm {
        let mut dxhat = vec![0.0; de];
        for k in 0..de {
            grads.ln_bias[k] += d_out[k];
            grads.ln_gain[k] += d_out[k] * fwd.xhat[k];
            dxhat[k] = d_out[k] * params.ln_gain[k];
        }
        let mean_d = dxhat.iter().sum::<f64>() / de as f64;
        let mean_dx = dxhat.iter().zip(&fwd.xhat).map(|(a, b)| a * b).sum::<f64>() / de as f64;
        (0..de)
            .map(|k| fwd.inv_std * (dxhat[k] - mean_d - fwd.xhat[k] * mean_dx))
            .collect()
    } else {
        d_out.to_vec()
    };
    for &(i, c) in fv.entries() {
        for (g, d) in grads.row_mut(i).iter_mut().zip(&dh) {
            *g += c * d;
        }
    }
}

/// Loss of a triple under the weighted-partition NLL.
pub fn triple_loss(params: &EncoderParams, triple: &TrainTriple) -> Result<f64> {
    triple.validate()?;
    let q = forward(params, &triple.q)?.out;
    let p = forward(params, &triple.pos)?.out;
    let pos = similarity(params.sim, &q, &p);
    let mut negs = Vec::with_capacity(triple.negs.len());
    for n in &triple.negs {
        negs.push(similarity(params.sim, &q, &forward(params, n)?.out));
    }
    let l = nll_loss_weighted(pos, &negs, &triple.neg_weights);
    if !l.is_finite() {
        return Err(Error::NonFinite { stage: "loss" });
    }
    Ok(l)
}

/// Loss and exact gradient of a triple. The shared encoder receives
/// contributions from the query, positive, and every negative branch.
pub fn backward(params: &EncoderParams, triple: &TrainTriple) -> Result<(f64, GradientBuffer)> {
    triple.validate()?;
    let fq = forward(params, &triple.q)?;
    let fp = forward(params, &triple.pos)?;
    let fns: Vec<Forward> = triple.negs.iter().map(|n| forward(params, n)).collect::<Result<_>>()?;
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    if !finite(&fq.out) || !finite(&fp.out) || fns.iter().any(|f| !finite(&f.out)) {
        return Err(Error::NonFinite { stage: "encode" });
    }

    let s_pos = similarity(params.sim, &fq.out, &fp.out);
    let s_neg: Vec<f64> = fns.iter().map(|f| similarity(params.sim, &fq.out, &f.out)).collect();
    if !s_pos.is_finite() || s_neg.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { stage: "score" });
    }
    let loss = nll_loss_weighted(s_pos, &s_neg, &triple.neg_weights);
    if !loss.is_finite() {
        return Err(Error::NonFinite { stage: "loss" });
    }

    // softmax posteriors: dL/ds⁺ = p⁺ − 1, dL/ds⁻_j = p_j
    let m = s_neg
        .iter()
        .zip(&triple.neg_weights)
        .map(|(s, w)| s + w.ln())
        .fold(s_pos, f64::max);
    let e_pos = (s_pos - m).exp();
    let e_neg: Vec<f64> = s_neg
        .iter()
        .zip(&triple.neg_weights)
        .map(|(s, w)| w * (s - m).exp())
        .collect();
    let z = e_pos + e_neg.iter().sum::<f64>();

    let de = params.dim_emb;
    let mut d_q = vec![0.0; de];
    let mut d_p = vec![0.0; de];
    similarity_grad(params.sim, &fq.out, &fp.out, e_pos / z - 1.0, &mut d_q, &mut d_p);
    let mut grads = GradientBuffer::zeros_like(params);
    for (fnf, (e, fv)) in fns.iter().zip(e_neg.iter().zip(&triple.negs)) {
        let mut d_n = vec![0.0; de];
        similarity_grad(params.sim, &fq.out, &fnf.out, e / z, &mut d_q, &mut d_n);
        backprop_branch(params, fv, fnf, &d_n, &mut grads);
    }
    backprop_branch(params, &triple.q, &fq, &d_q, &mut grads);
    backprop_branch(params, &triple.pos, &fp, &d_p, &mut grads);

    if !grads.is_finite() {
        return Err(Error::NonFinite { stage: "gradient" });
    }
    Ok((loss, grads))
}

/// ℓ2 norm of the full, unweighted, pre-clip gradient of a single-negative triple.
pub fn per_sample_grad_norm(
    params: &EncoderParams,
    q: &FeatureVector,
    pos: &FeatureVector,
    neg: &FeatureVector,
) -> Result<f64> {
    let triple = TrainTriple::single(q.clone(), pos.clone(), neg.clone());
    Ok(backward(params, &triple)?.1.norm())
}

/// Compares the analytic gradient with fourth-order central differences on a
/// seeded set of at least 200 coordinates (all of them when fewer exist) and
/// returns the max relative error `|a − b| / max(|a|, |b|, 1e-6)`.
///
/// The floor keeps entries whose magnitude is at the level of the
/// difference quotient's roundoff from dominating the ratio.
///
/// Coordinates touched by the triple are preferred; the remainder is filled
/// with random untouched coordinates.
pub fn finite_diff_check(params: &EncoderParams, triple: &TrainTriple, step: f64, seed: u64) -> Result<f64> {
    const MIN_COORDS: usize = 200;
    let (_, grads) = backward(params, triple)?;
    let analytic = grads.to_flat(params);
    let total = params.num_trainable();

    let de = params.dim_emb;
    let mut active: Vec<usize> = grads
        .w_rows
        .keys()
        .flat_map(|&f| (0..de).map(move |k| f as usize * de + k))
        .collect();
    active.extend(params.w.len()..total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<usize> = if total <= MIN_COORDS {
        (0..total).collect()
    } else if active.len() >= MIN_COORDS {
        index::sample(&mut rng, active.len(), MIN_COORDS)
            .into_iter()
            .map(|i| active[i])
            .collect()
    } else {
        let mut chosen = active.clone();
        let mut seen: std::collections::HashSet<usize> = active.into_iter().collect();
        while chosen.len() < MIN_COORDS {
            let c = rng.gen_range(0..total);
            if seen.insert(c) {
                chosen.push(c);
            }
        }
        chosen
    };

    let mut work = params.clone();
    let mut max_err: f64 = 0.0;
    for c in coords {
        let orig = *work.coord_mut(c);
        let mut at = |delta: f64| {
            *work.coord_mut(c) = orig + delta;
            triple_loss(&work, triple)
        };
        let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
        *work.coord_mut(c) = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
        let a = analytic[c];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

// ---------------------------------------------------------------------------
// Checkpoint file
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"ANCE";
const CKPT_VERSION: u32 = 1;
const FLAG_LAYERNORM: u32 = 1;
const FLAG_COSINE: u32 = 2;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl EncoderParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * (self.w.len() + 2 * self.dim_emb));
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.dim_in.to_le_bytes());
        out.extend_from_slice(&(self.dim_emb as u32).to_le_bytes());
        let mut flags = 0;
        if self.use_layernorm {
            flags |= FLAG_LAYERNORM;
        }
        if self.sim == SimKind::Cosine {
            flags |= FLAG_COSINE;
        }
        out.extend_from_slice(&flags.to_le_bytes());
        for x in self.w.iter().chain(&self.ln_gain).chain(&self.ln_bias) {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let dim_in = r.u32()?;
        let dim_emb = r.u32()? as usize;
        let flags = r.u32()?;
        if flags & !(FLAG_LAYERNORM | FLAG_COSINE) != 0 {
            return Err(Error::Format(format!("unknown checkpoint flags {flags:#x}")));
        }
        let as_f64 = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
        let n_w = (dim_in as usize)
            .checked_mul(dim_emb)
            .ok_or_else(|| Error::Format("dimension overflow".into()))?;
        let w = as_f64(r.f32s(n_w)?);
        let ln_gain = as_f64(r.f32s(dim_emb)?);
        let ln_bias = as_f64(r.f32s(dim_emb)?);
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(EncoderParams {
            dim_in,
            dim_emb,
            w,
            ln_gain,
            ln_bias,
            use_layernorm: flags & FLAG_LAYERNORM != 0,
            sim: if flags & FLAG_COSINE != 0 {
                SimKind::Cosine
            } else {
                SimKind::Dot
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
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
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn random_fv(rng: &mut ChaCha8Rng, dim: u32, nnz: usize) -> FeatureVector {
        let entries: Vec<(u32, f64)> = (0..nnz)
            .map(|_| (rng.gen_range(0..dim), rng.gen_range(1..4) as f64))
            .collect();
        FeatureVector::from_entries(dim, entries).unwrap()
    }

    pub(crate) fn small_params(seed: u64, layernorm: bool, sim: SimKind) -> EncoderParams {
        let mut p = EncoderParams::init(&EncoderConfig {
            dim_in: 32,
            dim_emb: 4,
            use_layernorm: layernorm,
            sim,
            seed,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for (g, b) in p.ln_gain.iter_mut().zip(p.ln_bias.iter_mut()) {
            *g = rng.gen_range(0.5..1.5);
            *b = rng.gen_range(-0.3..0.3);
        }
        p
    }

    // Dense matrix product and layer norm written from the definition.
    fn naive_encode(p: &EncoderParams, fv: &FeatureVector) -> Vec<f64> {
        let de = p.dim_emb();
        let mut x = vec![0.0; p.dim_in() as usize];
        for &(i, c) in fv.entries() {
            x[i as usize] = c;
        }
        let mut h = vec![0.0; de];
        for k in 0..de {
            for i in 0..x.len() {
                h[k] += p.w[i * de + k] * x[i];
            }
        }
        if !p.use_layernorm {
            return h;
        }
        let mu: f64 = h.iter().sum::<f64>() / de as f64;
        let var: f64 = h.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / de as f64;
        (0..de)
            .map(|k| p.ln_gain[k] * (h[k] - mu) / (var + 1e-5).sqrt() + p.ln_bias[k])
            .collect()
    }

    #[test]
    fn encode_zero_input() {
        let p = small_params(1, false, SimKind::Dot);
        let e = encode(&p, &FeatureVector::empty(32)).unwrap();
        assert!(e.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encode_layernorm_moments() {
        let mut p = small_params(2, true, SimKind::Dot);
        p.ln_gain = vec![1.0; 4];
        p.ln_bias = vec![0.0; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = encode(&p, &random_fv(&mut rng, 32, 6)).unwrap();
        let mean = e.0.iter().sum::<f64>() / 4.0;
        let var = e.0.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn encode_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..20 {
            for ln in [false, true] {
                let p = small_params(seed, ln, SimKind::Dot);
                let fv = random_fv(&mut rng, 32, 5);
                let got = encode(&p, &fv).unwrap();
                for (a, b) in got.0.iter().zip(naive_encode(&p, &fv)) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn encode_dimension_mismatch() {
        let p = small_params(1, true, SimKind::Dot);
        assert!(matches!(encode(&p, &FeatureVector::empty(16)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn score_examples() {
        assert_eq!(similarity(SimKind::Dot, &[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((similarity(SimKind::Cosine, &[3.0, 4.0], &[3.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(similarity(SimKind::Dot, &[1.0, 2.0], &[3.0, 4.0]), 11.0);
        assert_eq!(similarity(SimKind::Cosine, &[0.0, 0.0], &[3.0, 4.0]), 0.0);
        assert_eq!(similarity_f32(SimKind::Dot, &[1.0, 2.0], &[3.0, 4.0]), 11.0);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn nll_examples() {
        assert!((nll_loss(0.3, &[0.3]) - 2f64.ln()).abs() < 1e-12);
        assert!((nll_loss(0.3, &[0.3]) - 0.693147).abs() < 1e-6);
        assert!(nll_loss(50.0, &[-50.0]) < 1e-40);
        assert!((nll_loss(0.0, &[1.0]) - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((nll_loss(0.0, &[1.0]) - 1.313262).abs() < 1e-6);
        for (p, n) in [(1e4, -1e4), (-1e4, 1e4), (1e4, 1e4), (-1e4, -1e4)] {
            assert!(nll_loss(p, &[n]).is_finite());
        }
        assert!((nll_loss(-1e4, &[1e4]) - 2e4).abs() < 1e-6);
        // weight w on a single negative equals adding ln w to its score
        let w = 3.0;
        assert!((nll_loss_weighted(0.2, &[0.7], &[w]) - nll_loss(0.2, &[0.7 + f64::ln(w)])).abs() < 1e-12);
    }

    #[test]
    fn untouched_rows_get_no_gradient() {
        let p = small_params(3, true, SimKind::Dot);
        let fv = |i: u32| FeatureVector::from_entries(32, [(i, 1.0)]).unwrap();
        let t = TrainTriple::single(fv(1), fv(2), fv(3));
        let (_, g) = backward(&p, &t).unwrap();
        let flat = g.to_flat(&p);
        for f in 0..32u32 {
            if ![1, 2, 3].contains(&f) {
                assert!(flat[f as usize * 4..f as usize * 4 + 4].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..30 {
            for ln in [false, true] {
                for sim in [SimKind::Dot, SimKind::Cosine] {
                    let p = small_params(seed, ln, sim);
                    let negs = rng.gen_range(1..4);
                    let mut t = TrainTriple::new(
                        random_fv(&mut rng, 32, 4),
                        random_fv(&mut rng, 32, 4),
                        (0..negs).map(|_| random_fv(&mut rng, 32, 4)).collect(),
                    );
                    t.neg_weights = (0..negs).map(|_| rng.gen_range(0.5..2.0)).collect();
                    let err = finite_diff_check(&p, &t, 1e-4, seed).unwrap();
                    assert!(err < 1e-4, "seed {seed} ln {ln} {sim:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn finite_diff_reports_large_step_error() {
        let p = small_params(4, true, SimKind::Dot);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = TrainTriple::single(random_fv(&mut rng, 32, 4), random_fv(&mut rng, 32, 4), random_fv(&mut rng, 32, 4));
        let small = finite_diff_check(&p, &t, 1e-4, 1).unwrap();
        let big = finite_diff_check(&p, &t, 1.0, 1).unwrap();
        assert!(big > small);
        assert_eq!(big, finite_diff_check(&p, &t, 1.0, 1).unwrap());
    }

    #[test]
    fn finite_diff_samples_200_coordinates_on_large_models() {
        let p = EncoderParams::init(&EncoderConfig {
            dim_in: 4096,
            dim_emb: 8,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = TrainTriple::single(random_fv(&mut rng, 4096, 5), random_fv(&mut rng, 4096, 5), random_fv(&mut rng, 4096, 5));
        let err = finite_diff_check(&p, &t, 1e-4, 3).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn saturated_triple_has_vanishing_gradient() {
        // q = pos share one feature, neg shares nothing and is pushed far away
        let mut p = EncoderParams::init(&EncoderConfig {
            dim_in: 8,
            dim_emb: 2,
            use_layernorm: false,
            sim: SimKind::Dot,
            seed: 0,
        })
        .unwrap();
        p.w.iter_mut().for_each(|x| *x = 0.0);
        p.w[0] = 5.0; // feature 0 → (5, 0)
        p.w[2] = -5.0; // feature 1 → (-5, 0)
        let fv = |i: u32| FeatureVector::from_entries(8, [(i, 1.0)]).unwrap();
        let t = TrainTriple::single(fv(0), fv(0), fv(1));
        let (loss, g) = backward(&p, &t).unwrap();
        assert!(loss < 1e-20);
        assert!(g.norm() < 1e-6);
        assert_eq!(per_sample_grad_norm(&p, &fv(0), &fv(0), &fv(1)).unwrap(), g.norm());
    }

    #[test]
    fn per_sample_norm_matches_backward() {
        let p = small_params(6, true, SimKind::Dot);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, d, n) = (random_fv(&mut rng, 32, 4), random_fv(&mut rng, 32, 4), random_fv(&mut rng, 32, 4));
        let (_, g) = backward(&p, &TrainTriple::single(q.clone(), d.clone(), n.clone())).unwrap();
        assert_eq!(per_sample_grad_norm(&p, &q, &d, &n).unwrap(), g.norm());
    }

    #[test]
    fn harder_negative_has_larger_gradient() {
        // Without layer norm, scaling the negative's counts by c scales its
        // embedding; a negative aligned with q gains loss and gradient.
        let p = small_params(8, false, SimKind::Dot);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_fv(&mut rng, 32, 4);
        let pos = random_fv(&mut rng, 32, 4);
        let scaled = |c: f64| FeatureVector::from_entries(32, q.entries().iter().map(|&(i, v)| (i, v * c))).unwrap();
        let mut prev: Option<(f64, f64)> = None;
        for c in [0.5, 1.0, 2.0, 4.0] {
            let n = scaled(c);
            let loss = triple_loss(&p, &TrainTriple::single(q.clone(), pos.clone(), n.clone())).unwrap();
            let norm = per_sample_grad_norm(&p, &q, &pos, &n).unwrap();
            if let Some((pl, pn)) = prev {
                assert!(loss > pl);
                assert!(norm >= pn);
            }
            prev = Some((loss, norm));
        }
    }

    #[test]
    fn non_finite_is_reported_with_stage() {
        let mut p = small_params(1, false, SimKind::Dot);
        p.w[0] = f64::NAN;
        let fv = |i: u32| FeatureVector::from_entries(32, [(i, 1.0)]).unwrap();
        let t = TrainTriple::single(fv(0), fv(1), fv(2));
        assert!(matches!(backward(&p, &t), Err(Error::NonFinite { stage: "encode" })));
    }

    #[test]
    fn triple_validation() {
        let p = small_params(1, true, SimKind::Dot);
        let fv = FeatureVector::empty(32);
        let mut t = TrainTriple::single(fv.clone(), fv.clone(), fv.clone());
        t.neg_weights = vec![0.0];
        assert!(backward(&p, &t).is_err());
        t.neg_weights = vec![1.0, 1.0];
        assert!(backward(&p, &t).is_err());
        assert!(backward(&p, &TrainTriple::new(fv.clone(), fv, vec![])).is_err());
    }

    #[test]
    fn cosine_with_zero_vectors_does_not_crash() {
        let p = small_params(1, false, SimKind::Cosine);
        let z = FeatureVector::empty(32);
        let (loss, g) = backward(&p, &TrainTriple::single(z.clone(), z.clone(), z)).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut p = small_params(12, true, SimKind::Cosine);
        p.round_to_f32();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"ANCE");
        assert_eq!(bytes.len(), 20 + 4 * (32 * 4 + 8));
        assert_eq!(EncoderParams::from_bytes(&bytes).unwrap(), p);
        assert!(matches!(EncoderParams::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EncoderParams::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(EncoderParams::from_bytes(&bad).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let p = small_params(3, true, SimKind::Dot);
        let mut q = p.clone();
        q.w.iter_mut().for_each(|x| *x = 0.0);
        q.set_flat(&p.flat()).unwrap();
        assert_eq!(p, q);
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric(seed in 0u64..1000, cos in any::<bool>(), ln in any::<bool>()) {
            let sim = if cos { SimKind::Cosine } else { SimKind::Dot };
            let p = small_params(seed, ln, sim);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = encode(&p, &random_fv(&mut rng, 32, 5)).unwrap();
            let b = encode(&p, &random_fv(&mut rng, 32, 5)).unwrap();
            prop_assert_eq!(score(&p, &a, &b), score(&p, &b, &a));
        }

        #[test]
        fn nll_is_finite_and_nonnegative(pos in -1e4f64..1e4, negs in proptest::collection::vec(-1e4f64..1e4, 1..6)) {
            let l = nll_loss(pos, &negs);
            prop_assert!(l.is_finite());
            prop_assert!(l >= 0.0);
        }
    }
}
