//! Diagnostics for negative sampling: overlap with the model's own top
//! results, score long tails, gradient-norm statistics, importance-sampling
//! variance, the convergence-gain decomposition, and async-gap tracking.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::corpus::FeatureVector;
use crate::dense_index::DenseIndex;
use crate::encoder::{backward, encode, EncoderParams, TrainTriple};
use crate::error::{Error, Result};
use crate::negatives::{ance_pool, bm25_pool, in_batch_pool, sample_nce_in_batch, AnnSearch, BatchItem, SampleContext, SamplerConfig, SamplerKind};
use crate::training::MetricsRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Overlap {
    pub fraction: f64,
    /// Set when either list is shorter than `k`; the fraction is then over
    /// the shorter length.
    pub truncated: bool,
}

/// `|top-k(A) ∩ top-k(B)| / k`.
pub fn overlap_at_k<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T], k: usize) -> Result<Overlap> {
    if k == 0 {
        return Err(Error::Config("overlap k must be >= 1".into()));
    }
    let n = k.min(a.len()).min(b.len());
    if n == 0 {
        return Ok(Overlap {
            fraction: 0.0,
            truncated: true,
        });
    }
    let ta: HashSet<&str> = a[..n].iter().map(AsRef::as_ref).collect();
    let hits = b[..n].iter().filter(|x| ta.contains(x.as_ref())).count();
    Ok(Overlap {
        fraction: hits as f64 / n as f64,
        truncated: n < k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreDistribution {
    /// `(q, value)` pairs in the requested order.
    pub quantiles: Vec<(f64, f64)>,
    pub max: f64,
    pub min: f64,
    /// Fraction of documents scoring above `max − 0.1·(max − min)`.
    pub long_tail_fraction: f64,
    /// Gap between the best and second-best score.
    pub top_margin: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile(&v, 0.5))
}

/// Exact scores of every indexed document for one query.
pub fn score_distribution(params: &EncoderParams, index: &DenseIndex, query: &FeatureVector, quantiles: &[f64]) -> Result<ScoreDistribution> {
    let q = encode(params, query)?;
    let mut scores = index.all_scores(&q.0)?;
    if scores.is_empty() {
        return Err(Error::Empty("index"));
    }
    scores.sort_by(f64::total_cmp);
    let max = *scores.last().unwrap();
    let min = scores[0];
    let cut = max - 0.1 * (max - min);
    let above = scores.iter().filter(|&&s| s >= cut).count();
    Ok(ScoreDistribution {
        quantiles: quantiles.iter().map(|&p| (p, quantile(&scores, p))).collect(),
        max,
        min,
        long_tail_fraction: above as f64 / scores.len() as f64,
        top_margin: if scores.len() > 1 { max - scores[scores.len() - 2] } else { 0.0 },
    })
}

/// Probability `b·|D⁻*| / |C|²` that an in-batch draw hits an informative negative.
pub fn inbatch_probability(b: usize, d_star: usize, corpus_size: usize) -> Result<f64> {
    if b == 0 || d_star == 0 || corpus_size == 0 || d_star > corpus_size {
        return Err(Error::Config(format!(
            "need b, |D*|, |C| >= 1 and |D*| <= |C| (got {b}, {d_star}, {corpus_size})"
        )));
    }
    let c = corpus_size as f64;
    Ok(b as f64 * d_star as f64 / (c * c))
}

/// `p*_i = g_i / Σ g_j`.
pub fn oracle_distribution(grad_norms: &[f64]) -> Result<Vec<f64>> {
    if grad_norms.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
        return Err(Error::Config("gradient norms must be finite and non-negative".into()));
    }
    let total: f64 = grad_norms.iter().sum();
    if total == 0.0 {
        return Err(Error::Config("oracle distribution undefined for all-zero gradient norms".into()));
    }
    Ok(grad_norms.iter().map(|g| g / total).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    /// `Tr(V) = Σ p_i‖g_i‖² − ‖Σ p_i g_i‖²` for `g_i = ∇l_i / (N·p_i)`.
    pub trace: f64,
    /// `E[g] = (1/N) Σ ∇l_i`.
    pub mean: Vec<f64>,
}

fn check_distribution(probs: &[f64], n: usize) -> Result<()> {
    if probs.len() != n {
        return Err(Error::Dimension { expected: n, got: probs.len() });
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("probabilities must be non-negative and sum to 1 (sum {sum})")));
    }
    Ok(())
}

/// Trace of the covariance of the importance-weighted single-draw gradient.
/// `grads[i]` is the exact gradient for negative `i`; a zero-probability
/// negative must have a zero gradient.
pub fn estimator_variance(probs: &[f64], grads: &[Vec<f64>]) -> Result<VarianceReport> {
    let n = grads.len();
    if n == 0 {
        return Err(Error::Empty("negatives"));
    }
    check_distribution(probs, n)?;
    let dim = grads[0].len();
    if let Some(g) = grads.iter().find(|g| g.len() != dim) {
        return Err(Error::Dimension { expected: dim, got: g.len() });
    }
    let mut mean = vec![0.0; dim];
    let mut second = 0.0;
    for (p, g) in probs.iter().zip(grads) {
        let sq: f64 = g.iter().map(|x| x * x).sum();
        if *p == 0.0 {
            if sq > 0.0 {
                return Err(Error::Config("zero probability on a negative with non-zero gradient".into()));
            }
            continue;
        }
        let w = 1.0 / (n as f64 * p);
        second += p * w * w * sq;
        for (m, x) in mean.iter_mut().zip(g) {
            *m += x / n as f64;
        }
    }
    let mean_sq: f64 = mean.iter().map(|x| x * x).sum();
    Ok(VarianceReport {
        trace: second - mean_sq,
        mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceGain {
    /// `2η E[g]ᵀ(θ_t − θ*) − η² E[g]ᵀE[g] − η² Tr(V)`.
    pub decomposed: f64,
    /// `‖θ_t − θ*‖² − E‖θ_{t+1} − θ*‖²` by enumerating every draw.
    pub direct: f64,
    pub trace: f64,
}

/// Expected one-step decrease of the squared distance to `theta_star` when
/// `θ_{t+1} = θ_t − η·g_i` with `g_i = ∇l_i / (N·p_i)` drawn with probability `p_i`.
pub fn convergence_gain(theta_t: &[f64], theta_star: &[f64], probs: &[f64], grads: &[Vec<f64>], lr: f64) -> Result<ConvergenceGain> {
    if theta_t.len() != theta_star.len() {
        return Err(Error::Dimension {
            expected: theta_t.len(),
            got: theta_star.len(),
        });
    }
    let var = estimator_variance(probs, grads)?;
    if var.mean.len() != theta_t.len() {
        return Err(Error::Dimension {
            expected: theta_t.len(),
            got: var.mean.len(),
        });
    }
    let delta: Vec<f64> = theta_t.iter().zip(theta_star).map(|(a, b)| a - b).collect();
    let dot: f64 = var.mean.iter().zip(&delta).map(|(g, d)| g * d).sum();
    let mean_sq: f64 = var.mean.iter().map(|x| x * x).sum();
    let decomposed = 2.0 * lr * dot - lr * lr * mean_sq - lr * lr * var.trace;

    let n = grads.len() as f64;
    let dist_sq: f64 = delta.iter().map(|d| d * d).sum();
    let mut expected_next = 0.0;
    for (p, g) in probs.iter().zip(grads) {
        if *p == 0.0 {
            continue;
        }
        let w = 1.0 / (n * p);
        let next: f64 = delta.iter().zip(g).map(|(d, x)| (d - lr * w * x).powi(2)).sum();
        expected_next += p * next;
    }
    Ok(ConvergenceGain {
        decomposed,
        direct: dist_sq - expected_next,
        trace: var.trace,
    })
}

/// Full-batch objective `mean_i l_i + (ridge/2)‖θ‖²` and its gradient.
pub fn ridge_objective(params: &EncoderParams, triples: &[TrainTriple], ridge: f64) -> Result<(f64, Vec<f64>)> {
    if triples.is_empty() {
        return Err(Error::Empty("triples"));
    }
    let theta = params.flat();
    let n = triples.len() as f64;
    let mut grad: Vec<f64> = theta.iter().map(|t| ridge * t).collect();
    let mut loss = 0.5 * ridge * theta.iter().map(|t| t * t).sum::<f64>();
    for t in triples {
        let (l, g) = backward(params, t)?;
        loss += l / n;
        for (a, b) in grad.iter_mut().zip(g.to_flat(params)) {
            *a += b / n;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryPoint {
    pub params: EncoderParams,
    pub grad_norm: f64,
    pub iterations: usize,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn with_flat(base: &EncoderParams, theta: &[f64]) -> Result<EncoderParams> {
    let mut p = base.clone();
    p.set_flat(theta)?;
    Ok(p)
}

/// Finds a stationary point of [`ridge_objective`] starting from `init`:
/// gradient descent with Armijo backtracking until the gradient norm is
/// below `1e-5`, then Newton steps on a central-difference Hessian of the
/// exact gradient until it is below `tol`.
pub fn solve_stationary(init: &EncoderParams, triples: &[TrainTriple], ridge: f64, tol: f64, max_iter: usize) -> Result<StationaryPoint> {
    const SWITCH: f64 = 1e-5;
    let mut params = init.clone();
    let (mut loss, mut grad) = ridge_objective(&params, triples, ridge)?;
    let mut step = 1.0;
    let mut it = 0;
    while l2(&grad) >= SWITCH.max(tol) && it < max_iter {
        it += 1;
        let gn = l2(&grad);
        let theta = params.flat();
        step *= 2.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
            let trial = with_flat(&params, &cand)?;
            let (l2v, g2) = ridge_objective(&trial, triples, ridge)?;
            if l2v <= loss - 0.5 * step * gn * gn {
                (params, loss, grad) = (trial, l2v, g2);
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return Err(Error::NoCandidates("line search failed to decrease the objective".into()));
            }
        }
    }

    let n = grad.len();
    let h = 1e-5;
    while l2(&grad) >= tol && it < max_iter {
        it += 1;
        let theta = params.flat();
        let mut hess = nalgebra::DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[j] += h;
            down[j] -= h;
            let (_, gu) = ridge_objective(&with_flat(&params, &up)?, triples, ridge)?;
            let (_, gd) = ridge_objective(&with_flat(&params, &down)?, triples, ridge)?;
            for i in 0..n {
                hess[(i, j)] = (gu[i] - gd[i]) / (2.0 * h);
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let rhs = nalgebra::DVector::from_column_slice(&grad);
        let delta = hess
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NoCandidates("singular Hessian".into()))?;
        let gn = l2(&grad);
        let mut alpha = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, d)| t - alpha * d).collect();
            let trial = with_flat(&params, &cand)?;
            let (_, g2) = ridge_objective(&trial, triples, ridge)?;
            if l2(&g2) < gn {
                (params, grad) = (trial, g2);
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-6 {
                return Err(Error::NoCandidates(format!("Newton step stalled at grad norm {gn}")));
            }
        }
    }
    let gn = l2(&grad);
    if gn >= tol {
        return Err(Error::NoCandidates(format!("no stationary point within {max_iter} iterations (grad norm {gn})")));
    }
    Ok(StationaryPoint {
        params,
        grad_norm: gn,
        iterations: it,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub sampler: SamplerKind,
    pub k: usize,
    /// `(qid, fraction)` per batch item.
    pub per_query: Vec<(String, f64)>,
    pub mean: f64,
}

/// The current model's top-`k` non-relevant documents for query `q`.
pub fn informative_negatives(ctx: &SampleContext, q: usize, params: &EncoderParams, index: &DenseIndex, k: usize) -> Result<HashSet<usize>> {
    let qe = encode(params, &ctx.query_features[q])?;
    let relevant = ctx.judgments.num_relevant(&ctx.queries[q].id);
    let hits = index.search_exact(&qe.0, k + relevant)?;
    Ok(hits
        .ids()
        .filter_map(|id| ctx.corpus.index_of(id))
        .filter(|&d| !ctx.is_relevant(q, d))
        .take(k)
        .collect())
}

/// For each batch item, the fraction of the sampler's candidate pool that
/// lies in the current model's top-`k` negatives. For NCE the pool is the
/// set of negatives it selects.
pub fn negative_overlap_diagnostic<R: Rng>(
    ctx: &SampleContext,
    sampler: &SamplerConfig,
    params: &EncoderParams,
    index: &DenseIndex,
    batches: &[Vec<BatchItem>],
    k: usize,
    rng: &mut R,
) -> Result<OverlapReport> {
    let mut per_query = Vec::new();
    for batch in batches {
        let pools: Vec<Vec<usize>> = match sampler.kind {
            SamplerKind::RandInBatch => (0..batch.len()).map(|i| in_batch_pool(ctx, batch, i)).collect(),
            SamplerKind::NceInBatch => sample_nce_in_batch(ctx, batch, params, sampler.per_pos, rng)?
                .into_iter()
                .map(|n| n.negatives.iter().map(|x| x.doc).collect())
                .collect(),
            SamplerKind::Bm25Top | SamplerKind::Bm25PlusRand => batch
                .iter()
                .map(|it| bm25_pool(ctx, it.query, sampler.pool_k))
                .collect::<Result<_>>()?,
            SamplerKind::Ance => batch
                .iter()
                .map(|it| ance_pool(ctx, it.query, index, params, sampler.pool_k, AnnSearch::Exact))
                .collect::<Result<_>>()?,
        };
        for (item, pool) in batch.iter().zip(pools) {
            let top = informative_negatives(ctx, item.query, params, index, k)?;
            let frac = if pool.is_empty() {
                0.0
            } else {
                pool.iter().filter(|d| top.contains(d)).count() as f64 / pool.len() as f64
            };
            per_query.push((ctx.queries[item.query].id.clone(), frac));
        }
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|p| p.1).sum::<f64>() / per_query.len() as f64
    };
    Ok(OverlapReport {
        sampler: sampler.kind,
        k,
        per_query,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    /// `(step, step − index_version)` for every record that used an index.
    pub per_step: Vec<(u64, u64)>,
    pub mean: f64,
    pub max: u64,
}

pub fn async_gap_report(metrics: &[MetricsRecord]) -> Result<GapReport> {
    let mut per_step = Vec::new();
    for m in metrics {
        if let Some(v) = m.index_version {
            let gap = m.step.checked_sub(v).ok_or_else(|| {
                Error::Format(format!("index version {v} is ahead of step {}", m.step))
            })?;
            per_step.push((m.step, gap));
        }
    }
    if per_step.is_empty() {
        return Err(Error::Empty("metrics with an index version"));
    }
    let mean = per_step.iter().map(|p| p.1 as f64).sum::<f64>() / per_step.len() as f64;
    let max = per_step.iter().map(|p| p.1).max().unwrap_or(0);
    Ok(GapReport { per_step, mean, max })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradStats {
    pub sampler: String,
    /// `(step, loss, pre-clip grad norm)`.
    pub series: Vec<(u64, f64, f64)>,
    pub median_norm: f64,
    pub median_loss: f64,
}

/// Per-sampler loss and pre-clip gradient-norm series from a metrics stream.
pub fn grad_stats(metrics: &[MetricsRecord]) -> Vec<GradStats> {
    let mut by: BTreeMap<&str, Vec<(u64, f64, f64)>> = BTreeMap::new();
    for m in metrics {
        by.entry(&m.sampler).or_default().push((m.step, m.loss, m.grad_norm_preclip));
    }
    by.into_iter()
        .map(|(s, series)| {
            let norms: Vec<f64> = series.iter().map(|x| x.2).collect();
            let losses: Vec<f64> = series.iter().map(|x| x.1).collect();
            GradStats {
                sampler: s.to_string(),
                median_norm: median(&norms).unwrap_or(0.0),
                median_loss: median(&losses).unwrap_or(0.0),
                series,
            }
        })
        .collect()
}

/// Pairs `(loss, grad norm)` whose loss is below `loss_eps` but whose norm is
/// not below `factor × reference`.
pub fn lossbound_violations(pairs: &[(f64, f64)], loss_eps: f64, factor: f64, reference: f64) -> Vec<(f64, f64)> {
    pairs
        .iter()
        .copied()
        .filter(|&(l, g)| l < loss_eps && g >= factor * reference)
        .collect()
}

pub fn write_overlap_csv(report: &OverlapReport, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "qid,sampler,k,fraction")?;
    for (qid, f) in &report.per_query {
        writeln!(w, "{qid},{},{},{f}", report.sampler, report.k)?;
    }
    Ok(())
}

pub fn write_gap_csv(report: &GapReport, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "step,gap")?;
    for (s, g) in &report.per_step {
        writeln!(w, "{s},{g}")?;
    }
    Ok(())
}

pub fn write_grad_csv(stats: &[GradStats], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "sampler,step,loss,grad_norm_preclip")?;
    for s in stats {
        for (step, l, g) in &s.series {
            writeln!(w, "{},{step},{l},{g}", s.sampler)?;
        }
    }
    Ok(())
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(rows: &[T], w: &mut impl Write) -> Result<()> {
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<report>", e))?;
    }
    Ok(())
}
