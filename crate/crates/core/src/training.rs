//! Importance-weighted optimization, BM25 warm-up, and the trainer/inferencer
//! refresh protocol.
//!
//! A step is one optimizer update over `grad_accum` micro-batches of
//! `batch_size` items. Steps are numbered from 1; a checkpoint with step `s`
//! holds the parameters after `s` updates, and an index built from it carries
//! version `s`. All per-step randomness is derived from `(seed, step)` so a
//! run resumed from a checkpoint replays identically.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FeatureVector, HashingConfig, Judgments, Query};
use crate::dense_index::{encode_features, DenseIndex};
use crate::encoder::{backward, EncoderConfig, EncoderParams, GradientBuffer, TrainTriple};
use crate::error::{Error, Result};
use crate::negatives::{
    sample_batch, AnnSearch, BatchItem, ItemNegatives, SampleContext, SamplerConfig, SamplerKind, TripleLogRecord,
};
use crate::sparse::{Bm25Params, InvertedIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Warmup {
    None,
    Bm25,
}

/// How the published ANCE index follows the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefreshMode {
    /// Trainer blocks at each refresh boundary until the new index is published.
    Sync,
    /// A concurrent inferencer rebuilds from the latest checkpoint.
    Async,
    /// The initial index is never replaced.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub grad_accum: usize,
    /// Global-norm clip; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    /// Refresh interval `m` in steps; also the checkpoint cadence.
    pub refresh_interval: u64,
    pub refresh: RefreshMode,
    pub warmup: Warmup,
    pub warmup_steps: u64,
    pub epochs: u64,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub ann: AnnSearch,
    /// IVF list count used when `ann` is IVF.
    pub ivf_nlist: usize,
    pub bm25: Bm25Params,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            batch_size: 8,
            grad_accum: 2,
            clip_norm: 1.0,
            refresh_interval: 500,
            refresh: RefreshMode::Async,
            warmup: Warmup::None,
            warmup_steps: 0,
            epochs: 1,
            max_steps: None,
            seed: 0,
            sampler: SamplerConfig::new(SamplerKind::Ance),
            ann: AnnSearch::Exact,
            ivf_nlist: 32,
            bm25: Bm25Params::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be a positive finite number");
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be >= 1");
        }
        if self.refresh_interval == 0 {
            return bad("refresh_interval must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0");
        }
        if self.sampler.kind.is_in_batch() && self.batch_size < 2 {
            return bad("in-batch samplers need batch_size >= 2");
        }
        if let AnnSearch::Ivf { nprobe } = self.ann {
            if nprobe == 0 || self.ivf_nlist == 0 {
                return bad("ivf nlist and nprobe must be >= 1");
            }
        }
        self.sampler.validate()?;
        self.bm25.validate()
    }

    fn items_per_step(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    /// Total number of steps for `num_items` training pairs.
    pub fn total_steps(&self, num_items: usize) -> u64 {
        self.max_steps.unwrap_or_else(|| {
            let per = self.items_per_step() as u64;
            self.epochs * (num_items as u64).div_ceil(per)
        })
    }

    fn warmup_len(&self) -> u64 {
        match self.warmup {
            Warmup::None => 0,
            Warmup::Bm25 => self.warmup_steps,
        }
    }

    /// Sampler used for step `step` (1-based).
    pub fn sampler_at(&self, step: u64) -> SamplerConfig {
        if step <= self.warmup_len() {
            SamplerConfig {
                kind: SamplerKind::Bm25Top,
                pool_k: SamplerKind::Bm25Top.default_pool_k(),
                ..self.sampler
            }
        } else {
            self.sampler
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: EncoderParams,
}

impl Checkpoint {
    pub fn file_name(step: u64) -> String {
        format!("checkpoint-{step:08}.ance")
    }

    /// Writes the parameters; the step is carried by the file name.
    pub fn save_in(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(Self::file_name(self.step));
        self.params.save(&path)?;
        Ok(path)
    }

    /// Loads a checkpoint, reading the step from a `checkpoint-N.ance` name
    /// (0 for any other name).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("checkpoint-")?.strip_suffix(".ance")?.parse().ok())
            .unwrap_or(0);
        Ok(Checkpoint {
            step,
            params: EncoderParams::load(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    adam: Option<AdamMoments>,
    /// Completed steps.
    pub step: u64,
    /// Version of the index used by the last step, if any.
    pub index_version: Option<u64>,
}

impl TrainState {
    pub fn new(params: EncoderParams) -> Self {
        TrainState {
            params,
            adam: None,
            step: 0,
            index_version: None,
        }
    }

    /// Resumes from a checkpoint. Optimizer moments restart from zero.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        TrainState {
            step: ckpt.step,
            ..TrainState::new(ckpt.params)
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            params: self.params.clone(),
        }
    }
}

/// One sampled training instance with the probability its negative was drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedTriple {
    pub triple: TrainTriple,
    pub prob: f64,
    pub pool_size: usize,
}

impl WeightedTriple {
    /// `1 / (N·p)`.
    pub fn weight(&self) -> f64 {
        1.0 / (self.pool_size as f64 * self.prob)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Mean unweighted loss of the triples.
    pub loss: f64,
    pub grad_norm_preclip: f64,
    pub grad_norm_postclip: f64,
}

/// Mean unweighted loss and importance-weighted mean gradient of `triples`.
pub fn weighted_gradient(params: &EncoderParams, triples: &[WeightedTriple]) -> Result<(f64, GradientBuffer)> {
    if triples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let n = triples.len() as f64;
    let mut grad = GradientBuffer::zeros_like(params);
    let mut loss = 0.0;
    for t in triples {
        if !(t.prob > 0.0) || t.pool_size == 0 {
            return Err(Error::Config(format!(
                "sampling probability must be > 0 with a non-empty pool (p = {}, N = {})",
                t.prob, t.pool_size
            )));
        }
        let (l, g) = backward(params, &t.triple)?;
        loss += l / n;
        grad.add_scaled(&g, t.weight() / n);
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite { stage: "gradient" });
    }
    Ok((loss, grad))
}

/// Clips `grad` to global norm `clip_norm`, returning the pre-clip norm.
pub fn clip_gradient(grad: &mut GradientBuffer, clip_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > clip_norm {
        grad.scale(clip_norm / norm);
    }
    norm
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Applies the optimizer update. Nothing is written unless every updated
/// parameter stays finite in single precision.
fn apply_update(state: &mut TrainState, grad: &GradientBuffer, cfg: &TrainConfig) -> Result<()> {
    let fits = |x: f64| (x as f32).is_finite();
    match cfg.optimizer {
        Optimizer::Sgd => {
            let flat_ok = grad.w_rows.iter().all(|(&f, row)| {
                let cur = state.params.row(f);
                cur.iter().zip(row).all(|(w, g)| fits(w - cfg.lr * g))
            }) && (!state.params.use_layernorm
                || state.params.ln_gain.iter().zip(&grad.ln_gain).all(|(w, g)| fits(w - cfg.lr * g))
                    && state.params.ln_bias.iter().zip(&grad.ln_bias).all(|(w, g)| fits(w - cfg.lr * g)));
            if !flat_ok {
                return Err(Error::NonFinite { stage: "update" });
            }
            grad.apply_to(&mut state.params, -cfg.lr);
        }
        Optimizer::Adam => {
            let n = state.params.num_trainable();
            let g = grad.to_flat(&state.params);
            let t = state.adam.as_ref().map_or(0, |a| a.t) + 1;
            let c1 = 1.0 - ADAM_B1.powi(t as i32);
            let c2 = 1.0 - ADAM_B2.powi(t as i32);
            let step_of = |m_prev: f64, v_prev: f64, g: f64, p: f64| {
                let m = ADAM_B1 * m_prev + (1.0 - ADAM_B1) * g;
                let v = ADAM_B2 * v_prev + (1.0 - ADAM_B2) * g * g;
                (m, v, p - cfg.lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS))
            };
            let prev = |i: usize| state.adam.as_ref().map_or((0.0, 0.0), |a| (a.m[i], a.v[i]));
            if !(0..n).all(|i| {
                let (m, v) = prev(i);
                fits(step_of(m, v, g[i], state.params.coord(i)).2)
            }) {
                return Err(Error::NonFinite { stage: "update" });
            }
            let adam = state.adam.get_or_insert_with(|| AdamMoments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            adam.t = t;
            for i in 0..n {
                let (m, v, p) = step_of(adam.m[i], adam.v[i], g[i], state.params.coord(i));
                adam.m[i] = m;
                adam.v[i] = v;
                *state.params.coord_mut(i) = p;
            }
        }
    }
    state.params.round_to_f32();
    Ok(())
}

/// One importance-weighted update: weighted mean gradient, global-norm clip,
/// optimizer step. Advances `state.step`.
pub fn weighted_step(state: &mut TrainState, triples: &[WeightedTriple], cfg: &TrainConfig) -> Result<StepOutcome> {
    let (loss, mut grad) = weighted_gradient(&state.params, triples)?;
    let pre = clip_gradient(&mut grad, cfg.clip_norm);
    let post = grad.norm();
    apply_update(state, &grad, cfg)?;
    state.step += 1;
    Ok(StepOutcome {
        loss,
        grad_norm_preclip: pre,
        grad_norm_postclip: post,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm_preclip: f64,
    pub sampler: String,
    pub index_version: Option<u64>,
    pub wall_ms: f64,
    /// Inferencer refresh failures so far; omitted while there are none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refresh_failures: Option<u64>,
}

/// Receives everything a training run emits.
pub trait TrainSink {
    fn metrics(&mut self, record: &MetricsRecord) -> Result<()>;
    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()>;
    fn wants_triples(&self) -> bool {
        false
    }
    fn triples(&mut self, _records: &[TripleLogRecord]) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub triples: Option<Vec<TripleLogRecord>>,
}

impl MemorySink {
    pub fn with_triples() -> Self {
        MemorySink {
            triples: Some(Vec::new()),
            ..Default::default()
        }
    }
}

impl TrainSink for MemorySink {
    fn metrics(&mut self, record: &MetricsRecord) -> Result<()> {
        self.metrics.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.checkpoints.push(ckpt.clone());
        Ok(())
    }

    fn wants_triples(&self) -> bool {
        self.triples.is_some()
    }

    fn triples(&mut self, records: &[TripleLogRecord]) -> Result<()> {
        if let Some(t) = &mut self.triples {
            t.extend_from_slice(records);
        }
        Ok(())
    }
}

/// Writes `metrics.jsonl`, optional `triples.jsonl`, and checkpoint files into a directory.
pub struct DirSink {
    dir: PathBuf,
    metrics: BufWriter<File>,
    triples: Option<BufWriter<File>>,
}

impl DirSink {
    pub fn create(dir: impl AsRef<Path>, log_triples: bool) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
        };
        Ok(DirSink {
            metrics: open("metrics.jsonl")?,
            triples: if log_triples { Some(open("triples.jsonl")?) } else { None },
            dir,
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io(&self.dir, e))?;
        if let Some(t) = &mut self.triples {
            t.flush().map_err(|e| Error::io(&self.dir, e))?;
        }
        Ok(())
    }
}

fn write_json_line<T: Serialize>(w: &mut impl Write, value: &T, dir: &Path) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| Error::io(dir, e))
}

impl TrainSink for DirSink {
    fn metrics(&mut self, record: &MetricsRecord) -> Result<()> {
        write_json_line(&mut self.metrics, record, &self.dir)
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.save_in(&self.dir).map(|_| ())
    }

    fn wants_triples(&self) -> bool {
        self.triples.is_some()
    }

    fn triples(&mut self, records: &[TripleLogRecord]) -> Result<()> {
        if let Some(w) = &mut self.triples {
            for r in records {
                write_json_line(w, r, &self.dir)?;
            }
        }
        Ok(())
    }
}

/// Featurized training inputs shared by the trainer and the inferencer.
pub struct TrainData {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    pub judgments: Judgments,
    pub doc_features: Vec<FeatureVector>,
    pub query_features: Vec<FeatureVector>,
    pub sparse: InvertedIndex,
    /// (query, positive doc) pairs in a stable order.
    pub items: Vec<BatchItem>,
}

impl TrainData {
    pub fn new(corpus: Corpus, queries: Vec<Query>, judgments: Judgments, hashing: &HashingConfig) -> Result<Self> {
        judgments.validate(&corpus, &queries)?;
        let doc_features = corpus.iter().map(|d| hashing.featurize_text(&d.text)).collect();
        let query_features = queries.iter().map(|q| hashing.featurize_text(&q.text)).collect();
        let sparse = InvertedIndex::build(&corpus)?;
        let mut items = Vec::new();
        for (qi, q) in queries.iter().enumerate() {
            for d in judgments.relevant(&q.id) {
                if let Some(pos) = corpus.index_of(d) {
                    items.push(BatchItem { query: qi, pos });
                }
            }
        }
        Ok(TrainData {
            corpus,
            queries,
            judgments,
            doc_features,
            query_features,
            sparse,
            items,
        })
    }

    pub fn context(&self, bm25: Bm25Params) -> SampleContext<'_> {
        SampleContext {
            corpus: &self.corpus,
            doc_features: &self.doc_features,
            queries: &self.queries,
            query_features: &self.query_features,
            judgments: &self.judgments,
            sparse: Some(&self.sparse),
            bm25,
        }
    }
}

/// Builds a dense index from a parameter snapshot; the argument is the version.
pub type IndexBuilder<'a> = dyn Fn(&EncoderParams, u64) -> Result<DenseIndex> + Sync + 'a;

/// The default index builder: encode every document, then build IVF lists if configured.
pub fn default_index_builder<'a>(data: &'a TrainData, cfg: &TrainConfig) -> impl Fn(&EncoderParams, u64) -> Result<DenseIndex> + Sync + 'a {
    let ann = cfg.ann;
    let nlist = cfg.ivf_nlist;
    let seed = cfg.seed;
    move |params: &EncoderParams, version: u64| {
        let mut index = encode_features(params, &data.corpus, &data.doc_features, version)?;
        if let AnnSearch::Ivf { .. } = ann {
            index.build_ivf(nlist.min(index.len()), 20, seed ^ version)?;
        }
        Ok(index)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub refresh_failures: u64,
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic item order: a fresh permutation per epoch.
struct ItemOrder {
    n: usize,
    seed: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl ItemOrder {
    fn get(&mut self, pos: u64) -> usize {
        let epoch = pos / self.n as u64;
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut step_rng(self.seed, u64::MAX - epoch));
            self.epoch = Some((epoch, perm));
        }
        self.epoch.as_ref().unwrap().1[(pos % self.n as u64) as usize]
    }
}

/// Latest-wins single-slot mailbox from trainer to inferencer.
#[derive(Default)]
struct Mailbox {
    slot: Mutex<(Option<Checkpoint>, bool)>,
    ready: Condvar,
}

impl Mailbox {
    fn post(&self, ckpt: Checkpoint) {
        self.slot.lock().unwrap().0 = Some(ckpt);
        self.ready.notify_one();
    }

    fn close(&self) {
        self.slot.lock().unwrap().1 = true;
        self.ready.notify_one();
    }

    /// Blocks until a checkpoint is available; `None` once closed and drained.
    fn take(&self) -> Option<Checkpoint> {
        let mut g = self.slot.lock().unwrap();
        loop {
            if let Some(c) = g.0.take() {
                return Some(c);
            }
            if g.1 {
                return None;
            }
            g = self.ready.wait(g).unwrap();
        }
    }
}

#[derive(Default)]
struct Published {
    index: RwLock<Option<Arc<DenseIndex>>>,
    failures: Mutex<u64>,
}

impl Published {
    fn snapshot(&self) -> Option<Arc<DenseIndex>> {
        self.index.read().unwrap().clone()
    }

    fn publish(&self, index: DenseIndex) {
        *self.index.write().unwrap() = Some(Arc::new(index));
    }

    fn refresh(&self, builder: &IndexBuilder, params: &EncoderParams, version: u64) {
        match builder(params, version) {
            Ok(index) => self.publish(index),
            Err(_) => *self.failures.lock().unwrap() += 1,
        }
    }

    fn failures(&self) -> u64 {
        *self.failures.lock().unwrap()
    }
}

/// Trains from freshly initialized parameters.
pub fn run_training(cfg: &TrainConfig, enc: &EncoderConfig, data: &TrainData, sink: &mut dyn TrainSink) -> Result<TrainOutcome> {
    let state = TrainState::new(EncoderParams::init(enc)?);
    let builder = default_index_builder(data, cfg);
    run_training_from(cfg, data, state, &builder, sink)
}

/// Continues training from `state` until the configured total step count.
pub fn run_training_from(
    cfg: &TrainConfig,
    data: &TrainData,
    mut state: TrainState,
    builder: &IndexBuilder,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.items.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    if state.params.dim_in() != data.doc_features.first().map_or(state.params.dim_in(), |f| f.dim()) {
        return Err(Error::Dimension {
            expected: state.params.dim_in() as usize,
            got: data.doc_features[0].dim() as usize,
        });
    }
    state.params.round_to_f32();
    let total = cfg.total_steps(data.items.len());
    let published = Published::default();
    let mailbox = Mailbox::default();
    let async_mode = cfg.refresh == RefreshMode::Async && cfg.sampler.kind == SamplerKind::Ance;

    std::thread::scope(|s| {
        if async_mode {
            let (published, mailbox) = (&published, &mailbox);
            s.spawn(move || {
                while let Some(ckpt) = mailbox.take() {
                    published.refresh(builder, &ckpt.params, ckpt.step);
                }
            });
        }
        let result = trainer_loop(cfg, data, &mut state, total, builder, &published, async_mode.then_some(&mailbox), sink);
        mailbox.close();
        result
    })?;
    Ok(TrainOutcome {
        state,
        refresh_failures: published.failures(),
    })
}

#[allow(clippy::too_many_arguments)]
fn trainer_loop(
    cfg: &TrainConfig,
    data: &TrainData,
    state: &mut TrainState,
    total: u64,
    builder: &IndexBuilder,
    published: &Published,
    mailbox: Option<&Mailbox>,
    sink: &mut dyn TrainSink,
) -> Result<()> {
    let ctx = data.context(cfg.bm25);
    let mut order = ItemOrder {
        n: data.items.len(),
        seed: cfg.seed,
        epoch: None,
    };
    let per_step = cfg.items_per_step() as u64;
    let start = Instant::now();
    let warmup = cfg.warmup_len();
    let mut emitted_final = false;

    while state.step < total {
        let step = state.step + 1;
        let sampler = cfg.sampler_at(step);
        let ance = sampler.kind == SamplerKind::Ance;
        if ance && published.snapshot().is_none() {
            // the initial index is built inline from the current parameters
            published.publish(builder(&state.params, state.step)?);
        }
        let index = if ance { published.snapshot() } else { None };

        let mut rng = step_rng(cfg.seed, step);
        let mut triples = Vec::with_capacity(per_step as usize * sampler.per_pos);
        let mut log = Vec::new();
        for micro in 0..cfg.grad_accum {
            let base = (step - 1) * per_step + (micro * cfg.batch_size) as u64;
            let batch: Vec<BatchItem> = (0..cfg.batch_size as u64)
                .map(|i| data.items[order.get(base + i)])
                .collect();
            let negs = sample_batch(&ctx, &sampler, &batch, &state.params, index.as_deref(), cfg.ann, &mut rng)?;
            collect_triples(data, &batch, &negs, &mut triples);
            if sink.wants_triples() {
                log_triples(data, &batch, &negs, sampler.kind, &mut log);
            }
        }

        let outcome = match weighted_step(state, &triples, cfg) {
            Ok(o) => o,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    step,
                    last_good: Box::new(state.checkpoint()),
                });
            }
            Err(e) => return Err(e),
        };
        state.index_version = index.as_ref().map(|i| i.version);

        let failures = published.failures();
        sink.metrics(&MetricsRecord {
            step,
            loss: outcome.loss,
            grad_norm_preclip: outcome.grad_norm_preclip,
            sampler: sampler.kind.name().to_string(),
            index_version: state.index_version,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            refresh_failures: (failures > 0).then_some(failures),
        })?;
        if !log.is_empty() {
            sink.triples(&log)?;
        }

        if step.is_multiple_of(cfg.refresh_interval) || step == total {
            let ckpt = state.checkpoint();
            sink.checkpoint(&ckpt)?;
            emitted_final = step == total;
            // refreshes only matter once the ANCE phase has begun
            let feeds_index = cfg.sampler.kind == SamplerKind::Ance && step >= warmup && step < total;
            if feeds_index && published.snapshot().is_some() && step.is_multiple_of(cfg.refresh_interval) {
                match (cfg.refresh, mailbox) {
                    (RefreshMode::Async, Some(mb)) => mb.post(ckpt),
                    (RefreshMode::Sync, _) => published.refresh(builder, &ckpt.params, ckpt.step),
                    _ => {}
                }
            }
        }
    }
    if !emitted_final {
        sink.checkpoint(&state.checkpoint())?;
    }
    Ok(())
}

fn collect_triples(data: &TrainData, batch: &[BatchItem], negs: &[ItemNegatives], out: &mut Vec<WeightedTriple>) {
    for (item, item_negs) in batch.iter().zip(negs) {
        for n in &item_negs.negatives {
            out.push(WeightedTriple {
                triple: TrainTriple::single(
                    data.query_features[item.query].clone(),
                    data.doc_features[item.pos].clone(),
                    data.doc_features[n.doc].clone(),
                ),
                prob: n.prob,
                pool_size: n.pool_size,
            });
        }
    }
}

fn log_triples(data: &TrainData, batch: &[BatchItem], negs: &[ItemNegatives], kind: SamplerKind, out: &mut Vec<TripleLogRecord>) {
    for (item, item_negs) in batch.iter().zip(negs) {
        for n in &item_negs.negatives {
            out.push(TripleLogRecord {
                qid: data.queries[item.query].id.clone(),
                pos: data.corpus.doc(item.pos).id.clone(),
                neg: data.corpus.doc(n.doc).id.clone(),
                sampler: kind.name().to_string(),
                index_version: item_negs.index_version,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::encoder::{tests::random_fv, SimKind};
    use rand::distributions::{Distribution, WeightedIndex};

    fn tiny_data(mismatch: f64, seed: u64) -> (TrainData, EncoderConfig) {
        let spec = SyntheticSpec {
            corpus_size: 120,
            num_queries: 30,
            num_topics: 6,
            doc_len: 16,
            query_len: 5,
            mismatch_rate: mismatch,
            seed,
            pool_size: 12,
            focus_size: 3,
        };
        let syn = generate_synthetic(&spec).unwrap();
        let hashing = HashingConfig { dim: 512, use_bigrams: false };
        let data = TrainData::new(syn.corpus, syn.queries, syn.judgments, &hashing).unwrap();
        let enc = EncoderConfig {
            dim_in: 512,
            dim_emb: 8,
            use_layernorm: false,
            sim: SimKind::Dot,
            seed,
        };
        (data, enc)
    }

    fn cfg(sampler: SamplerKind, steps: u64) -> TrainConfig {
        TrainConfig {
            lr: 0.01,
            batch_size: 4,
            grad_accum: 1,
            refresh_interval: 2,
            refresh: RefreshMode::Sync,
            max_steps: Some(steps),
            seed: 3,
            sampler: SamplerConfig::new(sampler),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn weights_follow_pool_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = TrainTriple::single(random_fv(&mut rng, 8, 2), random_fv(&mut rng, 8, 2), random_fv(&mut rng, 8, 2));
        let w = |prob, pool_size| WeightedTriple { triple: t.clone(), prob, pool_size }.weight();
        assert_eq!(w(1.0 / 50.0, 50), 1.0);
        assert!((w(2.0 / 50.0, 50) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_bad_probability_and_clips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = crate::encoder::tests::small_params(1, true, SimKind::Dot);
        let t = TrainTriple::single(random_fv(&mut rng, 32, 4), random_fv(&mut rng, 32, 4), random_fv(&mut rng, 32, 4));
        let mut state = TrainState::new(params);
        let c = TrainConfig {
            clip_norm: 1e-3,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let zero = WeightedTriple { triple: t.clone(), prob: 0.0, pool_size: 4 };
        assert!(matches!(weighted_step(&mut state, &[zero], &c), Err(Error::Config(_))));
        assert_eq!(state.step, 0);
        let ok = WeightedTriple { triple: t, prob: 0.25, pool_size: 4 };
        let out = weighted_step(&mut state, &[ok], &c).unwrap();
        assert!(out.grad_norm_preclip > 1e-3);
        assert!(out.grad_norm_postclip <= 1e-3 + 1e-6);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn weighted_single_draws_are_unbiased() {
        // mean of weighted single-negative gradients → full average gradient
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = crate::encoder::tests::small_params(5, false, SimKind::Dot);
        let dim = params.dim_in();
        let q = random_fv(&mut rng, dim, 6);
        let pos = random_fv(&mut rng, dim, 6);
        let docs: Vec<FeatureVector> = (0..64).map(|_| random_fv(&mut rng, dim, 6)).collect();
        let n = docs.len();
        let grads: Vec<Vec<f64>> = docs
            .iter()
            .map(|d| backward(&params, &TrainTriple::single(q.clone(), pos.clone(), d.clone())).unwrap().1.to_flat(&params))
            .collect();
        let full: Vec<f64> = (0..grads[0].len()).map(|c| grads.iter().map(|g| g[c]).sum::<f64>() / n as f64).collect();
        let probs: Vec<f64> = {
            let raw: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|r| r / s).collect()
        };
        let dist = WeightedIndex::new(&probs).unwrap();
        let draws = 10_000;
        let mut mean = vec![0.0; full.len()];
        for _ in 0..draws {
            let i = dist.sample(&mut rng);
            let wt = WeightedTriple {
                triple: TrainTriple::single(q.clone(), pos.clone(), docs[i].clone()),
                prob: probs[i],
                pool_size: n,
            };
            let (_, g) = weighted_gradient(&params, &[wt]).unwrap();
            for (m, x) in mean.iter_mut().zip(g.to_flat(&params)) {
                *m += x / draws as f64;
            }
        }
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let diff: Vec<f64> = mean.iter().zip(&full).map(|(a, b)| a - b).collect();
        let rel = rms(&diff) / rms(&full);
        assert!(rel < 0.02, "relative RMS {rel}");
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let (data, enc) = tiny_data(0.5, 1);
        let mut sink = MemorySink::default();
        let out = run_training(&cfg(SamplerKind::RandInBatch, 0), &enc, &data, &mut sink).unwrap();
        let mut init = EncoderParams::init(&enc).unwrap();
        init.round_to_f32();
        assert_eq!(out.state.params, init);
        assert!(sink.metrics.is_empty());
        assert_eq!(sink.checkpoints.len(), 1);
        assert_eq!(sink.checkpoints[0].step, 0);
    }

    #[test]
    fn sync_refresh_schedule() {
        let (data, enc) = tiny_data(0.5, 2);
        let mut sink = MemorySink::default();
        run_training(&cfg(SamplerKind::Ance, 6), &enc, &data, &mut sink).unwrap();
        let versions: Vec<Option<u64>> = sink.metrics.iter().map(|m| m.index_version).collect();
        assert_eq!(versions, [0, 0, 2, 2, 4, 4].map(Some));
        let steps: Vec<u64> = sink.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![2, 4, 6]);
    }

    #[test]
    fn disabled_refresh_keeps_initial_index() {
        let (data, enc) = tiny_data(0.5, 2);
        let mut sink = MemorySink::default();
        let c = TrainConfig { refresh: RefreshMode::Disabled, ..cfg(SamplerKind::Ance, 7) };
        run_training(&c, &enc, &data, &mut sink).unwrap();
        assert!(sink.metrics.iter().all(|m| m.index_version == Some(0)));
    }

    #[test]
    fn warmup_boundary_flips_sampler() {
        let (data, enc) = tiny_data(0.5, 3);
        let mut sink = MemorySink::default();
        let c = TrainConfig {
            warmup: Warmup::Bm25,
            warmup_steps: 3,
            ..cfg(SamplerKind::Ance, 8)
        };
        run_training(&c, &enc, &data, &mut sink).unwrap();
        let names: Vec<&str> = sink.metrics.iter().map(|m| m.sampler.as_str()).collect();
        assert_eq!(names, ["bm25", "bm25", "bm25", "ance", "ance", "ance", "ance", "ance"]);
        // initial ANCE index comes from the post-warm-up parameters
        assert_eq!(sink.metrics[3].index_version, Some(3));
        assert_eq!(sink.metrics[4].index_version, Some(4));
        assert!(sink.metrics[..3].iter().all(|m| m.index_version.is_none()));
    }

    #[test]
    fn full_warmup_equals_pure_bm25() {
        let (data, enc) = tiny_data(0.5, 4);
        let mut a = MemorySink::default();
        let mut b = MemorySink::default();
        let warm = TrainConfig {
            warmup: Warmup::Bm25,
            warmup_steps: 5,
            ..cfg(SamplerKind::Ance, 5)
        };
        let pure = cfg(SamplerKind::Bm25Top, 5);
        let oa = run_training(&warm, &enc, &data, &mut a).unwrap();
        let ob = run_training(&pure, &enc, &data, &mut b).unwrap();
        assert_eq!(oa.state.params, ob.state.params);
        let strip = |s: &MemorySink| s.metrics.iter().map(|m| (m.step, m.loss.to_bits(), m.sampler.clone())).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn loss_decreases_on_full_mismatch() {
        let (data, enc) = tiny_data(1.0, 5);
        let mut sink = MemorySink::default();
        let c = TrainConfig {
            lr: 0.01,
            batch_size: 8,
            ..cfg(SamplerKind::RandInBatch, 300)
        };
        run_training(&c, &enc, &data, &mut sink).unwrap();
        let losses: Vec<f64> = sink.metrics.iter().map(|m| m.loss).collect();
        let tenth = losses.len() / 10;
        let head: f64 = losses[..tenth].iter().sum::<f64>() / tenth as f64;
        let tail: f64 = losses[losses.len() - tenth..].iter().sum::<f64>() / tenth as f64;
        assert!(tail < head, "head {head} tail {tail}");
    }

    #[test]
    fn clip_contract_holds_every_step() {
        let (data, enc) = tiny_data(0.5, 6);
        let c = TrainConfig { clip_norm: 0.05, ..cfg(SamplerKind::Bm25PlusRand, 20) };
        let ctx = data.context(c.bm25);
        let mut state = TrainState::new(EncoderParams::init(&enc).unwrap());
        for step in 1..=20u64 {
            let mut rng = step_rng(c.seed, step);
            let batch = &data.items[(step as usize * 4) % 20..][..4];
            let negs = sample_batch(&ctx, &c.sampler, batch, &state.params, None, c.ann, &mut rng).unwrap();
            let mut triples = Vec::new();
            collect_triples(&data, batch, &negs, &mut triples);
            let out = weighted_step(&mut state, &triples, &c).unwrap();
            assert!(out.grad_norm_postclip <= c.clip_norm + 1e-6);
        }
    }

    #[test]
    fn checkpoint_resume_gives_identical_next_loss() {
        let dir = tempfile::tempdir().unwrap();
        let (data, enc) = tiny_data(0.5, 7);
        let c = cfg(SamplerKind::Ance, 6);
        let mut full = MemorySink::default();
        run_training(&c, &enc, &data, &mut full).unwrap();

        let mut first = MemorySink::default();
        run_training(&TrainConfig { max_steps: Some(4), ..c.clone() }, &enc, &data, &mut first).unwrap();
        let path = first.checkpoints.last().unwrap().save_in(dir.path()).unwrap();
        let ckpt = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt.step, 4);
        assert_eq!(&ckpt, first.checkpoints.last().unwrap());

        let mut resumed = MemorySink::default();
        // resuming with a fresh published index built from the checkpoint
        let builder = default_index_builder(&data, &c);
        run_training_from(&c, &data, TrainState::from_checkpoint(ckpt), &builder, &mut resumed).unwrap();
        assert_eq!(resumed.metrics[0].step, 5);
        assert_eq!(resumed.metrics[0].loss.to_bits(), full.metrics[4].loss.to_bits());
    }

    #[test]
    fn sync_runs_are_reproducible() {
        let (data, enc) = tiny_data(0.5, 8);
        let run = || {
            let mut s = MemorySink::default();
            run_training(&cfg(SamplerKind::Ance, 10), &enc, &data, &mut s).unwrap();
            let m: Vec<_> = s.metrics.iter().map(|m| (m.loss.to_bits(), m.index_version)).collect();
            (m, s.checkpoints.last().unwrap().params.to_bytes())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn async_gap_is_nonnegative_and_versions_audit() {
        let (data, enc) = tiny_data(0.5, 9);
        let c = TrainConfig { refresh: RefreshMode::Async, ..cfg(SamplerKind::Ance, 40) };
        let mut sink = MemorySink::with_triples();
        run_training(&c, &enc, &data, &mut sink).unwrap();
        for m in &sink.metrics {
            let v = m.index_version.unwrap();
            assert!(v <= m.step);
            assert!(v.is_multiple_of(2));
        }
        let triples = sink.triples.unwrap();
        assert_eq!(triples.len(), 40 * 4);
        // every triple of one step reports the single version that step used
        for (m, chunk) in sink.metrics.iter().zip(triples.chunks(4)) {
            assert!(chunk.iter().all(|t| t.index_version == m.index_version));
        }
    }

    #[test]
    fn inferencer_failure_is_surfaced() {
        let (data, enc) = tiny_data(0.5, 10);
        let c = TrainConfig { refresh: RefreshMode::Sync, ..cfg(SamplerKind::Ance, 6) };
        let good = default_index_builder(&data, &c);
        let flaky = |p: &EncoderParams, v: u64| if v == 0 { good(p, v) } else { Err(Error::Format("boom".into())) };
        let mut sink = MemorySink::default();
        let out = run_training_from(&c, &data, TrainState::new(EncoderParams::init(&enc).unwrap()), &flaky, &mut sink).unwrap();
        assert_eq!(out.refresh_failures, 2);
        assert!(sink.metrics.iter().all(|m| m.index_version == Some(0)));
        assert_eq!(sink.metrics[5].refresh_failures, Some(2));
        assert_eq!(sink.metrics[0].refresh_failures, None);
    }

    #[test]
    fn divergence_returns_last_good_checkpoint() {
        let (data, enc) = tiny_data(0.5, 11);
        let c = TrainConfig {
            lr: 1e300,
            optimizer: Optimizer::Sgd,
            clip_norm: f64::INFINITY,
            ..cfg(SamplerKind::RandInBatch, 50)
        };
        match run_training(&c, &enc, &data, &mut MemorySink::default()) {
            Err(Error::Diverged { step, last_good }) => {
                assert_eq!(last_good.step, step - 1);
                assert!(last_good.params.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn sampler_names_in_metrics() {
        let (data, enc) = tiny_data(0.5, 12);
        for kind in SamplerKind::ALL {
            let mut sink = MemorySink::default();
            run_training(&cfg(kind, 3), &enc, &data, &mut sink).unwrap();
            assert!(sink.metrics.iter().all(|m| m.sampler == kind.name()));
        }
    }
}
