use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ance_core::analysis::{
    async_gap_report, estimator_variance, grad_stats, lossbound_violations, median, negative_overlap_diagnostic, oracle_distribution,
    score_distribution, write_gap_csv, write_grad_csv, write_jsonl, write_overlap_csv,
};
use ance_core::corpus::{
    generate_synthetic, load_corpus, load_judgments, load_queries, passage_corpus, save_corpus, save_judgments, save_queries, Corpus,
    HashingConfig, Judgments, PassageConfig, PassageMode, Query, SyntheticSpec,
};
use ance_core::dense_index::{encode_corpus, encode_features, DenseIndex};
use ance_core::encoder::{backward, encode, EncoderConfig, EncoderParams, SimKind, TrainTriple};
use ance_core::eval::{evaluate, load_run, ndcg_at_k, run_overlap, save_run, RunFile};
use ance_core::negatives::{ance_pool, AnnSearch, BatchItem, SamplerConfig, SamplerKind};
use ance_core::sparse::{sparse_topk, Bm25Params, InvertedIndex};
use ance_core::training::{
    default_index_builder, run_training, run_training_from, Checkpoint, DirSink, MemorySink, MetricsRecord, Optimizer, RefreshMode,
    TrainConfig, TrainData, TrainState, Warmup,
};
use ance_core::Error;

use crate::config::Settings;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub struct DataPaths {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("io error on {}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Settings → module configs
// ---------------------------------------------------------------------------

fn choice<'a>(s: &Settings, key: &str, default: &str, allowed: &[&'a str]) -> Result<&'a str> {
    let v: String = s.get(key, default.to_string())?;
    allowed
        .iter()
        .find(|a| **a == v)
        .copied()
        .ok_or_else(|| CliError::Config(format!("`{key}` must be one of {}, got `{v}`", allowed.join("|"))))
}

pub fn synthetic_spec(s: &Settings) -> Result<SyntheticSpec> {
    let d = SyntheticSpec::default();
    Ok(SyntheticSpec {
        corpus_size: s.get("corpus_size", d.corpus_size)?,
        num_queries: s.get("num_queries", d.num_queries)?,
        num_topics: s.get("num_topics", d.num_topics)?,
        doc_len: s.get("doc_len", d.doc_len)?,
        query_len: s.get("query_len", d.query_len)?,
        mismatch_rate: s.get("mismatch_rate", d.mismatch_rate)?,
        seed: s.get("seed", d.seed)?,
        pool_size: s.get("pool_size", d.pool_size)?,
        focus_size: s.get("focus_size", d.focus_size)?,
    })
}

fn use_bigrams(s: &Settings) -> Result<bool> {
    s.get("bigrams", HashingConfig::default().use_bigrams)
}

pub fn hashing(s: &Settings) -> Result<HashingConfig> {
    Ok(HashingConfig {
        dim: s.get("feature_dim", HashingConfig::default().dim)?,
        use_bigrams: use_bigrams(s)?,
    })
}

fn hashing_for(s: &Settings, params: &EncoderParams) -> Result<HashingConfig> {
    Ok(HashingConfig {
        dim: params.dim_in(),
        use_bigrams: use_bigrams(s)?,
    })
}

pub fn encoder_config(s: &Settings, dim_in: u32) -> Result<EncoderConfig> {
    let d = EncoderConfig::default();
    Ok(EncoderConfig {
        dim_in,
        dim_emb: s.get("dim_emb", d.dim_emb)?,
        use_layernorm: s.get("layernorm", d.use_layernorm)?,
        sim: match choice(s, "sim", "dot", &["dot", "cosine"])? {
            "dot" => SimKind::Dot,
            _ => SimKind::Cosine,
        },
        seed: s.get("seed", d.seed)?,
    })
}

pub fn train_config(s: &Settings) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let kind: SamplerKind = s.get::<String>("sampler", d.sampler.kind.name().into())?.parse()?;
    let seed = s.get("seed", d.seed)?;
    let warmup_steps = s.get("warmup_steps", d.warmup_steps)?;
    let cfg = TrainConfig {
        lr: s.get("lr", d.lr)?,
        optimizer: match choice(s, "optimizer", "adam", &["adam", "sgd"])? {
            "adam" => Optimizer::Adam,
            _ => Optimizer::Sgd,
        },
        batch_size: s.get("batch_size", d.batch_size)?,
        grad_accum: s.get("grad_accum", d.grad_accum)?,
        clip_norm: s.get("clip_norm", d.clip_norm)?,
        refresh_interval: s.get("refresh_interval", d.refresh_interval)?,
        refresh: match choice(s, "refresh", "async", &["async", "sync", "disabled"])? {
            "async" => RefreshMode::Async,
            "sync" => RefreshMode::Sync,
            _ => RefreshMode::Disabled,
        },
        warmup: if warmup_steps > 0 { Warmup::Bm25 } else { Warmup::None },
        warmup_steps,
        epochs: s.get("epochs", d.epochs)?,
        max_steps: s.get_opt("max_steps")?,
        seed,
        sampler: SamplerConfig {
            kind,
            pool_k: s.get("pool_k", kind.default_pool_k())?,
            per_pos: s.get("per_pos", 1)?,
            seed,
        },
        ann: match choice(s, "ann", "exact", &["exact", "ivf"])? {
            "exact" => AnnSearch::Exact,
            _ => AnnSearch::Ivf {
                nprobe: s.get("nprobe", 8)?,
            },
        },
        ivf_nlist: s.get("nlist", d.ivf_nlist)?,
        bm25: bm25(s)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn bm25(s: &Settings) -> Result<Bm25Params> {
    let d = Bm25Params::default();
    let p = Bm25Params {
        k1: s.get("bm25_k1", d.k1)?,
        b: s.get("bm25_b", d.b)?,
    };
    p.validate()?;
    Ok(p)
}

fn load_data(paths: &DataPaths) -> Result<(Corpus, Vec<Query>, Judgments)> {
    Ok((load_corpus(&paths.corpus)?, load_queries(&paths.queries)?, load_judgments(&paths.qrels)?))
}

fn train_data(s: &Settings, paths: &DataPaths, dim: Option<u32>) -> Result<TrainData> {
    let (corpus, queries, judgments) = load_data(paths)?;
    let mut h = hashing(s)?;
    if let Some(d) = dim {
        h.dim = d;
    }
    Ok(TrainData::new(corpus, queries, judgments, &h)?)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn gen_data(s: &Settings, out: &Path) -> Result<()> {
    let spec = synthetic_spec(s)?;
    let held_out: usize = s.get("test_queries", 0)?;
    if held_out > spec.num_queries {
        return Err(CliError::Config(format!("test_queries {held_out} exceeds num_queries {}", spec.num_queries)));
    }
    let syn = generate_synthetic(&spec)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    save_corpus(&syn.corpus, out.join("corpus.jsonl"))?;

    let (train, test) = syn.queries.split_at(syn.queries.len() - held_out);
    let split = |qs: &[Query]| {
        let mut j = Judgments::new();
        for q in qs {
            for (d, g) in syn.judgments.for_query(&q.id).into_iter().flatten() {
                j.insert(&q.id, d, *g);
            }
        }
        j
    };
    save_queries(train, out.join("queries.jsonl"))?;
    save_judgments(&split(train), out.join("qrels.txt"))?;
    if held_out > 0 {
        save_queries(test, out.join("test-queries.jsonl"))?;
        save_judgments(&split(test), out.join("test-qrels.txt"))?;
    }
    println!(
        "wrote {} docs, {} train and {} test queries to {}",
        syn.corpus.len(),
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

pub fn build_sparse(corpus: &Path, out: &Path) -> Result<()> {
    let index = InvertedIndex::build(&load_corpus(corpus)?)?;
    index.save(out)?;
    println!("indexed {} docs into {}", index.num_docs(), out.display());
    Ok(())
}

pub fn train(s: &Settings, paths: &DataPaths, out: &Path, init: Option<&Path>) -> Result<()> {
    let cfg = train_config(s)?;
    let state = match init {
        Some(p) => TrainState::from_checkpoint(Checkpoint::load(p)?),
        None => TrainState::new(EncoderParams::init(&encoder_config(s, hashing(s)?.dim)?)?),
    };
    let data = train_data(s, paths, Some(state.params.dim_in()))?;
    let mut sink = DirSink::create(out, s.get("log_triples", false)?)?;
    write_file(&out.join("effective.conf"), |w| w.write_all(s.to_text().as_bytes()))?;
    let builder = default_index_builder(&data, &cfg);
    let result = run_training_from(&cfg, &data, state, &builder, &mut sink);
    sink.finish()?;
    match result {
        Ok(outcome) => {
            println!(
                "trained to step {} in {} (refresh failures: {})",
                outcome.state.step,
                out.display(),
                outcome.refresh_failures
            );
            Ok(())
        }
        Err(Error::Diverged { step, last_good }) => {
            last_good.save_in(out)?;
            Err(Error::Diverged { step, last_good }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn passage_mode(s: &Settings) -> Result<Option<PassageMode>> {
    Ok(match choice(s, "passages", "none", &["none", "firstp", "maxp"])? {
        "none" => None,
        "firstp" => Some(PassageMode::FirstP),
        _ => Some(PassageMode::MaxP),
    })
}

pub fn encode_index(s: &Settings, checkpoint: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut corpus = load_corpus(corpus)?;
    if let Some(mode) = passage_mode(s)? {
        let d = PassageConfig::default();
        let pc = PassageConfig {
            window: s.get("passage_window", d.window)?,
            stride: s.get("passage_stride", d.stride)?,
            max_passages: s.get("max_passages", d.max_passages)?,
        };
        corpus = passage_corpus(&corpus, mode, &pc)?;
    }
    let mut index = encode_corpus(&ckpt.params, &corpus, &hashing_for(s, &ckpt.params)?, ckpt.step)?;
    let nlist: usize = s.get("nlist", 0)?;
    if nlist > 0 {
        index.build_ivf(nlist, s.get("kmeans_iters", 20)?, s.get("seed", 0)?)?;
    }
    index.save(out)?;
    println!("encoded {} rows (version {}) into {}", index.len(), index.version, out.display());
    Ok(())
}


pub fn search(s: &Settings, checkpoint: &Path, index: &Path, queries: &Path, out: &Path) -> Result<()> {
    let params = Checkpoint::load(checkpoint)?.params;
    let index = DenseIndex::load(index)?;
    if index.dim() != params.dim_emb() {
        return Err(Error::Dimension {
            expected: params.dim_emb(),
            got: index.dim(),
        }
        .into());
    }
    let h = hashing_for(s, &params)?;
    let mode = choice(s, "search_mode", "exact", &["exact", "ivf", "maxp"])?;
    let k: usize = s.get("k", 100)?;
    let nprobe: usize = s.get("nprobe", 8)?;
    let mut run = RunFile::new(s.get("tag", format!("dense-{mode}"))?);
    for q in load_queries(queries)? {
        let e = encode(&params, &h.featurize_text(&q.text))?;
        let hits = match mode {
            "exact" => index.search_exact(&e.0, k)?,
            "ivf" => index.search_ivf(&e.0, k, nprobe)?,
            _ => index.search_maxp(&e.0, k)?,
        };
        run.insert(q.id, hits.hits)?;
    }
    save_run(&run, out)?;
    println!("wrote {} rankings to {}", run.len(), out.display());
    Ok(())
}

pub fn search_sparse(s: &Settings, index: &Path, queries: &Path, out: &Path) -> Result<()> {
    let index = InvertedIndex::load(index)?;
    let params = bm25(s)?;
    let k: usize = s.get("k", 100)?;
    let mut run = RunFile::new(s.get("tag", "bm25".to_string())?);
    for q in load_queries(queries)? {
        run.insert(q.id.clone(), sparse_topk(&index, &params, &q.text, k))?;
    }
    save_run(&run, out)?;
    println!("wrote {} rankings to {}", run.len(), out.display());
    Ok(())
}

pub fn eval(run: &Path, qrels: &Path, json: bool, complete: bool) -> Result<()> {
    let mut run = load_run(run)?;
    let judgments = load_judgments(qrels)?;
    if complete {
        let missing: Vec<String> = judgments
            .query_ids()
            .filter(|q| judgments.num_relevant(q) > 0 && run.ranking(q).is_none())
            .map(str::to_string)
            .collect();
        for q in missing {
            run.insert(q, std::iter::empty())?;
        }
    }
    let report = evaluate(&run, &judgments)?;
    if json {
        println!("{}", serde_json::to_string(&report).map_err(|e| CliError::Data(e.to_string()))?);
        return Ok(());
    }
    println!("metric\tvalue\tevaluated\tskipped");
    for (name, m) in [("ndcg@10", report.ndcg_10), ("mrr@10", report.mrr_10)] {
        println!("{name}\t{:.4}\t{}\t{}", m.mean, m.evaluated, m.skipped);
    }
    for (name, r) in [("recall@10", report.recall_10), ("recall@100", report.recall_100)] {
        println!("{name}\t{:.4}\t{}\t{}", r.recall, r.evaluated, r.skipped);
        println!("{name} coverage\t{:.4}\t{}\t{}", r.coverage, r.evaluated, r.skipped);
    }
    println!("hole@10\t{:.4}\t-\t-", report.hole_rate_10);
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn analyze_grad_norms(metrics: &Path, out: &Path) -> Result<()> {
    let records = read_metrics(metrics)?;
    let stats = grad_stats(&records);
    write_file(out, |w| write_grad_csv(&stats, w))?;
    let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.loss, r.grad_norm_preclip)).collect();
    let norms: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let reference = median(&norms).unwrap_or(0.0);
    for st in &stats {
        println!("{}\tmedian loss {:.4e}\tmedian grad norm {:.4e}", st.sampler, st.median_loss, st.median_norm);
    }
    println!(
        "steps with loss < 1e-6 and grad norm >= 1e-3 x run median: {}",
        lossbound_violations(&pairs, 1e-6, 1e-3, reference).len()
    );
    Ok(())
}

pub fn analyze_gap(metrics: &Path, out: &Path) -> Result<()> {
    let report = async_gap_report(&read_metrics(metrics)?)?;
    write_file(out, |w| write_gap_csv(&report, w))?;
    println!("mean gap {:.3}, max gap {}", report.mean, report.max);
    Ok(())
}

fn checkpoint_data(s: &Settings, paths: &DataPaths, checkpoint: &Path) -> Result<(EncoderParams, u64, TrainData)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = train_data(s, paths, Some(ckpt.params.dim_in()))?;
    Ok((ckpt.params, ckpt.step, data))
}

pub fn analyze_overlap(s: &Settings, paths: &DataPaths, checkpoint: &Path, out: &Path) -> Result<()> {
    let (params, step, data) = checkpoint_data(s, paths, checkpoint)?;
    let cfg = train_config(s)?;
    let index = encode_features(&params, &data.corpus, &data.doc_features, step)?;
    let ctx = data.context(cfg.bm25);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches: Vec<Vec<BatchItem>> = (0..s.get("num_batches", 20usize)?)
        .map(|_| data.items.choose_multiple(&mut rng, cfg.batch_size).copied().collect())
        .collect();
    let report = negative_overlap_diagnostic(&ctx, &cfg.sampler, &params, &index, &batches, s.get("overlap_k", 100)?, &mut rng)?;
    write_file(out, |w| write_overlap_csv(&report, w))?;
    println!("{} negatives: mean overlap with top-{} {:.4}", report.sampler, report.k, report.mean);
    Ok(())
}

pub fn analyze_scores(s: &Settings, checkpoint: &Path, index: &Path, queries: &Path, out: &Path) -> Result<()> {
    let params = Checkpoint::load(checkpoint)?.params;
    let index = DenseIndex::load(index)?;
    let h = hashing_for(s, &params)?;
    let mut rows = Vec::new();
    for q in load_queries(queries)? {
        let dist = score_distribution(&params, &index, &h.featurize_text(&q.text), &[0.5, 0.9, 0.99])?;
        rows.push(serde_json::json!({ "qid": q.id, "distribution": dist }));
    }
    let mut w = create(out)?;
    write_jsonl(&rows, &mut w)?;
    w.flush().map_err(|e| io_err(out, e))?;
    println!("wrote score distributions for {} queries to {}", rows.len(), out.display());
    Ok(())
}

pub fn analyze_variance(s: &Settings, paths: &DataPaths, checkpoint: &Path, out: &Path) -> Result<()> {
    let (params, step, data) = checkpoint_data(s, paths, checkpoint)?;
    let cfg = train_config(s)?;
    let index = encode_features(&params, &data.corpus, &data.doc_features, step)?;
    let ctx = data.context(cfg.bm25);
    let mut rows = Vec::new();
    for item in &data.items {
        let pool = ance_pool(&ctx, item.query, &index, &params, cfg.sampler.pool_k, AnnSearch::Exact)?;
        if pool.is_empty() {
            continue;
        }
        let grads: Vec<Vec<f64>> = pool
            .iter()
            .map(|&d| {
                let t = TrainTriple::single(
                    data.query_features[item.query].clone(),
                    data.doc_features[item.pos].clone(),
                    data.doc_features[d].clone(),
                );
                Ok(backward(&params, &t)?.1.to_flat(&params))
            })
            .collect::<Result<_>>()?;
        let n = grads.len();
        let uniform = estimator_variance(&vec![1.0 / n as f64; n], &grads)?.trace;
        let norms: Vec<f64> = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let oracle = match oracle_distribution(&norms) {
            Ok(p) => Some(estimator_variance(&p, &grads)?.trace),
            Err(_) => None,
        };
        rows.push(serde_json::json!({
            "qid": data.queries[item.query].id,
            "pool": n,
            "trace_uniform": uniform,
            "trace_oracle": oracle,
        }));
    }
    let mut w = create(out)?;
    write_jsonl(&rows, &mut w)?;
    w.flush().map_err(|e| io_err(out, e))?;
    println!("wrote variance reports for {} training pairs to {}", rows.len(), out.display());
    Ok(())
}

pub fn analyze_runs(s: &Settings, a: &Path, b: &Path) -> Result<()> {
    let k: usize = s.get("k", 100)?;
    let o = run_overlap(&load_run(a)?, &load_run(b)?, k);
    println!(
        "overlap@{k} {:.4} over {} queries{}",
        o.mean,
        o.common_queries,
        if o.query_mismatch { " (query sets differ)" } else { "" }
    );
    Ok(())
}

pub fn sweep_async(s: &Settings, paths: &DataPaths, eval: Option<(PathBuf, PathBuf)>, out: &Path) -> Result<()> {
    let mut base = train_config(s)?;
    if base.sampler.kind != SamplerKind::Ance {
        return Err(CliError::Config("sweep-async needs sampler=ance".into()));
    }
    base.refresh = RefreshMode::Async;
    let intervals: Vec<u64> = s.get_list("intervals", &[1, 10, 100])?;
    let h = hashing(s)?;
    let data = train_data(s, paths, None)?;
    let enc = encoder_config(s, h.dim)?;
    let (eval_queries, eval_judgments) = match eval {
        Some((q, j)) => (load_queries(q)?, load_judgments(j)?),
        None => (data.queries.clone(), data.judgments.clone()),
    };

    let mut lines = vec!["m\tmean_gap\tmax_gap\tndcg@10\ttail_loss\trefresh_failures".to_string()];
    for m in intervals {
        let cfg = TrainConfig {
            refresh_interval: m,
            ..base.clone()
        };
        let mut sink = MemorySink::default();
        let outcome = run_training(&cfg, &enc, &data, &mut sink)?;
        let gap = async_gap_report(&sink.metrics)?;
        let params = &outcome.state.params;
        let index = encode_features(params, &data.corpus, &data.doc_features, outcome.state.step)?;
        let mut run = RunFile::new("sweep");
        for q in &eval_queries {
            let e = encode(params, &h.featurize_text(&q.text))?;
            run.insert(q.id.clone(), index.search_exact(&e.0, 100)?.hits)?;
        }
        let ndcg = ndcg_at_k(&run, &eval_judgments, 10)?.mean;
        let tail = sink.metrics.len().div_ceil(10);
        let tail_loss = sink.metrics[sink.metrics.len() - tail..].iter().map(|r| r.loss).sum::<f64>() / tail as f64;
        let line = format!(
            "{m}\t{:.4}\t{}\t{ndcg:.4}\t{tail_loss:.4e}\t{}",
            gap.mean, gap.max, outcome.refresh_failures
        );
        println!("{line}");
        lines.push(line);
    }
    write_file(out, |w| lines.iter().try_for_each(|l| writeln!(w, "{l}")))
}

pub fn dump_emb(index: &Path, out: &Path) -> Result<()> {
    let index = DenseIndex::load(index)?;
    write_file(out, |w| index.write_csv(w))?;
    println!("wrote {} embeddings to {}", index.len(), out.display());
    Ok(())
}
