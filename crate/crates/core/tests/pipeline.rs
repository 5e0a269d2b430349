use ance_core::corpus::{
    generate_synthetic, load_corpus, load_judgments, load_queries, save_corpus, save_judgments, save_queries, HashingConfig, SyntheticSpec,
};
use ance_core::dense_index::{encode_corpus, DenseIndex};
use ance_core::encoder::{encode, EncoderConfig, SimKind};
use ance_core::eval::{evaluate, load_run, save_run, RunFile};
use ance_core::negatives::{SamplerConfig, SamplerKind};
use ance_core::sparse::InvertedIndex;
use ance_core::training::{run_training, Checkpoint, DirSink, RefreshMode, TrainConfig, TrainData};

#[test]
fn files_round_trip_through_train_encode_search_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let syn = generate_synthetic(&SyntheticSpec {
        corpus_size: 300,
        num_queries: 30,
        num_topics: 6,
        ..SyntheticSpec::default()
    })
    .unwrap();

    save_corpus(&syn.corpus, dir.join("c.jsonl")).unwrap();
    save_queries(&syn.queries, dir.join("q.jsonl")).unwrap();
    save_judgments(&syn.judgments, dir.join("qrels")).unwrap();
    let corpus = load_corpus(dir.join("c.jsonl")).unwrap();
    let queries = load_queries(dir.join("q.jsonl")).unwrap();
    let judgments = load_judgments(dir.join("qrels")).unwrap();
    assert_eq!(corpus.docs(), syn.corpus.docs());
    assert_eq!(queries, syn.queries);
    assert_eq!(judgments, syn.judgments);

    let sparse = InvertedIndex::build(&corpus).unwrap();
    sparse.save(dir.join("sparse")).unwrap();
    assert_eq!(InvertedIndex::load(dir.join("sparse")).unwrap(), sparse);

    let hashing = HashingConfig {
        dim: 1024,
        use_bigrams: true,
    };
    let data = TrainData::new(corpus.clone(), queries.clone(), judgments.clone(), &hashing).unwrap();
    let enc = EncoderConfig {
        dim_in: 1024,
        dim_emb: 8,
        use_layernorm: true,
        sim: SimKind::Cosine,
        seed: 4,
    };
    let cfg = TrainConfig {
        max_steps: Some(20),
        refresh_interval: 10,
        refresh: RefreshMode::Sync,
        sampler: SamplerConfig::new(SamplerKind::Ance),
        ..TrainConfig::default()
    };
    let run_dir = dir.join("run");
    let mut sink = DirSink::create(&run_dir, true).unwrap();
    let outcome = run_training(&cfg, &enc, &data, &mut sink).unwrap();
    sink.finish().unwrap();
    let ckpt = Checkpoint::load(run_dir.join(Checkpoint::file_name(20))).unwrap();
    assert_eq!(ckpt.step, 20);
    assert_eq!(ckpt.params, outcome.state.params);
    let triples = std::fs::read_to_string(run_dir.join("triples.jsonl")).unwrap();
    assert_eq!(triples.lines().count(), 20 * cfg.batch_size * cfg.grad_accum);

    let mut index = encode_corpus(&ckpt.params, &corpus, &hashing, ckpt.step).unwrap();
    index.build_ivf(8, 10, 1).unwrap();
    index.save(dir.join("index")).unwrap();
    let loaded = DenseIndex::load(dir.join("index")).unwrap();
    assert_eq!(loaded, index);

    let mut run = RunFile::new("dense");
    for q in &queries {
        let e = encode(&ckpt.params, &hashing.featurize_text(&q.text)).unwrap();
        run.insert(&q.id, loaded.search_ivf(&e.0, 50, 8).unwrap().hits).unwrap();
    }
    save_run(&run, dir.join("run.trec")).unwrap();
    let reread = load_run(dir.join("run.trec")).unwrap();
    assert_eq!(reread.tag, "dense");
    assert_eq!(reread.len(), queries.len());
    let report = evaluate(&reread, &judgments).unwrap();
    assert_eq!(report, evaluate(&run, &judgments).unwrap());
    assert_eq!(report.ndcg_10.evaluated, queries.len());
}
