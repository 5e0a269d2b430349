use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::Settings;
use error::CliError;

/// Dense retrieval experiments with ANN-refreshed hard negatives.
#[derive(Debug, Parser)]
#[command(name = "ance", version)]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus, queries and qrels.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build and save a BM25 inverted index.
    BuildSparse {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder; writes checkpoints and metrics.jsonl into --out.
    Train(TrainArgs),
    /// Encode a corpus with a checkpoint into a dense index file.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// none | firstp | maxp
        #[arg(long)]
        passages: Option<String>,
        /// Build IVF lists with this many centroids.
        #[arg(long)]
        nlist: Option<usize>,
    },
    /// Retrieve with a dense index and write a TREC run.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// exact | ivf | maxp
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        nprobe: Option<usize>,
    },
    /// Retrieve with BM25 and write a TREC run.
    SearchSparse {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score a run against qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        /// Score judged queries missing from the run as empty rankings.
        #[arg(long)]
        complete: bool,
    },
    /// Diagnostic reports.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Train with async refresh at several intervals and tabulate gap and quality.
    SweepAsync {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated refresh intervals.
        #[arg(long)]
        intervals: Option<String>,
        #[arg(long)]
        eval_queries: Option<PathBuf>,
        #[arg(long)]
        eval_qrels: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write index embeddings as CSV (id followed by the vector).
    DumpEmb {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// rand | nce | bm25 | bm25rand | ance
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Refresh the ANCE index synchronously for reproducible runs.
    #[arg(long)]
    sync: bool,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Resume from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Per-sampler loss and pre-clip gradient-norm series from metrics.jsonl.
    GradNorms {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-step gap between the training step and the index version used.
    Gap {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlap of a sampler's negatives with the model's current top-k.
    Overlap {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score distribution of every indexed document per query.
    Scores {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Importance-sampling variance over each query's ANCE pool, uniform vs oracle.
    Variance {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean per-query top-k overlap of two runs.
    Runs {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut s = Settings::load(cli.config.as_deref())?;
    s.apply_overrides(&cli.set)?;
    match cli.command {
        Command::GenData { out, seed } => {
            s.flag("seed", seed)?;
            commands::gen_data(&s, &out)
        }
        Command::BuildSparse { corpus, out } => commands::build_sparse(&corpus, &out),
        Command::Train(a) => {
            s.flag("sampler", a.sampler)?;
            s.flag("warmup_steps", a.warmup_steps)?;
            s.flag("max_steps", a.max_steps)?;
            s.flag("seed", a.seed)?;
            s.flag("lr", a.lr)?;
            if a.sync {
                s.set("refresh", "sync")?;
            }
            commands::train(&s, &a.data.into(), &a.out, a.init.as_deref())
        }
        Command::Encode {
            checkpoint,
            corpus,
            out,
            passages,
            nlist,
        } => {
            s.flag("passages", passages)?;
            s.flag("nlist", nlist)?;
            commands::encode_index(&s, &checkpoint, &corpus, &out)
        }
        Command::Search {
            checkpoint,
            index,
            queries,
            out,
            mode,
            k,
            nprobe,
        } => {
            s.flag("search_mode", mode)?;
            s.flag("k", k)?;
            s.flag("nprobe", nprobe)?;
            commands::search(&s, &checkpoint, &index, &queries, &out)
        }
        Command::SearchSparse { index, queries, out, k } => {
            s.flag("k", k)?;
            commands::search_sparse(&s, &index, &queries, &out)
        }
        Command::Eval { run, qrels, json, complete } => commands::eval(&run, &qrels, json, complete),
        Command::Analyze(cmd) => match cmd {
            AnalyzeCommand::GradNorms { metrics, out } => commands::analyze_grad_norms(&metrics, &out),
            AnalyzeCommand::Gap { metrics, out } => commands::analyze_gap(&metrics, &out),
            AnalyzeCommand::Overlap {
                data,
                checkpoint,
                sampler,
                out,
            } => {
                s.flag("sampler", sampler)?;
                commands::analyze_overlap(&s, &data.into(), &checkpoint, &out)
            }
            AnalyzeCommand::Scores {
                checkpoint,
                index,
                queries,
                out,
            } => commands::analyze_scores(&s, &checkpoint, &index, &queries, &out),
            AnalyzeCommand::Variance { data, checkpoint, out } => commands::analyze_variance(&s, &data.into(), &checkpoint, &out),
            AnalyzeCommand::Runs { a, b, k } => {
                s.flag("k", k)?;
                commands::analyze_runs(&s, &a, &b)
            }
        },
        Command::SweepAsync {
            data,
            intervals,
            eval_queries,
            eval_qrels,
            max_steps,
            out,
        } => {
            s.flag("intervals", intervals)?;
            s.flag("max_steps", max_steps)?;
            let eval = match (eval_queries, eval_qrels) {
                (Some(q), Some(j)) => Some((q, j)),
                (None, None) => None,
                _ => return Err(CliError::Config("--eval-queries and --eval-qrels go together".into())),
            };
            commands::sweep_async(&s, &data.into(), eval, &out)
        }
        Command::DumpEmb { index, out } => commands::dump_emb(&index, &out),
    }
}

impl From<DataArgs> for commands::DataPaths {
    fn from(a: DataArgs) -> Self {
        commands::DataPaths {
            corpus: a.corpus,
            queries: a.queries,
            qrels: a.qrels,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Config(first.to_string()).to_json_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.classify().0 as u8)
        }
    }
}
