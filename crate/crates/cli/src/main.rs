use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hybrid_recall::codec;
use hybrid_recall::encoder::Metric;
use hybrid_recall::evaluator::EvalReport;
use hybrid_recall::miner::Strategy;
use hybrid_recall::pipeline::{self, EvalMode, PipelineConfig, Serving};
use hybrid_recall::reranker::{rerank, GbdtModel};
use log::info;
use serde::Serialize;

const THREADS_ENV: &str = "HYBRID_RECALL_THREADS";

#[derive(Parser)]
#[command(name = "hybrid-recall", version, about = "Hybrid lexical + dense product retrieval pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML pipeline config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory (overrides paths.root).
    #[arg(long, global = true)]
    artifacts: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Retrieval depth for search, mining and both federation legs.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// cosine | inner
    #[arg(long, global = true)]
    metric: Option<String>,
    /// pt | pt+token | teacher
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[arg(long, global = true)]
    nprobe: Option<usize>,
    /// Dense-result cache TTL in seconds.
    #[arg(long, global = true)]
    ttl: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog, engagement log and golden set.
    Synth,
    /// Validate external inputs and copy them into the artifact directory.
    Ingest {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        engagement: PathBuf,
        #[arg(long)]
        golden: Option<PathBuf>,
    },
    /// Turn engagement counts into graded labels.
    Label,
    /// Train the two-tower model.
    Train,
    /// Hard-negative mining rounds with retraining.
    Mine,
    /// Embed the catalog and build the exact, IVF and lexical indexes.
    BuildIndex,
    /// Hybrid retrieval for one query, or one query per stdin line.
    Search {
        #[arg(long, conflicts_with = "stdin")]
        query: Option<String>,
        #[arg(long)]
        stdin: bool,
    },
    /// Train the re-ranker, or re-rank a query's recall set.
    Rerank {
        #[arg(long, conflicts_with = "query")]
        train: bool,
        #[arg(long)]
        query: Option<String>,
    },
    /// Score a retrieval mode on the golden set, or compare saved runs.
    Eval {
        /// Run name; the run is saved as <reports>/<name>.run.json.
        #[arg(long, conflicts_with_all = ["baseline", "candidate"])]
        name: Option<String>,
        /// dense | ann | lexical | hybrid | rerank
        #[arg(long, default_value = "dense")]
        mode: String,
        /// Baseline run name or path.
        #[arg(long, requires = "candidate")]
        baseline: Option<String>,
        /// Candidate run names or paths.
        #[arg(long, num_args = 1..)]
        candidate: Vec<String>,
        /// Also write a CSV export.
        #[arg(long)]
        csv: bool,
    },
    /// Query-encode latency (fixed vs dynamic padding) and the IVF sweep.
    Bench,
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<PipelineConfig>(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(root) = &g.artifacts {
        cfg.paths.root = root.clone();
    }
    if let Some(s) = g.seed {
        cfg.seed = Some(s);
    }
    if let Some(k) = g.k {
        if k == 0 {
            bail!("--k must be >= 1");
        }
        cfg.federation.k_lexical = k;
        cfg.federation.k_ann = k;
        cfg.miner.k = k;
    }
    if let Some(m) = &g.metric {
        cfg.model.metric = match m.as_str() {
            "cosine" => Metric::Cosine,
            "inner" | "inner_product" => Metric::InnerProduct,
            other => bail!("unknown metric {other:?} (cosine|inner)"),
        };
    }
    if let Some(s) = &g.strategy {
        cfg.miner.strategy = s.parse::<Strategy>()?;
    }
    if let Some(n) = g.nprobe {
        cfg.index.nprobe = Some(n);
    }
    if let Some(t) = g.ttl {
        cfg.federation.ttl = t;
    }
    Ok(cfg.resolved())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run_path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.extension().is_some() || p.components().count() > 1 {
        p.to_path_buf()
    } else {
        cfg.paths.reports().join(format!("{name}.run.json"))
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    info!("resolved config: {}", serde_json::to_string(&cfg)?);
    match cli.command {
        Command::Synth => print_json(&pipeline::stage_synth(&cfg)?),
        Command::Ingest {
            catalog,
            engagement,
            golden,
        } => print_json(&pipeline::stage_ingest(&cfg, &catalog, &engagement, golden.as_deref())?),
        Command::Label => print_json(&pipeline::stage_label(&cfg)?),
        Command::Train => print_json(&pipeline::stage_train(&cfg)?),
        Command::Mine => print_json(&pipeline::stage_mine(&cfg)?),
        Command::BuildIndex => print_json(&pipeline::stage_build_index(&cfg)?),
        Command::Search { query, stdin } => {
            let serving = Serving::load(&cfg, cli.global.nprobe)?;
            if stdin {
                serving.federation.serve_lines(io::stdin().lock(), io::stdout().lock())?;
                Ok(())
            } else {
                let q = match query {
                    Some(q) => q,
                    None => bail!("search needs --query or --stdin"),
                };
                println!("{}", serde_json::to_string(&serving.search(&q, cli.global.k)?)?);
                Ok(())
            }
        }
        Command::Rerank { train, query } => {
            if train {
                return print_json(&pipeline::stage_train_ranker(&cfg)?);
            }
            let Some(q) = query else { bail!("rerank needs --train or --query") };
            pipeline::require(&cfg.paths.ranker())?;
            let ranker = GbdtModel::load(&cfg.paths.ranker())?;
            let serving = Serving::load(&cfg, cli.global.nprobe)?;
            let ctx = serving.features(cfg.labeler.alpha)?;
            let set = serving.search(&q, cli.global.k)?;
            let ranked: Vec<serde_json::Value> = rerank(&ranker, &ctx, &set)?
                .into_iter()
                .map(|(id, score)| serde_json::json!({"id": id, "score": score}))
                .collect();
            println!("{}", serde_json::json!({"query": set.query, "results": ranked}));
            Ok(())
        }
        Command::Eval {
            name,
            mode,
            baseline,
            candidate,
            csv,
        } => {
            let reports = cfg.paths.reports();
            if let Some(base) = baseline {
                let cands: Vec<PathBuf> = candidate.iter().map(|c| run_path(&cfg, c)).collect();
                let report: EvalReport = pipeline::compare_run_files(&cfg, &run_path(&cfg, &base), &cands)?;
                codec::write_file(&reports.join("eval_report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
                let text = report.render_text();
                codec::write_file(&reports.join("eval_report.txt"), text.as_bytes())?;
                if csv {
                    codec::write_file(&reports.join("eval_report.csv"), report.to_csv().as_bytes())?;
                }
                print!("{text}");
                return Ok(());
            }
            let mode: EvalMode = mode.parse()?;
            let name = name.unwrap_or_else(|| format!("{mode:?}").to_lowercase());
            let metrics = pipeline::stage_eval_run(&cfg, &name, mode, cli.global.nprobe)?;
            codec::write_file(&run_path(&cfg, &name), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
            print_json(&metrics)
        }
        Command::Bench => {
            let summary = pipeline::stage_bench(&cfg)?;
            let reports = cfg.paths.reports();
            codec::write_file(&reports.join("bench.json"), serde_json::to_string_pretty(&summary.latency)?.as_bytes())?;
            if let Some(csv) = &summary.ann_csv {
                codec::write_file(&reports.join("ann_eval.csv"), csv.as_bytes())?;
            }
            print_json(&summary)
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
