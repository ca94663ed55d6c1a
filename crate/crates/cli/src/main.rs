use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing::info;

use dynrag_core::bm25::{load_corpus, PassageIndex, RetrievalStatus, Retriever, DEFAULT_SEGMENT_SIZE};
use dynrag_core::eval::{
    emit_audit, emit_report, load_dataset, parse_theta_range, render_summary, render_sweep, run_dataset, sweep,
    EvalSettings, QAExample, RunConfig, RunPaths, TaskKind,
};
use dynrag_core::gateway::{backend_from_url, Gateway};
use dynrag_core::orchestrator::{Engine, StrategyConfig, StrategyKind};
use dynrag_core::qfs::{candidates, write_candidates_csv, QfsOptions};
use dynrag_core::rind::write_score_csv;
use dynrag_core::stopwords::StopwordSet;
use dynrag_core::trace::GenerationTrace;

#[derive(Parser)]
#[command(name = "dynrag", version, about = "Entropy- and attention-triggered retrieval-augmented generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or query a BM25 passage index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Answer a dataset with one strategy and write a report.
    Run(RunArgs),
    /// Run the trace-triggered strategy once per threshold.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Thresholds as start:end:step, inclusive.
        #[arg(long = "thetas", default_value = "1.0:1.4:0.1")]
        thetas: String,
    },
    /// Inspect a single .trace.json file.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Subcommand)]
enum IndexCommand {
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEGMENT_SIZE)]
        segment_size: usize,
    },
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Per-token trigger scores as CSV.
    Scores {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Query candidates for one trigger position as CSV.
    Query {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        position: usize,
        #[arg(long, default_value_t = 35)]
        top_n: usize,
        #[arg(long)]
        unmask_exemplars: bool,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    task_kind: Option<TaskKind>,
    #[arg(long)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    top_n: Option<usize>,
    /// Passages per retrieval.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    flare_threshold: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    max_retrievals: Option<usize>,
    #[arg(long)]
    generate_length: Option<usize>,
    /// `http://host:port` of a trace sidecar or `mock://script.json`.
    #[arg(long, env = "DYNRAG_BACKEND")]
    backend: Option<String>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    /// Exit nonzero when any question fails.
    #[arg(long)]
    strict: bool,
}

fn rebase(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p
    }
}

impl RunArgs {
    /// Config file values with flags applied on top; config-relative paths
    /// are resolved against the config file's directory.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
                let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
                let r = &mut cfg.run;
                r.dataset = r.dataset.take().map(|p| rebase(&base, p));
                r.corpus = r.corpus.take().map(|p| rebase(&base, p));
                r.index = r.index.take().map(|p| rebase(&base, p));
                r.out = r.out.take().map(|p| rebase(&base, p));
                if let Some(script) = r.backend.as_deref().and_then(|b| b.strip_prefix("mock://")) {
                    r.backend = Some(format!("mock://{}", rebase(&base, script.into()).display()));
                }
                cfg
            }
            None => {
                let kind = self.strategy.unwrap_or(StrategyKind::Dragin);
                RunConfig {
                    run: RunPaths { segment_size: DEFAULT_SEGMENT_SIZE, concurrency: 1, ..RunPaths::default() },
                    settings: EvalSettings::new(StrategyConfig::new(kind)),
                }
            }
        };
        let s = &mut cfg.settings.strategy;
        if let Some(kind) = self.strategy {
            s.kind = kind;
        }
        if let Some(v) = self.theta {
            s.theta = Some(v);
        }
        if let Some(v) = self.top_n {
            s.qfs_top_n = v;
        }
        if let Some(v) = self.k {
            s.top_k = v;
        }
        if let Some(v) = self.flare_threshold {
            s.flare_prob_threshold = Some(v);
        }
        if let Some(v) = self.window {
            s.n_tokens_window = v;
        }
        if let Some(v) = self.max_retrievals {
            s.max_retrievals_per_question = v;
        }
        if let Some(v) = self.generate_length {
            s.generate_length = v;
        }
        if let Some(v) = self.task_kind {
            cfg.settings.task_kind = v;
        }
        let r = &mut cfg.run;
        for (slot, flag) in [
            (&mut r.dataset, &self.dataset),
            (&mut r.index, &self.index),
            (&mut r.corpus, &self.corpus),
            (&mut r.out, &self.out),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if self.backend.is_some() {
            r.backend.clone_from(&self.backend);
        }
        if let Some(c) = self.concurrency {
            r.concurrency = c;
        }
        Ok(cfg)
    }
}

struct Prepared {
    config: RunConfig,
    examples: Vec<QAExample>,
    gateway: Gateway,
    index: Option<PassageIndex>,
}

fn prepare(args: &RunArgs) -> Result<Prepared> {
    let config = args.resolve()?;
    config.settings.strategy.validate()?;
    let run = &config.run;
    let dataset = run.dataset.as_ref().context("--dataset is required")?;
    let examples = load_dataset(dataset, config.settings.task_kind)?;
    let backend = run.backend.as_deref().context("--backend is required (or DYNRAG_BACKEND)")?;
    let gateway = Gateway::new(backend_from_url(backend, Duration::from_secs(args.timeout_secs))?);
    let index = match (&run.index, &run.corpus) {
        (Some(path), _) => Some(PassageIndex::load(path).with_context(|| format!("loading index {}", path.display()))?),
        (None, Some(corpus)) => Some(PassageIndex::build(load_corpus(corpus, run.segment_size)?)?),
        (None, None) if config.settings.strategy.kind == StrategyKind::WoRag => None,
        (None, None) => bail!("strategy {} needs --index or --corpus", config.settings.strategy.kind.name()),
    };
    info!(questions = examples.len(), strategy = config.settings.strategy.kind.name(), "prepared run");
    Ok(Prepared { config, examples, gateway, index })
}

fn engine<'a>(p: &'a Prepared, stopwords: &'a StopwordSet) -> Engine<'a> {
    Engine {
        strategy: &p.config.settings.strategy,
        template: &p.config.settings.prompt,
        gateway: &p.gateway,
        retriever: p.index.as_ref().map(|i| i as &dyn Retriever),
        stopwords,
    }
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let p = prepare(args)?;
    let stopwords = StopwordSet::english();
    let (report, audits) = run_dataset(&engine(&p, stopwords), &p.config.settings, &p.examples, p.config.run.concurrency);
    match &p.config.run.out {
        Some(out) => {
            emit_report(&report, out)?;
            emit_audit(&audits, out)?;
            info!(dir = %out.display(), "wrote report");
        }
        None => print!("{}", render_summary(&report)),
    }
    if args.strict && report.aggregates.failed > 0 {
        eprintln!("{} question(s) failed", report.aggregates.failed);
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: &RunArgs, thetas: &str) -> Result<ExitCode> {
    let thetas = parse_theta_range(thetas)?;
    let mut args = args.clone();
    args.strategy = Some(StrategyKind::Dragin);
    if args.theta.is_none() {
        args.theta = thetas.first().copied();
    }
    let p = prepare(&args)?;
    let stopwords = StopwordSet::english();
    let rows = sweep(&engine(&p, stopwords), &p.config.settings, &p.examples, &thetas, p.config.run.concurrency);
    let table = render_sweep(&rows);
    print!("{table}");
    if let Some(out) = &p.config.run.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("sweep.txt"), &table)?;
        let mut jsonl = String::new();
        for r in &rows {
            jsonl.push_str(&serde_json::to_string(r)?);
            jsonl.push('\n');
        }
        std::fs::write(out.join("sweep.jsonl"), jsonl)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_index(cmd: &IndexCommand) -> Result<()> {
    match cmd {
        IndexCommand::Build { corpus, out, segment_size } => {
            let passages = load_corpus(corpus, *segment_size)?;
            let index = PassageIndex::build(passages)?;
            index.save(out)?;
            println!(
                "indexed {} passages, {} terms, avg length {:.2} -> {}",
                index.doc_count(),
                index.term_count(),
                index.avg_doc_length(),
                out.display()
            );
        }
        IndexCommand::Search { index, query, k } => {
            let index = PassageIndex::load(index)?;
            let result = index.search(query, *k)?;
            if result.status != RetrievalStatus::Hits {
                println!("{:?}", result.status);
            }
            for (rank, hit) in result.hits.iter().enumerate() {
                let p = index.passage(hit.passage_id).context("hit without passage")?;
                println!("{}\t{}\t{:.6}\t{}\t{}", rank + 1, hit.passage_id, hit.score, p.source_doc, p.text);
            }
        }
    }
    Ok(())
}

fn read_trace(path: &Path) -> Result<GenerationTrace> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid trace {}", path.display()))
}

fn cmd_trace(cmd: &TraceCommand) -> Result<()> {
    let stopwords = StopwordSet::english();
    let stdout = std::io::stdout();
    match cmd {
        TraceCommand::Scores { trace } => write_score_csv(&read_trace(trace)?, stopwords, stdout.lock())?,
        TraceCommand::Query { trace, position, top_n, unmask_exemplars } => {
            let opts = QfsOptions { mask_exemplars: !unmask_exemplars, ..QfsOptions::default() };
            let rows = candidates(&read_trace(trace)?, *position, *top_n, stopwords, opts)?;
            write_candidates_csv(&rows, stdout.lock())?;
        }
    }
    stdout.lock().flush()?;
    Ok(())
}

fn main() -> Result<ExitCode> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Index(cmd) => cmd_index(cmd).map(|_| ExitCode::SUCCESS),
        Command::Run(args) => cmd_run(args),
        Command::Sweep { run, thetas } => cmd_sweep(run, thetas),
        Command::Trace(cmd) => cmd_trace(cmd).map(|_| ExitCode::SUCCESS),
    }
}
