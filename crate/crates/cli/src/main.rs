use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use schemind::conceptualize::ApiFlavor;
use schemind::pipeline::{BackendSpec, Pipeline, StageSelection};
use schemind::{Error, PipelineConfig, Stage, StageReport};

#[derive(Parser, Debug)]
#[command(
    name = "schemind",
    version,
    about = "Induce event schemas from unlabeled text"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Tokenize and filter the raw corpus
    Ingest,
    /// Prompt the generation endpoint for schema candidates
    Conceptualize,
    /// Score slots and pick an event type per instance
    Structuralize,
    /// Cluster instances and merge each cluster into one schema
    Aggregate,
    /// Score cluster assignments against gold mention types
    Evaluate,
    /// Run every stage in order
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ReportFormat {
    Json,
    Text,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Api {
    Native,
    OpenaiCompletions,
}

#[derive(clap::Args, Debug)]
struct Opts {
    /// JSON configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Raw corpus file
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Treat the corpus as JSON records instead of plain lines
    #[arg(long, global = true)]
    records: bool,
    /// Work directory for stage files
    #[arg(long, global = true, default_value = "schemind-out")]
    output: PathBuf,
    /// Generation endpoint URL
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true, value_enum)]
    api: Option<Api>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// Serve completions from a replay store
    #[arg(long, global = true, conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Record live completions into a replay store
    #[arg(long, global = true)]
    record: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Demonstration pool (JSONL)
    #[arg(long, global = true)]
    demos: Option<PathBuf>,
    /// Gold mention types (JSONL)
    #[arg(long, global = true)]
    gold: Option<PathBuf>,
    /// Synonym groups file; replaces the configured similarity backends
    #[arg(long, global = true)]
    synonyms: Option<PathBuf>,
    /// Embedding vector table; replaces the configured similarity backends
    #[arg(long, global = true)]
    vectors: Option<PathBuf>,
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Rerun stages even when they are up-to-date
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,
}

fn build_config(opts: &Opts) -> schemind::Result<PipelineConfig> {
    let mut cfg = match &opts.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(p) = &opts.input {
        cfg.corpus.path = Some(p.clone());
    }
    if opts.records {
        cfg.corpus.format = schemind::InputFormat::StructuredRecords;
    }
    if let Some(u) = &opts.endpoint {
        cfg.endpoint.url = Some(u.clone());
    }
    if let Some(a) = opts.api {
        cfg.endpoint.api = match a {
            Api::Native => ApiFlavor::Native,
            Api::OpenaiCompletions => ApiFlavor::OpenAiCompletions,
        };
    }
    if let Some(m) = &opts.model {
        cfg.endpoint.model = Some(m.clone());
    }
    if let Some(r) = &opts.replay {
        cfg.endpoint.replay = Some(r.clone());
        cfg.endpoint.record = None;
    }
    if let Some(r) = &opts.record {
        cfg.endpoint.record = Some(r.clone());
        cfg.endpoint.replay = None;
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(w) = opts.workers {
        cfg.generation.workers = w;
    }
    if let Some(t) = opts.threshold {
        cfg.scoring.threshold = t;
    }
    if let Some(d) = &opts.demos {
        cfg.demonstrations.path = Some(d.clone());
    }
    if let Some(g) = &opts.gold {
        cfg.evaluation.gold = Some(g.clone());
    }
    if let Some(r) = opts.repeats {
        cfg.evaluation.repeats = r;
    }
    if opts.synonyms.is_some() || opts.vectors.is_some() {
        let mut backends = Vec::new();
        if let Some(p) = &opts.synonyms {
            backends.push(BackendSpec::Lexicon {
                path: p.clone(),
                weight: 1.0,
            });
        }
        if let Some(p) = &opts.vectors {
            backends.push(BackendSpec::Embedding {
                vectors: Some(p.clone()),
                service: None,
                weight: 1.0,
            });
        }
        cfg.similarity.backends = backends;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_reports(reports: &[StageReport], format: ReportFormat) {
    match format {
        ReportFormat::Json => {
            println!(
                "{}",
                serde_json::to_string_pretty(reports).expect("reports serialize")
            )
        }
        ReportFormat::Text => reports.iter().for_each(|r| print!("{r}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let selection = match cli.command {
        Command::Ingest => StageSelection::One(Stage::Ingest),
        Command::Conceptualize => StageSelection::One(Stage::Conceptualize),
        Command::Structuralize => StageSelection::One(Stage::Structuralize),
        Command::Aggregate => StageSelection::One(Stage::Aggregate),
        Command::Evaluate => StageSelection::One(Stage::Evaluate),
        Command::All => StageSelection::All,
    };
    let result = build_config(&cli.opts)
        .and_then(|cfg| Pipeline::new(cfg, &cli.opts.output))
        .and_then(|p| p.force(cli.opts.force).run(selection));
    match result {
        Ok(reports) => {
            print_reports(&reports, cli.opts.report);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
