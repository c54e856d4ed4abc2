use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use delta::TaskKind;
use delta_cli::pipeline::{self, RunLog, FEATURES_FILE, KB_FILE, MODEL_DIR, RUN_LOG};
use delta_cli::{init_workers, report, CliError, Outcome, RunConfig};

/// Privacy-aware feature transformation: search, train, generate, report.
///
/// Every subcommand reads an optional TOML run config; flags override it.
/// Set DELTA_WORKERS to bound the worker thread count.
#[derive(Parser)]
#[command(name = "delta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the transformation search and write the knowledge base.
    Search {
        #[command(flatten)]
        common: Common,
        /// Knowledge-base file [default: <output_dir>/kb.jsonl]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the generator on a knowledge base.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Model directory [default: <output_dir>/model]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode, score and select a feature set with a trained model.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Token file [default: <output_dir>/features.tokens]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print utility and leakage of the original or a stored feature set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Token file; omit to score the original columns.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Write the metrics table and plots from persisted artifacts.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Report directory [default: <output_dir>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// search, train, generate and report in one go.
    RunAll {
        #[command(flatten)]
        common: Common,
        /// Output directory (same as --output-dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    sensitive: Option<String>,
    /// clf or reg
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    delimiter: Option<char>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n_candidates: Option<usize>,
}

impl Common {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(v) = self.data {
            cfg.data.path = Some(v);
        }
        if let Some(v) = self.target {
            cfg.data.target = v;
        }
        if let Some(v) = self.sensitive {
            cfg.data.sensitive = v;
        }
        if let Some(v) = self.task {
            cfg.data.task = v;
        }
        if let Some(v) = self.delimiter {
            cfg.data.delimiter = v;
        }
        if let Some(v) = self.output_dir {
            cfg.output_dir = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.episodes {
            cfg.search.episodes = v;
        }
        if let Some(v) = self.steps {
            cfg.search.steps_per_episode = v;
        }
        if let Some(v) = self.epochs {
            cfg.model.epochs = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.n_candidates {
            cfg.n_candidates = v;
        }
        cfg.finalize()?;
        Ok(cfg)
    }
}

fn or_default(p: Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    p.unwrap_or_else(|| dir.join(name))
}

fn nonempty_kb(path: &Path) -> Result<Option<delta::search::KnowledgeBase>, CliError> {
    let kb = pipeline::load_kb(path)?;
    if kb.is_empty() {
        log::warn!("{} holds no records; nothing to do", path.display());
        return Ok(None);
    }
    Ok(Some(kb))
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Search { common, out } => {
            let cfg = common.resolve()?;
            let dir = cfg.prepare_output()?;
            let d = cfg.load_data()?;
            let kb = pipeline::search(&cfg, &d, &or_default(out, dir, KB_FILE), &RunLog::new(dir.join(RUN_LOG)))?;
            Ok(if kb.is_empty() { Outcome::Empty } else { Outcome::Done })
        }
        Command::Train { common, kb, out } => {
            let cfg = common.resolve()?;
            let dir = cfg.prepare_output()?;
            let Some(kb) = nonempty_kb(&or_default(kb, dir, KB_FILE))? else {
                return Ok(Outcome::Empty);
            };
            pipeline::train(&cfg, &kb, &or_default(out, dir, MODEL_DIR), &RunLog::new(dir.join(RUN_LOG)))?;
            Ok(Outcome::Done)
        }
        Command::Generate { common, model, kb, out } => {
            let cfg = common.resolve()?;
            let dir = cfg.prepare_output()?;
            let d = cfg.load_data()?;
            let Some(kb) = nonempty_kb(&or_default(kb, dir, KB_FILE))? else {
                return Ok(Outcome::Empty);
            };
            let model = pipeline::load_model(&or_default(model, dir, MODEL_DIR))?;
            let g = pipeline::generate(
                &cfg,
                &model,
                &kb,
                &d,
                &or_default(out, dir, FEATURES_FILE),
                &RunLog::new(dir.join(RUN_LOG)),
            )?;
            println!("{}", delta::expr::serialize(&g.sequence));
            Ok(Outcome::Done)
        }
        Command::Evaluate { common, features } => {
            let cfg = common.resolve()?;
            let d = cfg.load_data()?;
            let seq = features.as_deref().map(pipeline::read_features).transpose()?;
            let rep = pipeline::evaluate(&cfg, &d, seq.as_ref())?;
            println!("{}", serde_json::to_string(&rep).expect("score report serializes"));
            Ok(Outcome::Done)
        }
        Command::Report { common, kb, model, features, out } => {
            let cfg = common.resolve()?;
            let dir = cfg.prepare_output()?.to_path_buf();
            let d = cfg.load_data()?;
            let Some(kb) = nonempty_kb(&or_default(kb, &dir, KB_FILE))? else {
                return Ok(Outcome::Empty);
            };
            let model = pipeline::load_model(&or_default(model, &dir, MODEL_DIR))?;
            let seq = pipeline::read_features(&or_default(features, &dir, FEATURES_FILE))?;
            let out = out.unwrap_or(dir);
            std::fs::create_dir_all(&out).map_err(CliError::io(&out))?;
            let rep = report::run(&cfg, &d, &kb, &model, &seq, &out, &RunLog::new(out.join(RUN_LOG)))?;
            print!("{}", rep.to_csv());
            Ok(Outcome::Done)
        }
        Command::RunAll { common, out } => {
            let mut cfg = common.resolve()?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let outcome = pipeline::run_all(&cfg)?;
            if outcome == Outcome::Done {
                print!("{}", std::fs::read_to_string(cfg.output_dir.join(report::CSV_FILE)).unwrap_or_default());
            }
            Ok(outcome)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_workers();
    let code = match run(Cli::parse()) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
