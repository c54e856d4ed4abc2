use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use delta::eval::{self, ScoreReport};
use delta::expr::{self, FeatureSetSequence};
use delta::gen::{self, checkpoint, GenerateOptions, Generated, Model};
use delta::search::{self, KnowledgeBase};
use delta::Dataset;
use serde::Serialize;
use serde_json::json;

use crate::report;
use crate::{CliError, Outcome, RunConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const KB_FILE: &str = "kb.jsonl";
pub const MODEL_DIR: &str = "model";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FEATURES_FILE: &str = "features.tokens";
pub const CANDIDATES_FILE: &str = "candidates.json";
pub const RUN_LOG: &str = "run_log.jsonl";

/// Append-only JSON-lines log of stage timings and summaries.
pub struct RunLog {
    path: PathBuf,
}

impl RunLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn truncate(&self) -> Result<(), CliError> {
        fs::write(&self.path, b"").map_err(CliError::io(&self.path))
    }

    pub fn record(&self, stage: &str, started: Instant, details: serde_json::Value) -> Result<(), CliError> {
        let line = json!({
            "stage": stage,
            "seconds": started.elapsed().as_secs_f64(),
            "details": details,
        });
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(CliError::io(&self.path))?;
        writeln!(f, "{line}").map_err(CliError::io(&self.path))
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::write(path, contents).map_err(CliError::io(path))
}

pub fn search(cfg: &RunConfig, d: &Dataset, kb_path: &Path, log: &RunLog) -> Result<KnowledgeBase, CliError> {
    let t = Instant::now();
    let kb = search::run_search(d, &cfg.search)?;
    if let Some(dir) = kb_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    kb.save_jsonl(kb_path)?;
    if kb.is_empty() {
        log::warn!("search ran {} episodes; knowledge base is empty", cfg.search.episodes);
    }
    log.record(
        "search",
        t,
        json!({
            "dataset": d.dataset_id(),
            "episodes": cfg.search.episodes,
            "steps_per_episode": cfg.search.steps_per_episode,
            "records": kb.len(),
            "best_utility": kb.best_by_utility().map(|r| r.utility),
            "kb": kb_path,
        }),
    )?;
    Ok(kb)
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase, CliError> {
    Ok(KnowledgeBase::load_jsonl(path)?)
}

pub fn train(cfg: &RunConfig, kb: &KnowledgeBase, model_dir: &Path, log: &RunLog) -> Result<Model, CliError> {
    let t = Instant::now();
    let (model, tlog) = gen::train(kb, &cfg.model)?;
    fs::create_dir_all(model_dir).map_err(CliError::io(model_dir))?;
    let mut lines = String::new();
    for e in &tlog.epochs {
        lines.push_str(&serde_json::to_string(e).expect("epoch log serializes"));
        lines.push('\n');
    }
    write_file(&model_dir.join(TRAIN_LOG), lines)?;
    checkpoint::save(&model, model_dir, Some(TRAIN_LOG))?;
    let last = tlog.epochs.last().map(|e| e.loss.total);
    log.record(
        "train",
        t,
        json!({"records": kb.len(), "epochs": tlog.epochs.len(), "final_total": last, "model": model_dir}),
    )?;
    Ok(model)
}

pub fn load_model(dir: &Path) -> Result<Model, CliError> {
    Ok(checkpoint::load(dir)?.0)
}

#[derive(Serialize)]
struct CandidateFile<'a> {
    selected: usize,
    lambda: f64,
    candidates: &'a [gen::Candidate],
}

pub fn generate(
    cfg: &RunConfig,
    model: &Model,
    kb: &KnowledgeBase,
    d: &Dataset,
    features_path: &Path,
    log: &RunLog,
) -> Result<Generated, CliError> {
    let t = Instant::now();
    let opts = GenerateOptions {
        n_candidates: cfg.n_candidates,
        lambda: cfg.lambda,
        eval: cfg.search.record_eval,
        seed: cfg.seed,
    };
    let g = gen::generate(model, kb, d, &opts)?;
    write_file(features_path, expr::serialize(&g.sequence) + "\n")?;
    let cands = CandidateFile {
        selected: g.selected,
        lambda: cfg.lambda,
        candidates: &g.candidates,
    };
    let cand_path = features_path.with_file_name(CANDIDATES_FILE);
    write_file(&cand_path, serde_json::to_string_pretty(&cands).expect("candidates serialize") + "\n")?;
    log.record(
        "generate",
        t,
        json!({
            "candidates": g.candidates.len(),
            "selected": g.selected,
            "utility": g.report.utility,
            "privacy": g.report.privacy,
            "features": features_path,
        }),
    )?;
    Ok(g)
}

pub fn read_features(path: &Path) -> Result<FeatureSetSequence, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    expr::parse(text.trim()).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Scores the original features, or the feature set stored in `features`.
pub fn evaluate(cfg: &RunConfig, d: &Dataset, features: Option<&FeatureSetSequence>) -> Result<ScoreReport, CliError> {
    let view = match features {
        Some(seq) => {
            if let Some(f) = seq.max_feature().filter(|&f| f >= d.n_features()) {
                return Err(CliError::Input(format!(
                    "feature set references f{f} but the dataset has {} columns",
                    d.n_features()
                )));
            }
            expr::materialize(seq, d).map_err(|e| CliError::Input(e.to_string()))?
        }
        None => d.clone(),
    };
    Ok(eval::score_report(&view, &cfg.search.record_eval, cfg.seed)?)
}

/// search, train, generate and report into `cfg.output_dir`.
pub fn run_all(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let out = cfg.prepare_output()?.to_path_buf();
    let log = RunLog::new(out.join(RUN_LOG));
    log.truncate()?;
    write_file(&out.join(CONFIG_FILE), cfg.to_toml())?;
    let d = cfg.load_data()?;

    let kb = search(cfg, &d, &out.join(KB_FILE), &log)?;
    if kb.is_empty() {
        return Ok(Outcome::Empty);
    }
    let model_dir = out.join(MODEL_DIR);
    let model = train(cfg, &kb, &model_dir, &log)?;
    let features = out.join(FEATURES_FILE);
    generate(cfg, &model, &kb, &d, &features, &log)?;
    let seq = read_features(&features)?;
    report::run(cfg, &d, &kb, &model, &seq, &out, &log)?;
    Ok(Outcome::Done)
}
