//! Utility, privacy-leakage and disentanglement scoring.
//!
//! Utility is how well a downstream learner predicts the target from a feature
//! set (macro-F1, or `1 - RAE` for regression). Privacy leakage is the macro-F1
//! of a learner predicting the sensitive attribute from the same features;
//! lower is better.

pub mod forest;
pub mod hsic;
pub mod linear;
pub mod metrics;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{stratified_indices, DataError, Dataset, TaskKind};
use crate::util::{pearson, rng_for};
use forest::{ForestClassifier, ForestParams, ForestRegressor};
use linear::LogisticClassifier;

pub use hsic::hsic;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label has {classes} distinct class(es); at least 2 required")]
    DegenerateLabels { classes: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    #[default]
    RandomForest,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    CrossValidation { folds: usize },
    /// Single stratified split, used for the per-step reward.
    Holdout { test_fraction: f64 },
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::CrossValidation { folds: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub learner: Learner,
    pub protocol: Protocol,
    pub n_trees: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            learner: Learner::RandomForest,
            protocol: Protocol::default(),
            n_trees: 100,
        }
    }
}

impl EvalConfig {
    pub fn holdout() -> Self {
        Self {
            protocol: Protocol::Holdout { test_fraction: 0.2 },
            ..Self::default()
        }
    }

    fn n_folds(&self) -> usize {
        match self.protocol {
            Protocol::CrossValidation { folds } => folds,
            Protocol::Holdout { .. } => 1,
        }
    }
}

/// Scores of one feature set, one JSON object per evaluation in run logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub utility: f64,
    pub privacy: f64,
    pub metric_names: Vec<String>,
    pub n_folds: usize,
    pub seed: u64,
}

enum Label<'a> {
    Classes(&'a [usize]),
    Values(&'a [f64]),
}

fn rows_of(d: &Dataset) -> Vec<Vec<f64>> {
    d.matrix().rows().into_iter().map(|r| r.to_vec()).collect()
}

fn n_classes(y: &[usize]) -> usize {
    y.iter().max().map_or(0, |m| m + 1)
}

fn distinct(y: &[usize]) -> usize {
    y.iter().collect::<std::collections::HashSet<_>>().len()
}

/// Fold id per row. Classes are dealt round-robin after a per-class shuffle
/// so every fold sees the class mix.
fn fold_assignment(label: &Label<'_>, n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, 0xf01d);
    let mut fold = vec![0; n];
    match label {
        Label::Classes(y) => {
            let mut next = 0;
            for c in 0..n_classes(y) {
                let mut members: Vec<usize> = (0..n).filter(|&i| y[i] == c).collect();
                members.shuffle(&mut rng);
                for i in members {
                    fold[i] = next % folds;
                    next += 1;
                }
            }
        }
        Label::Values(_) => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            for (k, i) in all.into_iter().enumerate() {
                fold[i] = k % folds;
            }
        }
    }
    fold
}

fn fit_and_score(
    rows: &[Vec<f64>],
    label: &Label<'_>,
    train: &[usize],
    test: &[usize],
    cfg: &EvalConfig,
    seed: u64,
) -> f64 {
    let train_rows: Vec<Vec<f64>> = train.iter().map(|&i| rows[i].clone()).collect();
    let params = ForestParams {
        n_trees: cfg.n_trees,
        seed,
    };
    match label {
        Label::Classes(y) => {
            let k = n_classes(y);
            let ytr: Vec<usize> = train.iter().map(|&i| y[i]).collect();
            let truth: Vec<usize> = test.iter().map(|&i| y[i]).collect();
            let pred: Vec<usize> = match cfg.learner {
                Learner::RandomForest => {
                    let m = ForestClassifier::fit(&train_rows, &ytr, k, params);
                    test.iter().map(|&i| m.predict(&rows[i])).collect()
                }
                Learner::Logistic => {
                    let m = LogisticClassifier::fit(&train_rows, &ytr, k);
                    test.iter().map(|&i| m.predict(&rows[i])).collect()
                }
            };
            metrics::macro_f1(&truth, &pred)
        }
        Label::Values(y) => {
            let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let truth: Vec<f64> = test.iter().map(|&i| y[i]).collect();
            let m = ForestRegressor::fit(&train_rows, &ytr, params);
            let pred: Vec<f64> = test.iter().map(|&i| m.predict(&rows[i])).collect();
            metrics::one_minus_rae(&truth, &pred)
        }
    }
}

fn score(d: &Dataset, label: Label<'_>, cfg: &EvalConfig, seed: u64) -> Result<f64, EvalError> {
    let n = d.n_rows();
    let rows = rows_of(d);
    match cfg.protocol {
        Protocol::CrossValidation { folds } => {
            if folds < 2 || folds > n {
                return Err(EvalError::Argument(format!(
                    "{folds} folds on {n} rows"
                )));
            }
            let assign = fold_assignment(&label, n, folds, seed);
            let mut total = 0.0;
            for k in 0..folds {
                let train: Vec<usize> = (0..n).filter(|&i| assign[i] != k).collect();
                let test: Vec<usize> = (0..n).filter(|&i| assign[i] == k).collect();
                total += fit_and_score(&rows, &label, &train, &test, cfg, seed.wrapping_add(k as u64));
            }
            Ok(total / folds as f64)
        }
        Protocol::Holdout { test_fraction } => {
            let classes = match &label {
                Label::Classes(y) => Some(*y),
                Label::Values(_) => None,
            };
            let (train, test) = stratified_indices(classes, n, test_fraction, seed)?;
            Ok(fit_and_score(&rows, &label, &train, &test, cfg, seed))
        }
    }
}

pub fn utility_score_with(d: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<f64, EvalError> {
    if d.n_rows() == 0 {
        return Err(EvalError::Argument("empty dataset".into()));
    }
    match d.task_kind() {
        TaskKind::Classification => {
            let y = d.target_classes();
            let classes = distinct(&y);
            if classes < 2 {
                return Err(EvalError::DegenerateLabels { classes });
            }
            score(d, Label::Classes(&y), cfg, seed)
        }
        TaskKind::Regression => score(d, Label::Values(d.target()), cfg, seed),
    }
}

/// Cross-validated (5-fold) forest utility.
pub fn utility_score(d: &Dataset, seed: u64) -> Result<f64, EvalError> {
    utility_score_with(d, &EvalConfig::default(), seed)
}

pub fn privacy_score_with(d: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<f64, EvalError> {
    let s = d.sensitive();
    let classes = distinct(s);
    if classes < 2 {
        log::warn!("sensitive attribute has {classes} class(es); privacy score set to 0");
        return Ok(0.0);
    }
    score(d, Label::Classes(s), cfg, seed)
}

/// Cross-validated (5-fold) forest leakage of the sensitive attribute.
pub fn privacy_score(d: &Dataset, seed: u64) -> Result<f64, EvalError> {
    privacy_score_with(d, &EvalConfig::default(), seed)
}

pub fn score_report(d: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<ScoreReport, EvalError> {
    let (utility, privacy) = rayon::join(
        || utility_score_with(d, cfg, seed),
        || privacy_score_with(d, cfg, seed),
    );
    let utility_metric = match d.task_kind() {
        TaskKind::Classification => "macro_f1",
        TaskKind::Regression => "one_minus_rae",
    };
    Ok(ScoreReport {
        utility: utility?,
        privacy: privacy?,
        metric_names: vec![utility_metric.into(), "macro_f1".into()],
        n_folds: cfg.n_folds(),
        seed,
    })
}

/// Absolute Pearson correlation of every feature column with the target and
/// with the sensitive codes. Constant columns get 0.
pub fn label_correlations(d: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let sens: Vec<f64> = d.sensitive().iter().map(|&s| s as f64).collect();
    d.matrix()
        .columns()
        .into_iter()
        .map(|c| {
            let c = c.to_vec();
            (pearson(&c, d.target()).abs(), pearson(&c, &sens).abs())
        })
        .unzip()
}
