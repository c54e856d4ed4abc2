//! Phase I: cascading head / operator / tail agents grow feature sets and the
//! scored result of every episode is collected into a knowledge base.
//!
//! Head and tail agents choose among `K` slots, one per original column. A
//! slot holds the most recent expression grown from its column in the current
//! episode (initially the column itself), so repeated picks compose deeper
//! expressions while the action spaces stay fixed.

pub mod dqn;
pub mod state;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::eval::{self, EvalConfig, EvalError};
use crate::expr::{self, Arity, ExprError, FeatureExpr, FeatureSetSequence, OperatorKind};
use crate::util::rng_for;

pub use dqn::{epsilon_greedy, select_action, td_loss, Agent, QNetwork, ReplayBuffer, Transition};
pub use state::{build_state, StateEncoder, StateVector, STATE_DIM};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("cannot build state: {0}")]
    Statistics(String),
    #[error("no valid action in mask")]
    NoValidAction,
    #[error("invalid search config: {0}")]
    Config(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub beta_ib: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Time constant of the exponential decay, in global steps.
    pub epsilon_decay: f64,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub target_sync_interval: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Slots stop growing once their expression exceeds this many items.
    pub max_expr_len: usize,
    /// Per-step reward evaluator.
    pub step_eval: EvalConfig,
    /// Per-episode record evaluator.
    pub record_eval: EvalConfig,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beta_ib: 0.1,
            gamma: 0.9,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 100.0,
            episodes: 30,
            steps_per_episode: 8,
            target_sync_interval: 50,
            buffer_capacity: 10_000,
            batch_size: 64,
            hidden: vec![128, 128],
            learning_rate: 1e-3,
            max_expr_len: 15,
            step_eval: EvalConfig::holdout(),
            record_eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.into()));
        if !(0.0..1.0).contains(&self.beta_ib) {
            return bad("beta_ib must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1)");
        }
        let eps_ok = |e: f64| (0.0..=1.0).contains(&e);
        if !eps_ok(self.epsilon_start) || !eps_ok(self.epsilon_end) {
            return bad("epsilon bounds must be in [0, 1]");
        }
        if !(self.epsilon_decay > 0.0) {
            return bad("epsilon_decay must be positive");
        }
        if self.steps_per_episode == 0 {
            return bad("steps_per_episode must be >= 1");
        }
        if self.target_sync_interval == 0 || self.buffer_capacity == 0 || self.batch_size == 0 {
            return bad("target_sync_interval, buffer_capacity and batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    /// Exploration rate after `t` global steps.
    pub fn epsilon(&self, t: usize) -> f64 {
        self.epsilon_end
            + (self.epsilon_start - self.epsilon_end) * (-(t as f64) / self.epsilon_decay).exp()
    }
}

/// One scored feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformationRecord {
    pub tokens: String,
    pub utility: f64,
    pub privacy: f64,
    pub dataset_id: String,
    pub episode: usize,
    pub step: usize,
    /// Global step counter when the record was written.
    pub timestamp: u64,
}

impl TransformationRecord {
    pub fn sequence(&self) -> Result<FeatureSetSequence, ExprError> {
        expr::parse(&self.tokens)
    }

    fn check(&self) -> Result<(), String> {
        self.sequence().map_err(|e| e.to_string())?;
        for (name, v) in [("utility", self.utility), ("privacy", self.privacy)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub records: Vec<TransformationRecord>,
}

impl KnowledgeBase {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn best_by_utility(&self) -> Option<&TransformationRecord> {
        self.records
            .iter()
            .reduce(|a, b| if b.utility > a.utility { b } else { a })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), SearchError> {
        let io = |source| SearchError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(self.to_jsonl().as_bytes()).map_err(io)?;
        w.flush().map_err(io)
    }

    /// Reads and validates a line-delimited file. Blank lines are skipped.
    pub fn load_jsonl(path: &Path) -> Result<Self, SearchError> {
        let io = |source| SearchError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let fail = |message: String| SearchError::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec: TransformationRecord =
                serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
            rec.check().map_err(fail)?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}

/// Scaled performance gain of one step.
pub fn compute_reward(perf_t: f64, perf_prev: f64, beta_ib: f64) -> f64 {
    (1.0 - beta_ib) * (perf_t - perf_prev)
}

/// Per-episode bookkeeping returned by [`run_search_traced`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub perf_initial: f64,
    pub perfs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Target-network fingerprints (head, operator, tail) after each step,
    /// paired with the global step count.
    pub target_fingerprints: Vec<(usize, [u64; 3])>,
}

impl EpisodeTrace {
    pub fn perf_final(&self) -> f64 {
        self.perfs.last().copied().unwrap_or(self.perf_initial)
    }
}

pub fn run_search(d: &Dataset, cfg: &SearchConfig) -> Result<KnowledgeBase, SearchError> {
    run_search_traced(d, cfg).map(|(kb, _)| kb)
}

/// Agent states for one feature set.
struct Views {
    pooled: StateVector,
    nodes: Array2<f64>,
}

fn views(enc: &StateEncoder, d: &Dataset) -> Result<Views, SearchError> {
    let g = enc.embed_graph(d.matrix().view(), Some(d.target()))?;
    Ok(Views {
        pooled: g.pooled,
        nodes: g.nodes,
    })
}

fn op_context(v: &Views, column: usize) -> Vec<f64> {
    v.nodes.row(column).to_vec()
}

fn tail_context(v: &Views, column: usize, op: OperatorKind) -> Vec<f64> {
    let mut ctx = op_context(v, column);
    let mut one_hot = [0.0; OperatorKind::ALL.len()];
    one_hot[op.index()] = 1.0;
    ctx.extend_from_slice(&one_hot);
    ctx
}

pub fn run_search_traced(
    d: &Dataset,
    cfg: &SearchConfig,
) -> Result<(KnowledgeBase, Vec<EpisodeTrace>), SearchError> {
    cfg.validate()?;
    let k = d.n_features();
    if k == 0 {
        return Err(SearchError::Config("dataset has no features".into()));
    }
    let n_ops = OperatorKind::ALL.len();
    let enc = StateEncoder::new(cfg.seed);
    let mk = |actions, stream: u64| {
        Agent::new(
            STATE_DIM,
            &cfg.hidden,
            actions,
            cfg.buffer_capacity,
            cfg.learning_rate,
            cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(stream),
        )
    };
    let (mut head, mut oper, mut tail) = (mk(k, 1), mk(n_ops, 2), mk(k, 3));
    let mut rng = rng_for(cfg.seed, 0x5ea);
    let all_k = vec![true; k];
    let all_ops = vec![true; n_ops];

    let original = FeatureSetSequence::identity(k)?;
    let base = expr::materialize(&original, d)?;
    let perf_initial = eval::utility_score_with(&base, &cfg.step_eval, cfg.seed)?;

    let mut kb = KnowledgeBase::default();
    let mut traces = Vec::with_capacity(cfg.episodes);
    let mut global = 0usize;

    for episode in 0..cfg.episodes {
        let mut seq = original.clone();
        let mut slots: Vec<FeatureExpr> = (0..k).map(FeatureExpr::feature).collect();
        // Column of each slot's expression in the current set.
        let mut slot_col: Vec<usize> = (0..k).collect();
        let mut current = base.clone();
        let mut view = views(&enc, &current)?;
        let mut perf_prev = perf_initial;
        let mut trace = EpisodeTrace {
            perf_initial,
            perfs: Vec::new(),
            rewards: Vec::new(),
            target_fingerprints: Vec::new(),
        };

        for step in 0..cfg.steps_per_episode {
            let eps = cfg.epsilon(global);
            let s_head = view.pooled.clone();
            let h = select_action(&head.online, &s_head, eps, &all_k, &mut rng)?;
            let s_op = enc.with_context(&view.pooled, &op_context(&view, slot_col[h]));
            let o = OperatorKind::ALL[select_action(&oper.online, &s_op, eps, &all_ops, &mut rng)?];
            let tail_choice = match o.arity() {
                Arity::Unary => None,
                Arity::Binary => {
                    let s_tail =
                        enc.with_context(&view.pooled, &tail_context(&view, slot_col[h], o));
                    let t = select_action(&tail.online, &s_tail, eps, &all_k, &mut rng)?;
                    Some((t, s_tail))
                }
            };
            let new_expr = match &tail_choice {
                None => FeatureExpr::unary(o, &slots[h]),
                Some((t, _)) => FeatureExpr::binary(o, &slots[h], &slots[*t]),
            };

            seq.push(new_expr.clone());
            let (next, nonfinite) = expr::materialize_counted(&seq, d)?;
            if nonfinite > 0 {
                log::debug!("episode {episode} step {step}: {nonfinite} non-finite cells reset");
            }
            let col = seq.len() - 1;
            if new_expr.items().len() <= cfg.max_expr_len {
                slots[h] = new_expr;
                slot_col[h] = col;
            }
            let perf = eval::utility_score_with(&next, &cfg.step_eval, cfg.seed)?;
            let reward = compute_reward(perf, perf_prev, cfg.beta_ib);
            perf_prev = perf;
            current = next;
            let next_view = views(&enc, &current)?;
            let terminal = step + 1 == cfg.steps_per_episode;

            head.buffer.push(Transition {
                state: s_head,
                action: h,
                reward,
                next_state: next_view.pooled.clone(),
                terminal,
            });
            oper.buffer.push(Transition {
                state: s_op,
                action: o.index(),
                reward,
                next_state: enc.with_context(&next_view.pooled, &op_context(&next_view, slot_col[h])),
                terminal,
            });
            if let Some((t, s_tail)) = tail_choice {
                tail.buffer.push(Transition {
                    state: s_tail,
                    action: t,
                    reward,
                    next_state: enc.with_context(
                        &next_view.pooled,
                        &tail_context(&next_view, slot_col[h], o),
                    ),
                    terminal,
                });
            }

            for agent in [&mut head, &mut oper, &mut tail] {
                if agent.buffer.len() >= cfg.batch_size {
                    agent.learn(cfg.batch_size, cfg.gamma, &mut rng);
                }
            }
            global += 1;
            if global % cfg.target_sync_interval == 0 {
                head.sync_target();
                oper.sync_target();
                tail.sync_target();
            }

            view = next_view;
            trace.perfs.push(perf);
            trace.rewards.push(reward);
            trace.target_fingerprints.push((
                global,
                [
                    head.target.fingerprint(),
                    oper.target.fingerprint(),
                    tail.target.fingerprint(),
                ],
            ));
        }

        let report = eval::score_report(&current, &cfg.record_eval, cfg.seed)?;
        log::info!(
            "episode {episode}: {} features, utility {:.4}, privacy {:.4}",
            seq.len(),
            report.utility,
            report.privacy
        );
        kb.records.push(TransformationRecord {
            tokens: expr::serialize(&seq),
            utility: report.utility,
            privacy: report.privacy,
            dataset_id: d.dataset_id().to_string(),
            episode,
            step: cfg.steps_per_episode,
            timestamp: global as u64,
        });
        traces.push(trace);
    }
    Ok((kb, traces))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        assert!((compute_reward(0.8, 0.7, 0.1) - 0.09).abs() < 1e-12);
        assert_eq!(compute_reward(0.7, 0.7, 0.3), 0.0);
        assert!((compute_reward(0.6, 0.7, 0.0) + 0.1).abs() < 1e-12);
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = SearchConfig::default();
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!(cfg.epsilon(10_000) - 0.05 < 1e-12);
        assert!(cfg.epsilon(50) > cfg.epsilon(51));
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        let cfg = SearchConfig {
            beta_ib: 1.0,
            ..SearchConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(SearchError::Config(_))));
        let cfg = SearchConfig {
            gamma: -0.1,
            ..SearchConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn record_bounds_checked() {
        let mut r = TransformationRecord {
            tokens: "<SOS> f0 <SEP> <EOS>".into(),
            utility: 0.5,
            privacy: 0.5,
            dataset_id: "x".into(),
            episode: 0,
            step: 1,
            timestamp: 1,
        };
        assert!(r.check().is_ok());
        r.utility = 1.5;
        assert!(r.check().is_err());
        r.utility = 0.5;
        r.tokens = "<SOS> f0 + <SEP> <EOS>".into();
        assert!(r.check().is_err());
    }
}
