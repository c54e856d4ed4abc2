use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::vocab::{Vocab, EOS_ID, FIRST_ITEM, SEP_ID, SOS_ID};
use super::GenError;
use crate::data::Dataset;
use crate::eval::{self, EvalConfig, ScoreReport};
use crate::expr::{self, FeatureExpr, FeatureSetSequence, RpnItem};
use crate::search::KnowledgeBase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub n_candidates: usize,
    /// Weight of privacy in the selection objective `utility - lambda * privacy`.
    pub lambda: f64,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            n_candidates: 16,
            lambda: 1.0,
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: String,
    /// Knowledge-base record whose posterior mode seeded the decode.
    pub source_record: usize,
    pub dropped_segments: usize,
    pub utility: f64,
    pub privacy: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub sequence: FeatureSetSequence,
    pub report: ScoreReport,
    pub candidates: Vec<Candidate>,
    pub selected: usize,
}

/// Decoded ids as a feature set: text after `<SOS>` up to `<EOS>`, split at
/// `<SEP>`; segments that are not valid expressions over `n_features`
/// columns are dropped and repeated segments keep their first occurrence.
/// Returns the survivors and the number of invalid segments dropped.
pub fn repair(ids: &[usize], vocab: &Vocab, n_features: usize) -> (Option<FeatureSetSequence>, usize) {
    let start = usize::from(ids.first() == Some(&SOS_ID));
    let end = ids.iter().position(|&t| t == EOS_ID).unwrap_or(ids.len()).max(start);
    let mut kept = Vec::new();
    let mut seen = HashSet::new();
    let mut dropped = 0;
    for seg in ids[start..end].split(|&t| t == SEP_ID) {
        if seg.is_empty() {
            continue;
        }
        match segment_expr(seg, vocab, n_features) {
            Some(e) => {
                if seen.insert(seg) {
                    kept.push(e);
                }
            }
            None => dropped += 1,
        }
    }
    (FeatureSetSequence::new(kept).ok(), dropped)
}

fn segment_expr(seg: &[usize], vocab: &Vocab, n_features: usize) -> Option<FeatureExpr> {
    let items: Option<Vec<RpnItem>> = seg
        .iter()
        .map(|&id| {
            if id < FIRST_ITEM {
                return None;
            }
            match expr::parse_item(vocab.token(id)?, expr::IndexBase::Zero)? {
                RpnItem::Feature(f) if f >= n_features => None,
                item => Some(item),
            }
        })
        .collect();
    FeatureExpr::new(items?).ok()
}

/// Indices of the `n` highest-utility records, ties by position.
pub fn top_records(kb: &KnowledgeBase, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..kb.len()).collect();
    idx.sort_by(|&a, &b| kb.records[b].utility.total_cmp(&kb.records[a].utility));
    idx.truncate(n);
    idx
}

/// Greedy decodes from the utility half of each seed record's posterior
/// mode, repairs, scores, and keeps the best `utility - lambda * privacy`.
pub fn generate(
    model: &Model,
    kb: &KnowledgeBase,
    d: &Dataset,
    opts: &GenerateOptions,
) -> Result<Generated, GenError> {
    if kb.is_empty() {
        return Err(GenError::Argument("knowledge base is empty".into()));
    }
    if opts.n_candidates == 0 {
        return Err(GenError::Argument("n_candidates must be >= 1".into()));
    }
    let seeds = top_records(kb, opts.n_candidates);
    let decoded: Vec<Result<(usize, Vec<usize>), GenError>> = seeds
        .par_iter()
        .map(|&r| {
            let ids = model.vocab.encode(&kb.records[r].tokens)?;
            Ok((r, model.reconstruct(&ids)?))
        })
        .collect();

    let mut seen = HashSet::new();
    let mut pending = Vec::new();
    let mut diagnostics = Vec::new();
    for item in decoded {
        let (r, ids) = item?;
        match repair(&ids, &model.vocab, d.n_features()) {
            (Some(seq), dropped) => {
                let tokens = expr::serialize(&seq);
                if seen.insert(tokens.clone()) {
                    pending.push((r, seq, tokens, dropped));
                }
            }
            (None, dropped) => {
                let text = model.vocab.decode(&ids).unwrap_or_default();
                let head: String = text.chars().take(120).collect();
                let more = if head.len() < text.len() { " ..." } else { "" };
                diagnostics.push(format!(
                    "record {r}: no valid segment ({dropped} dropped) in \"{head}{more}\""
                ))
            }
        }
    }
    if pending.is_empty() {
        return Err(GenError::GenerationFailed {
            tried: seeds.len(),
            diagnostics,
        });
    }

    let scored: Vec<Result<ScoreReport, GenError>> = pending
        .par_iter()
        .map(|(_, seq, _, _)| {
            let m = expr::materialize(seq, d)?;
            Ok(eval::score_report(&m, &opts.eval, opts.seed)?)
        })
        .collect();
    let mut candidates = Vec::with_capacity(pending.len());
    let mut reports = Vec::with_capacity(pending.len());
    for ((r, _, tokens, dropped), rep) in pending.iter().zip(scored) {
        let rep = rep?;
        candidates.push(Candidate {
            tokens: tokens.clone(),
            source_record: *r,
            dropped_segments: *dropped,
            utility: rep.utility,
            privacy: rep.privacy,
            objective: rep.utility - opts.lambda * rep.privacy,
        });
        reports.push(rep);
    }
    let selected = select(&candidates);
    Ok(Generated {
        sequence: pending.swap_remove(selected).1,
        report: reports.swap_remove(selected),
        candidates,
        selected,
    })
}

/// First candidate with the highest objective.
pub fn select(candidates: &[Candidate]) -> usize {
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.objective > candidates[best].objective {
            best = i;
        }
    }
    best
}
