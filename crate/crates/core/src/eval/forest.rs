//! Random forest (CART trees on bootstrap samples).
//!
//! Classification trees split on Gini impurity and consider `sqrt(p)` features
//! per node; regression trees split on squared error over all features. Trees
//! are grown until leaves are pure or hold a single sample.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::util::rng_for;

#[derive(Debug, Clone, Copy)]
pub struct ForestParams {
    pub n_trees: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(usize),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
    /// Leaf payloads: class distribution (classification) or `[mean]`.
    leaves: Vec<Vec<f64>>,
}

impl Tree {
    fn leaf_for(&self, row: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(l) => return &self.leaves[*l],
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Labels<'a> {
    Classes { y: &'a [usize], n_classes: usize },
    Values(&'a [f64]),
}

struct Builder<'a, R: Rng> {
    columns: &'a [Vec<f64>],
    canonical: &'a [usize],
    labels: Labels<'a>,
    max_features: usize,
    rng: R,
    tree: Tree,
    scratch: Vec<(f64, usize)>,
}

impl<R: Rng> Builder<'_, R> {
    fn leaf_payload(&self, idx: &[usize]) -> Vec<f64> {
        match &self.labels {
            Labels::Classes { y, n_classes } => {
                let mut dist = vec![0.0; *n_classes];
                for &i in idx {
                    dist[y[i]] += 1.0;
                }
                let n = idx.len() as f64;
                dist.iter_mut().for_each(|c| *c /= n);
                dist
            }
            Labels::Values(y) => vec![idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64],
        }
    }

    fn is_pure(&self, idx: &[usize]) -> bool {
        match &self.labels {
            Labels::Classes { y, .. } => idx.iter().all(|&i| y[i] == y[idx[0]]),
            Labels::Values(y) => idx.iter().all(|&i| y[i] == y[idx[0]]),
        }
    }

    fn push_leaf(&mut self, idx: &[usize]) -> usize {
        let payload = self.leaf_payload(idx);
        self.tree.leaves.push(payload);
        self.tree.nodes.push(Node::Leaf(self.tree.leaves.len() - 1));
        self.tree.nodes.len() - 1
    }

    /// Best threshold for one feature: `(impurity decrease proxy, threshold)`.
    fn best_split_on(&mut self, feature: usize, idx: &[usize]) -> Option<(f64, f64)> {
        let col = &self.columns[feature];
        self.scratch.clear();
        self.scratch.extend(idx.iter().map(|&i| (col[i], i)));
        self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = idx.len();
        if self.scratch[0].0 == self.scratch[n - 1].0 {
            return None;
        }
        let mut best: Option<(f64, f64)> = None;
        match &self.labels {
            Labels::Classes { y, n_classes } => {
                let mut left = vec![0.0f64; *n_classes];
                let mut right = vec![0.0f64; *n_classes];
                for &(_, i) in &self.scratch {
                    right[y[i]] += 1.0;
                }
                let mut left_sq = 0.0;
                let mut right_sq: f64 = right.iter().map(|c| c * c).sum();
                for k in 0..n - 1 {
                    let (v, i) = self.scratch[k];
                    let c = y[i];
                    left_sq += 2.0 * left[c] + 1.0;
                    left[c] += 1.0;
                    right_sq -= 2.0 * right[c] - 1.0;
                    right[c] -= 1.0;
                    let next = self.scratch[k + 1].0;
                    if next <= v {
                        continue;
                    }
                    let nl = (k + 1) as f64;
                    let nr = (n - k - 1) as f64;
                    // Maximizing this minimizes weighted Gini impurity.
                    let score = left_sq / nl + right_sq / nr;
                    if best.is_none_or(|(b, _)| score > b) {
                        best = Some((score, midpoint(v, next)));
                    }
                }
            }
            Labels::Values(y) => {
                let total: f64 = idx.iter().map(|&i| y[i]).sum();
                let mut left_sum = 0.0;
                for k in 0..n - 1 {
                    let (v, i) = self.scratch[k];
                    left_sum += y[i];
                    let next = self.scratch[k + 1].0;
                    if next <= v {
                        continue;
                    }
                    let nl = (k + 1) as f64;
                    let nr = (n - k - 1) as f64;
                    let right_sum = total - left_sum;
                    // Maximizing this minimizes the summed squared error.
                    let score = left_sum * left_sum / nl + right_sum * right_sum / nr;
                    if best.is_none_or(|(b, _)| score > b) {
                        best = Some((score, midpoint(v, next)));
                    }
                }
            }
        }
        best
    }

    fn build(&mut self, idx: &mut [usize]) -> usize {
        if idx.len() < 2 || self.is_pure(idx) {
            return self.push_leaf(idx);
        }
        let mut features = self.canonical.to_vec();
        features.shuffle(&mut self.rng);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut visited = 0;
        for &f in &features {
            if visited >= self.max_features && best.is_some() {
                break;
            }
            if let Some((score, thr)) = self.best_split_on(f, idx) {
                visited += 1;
                if best.is_none_or(|(b, _, _)| score > b) {
                    best = Some((score, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return self.push_leaf(idx);
        };
        let col = &self.columns[feature];
        let mut split = 0;
        for k in 0..idx.len() {
            if col[idx[k]] <= threshold {
                idx.swap(k, split);
                split += 1;
            }
        }
        if split == 0 || split == idx.len() {
            return self.push_leaf(idx);
        }
        let at = self.tree.nodes.len();
        self.tree.nodes.push(Node::Leaf(usize::MAX));
        let (l, r) = idx.split_at_mut(split);
        let left = self.build(l);
        let right = self.build(r);
        self.tree.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m >= b {
        a
    } else {
        m
    }
}

fn to_columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    (0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect()
}

/// Column order keyed by content, so the random feature draws (and thus the
/// fitted forest) do not depend on how the columns happen to be ordered.
fn canonical_order(columns: &[Vec<f64>]) -> Vec<usize> {
    let keys: Vec<u64> = columns
        .iter()
        .map(|c| {
            let mut h = DefaultHasher::new();
            c.iter().for_each(|v| v.to_bits().hash(&mut h));
            h.finish()
        })
        .collect();
    let mut order: Vec<usize> = (0..columns.len()).collect();
    order.sort_by_key(|&j| (keys[j], j));
    order
}

fn grow_forest(
    columns: &[Vec<f64>],
    n: usize,
    labels: Labels<'_>,
    max_features: usize,
    params: ForestParams,
) -> Vec<Tree> {
    let canonical = canonical_order(columns);
    (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(params.seed, 1 + t as u64);
            let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut b = Builder {
                columns,
                canonical: &canonical,
                labels,
                max_features,
                rng,
                tree: Tree {
                    nodes: Vec::new(),
                    leaves: Vec::new(),
                },
                scratch: Vec::with_capacity(n),
            };
            b.build(&mut idx);
            b.tree
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ForestClassifier {
    trees: Vec<Tree>,
    n_classes: usize,
}

impl ForestClassifier {
    /// `rows` are samples; `y` holds class codes below `n_classes`.
    pub fn fit(rows: &[Vec<f64>], y: &[usize], n_classes: usize, params: ForestParams) -> Self {
        assert_eq!(rows.len(), y.len());
        assert!(!rows.is_empty(), "cannot fit on zero rows");
        let columns = to_columns(rows);
        let p = columns.len();
        let max_features = ((p as f64).sqrt().floor() as usize).max(1);
        let trees = grow_forest(
            &columns,
            rows.len(),
            Labels::Classes { y, n_classes },
            max_features,
            params,
        );
        Self { trees, n_classes }
    }

    pub fn predict_proba(&self, row: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_classes];
        for t in &self.trees {
            for (a, p) in acc.iter_mut().zip(t.leaf_for(row)) {
                *a += p;
            }
        }
        let n = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        argmax(&self.predict_proba(row))
    }
}

#[derive(Debug, Clone)]
pub struct ForestRegressor {
    trees: Vec<Tree>,
}

impl ForestRegressor {
    pub fn fit(rows: &[Vec<f64>], y: &[f64], params: ForestParams) -> Self {
        assert_eq!(rows.len(), y.len());
        assert!(!rows.is_empty(), "cannot fit on zero rows");
        let columns = to_columns(rows);
        let p = columns.len();
        let trees = grow_forest(&columns, rows.len(), Labels::Values(y), p, params);
        Self { trees }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.leaf_for(row)[0]).sum::<f64>() / self.trees.len() as f64
    }
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn separable_classes_are_learned() {
        let mut rng = rng_for(1, 0);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let y: Vec<usize> = rows.iter().map(|r| usize::from(r[0] > 0.0)).collect();
        let f = ForestClassifier::fit(&rows, &y, 2, ForestParams { n_trees: 20, seed: 3 });
        assert_eq!(f.predict(&[0.7, 0.0]), 1);
        assert_eq!(f.predict(&[-0.7, 0.0]), 0);
        let p = f.predict_proba(&[0.5, 0.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn regression_tracks_signal() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..100).map(|i| 2.0 * i as f64).collect();
        let f = ForestRegressor::fit(&rows, &y, ForestParams { n_trees: 10, seed: 1 });
        assert!((f.predict(&[50.0]) - 100.0).abs() < 10.0);
    }

    #[test]
    fn constant_features_give_majority() {
        let rows = vec![vec![1.0]; 10];
        let y = vec![0, 0, 0, 0, 0, 0, 0, 1, 1, 1];
        let f = ForestClassifier::fit(&rows, &y, 2, ForestParams { n_trees: 15, seed: 9 });
        assert_eq!(f.predict(&[1.0]), 0);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = rng_for(5, 0);
        let rows: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let y: Vec<usize> = (0..80).map(|i| i % 3).collect();
        let a = ForestClassifier::fit(&rows, &y, 3, ForestParams { n_trees: 10, seed: 2 });
        let b = ForestClassifier::fit(&rows, &y, 3, ForestParams { n_trees: 10, seed: 2 });
        for r in &rows {
            assert_eq!(a.predict_proba(r), b.predict_proba(r));
        }
    }
}
