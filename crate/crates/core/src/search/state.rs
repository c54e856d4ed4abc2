//! Graph-based embedding of the current feature set into a fixed-length state.
//!
//! Columns become nodes of a correlation graph (edges where |Pearson| >= 0.3,
//! plus self-loops). Per-column statistics are propagated by one
//! symmetric-normalized graph convolution with a fixed seeded projection, then
//! mean-pooled. Pooling makes the state independent of column order and count.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};

use super::SearchError;
use crate::util::{mean, median, pearson, rng_for};

pub const STATE_DIM: usize = 64;
pub const EDGE_THRESHOLD: f64 = 0.3;
const NODE_FEATURES: usize = 6;

/// Fixed-length agent state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Correlation graph plus the convolved node embeddings.
#[derive(Debug, Clone)]
pub struct GraphEmbedding {
    pub abs_corr: Array2<f64>,
    pub adjacency: Array2<f64>,
    /// `columns x STATE_DIM`.
    pub nodes: Array2<f64>,
    pub pooled: StateVector,
}

/// Seeded, untrained projections used to embed feature sets.
#[derive(Debug, Clone)]
pub struct StateEncoder {
    seed: u64,
    gcn: Array2<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64, stream: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, stream);
    let normal = Normal::new(0.0, (1.0 / rows as f64).sqrt()).unwrap();
    Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
}

fn signed_log(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// `|Pearson|` between every pair of columns; constant columns correlate 0.
pub fn abs_correlation(matrix: ArrayView2<'_, f64>) -> Array2<f64> {
    let p = matrix.ncols();
    let cols: Vec<Vec<f64>> = (0..p).map(|j| matrix.column(j).to_vec()).collect();
    let mut c = Array2::zeros((p, p));
    for i in 0..p {
        c[[i, i]] = 1.0;
        for j in (i + 1)..p {
            let r = pearson(&cols[i], &cols[j]).abs();
            c[[i, j]] = r;
            c[[j, i]] = r;
        }
    }
    c
}

fn node_statistics(matrix: ArrayView2<'_, f64>, target: Option<&[f64]>) -> Array2<f64> {
    let p = matrix.ncols();
    let mut x = Array2::zeros((p, NODE_FEATURES));
    for j in 0..p {
        let col = matrix.column(j).to_vec();
        let m = mean(&col);
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64).sqrt();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let skew = if sd > 0.0 {
            (m - median(&col).unwrap_or(m)) / sd
        } else {
            0.0
        };
        let corr = target.map_or(0.0, |t| pearson(&col, t).abs());
        let stats = [signed_log(m), signed_log(sd), signed_log(lo), signed_log(hi), skew, corr];
        for (k, s) in stats.into_iter().enumerate() {
            x[[j, k]] = if s.is_finite() { s } else { 0.0 };
        }
    }
    x
}

impl StateEncoder {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            gcn: gaussian_matrix(NODE_FEATURES, STATE_DIM, seed, 0x6c),
        }
    }

    pub fn embed_graph(
        &self,
        matrix: ArrayView2<'_, f64>,
        target: Option<&[f64]>,
    ) -> Result<GraphEmbedding, SearchError> {
        if matrix.nrows() < 2 || matrix.ncols() == 0 {
            return Err(SearchError::Statistics(format!(
                "state needs >= 2 rows and >= 1 column, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let abs_corr = abs_correlation(matrix);
        let adjacency = abs_corr.mapv(|r| f64::from(u8::from(r >= EDGE_THRESHOLD)));
        let p = matrix.ncols();
        // Diagonal of |corr| is 1, so self-loops are already present.
        let deg: Array1<f64> = adjacency.sum_axis(Axis(1));
        let norm = Array2::from_shape_fn((p, p), |(i, j)| {
            adjacency[[i, j]] / (deg[i] * deg[j]).sqrt()
        });
        let x = node_statistics(matrix, target);
        let nodes = norm.dot(&x).dot(&self.gcn).mapv(|v| v.max(0.0));
        let pooled = nodes.mean_axis(Axis(0)).unwrap().to_vec();
        Ok(GraphEmbedding {
            abs_corr,
            adjacency,
            nodes,
            pooled: StateVector(pooled),
        })
    }

    /// Re-projects `[pooled; extra]` to `STATE_DIM`. The projection for a
    /// given `extra` length is fixed by the encoder seed.
    pub fn with_context(&self, pooled: &StateVector, extra: &[f64]) -> StateVector {
        if extra.is_empty() {
            return pooled.clone();
        }
        let input: Vec<f64> = pooled.0.iter().chain(extra).copied().collect();
        let proj = gaussian_matrix(input.len(), STATE_DIM, self.seed, 0x100 + extra.len() as u64);
        StateVector(Array1::from(input).dot(&proj).to_vec())
    }
}

/// Embeds `matrix` into a [`STATE_DIM`]-long state, optionally conditioned on
/// agent context (`extra`).
pub fn build_state(
    encoder: &StateEncoder,
    matrix: ArrayView2<'_, f64>,
    target: Option<&[f64]>,
    extra: &[f64],
) -> Result<StateVector, SearchError> {
    let g = encoder.embed_graph(matrix, target)?;
    Ok(encoder.with_context(&g.pooled, extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn fixed_length() {
        let enc = StateEncoder::new(1);
        let m = array![[1.0, 2.0, 0.5], [2.0, 1.0, 0.25], [3.0, 7.0, 9.0]];
        assert_eq!(build_state(&enc, m.view(), None, &[]).unwrap().0.len(), STATE_DIM);
        let extra = vec![0.5; 78];
        assert_eq!(build_state(&enc, m.view(), None, &extra).unwrap().0.len(), STATE_DIM);
        let wide = Array2::from_shape_fn((5, 11), |(i, j)| ((i + 1) * (j + 2)) as f64 % 7.0);
        assert_eq!(build_state(&enc, wide.view(), None, &[]).unwrap().0.len(), STATE_DIM);
    }

    #[test]
    fn column_permutation_invariant() {
        let enc = StateEncoder::new(2);
        let m = array![[1.0, 5.0, 0.5], [2.0, 3.0, 0.25], [3.0, 8.0, 9.0], [0.0, 1.0, 2.0]];
        let t = [0.0, 1.0, 1.0, 0.0];
        let perm = m.select(Axis(1), &[2, 0, 1]);
        let a = build_state(&enc, m.view(), Some(&t), &[]).unwrap();
        let b = build_state(&enc, perm.view(), Some(&t), &[]).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_adjacency() {
        // f1 = 2 f0 (r = 1); centered f2 is orthogonal to centered f0 and f1.
        let m = array![[1.0, 2.0, 1.0], [2.0, 4.0, -1.0], [3.0, 6.0, -1.0], [4.0, 8.0, 1.0]];
        let g = StateEncoder::new(3).embed_graph(m.view(), None).unwrap();
        assert!((g.abs_corr[[0, 1]] - 1.0).abs() < 1e-12);
        assert!(g.abs_corr[[0, 2]].abs() < 1e-12);
        assert_eq!(g.adjacency[[0, 1]], 1.0);
        assert_eq!(g.adjacency[[0, 2]], 0.0);
        assert_eq!(g.adjacency[[1, 2]], 0.0);
        assert_eq!(g.adjacency.diag().to_vec(), vec![1.0; 3]);
    }

    #[test]
    fn single_row_rejected() {
        let m = array![[1.0, 2.0]];
        assert!(matches!(
            build_state(&StateEncoder::new(0), m.view(), None, &[]),
            Err(SearchError::Statistics(_))
        ));
    }

    #[test]
    fn constant_column_has_no_edges() {
        let m = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let g = StateEncoder::new(0).embed_graph(m.view(), None).unwrap();
        assert_eq!(g.adjacency[[0, 1]], 0.0);
        assert!(g.pooled.0.iter().all(|v| v.is_finite()));
    }
}
