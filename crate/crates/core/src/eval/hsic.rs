//! Biased empirical Hilbert-Schmidt independence criterion with Gaussian
//! kernels and median-heuristic bandwidths.

use ndarray::{Array2, ArrayView2};

use super::EvalError;
use crate::util::median;

fn sq_distances(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[[i, j]] = s;
            d[[j, i]] = s;
        }
    }
    d
}

/// Median of the off-diagonal pairwise distances, or 1.0 when that is zero.
pub fn median_bandwidth(sq: &Array2<f64>) -> f64 {
    let n = sq.nrows();
    let dists: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| sq[[i, j]].sqrt())
        .collect();
    match median(&dists) {
        Some(m) if m > 0.0 && m.is_finite() => m,
        _ => 1.0,
    }
}

/// Gaussian Gram matrix `exp(-|x_i - x_j|^2 / (2 sigma^2))`, sigma by the
/// median heuristic.
pub fn gaussian_gram(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let sq = sq_distances(x);
    let sigma = median_bandwidth(&sq);
    sq.mapv(|d| (-d / (2.0 * sigma * sigma)).exp())
}

fn double_center(k: &Array2<f64>) -> Array2<f64> {
    let n = k.nrows() as f64;
    let row_means: Vec<f64> = k.rows().into_iter().map(|r| r.sum() / n).collect();
    let grand = row_means.iter().sum::<f64>() / n;
    let mut out = k.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        // K is symmetric so column means equal row means.
        *v += grand - row_means[i] - row_means[j];
    }
    out
}

/// `trace(K H L H) / (n - 1)^2` for row-aligned batches `a` and `b`.
pub fn hsic(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64, EvalError> {
    let n = a.nrows();
    if n != b.nrows() {
        return Err(EvalError::Argument(format!(
            "batch sizes differ: {n} vs {}",
            b.nrows()
        )));
    }
    if n < 4 {
        return Err(EvalError::Argument(format!("HSIC needs n >= 4, got {n}")));
    }
    let k = gaussian_gram(a);
    let l = gaussian_gram(b);
    // trace(K H L H) = sum_ij (HKH)_ij L_ij since H is symmetric idempotent.
    let hkh = double_center(&k);
    let s: f64 = hkh.iter().zip(l.iter()).map(|(x, y)| x * y).sum();
    Ok((s / ((n - 1) as f64).powi(2)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_for(seed, 0);
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
    }

    /// Direct `trace(K H L H)` with explicit matrix products.
    fn hsic_by_matrices(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let n = a.nrows();
        let k = gaussian_gram(a.view());
        let l = gaussian_gram(b.view());
        let h = Array2::from_shape_fn((n, n), |(i, j)| {
            f64::from(u8::from(i == j)) - 1.0 / n as f64
        });
        let m = k.dot(&h).dot(&l).dot(&h);
        m.diag().sum() / ((n - 1) as f64).powi(2)
    }

    #[test]
    fn matches_matrix_form() {
        let a = normal(20, 3, 1);
        let b = normal(20, 2, 2);
        let fast = hsic(a.view(), b.view()).unwrap();
        assert!((fast - hsic_by_matrices(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_are_dependent() {
        let a = normal(64, 4, 3);
        assert!(hsic(a.view(), a.view()).unwrap() > 0.01);
    }

    #[test]
    fn symmetric_and_permutation_invariant() {
        let a = normal(30, 2, 4);
        let b = normal(30, 3, 5);
        let ab = hsic(a.view(), b.view()).unwrap();
        let ba = hsic(b.view(), a.view()).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let perm: Vec<usize> = (0..30).rev().collect();
        let pa = a.select(ndarray::Axis(0), &perm);
        let pb = b.select(ndarray::Axis(0), &perm);
        assert!((hsic(pa.view(), pb.view()).unwrap() - ab).abs() < 1e-12);
    }

    #[test]
    fn errors_and_degenerate_bandwidth() {
        let a = normal(10, 2, 6);
        let b = normal(9, 2, 7);
        assert!(matches!(hsic(a.view(), b.view()), Err(EvalError::Argument(_))));
        let small = normal(3, 2, 8);
        assert!(matches!(hsic(small.view(), small.view()), Err(EvalError::Argument(_))));
        let zeros = Array2::<f64>::zeros((8, 2));
        let v = hsic(zeros.view(), a.slice(ndarray::s![..8, ..]).view()).unwrap();
        assert!(v.abs() < 1e-12);
    }
}
