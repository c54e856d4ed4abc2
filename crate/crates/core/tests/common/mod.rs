#![allow(dead_code)]

use delta::{Dataset, TaskKind};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Four standard-normal columns; target is the sign of `f0 * f1` with 5%
/// label noise and the sensitive label is `f2 > 0`.
pub fn xor_dataset(rows: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let m = Array2::from_shape_fn((rows, 4), |_| normal.sample(&mut rng));
    let mut target = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut y = m[[i, 0]] * m[[i, 1]] > 0.0;
        if rand::Rng::random::<f64>(&mut rng) < 0.05 {
            y = !y;
        }
        target.push(f64::from(u8::from(y)));
    }
    let sensitive = (0..rows).map(|i| usize::from(m[[i, 2]] > 0.0)).collect();
    let names = (0..4).map(|j| format!("x{j}")).collect();
    Dataset::new(m, names, target, sensitive, TaskKind::Classification, "xor").unwrap()
}
