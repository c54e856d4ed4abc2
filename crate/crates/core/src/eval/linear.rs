//! Multinomial logistic regression on standardized inputs, fitted by
//! full-batch gradient descent. The second downstream learner, used as a
//! cross-model check next to the forest.

#[derive(Debug, Clone)]
pub struct LogisticClassifier {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `n_classes x (p + 1)`, bias last.
    weights: Vec<Vec<f64>>,
}

const ITERATIONS: usize = 300;
const LEARNING_RATE: f64 = 0.5;
const L2: f64 = 1e-4;

impl LogisticClassifier {
    pub fn fit(rows: &[Vec<f64>], y: &[usize], n_classes: usize) -> Self {
        assert_eq!(rows.len(), y.len());
        let n = rows.len() as f64;
        let p = rows.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; p];
        let mut scale = vec![1.0; p];
        for j in 0..p {
            mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 && var.is_finite() {
                scale[j] = var.sqrt();
            }
        }
        let xs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let mut x: Vec<f64> = (0..p).map(|j| (r[j] - mean[j]) / scale[j]).collect();
                x.push(1.0);
                x
            })
            .collect();
        let mut w = vec![vec![0.0; p + 1]; n_classes];
        let mut grad = vec![vec![0.0; p + 1]; n_classes];
        for _ in 0..ITERATIONS {
            grad.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
            for (x, &label) in xs.iter().zip(y) {
                let probs = softmax_scores(&w, x);
                for (c, pc) in probs.iter().enumerate() {
                    let err = pc - f64::from(u8::from(c == label));
                    for (g, xv) in grad[c].iter_mut().zip(x) {
                        *g += err * xv;
                    }
                }
            }
            for (wc, gc) in w.iter_mut().zip(&grad) {
                for (k, (wv, gv)) in wc.iter_mut().zip(gc).enumerate() {
                    let reg = if k < p { L2 * *wv } else { 0.0 };
                    *wv -= LEARNING_RATE * (gv / n + reg);
                }
            }
        }
        Self {
            mean,
            scale,
            weights: w,
        }
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let mut x: Vec<f64> = row
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        x.push(1.0);
        super::forest::argmax(&softmax_scores(&self.weights, &x))
    }
}

fn softmax_scores(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = w
        .iter()
        .map(|wc| wc.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
