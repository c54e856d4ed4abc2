//! Objective terms, as plain functions and as tape expressions.
//!
//! Binary cross-entropy against soft targets is reported relative to the
//! target's own entropy, so a perfect prediction scores exactly 0. The
//! offset is constant in the parameters and leaves gradients unchanged.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::model::HeadOutputs;
use super::tape::{Tape, Var};
use super::vocab::PAD;
use super::GenError;

/// Below this centered `p'p` the causal term is defined as 0.
pub const CAUSAL_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub task: f64,
    pub sens: f64,
    pub cov: f64,
    pub adv_sens: f64,
    pub adv_task: f64,
    pub causal: f64,
    pub kl_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn disentanglement(&self) -> f64 {
        self.task + self.sens + self.cov + self.adv_sens + self.adv_task
    }

    /// `total` rebuilt from the parts.
    pub fn recombine(&self, lambda_dis: f64, lambda_causal: f64) -> f64 {
        self.recon
            + self.kl_weight * self.kl
            + lambda_dis * self.disentanglement()
            + lambda_causal * self.causal
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disentanglement {
    pub task: f64,
    pub sens: f64,
    pub cov: f64,
    pub adv_sens: f64,
    pub adv_task: f64,
}

/// KL of a diagonal Gaussian from the standard normal.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

/// Batch-mean summed token NLL, and batch-mean KL. Targets equal to PAD
/// are skipped.
pub fn vae_loss(
    distributions: &[Vec<Vec<f64>>],
    targets: &[Vec<usize>],
    mu: &[Vec<f64>],
    logvar: &[Vec<f64>],
) -> (f64, f64) {
    let n = distributions.len() as f64;
    let recon: f64 = distributions
        .iter()
        .zip(targets)
        .map(|(dist, tgt)| {
            dist.iter()
                .zip(tgt)
                .filter(|(_, &t)| t != PAD)
                .map(|(d, &t)| -d[t].ln())
                .sum::<f64>()
        })
        .sum();
    let kl: f64 = mu.iter().zip(logvar).map(|(m, l)| kl_divergence(m, l)).sum();
    (recon / n, kl / n)
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Entropy of a Bernoulli(`y`) target.
pub fn bernoulli_entropy(y: f64) -> f64 {
    -xlogy(y, y) - xlogy(1.0 - y, 1.0 - y)
}

/// Cross-entropy of prediction `q` against soft target `y`, minus the
/// target entropy.
pub fn bce(q: f64, y: f64) -> f64 {
    -xlogy(y, q) - xlogy(1.0 - y, 1.0 - q) - bernoulli_entropy(y)
}

fn centered(z: &Array2<f64>) -> Array2<f64> {
    let m = z.mean_axis(Axis(0)).unwrap();
    z - &m
}

/// Mean over latent coordinates of |population covariance| between matching
/// columns of `z_u` and `z_p`.
pub fn covariance_loss(z_u: &Array2<f64>, z_p: &Array2<f64>) -> Result<f64, GenError> {
    if z_u.nrows() < 2 {
        return Err(GenError::Covariance { batch: z_u.nrows() });
    }
    let prod = centered(z_u) * centered(z_p);
    let cov = prod.mean_axis(Axis(0)).unwrap();
    Ok(cov.mapv(f64::abs).mean().unwrap())
}

pub fn disentanglement_loss(
    outputs: &[HeadOutputs],
    u: &[f64],
    p: &[f64],
    z_u: &Array2<f64>,
    z_p: &Array2<f64>,
) -> Result<Disentanglement, GenError> {
    let n = outputs.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| (0..outputs.len()).map(f).sum::<f64>() / n;
    Ok(Disentanglement {
        task: mean(&|i| bce(outputs[i].u_hat, u[i])),
        sens: mean(&|i| bce(outputs[i].p_hat, p[i])),
        cov: covariance_loss(z_u, z_p)?,
        adv_sens: -mean(&|i| bce(outputs[i].p_adv, p[i])),
        adv_task: -mean(&|i| bce(outputs[i].u_adv, u[i])),
    })
}

/// ‖β‖₂ of the centered least-squares regression of `z_u` on `p`.
pub fn causal_loss(p: &[f64], z_u: &Array2<f64>) -> f64 {
    let pm = p.iter().sum::<f64>() / p.len() as f64;
    let pc: Vec<f64> = p.iter().map(|v| v - pm).collect();
    let ptp: f64 = pc.iter().map(|v| v * v).sum();
    if ptp < CAUSAL_GUARD {
        return 0.0;
    }
    let zc = centered(z_u);
    let beta: Vec<f64> = zc
        .columns()
        .into_iter()
        .map(|col| col.iter().zip(&pc).map(|(z, p)| z * p).sum::<f64>() / ptp)
        .collect();
    beta.iter().map(|b| b * b).sum::<f64>().sqrt()
}

pub fn kl_on(tape: &mut Tape, mu: Var, logvar: Var) -> Var {
    let d = tape.value(mu).len() as f64;
    let m2 = tape.square(mu);
    let ev = tape.exp(logvar);
    let a = tape.sub(logvar, m2);
    let a = tape.sub(a, ev);
    let s = tape.sum(a);
    let s = tape.offset(s, d);
    tape.scale(s, -0.5)
}

/// Relative BCE of `sigmoid(logit)` against `y`.
pub fn bce_logit_on(tape: &mut Tape, logit: Var, y: f64) -> Var {
    let neg = tape.scale(logit, -1.0);
    let sp_neg = tape.softplus(neg);
    let sp = tape.softplus(logit);
    let a = tape.scale(sp_neg, y);
    let b = tape.scale(sp, 1.0 - y);
    let s = tape.add(a, b);
    tape.offset(s, -bernoulli_entropy(y))
}

fn centered_on(tape: &mut Tape, z: Var) -> Var {
    let m = tape.mean_rows(z);
    let neg = tape.scale(m, -1.0);
    tape.add_row(z, neg)
}

pub fn covariance_on(tape: &mut Tape, z_u: Var, z_p: Var) -> Result<Var, GenError> {
    let rows = tape.value(z_u).nrows();
    if rows < 2 {
        return Err(GenError::Covariance { batch: rows });
    }
    let cu = centered_on(tape, z_u);
    let cp = centered_on(tape, z_p);
    let prod = tape.mul(cu, cp);
    let cov = tape.mean_rows(prod);
    let a = tape.abs(cov);
    let k = tape.value(a).len() as f64;
    let s = tape.sum(a);
    Ok(tape.scale(s, 1.0 / k))
}

pub fn causal_on(tape: &mut Tape, p: &[f64], z_u: Var) -> Var {
    let pm = p.iter().sum::<f64>() / p.len() as f64;
    let pc: Vec<f64> = p.iter().map(|v| v - pm).collect();
    let ptp: f64 = pc.iter().map(|v| v * v).sum();
    if ptp < CAUSAL_GUARD {
        return tape.constant(Array2::zeros((1, 1)));
    }
    let zc = centered_on(tape, z_u);
    let pt = tape.constant_row(&pc);
    let beta = tape.matmul(pt, zc);
    let beta = tape.scale(beta, 1.0 / ptp);
    let sq = tape.square(beta);
    let s = tape.sum(sq);
    tape.sqrt(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        assert!(kl_divergence(&[0.3, -2.0], &[1.5, -0.7]) >= 0.0);
    }

    #[test]
    fn one_hot_reconstruction_is_free() {
        let dist = vec![vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]];
        let (recon, kl) = vae_loss(&dist, &[vec![1, 2]], &[vec![0.0]], &[vec![0.0]]);
        assert_eq!(recon, 0.0);
        assert_eq!(kl, 0.0);
        // PAD targets do not count even when their probability is 0.
        let dist = vec![vec![vec![0.0, 1.0, 0.0]; 2]];
        assert_eq!(vae_loss(&dist, &[vec![1, PAD]], &[vec![0.0]], &[vec![0.0]]).0, 0.0);
    }

    #[test]
    fn bce_is_zero_on_exact_prediction() {
        for y in [0.0, 0.3, 0.71, 1.0] {
            assert!(bce(y, y).abs() < 1e-15);
        }
        assert!(bce(0.2, 0.7) > 0.0);
    }

    #[test]
    fn covariance_examples() {
        let zu = array![[1.0], [-1.0]];
        assert!((covariance_loss(&zu, &zu).unwrap() - 1.0).abs() < 1e-12);
        let zp = array![[4.0], [4.0]];
        assert_eq!(covariance_loss(&zu, &zp).unwrap(), 0.0);
        // Only matching coordinates are paired: (u0, p1) co-varying is ignored.
        let zu = array![[1.0, 3.0], [-1.0, 3.0]];
        let zp = array![[0.0, 1.0], [0.0, -1.0]];
        assert_eq!(covariance_loss(&zu, &zp).unwrap(), 0.0);
        assert!(matches!(
            covariance_loss(&array![[1.0]], &array![[1.0]]),
            Err(GenError::Covariance { batch: 1 })
        ));
    }

    #[test]
    fn causal_examples() {
        assert!((causal_loss(&[0.0, 1.0], &array![[0.0], [1.0]]) - 1.0).abs() < 1e-9);
        assert_eq!(causal_loss(&[0.4, 0.4, 0.4], &array![[0.0], [1.0], [5.0]]), 0.0);
        // Under independence E||beta|| ~ sqrt(k / (n var p)); about 0.055 here.
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut total = 0.0;
        for trial in 0..200 {
            let mut rng = rng_for(42, trial);
            let p: Vec<f64> = (0..512).map(|_| n.sample(&mut rng)).collect();
            let z = Array2::from_shape_fn((512, 2), |_| n.sample(&mut rng));
            total += causal_loss(&p, &z);
        }
        assert!(total / 200.0 < 0.1, "{}", total / 200.0);
    }

    #[test]
    fn tape_terms_match_closed_forms() {
        let mut t = Tape::new();
        let mu = t.constant_row(&[0.3, -1.2]);
        let lv = t.constant_row(&[0.5, -0.1]);
        let kl = kl_on(&mut t, mu, lv);
        assert!((t.scalar(kl) - kl_divergence(&[0.3, -1.2], &[0.5, -0.1])).abs() < 1e-12);

        let logit = t.constant_row(&[0.8]);
        let b = bce_logit_on(&mut t, logit, 0.35);
        let q = 1.0 / (1.0 + (-0.8f64).exp());
        assert!((t.scalar(b) - bce(q, 0.35)).abs() < 1e-12);

        let zu = array![[0.1, 2.0], [0.5, -1.0], [-0.3, 0.4]];
        let zp = array![[1.0, 0.0], [0.2, 0.3], [-0.7, 0.9]];
        let a = t.constant(zu.clone());
        let c = t.constant(zp.clone());
        let cov = covariance_on(&mut t, a, c).unwrap();
        assert!((t.scalar(cov) - covariance_loss(&zu, &zp).unwrap()).abs() < 1e-12);

        let p = [0.2, 0.9, 0.4];
        let cz = causal_on(&mut t, &p, a);
        assert!((t.scalar(cz) - causal_loss(&p, &zu)).abs() < 1e-12);
    }

    #[test]
    fn disentanglement_perfect_task() {
        let outs = vec![
            HeadOutputs {
                u_hat: 0.7,
                p_hat: 0.5,
                p_adv: 0.5,
                u_adv: 0.5,
            },
            HeadOutputs {
                u_hat: 0.6,
                p_hat: 0.5,
                p_adv: 0.5,
                u_adv: 0.5,
            },
        ];
        let zu = array![[1.0], [-1.0]];
        let zp = array![[0.0], [0.0]];
        let d = disentanglement_loss(&outs, &[0.7, 0.6], &[0.3, 0.4], &zu, &zp).unwrap();
        assert!(d.task.abs() < 1e-15);
        assert_eq!(d.cov, 0.0);
        assert!(d.sens > 0.0 && d.adv_sens < 0.0 && d.adv_task < 0.0);
    }
}
