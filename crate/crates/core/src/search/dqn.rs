//! Value networks, replay memory and the temporal-difference update.

use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::{Hash, Hasher};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::state::StateVector;
use super::SearchError;
use crate::optim::Adam;
use crate::util::rng_for;

#[derive(Debug, Clone)]
struct Dense {
    /// `inputs x outputs`.
    w: Array2<f64>,
    b: Array1<f64>,
}

/// Fully connected network with ReLU hidden layers and a linear output of one
/// value per action.
#[derive(Debug, Clone)]
pub struct QNetwork {
    layers: Vec<Dense>,
}

/// Gradients laid out like [`QNetwork`]'s layers.
#[derive(Debug, Clone)]
pub struct QGradients {
    w: Vec<Array2<f64>>,
    b: Vec<Array1<f64>>,
}

impl QNetwork {
    /// He-uniform initialization from `seed`.
    pub fn new(inputs: usize, hidden: &[usize], actions: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, 0x0e7);
        let mut sizes = vec![inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(actions);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let u = Uniform::new(-bound, bound).unwrap();
                Dense {
                    w: Array2::from_shape_fn((w[0], w[1]), |_| u.sample(&mut rng)),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn n_actions(&self) -> usize {
        self.layers.last().map_or(0, |l| l.b.len())
    }

    pub fn n_inputs(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.nrows())
    }

    /// Forward pass over a batch of row states, keeping every layer's output.
    fn forward_cached(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = vec![x.clone()];
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = acts[k].dot(&l.w) + &l.b;
            if k < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).pop().unwrap()
    }

    pub fn q_values(&self, state: &StateVector) -> Vec<f64> {
        let x = Array2::from_shape_vec((1, state.0.len()), state.0.clone()).unwrap();
        self.forward_batch(&x).row(0).to_vec()
    }

    /// Backpropagates `d_out` (gradient w.r.t. the output layer).
    fn backward(&self, acts: &[Array2<f64>], d_out: Array2<f64>) -> QGradients {
        let n = self.layers.len();
        let mut gw = vec![Array2::zeros((0, 0)); n];
        let mut gb = vec![Array1::zeros(0); n];
        let mut delta = d_out;
        for k in (0..n).rev() {
            gw[k] = acts[k].t().dot(&delta);
            gb[k] = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut prev = delta.dot(&self.layers[k].w.t());
                // ReLU derivative of the hidden activation feeding layer k.
                prev.zip_mut_with(&acts[k], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
        }
        QGradients { w: gw, b: gb }
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.len(), l.b.len()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.w.as_slice_mut().unwrap() as &mut [f64],
                    l.b.as_slice_mut().unwrap(),
                ]
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice().unwrap(), l.b.as_slice().unwrap()])
            .collect()
    }

    /// Hash of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params() {
            p.iter().for_each(|v| v.to_bits().hash(&mut h));
        }
        h.finish()
    }
}

impl QGradients {
    pub fn flat(&self) -> Vec<&[f64]> {
        self.w
            .iter()
            .zip(&self.b)
            .flat_map(|(w, b)| [w.as_slice().unwrap(), b.as_slice().unwrap()])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: StateVector,
    pub action: usize,
    pub reward: f64,
    pub next_state: StateVector,
    pub terminal: bool,
}

/// Fixed-capacity ring of transitions; the oldest entry is evicted first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Uniform sample of `min(batch, len)` distinct transitions.
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<&Transition> {
        let k = batch.min(self.items.len());
        rand::seq::index::sample(rng, self.items.len(), k)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

/// Epsilon-greedy choice over the actions allowed by `mask`. Ties in the
/// greedy branch go to the lowest index.
pub fn epsilon_greedy<R: Rng>(
    q: &[f64],
    epsilon: f64,
    mask: &[bool],
    rng: &mut R,
) -> Result<usize, SearchError> {
    assert_eq!(q.len(), mask.len());
    let valid: Vec<usize> = (0..q.len()).filter(|&i| mask[i]).collect();
    if valid.is_empty() {
        return Err(SearchError::NoValidAction);
    }
    if rng.random::<f64>() < epsilon {
        return Ok(valid[rng.random_range(0..valid.len())]);
    }
    let mut best = valid[0];
    for &a in &valid[1..] {
        if q[a] > q[best] {
            best = a;
        }
    }
    Ok(best)
}

pub fn select_action<R: Rng>(
    qnet: &QNetwork,
    state: &StateVector,
    epsilon: f64,
    mask: &[bool],
    rng: &mut R,
) -> Result<usize, SearchError> {
    epsilon_greedy(&qnet.q_values(state), epsilon, mask, rng)
}

fn stack(states: impl Iterator<Item = Vec<f64>>, dim: usize) -> Array2<f64> {
    let flat: Vec<f64> = states.flatten().collect();
    let rows = flat.len() / dim.max(1);
    Array2::from_shape_vec((rows, dim), flat).unwrap()
}

fn td_targets(batch: &[&Transition], q_target: &QNetwork, gamma: f64) -> Vec<f64> {
    let next = stack(batch.iter().map(|t| t.next_state.0.clone()), q_target.n_inputs());
    let qn = q_target.forward_batch(&next);
    batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.terminal {
                t.reward
            } else {
                let best = qn.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                t.reward + gamma * best
            }
        })
        .collect()
}

/// Mean squared TD error; terminal transitions bootstrap nothing.
pub fn td_loss(batch: &[&Transition], qnet: &QNetwork, q_target: &QNetwork, gamma: f64) -> f64 {
    td_loss_and_grad(batch, qnet, q_target, gamma).0
}

/// TD loss and its gradient w.r.t. `qnet`'s parameters. `q_target` is held
/// constant.
pub fn td_loss_and_grad(
    batch: &[&Transition],
    qnet: &QNetwork,
    q_target: &QNetwork,
    gamma: f64,
) -> (f64, QGradients) {
    assert!(!batch.is_empty(), "empty TD batch");
    let y = td_targets(batch, q_target, gamma);
    let x = stack(batch.iter().map(|t| t.state.0.clone()), qnet.n_inputs());
    let acts = qnet.forward_cached(&x);
    let q = acts.last().unwrap();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut d_out = Array2::zeros(q.raw_dim());
    for (i, t) in batch.iter().enumerate() {
        let err = q[[i, t.action]] - y[i];
        loss += err * err;
        d_out[[i, t.action]] = 2.0 * err / n;
    }
    (loss / n, qnet.backward(&acts, d_out))
}

/// One value-learning agent: online and target network, replay and optimizer.
#[derive(Debug, Clone)]
pub struct Agent {
    pub online: QNetwork,
    pub target: QNetwork,
    pub buffer: ReplayBuffer,
    opt: Adam,
}

impl Agent {
    pub fn new(inputs: usize, hidden: &[usize], actions: usize, capacity: usize, lr: f64, seed: u64) -> Self {
        let online = QNetwork::new(inputs, hidden, actions, seed);
        let opt = Adam::new(lr, &online.param_sizes());
        Self {
            target: online.clone(),
            online,
            buffer: ReplayBuffer::new(capacity),
            opt,
        }
    }

    /// Samples a batch and takes one optimizer step; returns the batch loss.
    pub fn learn<R: Rng>(&mut self, batch_size: usize, gamma: f64, rng: &mut R) -> f64 {
        let batch = self.buffer.sample(batch_size, rng);
        let (loss, grads) = td_loss_and_grad(&batch, &self.online, &self.target, gamma);
        let flat = grads.flat();
        self.opt.step(self.online.params_mut().into_iter().zip(flat));
        loss
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(v: &[f64]) -> StateVector {
        StateVector(v.to_vec())
    }

    #[test]
    fn greedy_picks_argmax() {
        let mut rng = rng_for(0, 0);
        let a = epsilon_greedy(&[0.1, 0.9, 0.5], 0.0, &[true; 3], &mut rng).unwrap();
        assert_eq!(a, 1);
    }

    #[test]
    fn mask_forces_action() {
        let mut rng = rng_for(1, 0);
        for eps in [0.0, 0.3, 1.0] {
            for _ in 0..100 {
                let a = epsilon_greedy(&[5.0, 0.0, 9.0], eps, &[false, true, false], &mut rng).unwrap();
                assert_eq!(a, 1);
            }
        }
        assert!(matches!(
            epsilon_greedy(&[1.0, 2.0], 0.5, &[false, false], &mut rng),
            Err(SearchError::NoValidAction)
        ));
    }

    #[test]
    fn td_terminal_case() {
        // Single linear unit with weight 0.5 on a unit state: Q = 0.5.
        let mut net = QNetwork::new(1, &[], 1, 0);
        net.layers[0].w[[0, 0]] = 0.5;
        let t = Transition {
            state: sv(&[1.0]),
            action: 0,
            reward: 1.0,
            next_state: sv(&[1.0]),
            terminal: true,
        };
        assert!((td_loss(&[&t], &net, &net, 0.9) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn td_zero_when_q_equals_reward() {
        let mut net = QNetwork::new(1, &[], 2, 0);
        net.layers[0].w[[0, 0]] = 0.3;
        net.layers[0].w[[0, 1]] = -0.7;
        let batch: Vec<Transition> = [(1.0, 0), (2.0, 1), (-1.0, 0)]
            .iter()
            .map(|&(s, a)| {
                let q = net.q_values(&sv(&[s]))[a];
                Transition {
                    state: sv(&[s]),
                    action: a,
                    reward: q,
                    next_state: sv(&[s * 3.0]),
                    terminal: false,
                }
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        assert_eq!(td_loss(&refs, &net, &net, 0.0), 0.0);
    }

    #[test]
    fn replay_evicts_and_samples_distinct() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(Transition {
                state: sv(&[i as f64]),
                action: 0,
                reward: i as f64,
                next_state: sv(&[0.0]),
                terminal: false,
            });
        }
        assert_eq!(buf.len(), 3);
        let mut rng = rng_for(4, 0);
        let mut rewards: Vec<f64> = buf.sample(10, &mut rng).iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn learning_reduces_td_loss() {
        let mut agent = Agent::new(2, &[8], 2, 100, 0.01, 3);
        for i in 0..32 {
            let s = [i as f64 / 32.0, 1.0];
            agent.buffer.push(Transition {
                state: sv(&s),
                action: i % 2,
                reward: if i % 2 == 0 { 1.0 } else { -1.0 },
                next_state: sv(&s),
                terminal: true,
            });
        }
        let mut rng = rng_for(5, 0);
        let all: Vec<&Transition> = agent.buffer.items.iter().collect();
        let before = td_loss(&all, &agent.online, &agent.target, 0.9);
        for _ in 0..200 {
            agent.learn(32, 0.9, &mut rng);
        }
        let all: Vec<&Transition> = agent.buffer.items.iter().collect();
        let after = td_loss(&all, &agent.online, &agent.target, 0.9);
        assert!(after < 0.1 * before, "{before} -> {after}");
    }

    #[test]
    fn uniform_exploration_frequencies() {
        let mut rng = rng_for(11, 0);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[epsilon_greedy(&[0.0, 3.0, 1.0, 2.0], 1.0, &[true; 4], &mut rng).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.22..=0.28).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn td_gradient_matches_finite_differences() {
        // One input, one action, no hidden layer: parameters are (w, b).
        let mut net = QNetwork::new(1, &[], 1, 0);
        net.layers[0].w[[0, 0]] = 0.7;
        net.layers[0].b[0] = -0.2;
        let mut target = net.clone();
        target.layers[0].w[[0, 0]] = 0.4;
        let batch: Vec<Transition> = [(1.5, 0.3, false), (-0.5, 1.0, true), (2.0, -0.4, false)]
            .iter()
            .map(|&(s, r, terminal)| Transition {
                state: sv(&[s]),
                action: 0,
                reward: r,
                next_state: sv(&[s * 0.5 + 1.0]),
                terminal,
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let (_, grads) = td_loss_and_grad(&refs, &net, &target, 0.9);
        let analytic = [grads.w[0][[0, 0]], grads.b[0][0]];
        let h = 1e-6;
        for (k, g) in analytic.iter().enumerate() {
            let bump = |delta: f64| {
                let mut n = net.clone();
                if k == 0 {
                    n.layers[0].w[[0, 0]] += delta;
                } else {
                    n.layers[0].b[0] += delta;
                }
                td_loss(&refs, &n, &target, 0.9)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let rel = (g - numeric).abs() / numeric.abs().max(1e-12);
            assert!(rel < 1e-4, "param {k}: {g} vs {numeric}");
        }
    }

    #[test]
    fn hidden_layer_gradient_matches_finite_differences() {
        let net = QNetwork::new(3, &[5], 2, 9);
        let target = QNetwork::new(3, &[5], 2, 10);
        let batch: Vec<Transition> = (0..4)
            .map(|i| Transition {
                state: sv(&[i as f64 * 0.3 - 0.4, 1.0 - i as f64 * 0.2, 0.5]),
                action: i % 2,
                reward: i as f64 * 0.1,
                next_state: sv(&[0.1, -0.2 * i as f64, 0.3]),
                terminal: i == 3,
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let (_, grads) = td_loss_and_grad(&refs, &net, &target, 0.9);
        let flat: Vec<f64> = grads.flat().into_iter().flatten().copied().collect();
        let h = 1e-6;
        let mut idx = 0;
        for (buf, len) in net.param_sizes().into_iter().enumerate() {
            for i in 0..len {
                let bump = |delta: f64| {
                    let mut n = net.clone();
                    n.params_mut()[buf][i] += delta;
                    td_loss(&refs, &n, &target, 0.9)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                assert!(
                    (flat[idx] - numeric).abs() <= 1e-5 * (1.0 + numeric.abs()),
                    "buffer {buf} index {i}: {} vs {numeric}",
                    flat[idx]
                );
                idx += 1;
            }
        }
    }
}
