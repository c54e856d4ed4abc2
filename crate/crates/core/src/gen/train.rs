use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss::{bce_logit_on, causal_on, covariance_on, kl_on, LossBreakdown};
use super::model::{Model, ModelConfig, P};
use super::tape::Tape;
use super::vocab::{Vocab, EOS_ID, FIRST_ITEM, MASK, PAD, SEP_ID, SOS_ID};
use super::GenError;
use crate::optim::Adam;
use crate::search::KnowledgeBase;
use crate::util::rng_for;

/// One training example: possibly augmented encoder input, the sequence to
/// reconstruct, its two scores and the reparameterization noise.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub u: f64,
    pub p: f64,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Every batch of every epoch, in order.
    pub batches: Vec<LossBreakdown>,
}

/// Shuffles the `<SEP>`-terminated segments and masks expression tokens with
/// probability `mask_prob`. Framing tokens are never touched. Inputs that are
/// not framed as `<SOS> ... <EOS>` are only masked.
pub fn augment<R: Rng>(ids: &[usize], mask_prob: f64, rng: &mut R) -> Vec<usize> {
    let framed = ids.len() >= 2 && ids[0] == SOS_ID && ids[ids.len() - 1] == EOS_ID;
    let mut out = if framed {
        let inner = &ids[1..ids.len() - 1];
        let mut segments: Vec<&[usize]> = inner.split_inclusive(|&t| t == SEP_ID).collect();
        // A trailing piece without <SEP> stays last.
        let tail = match segments.last() {
            Some(s) if s.last() != Some(&SEP_ID) => segments.pop(),
            _ => None,
        };
        segments.shuffle(rng);
        let mut v = vec![SOS_ID];
        segments.iter().for_each(|s| v.extend_from_slice(s));
        if let Some(t) = tail {
            v.extend_from_slice(t);
        }
        v.push(EOS_ID);
        v
    } else {
        ids.to_vec()
    };
    if mask_prob > 0.0 {
        for t in out.iter_mut().filter(|t| **t >= FIRST_ITEM) {
            if rng.random::<f64>() < mask_prob {
                *t = MASK;
            }
        }
    }
    out
}

pub fn augment_seeded(ids: &[usize], mask_prob: f64, seed: u64) -> Vec<usize> {
    augment(ids, mask_prob, &mut rng_for(seed, 0xa6))
}

/// Loss terms of one batch and the gradient of `total` with respect to
/// every parameter.
pub fn batch_objective(
    model: &Model,
    items: &[BatchItem],
    kl_weight: f64,
) -> Result<(LossBreakdown, Vec<Array2<f64>>), GenError> {
    let (loss, grads) = objective(model, items, kl_weight, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Loss terms of one batch without the backward pass.
pub fn batch_loss(model: &Model, items: &[BatchItem], kl_weight: f64) -> Result<LossBreakdown, GenError> {
    objective(model, items, kl_weight, false).map(|(l, _)| l)
}

fn objective(
    model: &Model,
    items: &[BatchItem],
    kl_weight: f64,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Array2<f64>>>), GenError> {
    if items.is_empty() {
        return Err(GenError::Argument("empty batch".into()));
    }
    let cfg = &model.config;
    let mut t = Tape::new();
    let b = model.bind(&mut t);
    let n = items.len() as f64;
    let mut recon = Vec::with_capacity(items.len());
    let mut kls = Vec::with_capacity(items.len());
    let mut heads = Vec::with_capacity(items.len());
    let (mut zus, mut zps) = (Vec::new(), Vec::new());
    for it in items {
        model.vocab.check_ids(&it.target)?;
        let pass = model.encode_on(&mut t, &b, &it.input, &it.eps)?;
        let (zu, zp) = model.split_on(&mut t, pass.z);
        heads.push(model.heads_on(&mut t, &b, zu, zp));
        let logits = model.decode_teacher_on(&mut t, &b, zu, &pass.states, &it.target);
        let nll: Vec<_> = logits
            .iter()
            .zip(&it.target[1..])
            .filter(|(_, &y)| y != PAD)
            .map(|(&l, &y)| t.nll(l, y))
            .collect();
        let r = match nll.len() {
            0 => t.constant(Array2::zeros((1, 1))),
            _ => {
                let s = t.concat(&nll);
                t.sum(s)
            }
        };
        recon.push(r);
        kls.push(kl_on(&mut t, pass.mu, pass.logvar));
        zus.push(zu);
        zps.push(zp);
    }
    let mean = |t: &mut Tape, vs: Vec<_>| {
        let s = t.concat(&vs);
        let s = t.sum(s);
        t.scale(s, 1.0 / n)
    };
    let recon = mean(&mut t, recon);
    let kl = mean(&mut t, kls);
    let bces = |t: &mut Tape, pick: &dyn Fn(usize) -> (super::tape::Var, f64)| {
        (0..items.len())
            .map(|i| {
                let (logit, y) = pick(i);
                bce_logit_on(t, logit, y)
            })
            .collect::<Vec<_>>()
    };
    let task = bces(&mut t, &|i| (heads[i].u, items[i].u));
    let task = mean(&mut t, task);
    let sens = bces(&mut t, &|i| (heads[i].p, items[i].p));
    let sens = mean(&mut t, sens);
    let adv_s = bces(&mut t, &|i| (heads[i].p_adv, items[i].p));
    let adv_s = mean(&mut t, adv_s);
    let adv_s = t.scale(adv_s, -1.0);
    let adv_t = bces(&mut t, &|i| (heads[i].u_adv, items[i].u));
    let adv_t = mean(&mut t, adv_t);
    let adv_t = t.scale(adv_t, -1.0);
    let zu = t.stack_rows(&zus);
    let zp = t.stack_rows(&zps);
    // A lone sample has no covariance; only a single-record knowledge base
    // produces such a batch.
    let cov = if items.len() >= 2 {
        covariance_on(&mut t, zu, zp)?
    } else {
        t.constant(Array2::zeros((1, 1)))
    };
    let ps: Vec<f64> = items.iter().map(|i| i.p).collect();
    let causal = causal_on(&mut t, &ps, zu);

    let dis = t.add(task, sens);
    let dis = t.add(dis, cov);
    let dis = t.add(dis, adv_s);
    let dis = t.add(dis, adv_t);
    let wkl = t.scale(kl, kl_weight);
    let total = t.add(recon, wkl);
    let wdis = t.scale(dis, cfg.lambda_dis);
    let total = t.add(total, wdis);
    let wc = t.scale(causal, cfg.lambda_causal);
    let total = t.add(total, wc);

    let grads = with_grad.then(|| {
        let mut g = model.zero_grads();
        t.backward(total, &mut g);
        g
    });
    let breakdown = LossBreakdown {
        recon: t.scalar(recon),
        kl: t.scalar(kl),
        task: t.scalar(task),
        sens: t.scalar(sens),
        cov: t.scalar(cov),
        adv_sens: t.scalar(adv_s),
        adv_task: t.scalar(adv_t),
        causal: t.scalar(causal),
        kl_weight,
        total: t.scalar(total),
    };
    Ok((breakdown, grads))
}

/// Training set drawn from a knowledge base.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub ids: Vec<Vec<usize>>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
}

impl Corpus {
    pub fn from_kb(kb: &KnowledgeBase, vocab: &Vocab) -> Result<Self, GenError> {
        let mut c = Corpus {
            ids: Vec::with_capacity(kb.len()),
            u: Vec::with_capacity(kb.len()),
            p: Vec::with_capacity(kb.len()),
        };
        for r in &kb.records {
            for (name, v) in [("utility", r.utility), ("privacy", r.privacy)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(GenError::Argument(format!("record {name} {v} outside [0, 1]")));
                }
            }
            c.ids.push(vocab.encode(&r.tokens)?);
            c.u.push(r.utility);
            c.p.push(r.privacy);
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Number of feature columns referenced by a knowledge base.
pub fn kb_feature_count(kb: &KnowledgeBase) -> Result<usize, GenError> {
    let mut k = 0;
    for r in &kb.records {
        if let Some(m) = r.sequence()?.max_feature() {
            k = k.max(m + 1);
        }
    }
    Ok(k)
}

/// Splits `order` into batches of `size`; a trailing singleton joins the
/// previous batch so that batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn clip(grads: &mut [Array2<f64>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

/// Trains a fresh model whose vocabulary covers the knowledge base.
pub fn train(kb: &KnowledgeBase, cfg: &ModelConfig) -> Result<(Model, TrainingLog), GenError> {
    let vocab = Vocab::new(kb_feature_count(kb)?);
    let mut model = Model::new(cfg.clone(), vocab)?;
    let log = train_model(&mut model, kb)?;
    Ok((model, log))
}

/// Trains `model` in place. Adversary-head parameters descend on the
/// negated gradient, so they minimize their own cross-entropy while the
/// encoder is pushed to maximize it.
pub fn train_model(model: &mut Model, kb: &KnowledgeBase) -> Result<TrainingLog, GenError> {
    if kb.is_empty() {
        return Err(GenError::Argument("knowledge base is empty".into()));
    }
    let cfg = model.config.clone();
    cfg.validate()?;
    let corpus = Corpus::from_kb(kb, &model.vocab)?;
    let sizes: Vec<usize> = model.params.iter().map(Array2::len).collect();
    let mut opt = Adam::new(cfg.lr, &sizes);
    let mut rng = rng_for(cfg.seed, 0x7a);
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    for epoch in 0..cfg.epochs {
        let kl_weight = cfg.kl_weight(epoch);
        order.shuffle(&mut rng);
        let mut epoch_sum = LossBreakdown::default();
        for batch in batches(&order, cfg.batch_size) {
            let items: Vec<BatchItem> = batch
                .iter()
                .map(|&i| {
                    let input = if rng.random::<f64>() < cfg.augment_prob {
                        augment(&corpus.ids[i], cfg.mask_prob, &mut rng)
                    } else {
                        corpus.ids[i].clone()
                    };
                    let eps = (0..cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    BatchItem {
                        input,
                        target: corpus.ids[i].clone(),
                        u: corpus.u[i],
                        p: corpus.p[i],
                        eps,
                    }
                })
                .collect();
            let (loss, mut grads) = batch_objective(model, &items, kl_weight)?;
            if !loss.total.is_finite() {
                return Err(GenError::Argument(format!("loss diverged at epoch {epoch}")));
            }
            for p in P::ADVERSARY {
                grads[p as usize].mapv_inplace(|g| -g);
            }
            clip(&mut grads, cfg.grad_clip);
            opt.step(
                model
                    .params
                    .iter_mut()
                    .map(|p| p.as_slice_mut().unwrap())
                    .zip(grads.iter().map(|g| g.as_slice().unwrap())),
            );
            let w = batch.len() as f64 / corpus.len() as f64;
            add_scaled(&mut epoch_sum, &loss, w);
            log.batches.push(loss);
        }
        epoch_sum.kl_weight = kl_weight;
        log::debug!(
            "epoch {epoch}: total {:.4} recon {:.4} kl {:.4}",
            epoch_sum.total,
            epoch_sum.recon,
            epoch_sum.kl
        );
        log.epochs.push(EpochLog {
            epoch,
            loss: epoch_sum,
        });
    }
    Ok(log)
}

fn add_scaled(acc: &mut LossBreakdown, x: &LossBreakdown, w: f64) {
    acc.recon += w * x.recon;
    acc.kl += w * x.kl;
    acc.task += w * x.task;
    acc.sens += w * x.sens;
    acc.cov += w * x.cov;
    acc.adv_sens += w * x.adv_sens;
    acc.adv_task += w * x.adv_task;
    acc.causal += w * x.causal;
    acc.total += w * x.total;
}

/// Posterior means of every record, split into `(z_u, z_p)` row matrices.
pub fn latent_means(model: &Model, kb: &KnowledgeBase) -> Result<(Array2<f64>, Array2<f64>), GenError> {
    let k = model.config.half();
    let mut zu = Array2::zeros((kb.len(), k));
    let mut zp = Array2::zeros((kb.len(), k));
    for (i, r) in kb.records.iter().enumerate() {
        let (code, _) = model.encode(&model.vocab.encode(&r.tokens)?, None)?;
        for j in 0..k {
            zu[[i, j]] = code.mu[j];
            zp[[i, j]] = code.mu[k + j];
        }
    }
    Ok((zu, zp))
}
