use delta::gen::model::{Model, ModelConfig};
use delta::gen::train::{batch_loss, batch_objective, train, train_model, BatchItem};
use delta::gen::{checkpoint, generate, GenerateOptions, Vocab};
use delta::search::{KnowledgeBase, TransformationRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

mod common;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        hidden_dim: 16,
        latent_dim: 8,
        lambda_dis: 1.0,
        lambda_causal: 1.0,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn record(tokens: &str, u: f64, p: f64, episode: usize) -> TransformationRecord {
    TransformationRecord {
        tokens: tokens.into(),
        utility: u,
        privacy: p,
        dataset_id: "toy".into(),
        episode,
        step: 1,
        timestamp: episode as u64,
    }
}

/// Random feature sets over `k` columns with loosely related scores.
fn toy_kb(n: usize, k: usize, seed: u64) -> KnowledgeBase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = ["+", "-", "*", "/"];
    let unary = ["log", "sqrt", "sin", "square"];
    let records = (0..n)
        .map(|i| {
            let mut s = String::from("<SOS>");
            for j in 0..k {
                s.push_str(&format!(" f{j} <SEP>"));
            }
            let extra = rng.random_range(1..=3);
            let mut uses_mul = false;
            for _ in 0..extra {
                let a = rng.random_range(0..k);
                if rng.random::<bool>() {
                    let b = rng.random_range(0..k);
                    let o = ops[rng.random_range(0..4)];
                    uses_mul |= o == "*";
                    s.push_str(&format!(" f{a} f{b} {o} <SEP>"));
                } else {
                    s.push_str(&format!(" f{a} {} <SEP>", unary[rng.random_range(0..4)]));
                }
            }
            s.push_str(" <EOS>");
            let u = 0.5 + if uses_mul { 0.3 } else { 0.0 } + rng.random::<f64>() * 0.1;
            let p = 0.2 + rng.random::<f64>() * 0.3;
            record(&s, u, p, i)
        })
        .collect();
    KnowledgeBase { records }
}

fn batch(model: &Model, kb: &KnowledgeBase, n: usize, seed: u64) -> Vec<BatchItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kb.records[..n]
        .iter()
        .map(|r| {
            let ids = model.vocab.encode(&r.tokens).unwrap();
            BatchItem {
                input: ids.clone(),
                target: ids,
                u: r.utility,
                p: r.privacy,
                eps: (0..model.config.latent_dim).map(|_| rng.sample(StandardNormal)).collect(),
            }
        })
        .collect()
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let kb = toy_kb(4, 2, 1);
    let model = Model::new(tiny_config(), Vocab::new(2)).unwrap();
    let items = batch(&model, &kb, 4, 2);
    let (_, grads) = batch_objective(&model, &items, 0.7).unwrap();
    // Five-point stencil: truncation O(h^4), rounding about eps * |loss| / h.
    let h = 1e-3;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut m = model.clone();
    for (pi, g) in grads.iter().enumerate() {
        for idx in ndarray::indices(g.raw_dim()) {
            let orig = m.params[pi][idx];
            let mut f = |delta: f64| {
                m.params[pi][idx] = orig + delta;
                batch_loss(&m, &items, 0.7).unwrap().total
            };
            let numeric = (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h);
            m.params[pi][idx] = orig;
            let analytic = g[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > 1e-4 {
                println!("param {pi} {idx:?}: analytic {analytic:.6e} numeric {numeric:.6e}");
            }
            worst = worst.max(rel);
            checked += 1;
        }
    }
    println!("checked {checked} parameters, worst relative error {worst:.3e}");
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn overfits_a_single_record() {
    let tokens = "<SOS> f0 <SEP> f1 <SEP> f0 f1 * <SEP> f1 log <SEP> <EOS>";
    let kb = KnowledgeBase {
        records: vec![record(tokens, 0.8, 0.3, 0)],
    };
    let cfg = ModelConfig {
        epochs: 150,
        lr: 1e-2,
        augment_prob: 0.0,
        kl_warmup_epochs: 0,
        ..tiny_config()
    };
    let (model, _) = train(&kb, &cfg).unwrap();
    let ids = model.vocab.encode(tokens).unwrap();
    let out = model.reconstruct(&ids).unwrap();
    assert_eq!(model.vocab.decode(&out).unwrap(), tokens);
}

#[test]
fn training_reduces_loss_and_logs_consistently() {
    let kb = toy_kb(50, 3, 3);
    let cfg = ModelConfig {
        epochs: 5,
        batch_size: 10,
        kl_warmup_epochs: 1,
        ..tiny_config()
    };
    let (_, log) = train(&kb, &cfg).unwrap();
    let first = log.epochs[0].loss.total;
    let last = log.epochs[4].loss.total;
    assert!(last < first, "{first} -> {last}");
    for b in &log.batches {
        assert!((b.recombine(cfg.lambda_dis, cfg.lambda_causal) - b.total).abs() < 1e-9);
        assert!(b.kl >= 0.0 && b.cov >= 0.0 && b.causal >= 0.0);
    }
}

#[test]
fn zero_weights_leave_only_the_vae_terms() {
    let kb = toy_kb(12, 2, 4);
    let cfg = ModelConfig {
        epochs: 2,
        batch_size: 4,
        lambda_dis: 0.0,
        lambda_causal: 0.0,
        kl_warmup_epochs: 1,
        ..tiny_config()
    };
    let (_, log) = train(&kb, &cfg).unwrap();
    for b in &log.batches {
        assert_eq!(b.total, b.recon + b.kl_weight * b.kl);
    }
}

#[test]
fn reparameterization_statistics() {
    let model = Model::new(tiny_config(), Vocab::new(2)).unwrap();
    let ids = model.vocab.encode("<SOS> f0 f1 + <SEP> <EOS>").unwrap();
    let (mean_code, _) = model.encode(&ids, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 10_000;
    let d = model.config.latent_dim;
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for _ in 0..n {
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let (code, _) = model.encode(&ids, Some(&eps)).unwrap();
        for j in 0..d {
            sum[j] += code.z[j];
            sq[j] += code.z[j] * code.z[j];
        }
    }
    for j in 0..d {
        let sigma = (0.5 * mean_code.logvar[j]).exp();
        let m = sum[j] / n as f64;
        let sd = (sq[j] / n as f64 - m * m).sqrt();
        let se_mean = sigma / (n as f64).sqrt();
        let se_sd = sigma / (2.0 * n as f64).sqrt();
        assert!((m - mean_code.mu[j]).abs() < 3.0 * se_mean, "mean {j}");
        assert!((sd - sigma).abs() < 3.0 * se_sd, "sd {j}");
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let kb = toy_kb(10, 2, 5);
    let cfg = ModelConfig {
        epochs: 2,
        batch_size: 4,
        ..tiny_config()
    };
    let (a, log_a) = train(&kb, &cfg).unwrap();
    let (b, log_b) = train(&kb, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&a, dir.path(), None).unwrap();
    let (loaded, _) = checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded, a);
    let mut resumed = loaded.clone();
    assert!(train_model(&mut resumed, &KnowledgeBase::default()).is_err());
}

#[test]
fn generation_is_deterministic_and_scores_candidates() {
    let d = common::xor_dataset(120, 6);
    let kb = toy_kb(12, 4, 6);
    let cfg = ModelConfig {
        epochs: 30,
        batch_size: 4,
        lr: 1e-2,
        ..tiny_config()
    };
    let (model, _) = train(&kb, &cfg).unwrap();
    let opts = GenerateOptions {
        n_candidates: 4,
        lambda: 0.0,
        eval: delta::eval::EvalConfig {
            n_trees: 10,
            ..Default::default()
        },
        seed: 1,
    };
    let g = generate(&model, &kb, &d, &opts).unwrap();
    let again = generate(&model, &kb, &d, &opts).unwrap();
    assert_eq!(g, again);
    let best = g.candidates.iter().map(|c| c.utility).fold(f64::MIN, f64::max);
    assert_eq!(g.candidates[g.selected].utility, best);
    assert_eq!(g.report.utility, best);
    for c in &g.candidates {
        assert_eq!(delta::expr::serialize(&delta::expr::parse(&c.tokens).unwrap()), c.tokens);
    }
}
