//! Recurrent encoder, split latent, four sigmoid heads and attentive decoder.

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::vocab::{Vocab, EOS_ID, PAD, SOS_ID};
use super::GenError;
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Split evenly into the utility half and the privacy half.
    pub latent_dim: usize,
    pub lambda_dis: f64,
    pub lambda_causal: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kl_warmup_epochs: usize,
    /// Chance that a training input is shuffled and masked.
    pub augment_prob: f64,
    pub mask_prob: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub max_decode_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            latent_dim: 32,
            lambda_dis: 1.0,
            lambda_causal: 0.5,
            lr: 1e-2,
            epochs: 100,
            batch_size: 4,
            kl_warmup_epochs: 20,
            augment_prob: 0.5,
            mask_prob: 0.1,
            grad_clip: 5.0,
            max_decode_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Argument(m.into()));
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("embed_dim and hidden_dim must be positive");
        }
        if self.latent_dim < 2 || self.latent_dim % 2 != 0 {
            return bad("latent_dim must be even and >= 2");
        }
        if !(self.lambda_dis >= 0.0) || !(self.lambda_causal >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.max_decode_len == 0 {
            return bad("batch_size and max_decode_len must be positive");
        }
        for (name, p) in [("augment_prob", self.augment_prob), ("mask_prob", self.mask_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GenError::Argument(format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0");
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.latent_dim / 2
    }

    /// KL weight during `epoch` (0-based): 0 at the start, 1 once warm.
    pub fn kl_weight(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.kl_warmup_epochs as f64).min(1.0)
        }
    }
}

/// Parameter slots. Order is the checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum P {
    Embed,
    EncWx,
    EncWh,
    EncB,
    MuW,
    MuB,
    LogvarW,
    LogvarB,
    UtilW,
    UtilB,
    PrivW,
    PrivB,
    AdvPrivW,
    AdvPrivB,
    AdvUtilW,
    AdvUtilB,
    InitW,
    InitB,
    AttW,
    AttU,
    AttV,
    DecWx,
    DecWh,
    DecB,
    OutW,
    OutB,
}

impl P {
    pub const COUNT: usize = 26;

    pub const NAMES: [&'static str; Self::COUNT] = [
        "embed", "enc_wx", "enc_wh", "enc_b", "mu_w", "mu_b", "logvar_w", "logvar_b", "util_w",
        "util_b", "priv_w", "priv_b", "adv_priv_w", "adv_priv_b", "adv_util_w", "adv_util_b",
        "init_w", "init_b", "att_w", "att_u", "att_v", "dec_wx", "dec_wh", "dec_b", "out_w",
        "out_b",
    ];

    /// Parameters of the two adversarial heads.
    pub const ADVERSARY: [P; 4] = [P::AdvPrivW, P::AdvPrivB, P::AdvUtilW, P::AdvUtilB];
}

/// Posterior parameters and one reparameterized draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
    pub z_u: Vec<f64>,
    pub z_p: Vec<f64>,
}

/// Sigmoid outputs of the four heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutputs {
    pub u_hat: f64,
    pub p_hat: f64,
    pub p_adv: f64,
    pub u_adv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Softmax over the vocabulary at each step.
    pub distributions: Vec<Vec<f64>>,
    /// Attention weights over encoder states at each step.
    pub attention: Vec<Vec<f64>>,
    /// Token fed back or predicted at each step, starting after `<SOS>`.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: Vec<Array2<f64>>,
}

/// Parameter leaves on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, p: P) -> Var {
        self.vars[p as usize]
    }
}

pub struct EncoderPass {
    pub states: Vec<Var>,
    pub pooled: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Logits of the four heads.
pub struct HeadLogits {
    pub u: Var,
    pub p: Var,
    pub p_adv: Var,
    pub u_adv: Var,
}

struct DecoderStep {
    h: Var,
    c: Var,
    logits: Var,
    attention: Var,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self, GenError> {
        config.validate()?;
        let shapes = Self::shapes(&config, vocab.len());
        let mut rng = rng_for(config.seed, 0x9e);
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let name = P::NAMES[i];
                if name.ends_with("_b") {
                    let mut b = Array2::zeros((r, c));
                    if name == "enc_b" || name == "dec_b" {
                        // Forget-gate bias of 1.
                        let h = config.hidden_dim;
                        b.slice_mut(ndarray::s![.., h..2 * h]).fill(1.0);
                    }
                    b
                } else {
                    let fan_in = if name == "embed" { c } else { r };
                    let n = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
                    Array2::from_shape_fn((r, c), |_| n.sample(&mut rng))
                }
            })
            .collect();
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn shapes(cfg: &ModelConfig, vocab_len: usize) -> Vec<(usize, usize)> {
        let (e, h, d, k) = (cfg.embed_dim, cfg.hidden_dim, cfg.latent_dim, cfg.half());
        vec![
            (vocab_len, e),
            (e, 4 * h),
            (h, 4 * h),
            (1, 4 * h),
            (h, d),
            (1, d),
            (h, d),
            (1, d),
            (k, 1),
            (1, 1),
            (k, 1),
            (1, 1),
            (k, 1),
            (1, 1),
            (k, 1),
            (1, 1),
            (k, h),
            (1, h),
            (h, h),
            (h, h),
            (h, 1),
            (e + h, 4 * h),
            (h, 4 * h),
            (1, 4 * h),
            (2 * h, vocab_len),
            (1, vocab_len),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Array2::len).sum()
    }

    pub fn param(&self, p: P) -> &Array2<f64> {
        &self.params[p as usize]
    }

    pub fn param_mut(&mut self, p: P) -> &mut Array2<f64> {
        &mut self.params[p as usize]
    }

    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(i, p))
                .collect(),
        }
    }

    fn embed(&self, tape: &mut Tape, id: usize) -> Var {
        tape.embed(P::Embed as usize, self.param(P::Embed), id)
    }

    fn lstm(&self, tape: &mut Tape, x: Var, h: Var, c: Var, w: [Var; 3]) -> (Var, Var) {
        let hd = self.config.hidden_dim;
        let xa = tape.matmul(x, w[0]);
        let ha = tape.matmul(h, w[1]);
        let gates = tape.add(xa, ha);
        let gates = tape.add(gates, w[2]);
        let i = tape.slice(gates, 0, hd);
        let i = tape.sigmoid(i);
        let f = tape.slice(gates, hd, 2 * hd);
        let f = tape.sigmoid(f);
        let g = tape.slice(gates, 2 * hd, 3 * hd);
        let g = tape.tanh(g);
        let o = tape.slice(gates, 3 * hd, 4 * hd);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c2 = tape.add(fc, ig);
        let tc = tape.tanh(c2);
        let h2 = tape.mul(o, tc);
        (h2, c2)
    }

    /// Encodes `ids`; `eps` is the standard-normal draw (zeros give `z == mu`).
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        b: &Bound,
        ids: &[usize],
        eps: &[f64],
    ) -> Result<EncoderPass, GenError> {
        self.vocab.check_ids(ids)?;
        if eps.len() != self.config.latent_dim {
            return Err(GenError::Argument(format!(
                "noise has length {}, expected {}",
                eps.len(),
                self.config.latent_dim
            )));
        }
        let hd = self.config.hidden_dim;
        let mut h = tape.constant(Array2::zeros((1, hd)));
        let mut c = tape.constant(Array2::zeros((1, hd)));
        let w = [b.get(P::EncWx), b.get(P::EncWh), b.get(P::EncB)];
        let mut states = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == PAD {
                continue;
            }
            let x = self.embed(tape, id);
            (h, c) = self.lstm(tape, x, h, c, w);
            states.push(h);
        }
        if states.is_empty() {
            return Err(GenError::Argument("sequence has no non-padding tokens".into()));
        }
        let stacked = tape.stack_rows(&states);
        let pooled = tape.mean_rows(stacked);
        let mu = tape.matmul(pooled, b.get(P::MuW));
        let mu = tape.add(mu, b.get(P::MuB));
        let lv = tape.matmul(pooled, b.get(P::LogvarW));
        let logvar = tape.add(lv, b.get(P::LogvarB));
        let half = tape.scale(logvar, 0.5);
        let sd = tape.exp(half);
        let noise = tape.constant_row(eps);
        let shift = tape.mul(sd, noise);
        let z = tape.add(mu, shift);
        Ok(EncoderPass {
            states,
            pooled,
            mu,
            logvar,
            z,
        })
    }

    /// Head logits from the utility half (`z_u`) and the privacy half (`z_p`).
    pub fn heads_on(&self, tape: &mut Tape, b: &Bound, z_u: Var, z_p: Var) -> HeadLogits {
        let mut affine = |z: Var, w: P, bias: P| {
            let a = tape.matmul(z, b.get(w));
            tape.add(a, b.get(bias))
        };
        HeadLogits {
            u: affine(z_u, P::UtilW, P::UtilB),
            p: affine(z_p, P::PrivW, P::PrivB),
            p_adv: affine(z_u, P::AdvPrivW, P::AdvPrivB),
            u_adv: affine(z_p, P::AdvUtilW, P::AdvUtilB),
        }
    }

    /// Splits a `1 x d` latent into its halves.
    pub fn split_on(&self, tape: &mut Tape, z: Var) -> (Var, Var) {
        let k = self.config.half();
        (tape.slice(z, 0, k), tape.slice(z, k, 2 * k))
    }

    /// Initial decoder state and the attention keys, shared by all steps.
    fn decoder_start(&self, tape: &mut Tape, b: &Bound, z_u: Var, states: &[Var]) -> (Var, Var, Var, Var) {
        let h0 = tape.matmul(z_u, b.get(P::InitW));
        let h0 = tape.add(h0, b.get(P::InitB));
        let c0 = tape.constant(Array2::zeros((1, self.config.hidden_dim)));
        let s = tape.stack_rows(states);
        let keys = tape.matmul(s, b.get(P::AttU));
        (h0, c0, s, keys)
    }

    fn decoder_step(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prev: usize,
        h: Var,
        c: Var,
        s: Var,
        keys: Var,
    ) -> DecoderStep {
        let q = tape.matmul(h, b.get(P::AttW));
        let e = tape.add_row(keys, q);
        let e = tape.tanh(e);
        let scores = tape.matmul(e, b.get(P::AttV));
        let scores = tape.transpose(scores);
        let attention = tape.softmax_row(scores);
        let ctx = tape.matmul(attention, s);
        let x = self.embed(tape, prev);
        let x = tape.concat(&[x, ctx]);
        let w = [b.get(P::DecWx), b.get(P::DecWh), b.get(P::DecB)];
        let (h2, c2) = self.lstm(tape, x, h, c, w);
        let out = tape.concat(&[h2, ctx]);
        let logits = tape.matmul(out, b.get(P::OutW));
        let logits = tape.add(logits, b.get(P::OutB));
        DecoderStep {
            h: h2,
            c: c2,
            logits,
            attention,
        }
    }

    /// Teacher-forced logits predicting `teacher[1..]` from `teacher[..n-1]`.
    pub fn decode_teacher_on(
        &self,
        tape: &mut Tape,
        b: &Bound,
        z_u: Var,
        states: &[Var],
        teacher: &[usize],
    ) -> Vec<Var> {
        let (mut h, mut c, s, keys) = self.decoder_start(tape, b, z_u, states);
        let mut logits = Vec::with_capacity(teacher.len().saturating_sub(1));
        for &prev in &teacher[..teacher.len().saturating_sub(1)] {
            let st = self.decoder_step(tape, b, prev, h, c, s, keys);
            (h, c) = (st.h, st.c);
            logits.push(st.logits);
        }
        logits
    }

    /// Encodes `ids` and returns the latent code and the encoder states.
    pub fn encode(&self, ids: &[usize], eps: Option<&[f64]>) -> Result<(LatentCode, Vec<Vec<f64>>), GenError> {
        let zeros = vec![0.0; self.config.latent_dim];
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let pass = self.encode_on(&mut tape, &b, ids, eps.unwrap_or(&zeros))?;
        let z = tape.row_values(pass.z);
        let k = self.config.half();
        let code = LatentCode {
            mu: tape.row_values(pass.mu),
            logvar: tape.row_values(pass.logvar),
            z_u: z[..k].to_vec(),
            z_p: z[k..].to_vec(),
            z,
        };
        let states = pass.states.iter().map(|&s| tape.row_values(s)).collect();
        Ok((code, states))
    }

    pub fn heads(&self, code: &LatentCode) -> HeadOutputs {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let zu = tape.constant_row(&code.z_u);
        let zp = tape.constant_row(&code.z_p);
        let l = self.heads_on(&mut tape, &b, zu, zp);
        let mut prob = |v: Var| {
            let s = tape.sigmoid(v);
            tape.scalar(s)
        };
        HeadOutputs {
            u_hat: prob(l.u),
            p_hat: prob(l.p),
            p_adv: prob(l.p_adv),
            u_adv: prob(l.u_adv),
        }
    }

    /// Decodes from the utility half only. With `teacher` the given tokens are
    /// fed back; otherwise the argmax is, until `<EOS>` or the length limit.
    pub fn decode(
        &self,
        z_u: &[f64],
        encoder_states: &[Vec<f64>],
        teacher: Option<&[usize]>,
    ) -> Result<DecodeOutput, GenError> {
        if z_u.len() != self.config.half() {
            return Err(GenError::Argument(format!(
                "z_u has length {}, expected {}",
                z_u.len(),
                self.config.half()
            )));
        }
        if encoder_states.is_empty() {
            return Err(GenError::Argument("no encoder states".into()));
        }
        if let Some(t) = teacher {
            self.vocab.check_ids(t)?;
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let zu = tape.constant_row(z_u);
        let states: Vec<Var> = encoder_states.iter().map(|s| tape.constant_row(s)).collect();
        let (mut h, mut c, s, keys) = self.decoder_start(&mut tape, &b, zu, &states);
        let mut out = DecodeOutput {
            distributions: Vec::new(),
            attention: Vec::new(),
            tokens: Vec::new(),
        };
        let mut prev = teacher.and_then(|t| t.first().copied()).unwrap_or(SOS_ID);
        let limit = match teacher {
            Some(t) => t.len().saturating_sub(1),
            None => self.config.max_decode_len,
        };
        for step in 0..limit {
            let st = self.decoder_step(&mut tape, &b, prev, h, c, s, keys);
            (h, c) = (st.h, st.c);
            let probs = tape.softmax_row(st.logits);
            let dist = tape.row_values(probs);
            out.attention.push(tape.row_values(st.attention));
            let next = match teacher {
                Some(t) => t[step + 1],
                None => argmax(&dist),
            };
            out.distributions.push(dist);
            out.tokens.push(next);
            if teacher.is_none() && next == EOS_ID {
                break;
            }
            prev = next;
        }
        Ok(out)
    }

    /// Greedy decoding from the MAP latent of `ids`; returns `<SOS> ... <EOS>`
    /// ids (without `<EOS>` if the length limit was hit).
    pub fn reconstruct(&self, ids: &[usize]) -> Result<Vec<usize>, GenError> {
        let (code, states) = self.encode(ids, None)?;
        let out = self.decode(&code.z_u, &states, None)?;
        let mut seq = vec![SOS_ID];
        seq.extend(out.tokens);
        Ok(seq)
    }
}

/// First index of the maximum.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}
