//! Variational information bottleneck over fixed embeddings.
//!
//! The encoder is a pair of affine maps producing the mean and the
//! log-variance of a diagonal Gaussian; the decoder is an affine map followed
//! by softmax. Training minimises the mean over data of
//! `-log q(y | t) + beta * KL(N(mu, diag(exp(logvar))) || N(0, I))` with
//! `t = mu + exp(logvar / 2) * eps`, by plain SGD with hand-derived
//! gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::Block;
use crate::error::{ensure_finite, MolexError, Result};

/// Row-major affine map `y = W x + b` with `W` of shape `out x inp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affine {
    pub out: usize,
    pub inp: usize,
    pub weights: Block,
    pub bias: Block,
}

impl Affine {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Affine {
            out,
            inp,
            weights: Block(vec![0.0; out * inp]),
            bias: Block(vec![0.0; out]),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let w = &self.weights.0;
        (0..self.out)
            .map(|i| {
                let row = &w[i * self.inp..(i + 1) * self.inp];
                row.iter()
                    .zip(x)
                    .fold(self.bias.0[i], |acc, (a, b)| acc + a * b)
            })
            .collect()
    }

    /// `W^T g`.
    fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inp];
        for (i, gi) in g.iter().enumerate() {
            let row = &self.weights.0[i * self.inp..(i + 1) * self.inp];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gi;
            }
        }
        out
    }

    /// Adds `scale * g x^T` to the weights and `scale * g` to the bias.
    fn accumulate_outer(&mut self, g: &[f64], x: &[f64], scale: f64) {
        for (i, gi) in g.iter().enumerate() {
            let row = &mut self.weights.0[i * self.inp..(i + 1) * self.inp];
            for (w, xj) in row.iter_mut().zip(x) {
                *w += scale * gi * xj;
            }
            self.bias.0[i] += scale * gi;
        }
    }

    fn axpy(&mut self, alpha: f64, other: &Affine) {
        for (a, b) in self.weights.0.iter_mut().zip(&other.weights.0) {
            *a += alpha * b;
        }
        for (a, b) in self.bias.0.iter_mut().zip(&other.bias.0) {
            *a += alpha * b;
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.0.iter().chain(self.bias.0.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.0.iter_mut().chain(self.bias.0.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VibModel {
    pub schema: String,
    pub d: usize,
    pub k: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub beta: f64,
    pub enc_mu: Affine,
    pub enc_logvar: Affine,
    pub dec: Affine,
}

pub const VIB_SCHEMA: &str = "vib/1";

impl VibModel {
    pub fn zeros(d: usize, k: usize, classes: usize, beta: f64) -> Self {
        VibModel {
            schema: VIB_SCHEMA.to_string(),
            d,
            k,
            classes,
            beta,
            enc_mu: Affine::zeros(k, d),
            enc_logvar: Affine::zeros(k, d),
            dec: Affine::zeros(classes, k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != VIB_SCHEMA {
            return Err(MolexError::Format(format!(
                "unexpected schema {:?}",
                self.schema
            )));
        }
        let shapes = [
            (&self.enc_mu, self.k, self.d),
            (&self.enc_logvar, self.k, self.d),
            (&self.dec, self.classes, self.k),
        ];
        for (a, out, inp) in shapes {
            if a.out != out
                || a.inp != inp
                || a.weights.0.len() != out * inp
                || a.bias.0.len() != out
            {
                return Err(MolexError::Format(
                    "vib parameter block has wrong shape".into(),
                ));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(MolexError::Format(
                "beta must be finite and nonnegative".into(),
            ));
        }
        if !self.params().all(|v| v.is_finite()) {
            return Err(MolexError::Numeric("non-finite vib parameter".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.enc_mu
            .params()
            .chain(self.enc_logvar.params())
            .chain(self.dec.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.enc_mu
            .params_mut()
            .chain(self.enc_logvar.params_mut())
            .chain(self.dec.params_mut())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: VibModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Closed-form `KL(N(mu, diag(exp(logvar))) || N(0, I))`.
pub fn kl_to_standard_normal(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(MolexError::Argument("mu and logvar lengths differ".into()));
    }
    ensure_finite(mu, "mu")?;
    ensure_finite(logvar, "logvar")?;
    let s: f64 = mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum();
    Ok(0.5 * s)
}

pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() || mu.len() != eps.len() {
        return Err(MolexError::Argument(
            "reparameterize: length mismatch".into(),
        ));
    }
    let t: Vec<f64> = mu
        .iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    ensure_finite(&t, "latent sample")?;
    Ok(t)
}

/// One labelled example for the bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VibLoss {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
}

struct Forward {
    mu: Vec<f64>,
    logvar: Vec<f64>,
    t: Vec<f64>,
    probs: Vec<f64>,
    nll: f64,
    kl: f64,
}

fn softmax(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (exps.into_iter().map(|e| e / sum).collect(), lse)
}

fn check_batch(model: &VibModel, batch: &[Example], eps: &[Vec<f64>]) -> Result<()> {
    if batch.is_empty() {
        return Err(MolexError::Data("empty batch".into()));
    }
    if eps.len() != batch.len() {
        return Err(MolexError::Argument(
            "one noise vector per datum required".into(),
        ));
    }
    for (ex, e) in batch.iter().zip(eps) {
        if ex.x.len() != model.d || e.len() != model.k {
            return Err(MolexError::Argument("dimension mismatch in batch".into()));
        }
        if ex.y >= model.classes {
            return Err(MolexError::Argument(format!("label {} out of range", ex.y)));
        }
    }
    Ok(())
}

fn forward(model: &VibModel, ex: &Example, eps: &[f64]) -> Result<Forward> {
    let mu = model.enc_mu.apply(&ex.x);
    let logvar = model.enc_logvar.apply(&ex.x);
    let t = reparameterize(&mu, &logvar, eps)?;
    let logits = model.dec.apply(&t);
    let (probs, lse) = softmax(&logits);
    let nll = lse - logits[ex.y];
    let kl = kl_to_standard_normal(&mu, &logvar)?;
    Ok(Forward {
        mu,
        logvar,
        t,
        probs,
        nll,
        kl,
    })
}

pub fn vib_loss(model: &VibModel, batch: &[Example], eps: &[Vec<f64>]) -> Result<VibLoss> {
    check_batch(model, batch, eps)?;
    let mut nll = 0.0;
    let mut kl = 0.0;
    for (ex, e) in batch.iter().zip(eps) {
        let f = forward(model, ex, e)?;
        nll += f.nll;
        kl += f.kl;
    }
    let n = batch.len() as f64;
    let (nll, kl) = (nll / n, kl / n);
    let loss = nll + model.beta * kl;
    if !loss.is_finite() {
        return Err(MolexError::Numeric("non-finite vib loss".into()));
    }
    Ok(VibLoss { loss, nll, kl })
}

/// Gradient of [`vib_loss`] at fixed noise, laid out like the model.
pub fn vib_grad(model: &VibModel, batch: &[Example], eps: &[Vec<f64>]) -> Result<VibModel> {
    check_batch(model, batch, eps)?;
    let mut grad = VibModel::zeros(model.d, model.k, model.classes, model.beta);
    let scale = 1.0 / batch.len() as f64;
    for (ex, e) in batch.iter().zip(eps) {
        let f = forward(model, ex, e)?;
        let mut g_logits = f.probs;
        g_logits[ex.y] -= 1.0;
        grad.dec.accumulate_outer(&g_logits, &f.t, scale);
        let g_t = model.dec.apply_transpose(&g_logits);
        let g_mu: Vec<f64> = g_t
            .iter()
            .zip(&f.mu)
            .map(|(g, m)| g + model.beta * m)
            .collect();
        let g_lv: Vec<f64> = g_t
            .iter()
            .zip(&f.logvar)
            .zip(e)
            .map(|((g, lv), ep)| {
                g * ep * 0.5 * (0.5 * lv).exp() + model.beta * 0.5 * (lv.exp() - 1.0)
            })
            .collect();
        grad.enc_mu.accumulate_outer(&g_mu, &ex.x, scale);
        grad.enc_logvar.accumulate_outer(&g_lv, &ex.x, scale);
    }
    if !grad.params().all(|v| v.is_finite()) {
        return Err(MolexError::Numeric("non-finite vib gradient".into()));
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VibTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mc_samples: usize,
}

impl Default for VibTrainConfig {
    fn default() -> Self {
        VibTrainConfig {
            learning_rate: 0.05,
            epochs: 60,
            batch_size: 32,
            seed: 0,
            mc_samples: 1,
        }
    }
}

impl VibTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MolexError::Config(
                "vib learning_rate must be positive".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return Err(MolexError::Config(
                "vib epochs, batch_size and mc_samples must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VibFit {
    pub model: VibModel,
    /// Mean minibatch loss per epoch, measured before each update.
    pub loss_trace: Vec<f64>,
}

pub fn vib_train(
    data: &[Example],
    latent_dim: usize,
    config: &VibTrainConfig,
    beta: f64,
) -> Result<VibFit> {
    config.validate()?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(MolexError::Argument(
            "beta must be finite and nonnegative".into(),
        ));
    }
    if latent_dim == 0 {
        return Err(MolexError::Argument(
            "latent dimension must be positive".into(),
        ));
    }
    let first = data
        .first()
        .ok_or_else(|| MolexError::Data("empty training set".into()))?;
    let d = first.x.len();
    if d == 0 || data.iter().any(|e| e.x.len() != d) {
        return Err(MolexError::Argument("inconsistent input dimension".into()));
    }
    let classes = data.iter().map(|e| e.y).max().unwrap_or(0) + 1;
    let mut seen = vec![false; classes];
    data.iter().for_each(|e| seen[e.y] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(MolexError::Data(
            "vib training needs at least two classes".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = VibModel::zeros(d, latent_dim, classes, beta);
    let enc_init = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid sd");
    let dec_init = Normal::new(0.0, (1.0 / latent_dim as f64).sqrt()).expect("valid sd");
    model
        .enc_mu
        .weights
        .0
        .iter_mut()
        .for_each(|w| *w = enc_init.sample(&mut rng));
    model
        .enc_logvar
        .weights
        .0
        .iter_mut()
        .for_each(|w| *w = 0.1 * enc_init.sample(&mut rng));
    model
        .dec
        .weights
        .0
        .iter_mut()
        .for_each(|w| *w = dec_init.sample(&mut rng));

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len() * config.mc_samples);
            let mut eps = Vec::with_capacity(batch.capacity());
            for &i in chunk {
                for _ in 0..config.mc_samples {
                    batch.push(data[i].clone());
                    eps.push(
                        (0..latent_dim)
                            .map(|_| StandardNormal.sample(&mut rng))
                            .collect(),
                    );
                }
            }
            epoch_loss += vib_loss(&model, &batch, &eps)?.loss;
            batches += 1;
            let grad = vib_grad(&model, &batch, &eps)?;
            model.enc_mu.axpy(-config.learning_rate, &grad.enc_mu);
            model
                .enc_logvar
                .axpy(-config.learning_rate, &grad.enc_logvar);
            model.dec.axpy(-config.learning_rate, &grad.dec);
        }
        trace.push(epoch_loss / batches as f64);
    }
    model.validate()?;
    Ok(VibFit {
        model,
        loss_trace: trace,
    })
}

/// Deterministic mean embedding used downstream.
pub fn vib_transform(model: &VibModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.d {
        return Err(MolexError::Argument(format!(
            "expected {}-dimensional input, got {}",
            model.d,
            x.len()
        )));
    }
    Ok(model.enc_mu.apply(x))
}
