//! Preference training of the binder on cached traces.
//!
//! Only `W_T` and `W_I` are trained; the prediction head `H` and every hidden
//! state stay frozen. For one quadruple (image, prompt, chosen `C`, rejected
//! `R`) the loss is
//!
//! ```text
//! m = (log π_θ(C) − log π_ref(C)) − (log π_θ(R) − log π_ref(R))
//! ℓ = −log σ(β·m) + λ · (−log π_θ(C) / |C|)
//! ```
//!
//! where `log π(Y) = Σ_i log softmax(H · (W_T T_i + W_I ī))[y_i]` under
//! teacher forcing. The second term is a length-normalized likelihood
//! anchor on the chosen answer; `λ = 0` gives plain DPO. The batch loss is
//! the mean of `ℓ` over quadruples.
//!
//! Because `H` is linear, the gradient of `log π(Y)` is a sum of outer
//! products: with `g_i = Hᵀ(e_{y_i} − p_i)`,
//!
//! ```text
//! ∂/∂W_T = Σ_i g_i T_iᵀ        ∂/∂W_I = (Σ_i g_i) īᵀ
//! ```

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binder::{BinderError, ReCoParams};
use crate::cache::{self, CacheError, Segment, TraceRecord};
use crate::linalg::{log_sum_exp, softmax, tree_sum, Matrix};
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum DpoError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("quad {id}: {reason}")]
    InvalidQuad { id: String, reason: String },
    #[error("finite-difference step must be positive")]
    InvalidStep,
    #[error(transparent)]
    Binder(#[from] BinderError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

pub type Result<T> = std::result::Result<T, DpoError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Training hyperparameters. Defaults: β = 0.8, λ = 0.2, lr = 5e-3,
/// 10 epochs, batches of 128 quadruples, plain gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 0.8, lambda: 0.2, lr: 5e-3, epochs: 10, batch_size: 128, optimizer: Optimizer::GradientDescent, seed: 0 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DpoError::InvalidConfig(m.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be > 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be ≥ 0");
        }
        // lr = 0 is allowed as a no-op run.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be ≥ 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        Ok(())
    }
}

/// A teacher-forced answer in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSegment {
    pub tokens: Vec<u32>,
    pub states: Vec<Vec<f64>>,
}

impl From<&Segment> for DenseSegment {
    fn from(s: &Segment) -> Self {
        Self { tokens: s.token_ids.clone(), states: s.hidden_states.iter().map(|r| cache::to_f64(r)).collect() }
    }
}

/// One (image, prompt, chosen, rejected) training example, upcast to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceQuad {
    pub id: String,
    pub image_bundle: Vec<f64>,
    pub chosen: DenseSegment,
    pub rejected: DenseSegment,
}

impl PreferenceQuad {
    pub fn new(id: impl Into<String>, image_bundle: Vec<f64>, chosen: DenseSegment, rejected: DenseSegment) -> Result<Self> {
        let id = id.into();
        let d = image_bundle.len();
        for (name, seg) in [("chosen", &chosen), ("rejected", &rejected)] {
            if seg.tokens.is_empty() {
                return Err(DpoError::InvalidQuad { id, reason: format!("{name} answer is empty") });
            }
            if seg.tokens.len() != seg.states.len() {
                return Err(DpoError::InvalidQuad { id, reason: format!("{name} tokens and states differ in length") });
            }
            if let Some(r) = seg.states.iter().find(|r| r.len() != d) {
                return Err(DpoError::DimensionMismatch { expected: d, found: r.len() });
            }
        }
        Ok(Self { id, image_bundle, chosen, rejected })
    }

    /// Upcast a cached record; the image bundle is the plain sum of its image
    /// embeddings, accumulated in `f64`.
    pub fn from_record(rec: &TraceRecord) -> Result<Self> {
        let mut bundle = vec![0.0; rec.d];
        for row in &rec.image_embeddings {
            for (b, &x) in bundle.iter_mut().zip(row) {
                *b += f64::from(x);
            }
        }
        Self::new(rec.example_id.clone(), bundle, (&rec.chosen).into(), (&rec.rejected).into())
    }

    pub fn dim(&self) -> usize {
        self.image_bundle.len()
    }
}

/// Gradient with respect to both binder matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w_text: Matrix,
    pub w_image: Matrix,
}

impl Gradient {
    pub fn zeros(d: usize) -> Self {
        Self { w_text: Matrix::zeros(d, d), w_image: Matrix::zeros(d, d) }
    }

    fn add(&self, other: &Gradient) -> Gradient {
        let mut out = self.clone();
        out.w_text.axpy(1.0, &other.w_text);
        out.w_image.axpy(1.0, &other.w_image);
        out
    }

    fn scaled(mut self, alpha: f64) -> Self {
        self.w_text.scale(alpha);
        self.w_image.scale(alpha);
        self
    }

    pub fn max_abs(&self) -> f64 {
        self.w_text.max_abs().max(self.w_image.max_abs())
    }

    /// `‖self − other‖_∞ / (‖other‖_∞ + eps)`.
    pub fn relative_error(&self, other: &Gradient, eps: f64) -> f64 {
        let diff = |a: &Matrix, b: &Matrix| a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let num = diff(&self.w_text, &other.w_text).max(diff(&self.w_image, &other.w_image));
        num / (other.max_abs() + eps)
    }
}

fn check_head(head: &Matrix, params: &ReCoParams, image_bundle: &[f64]) -> Result<()> {
    let d = params.dim();
    if head.cols() != d {
        return Err(DpoError::DimensionMismatch { expected: d, found: head.cols() });
    }
    if image_bundle.len() != d {
        return Err(DpoError::DimensionMismatch { expected: d, found: image_bundle.len() });
    }
    Ok(())
}

/// Teacher-forced log-likelihood of `segment` under the binder.
pub fn seq_logprob(head: &Matrix, reco: &ReCoParams, segment: &DenseSegment, image_bundle: &[f64]) -> Result<f64> {
    check_head(head, reco, image_bundle)?;
    let mut total = 0.0;
    for (state, &tok) in segment.states.iter().zip(&segment.tokens) {
        let logits = step_logits(head, reco, state, image_bundle, tok)?;
        total += logits[tok as usize] - log_sum_exp(&logits);
    }
    Ok(total)
}

fn step_logits(head: &Matrix, reco: &ReCoParams, state: &[f64], image_bundle: &[f64], tok: u32) -> Result<Vec<f64>> {
    if tok as usize >= head.rows() {
        return Err(DpoError::TokenOutOfRange { token: tok, vocab: head.rows() });
    }
    Ok(head.matvec(&reco.compose(state, image_bundle)?))
}

/// Log-likelihood together with its gradient.
fn seq_logprob_grad(
    head: &Matrix,
    reco: &ReCoParams,
    segment: &DenseSegment,
    image_bundle: &[f64],
) -> Result<(f64, Gradient)> {
    check_head(head, reco, image_bundle)?;
    let d = reco.dim();
    let mut total = 0.0;
    let mut grad = Gradient::zeros(d);
    let mut g_sum = vec![0.0; d];
    for (state, &tok) in segment.states.iter().zip(&segment.tokens) {
        let logits = step_logits(head, reco, state, image_bundle, tok)?;
        total += logits[tok as usize] - log_sum_exp(&logits);
        let mut resid = softmax(&logits);
        resid.iter_mut().for_each(|p| *p = -*p);
        resid[tok as usize] += 1.0;
        let g = head.matvec_t(&resid);
        grad.w_text.add_outer(1.0, &g, state);
        for (s, x) in g_sum.iter_mut().zip(&g) {
            *s += x;
        }
    }
    grad.w_image.add_outer(1.0, &g_sum, image_bundle);
    Ok((total, grad))
}

/// `−log σ(x)`, stable.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reference log-likelihoods `(chosen, rejected)` of one quadruple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefLogProbs {
    pub chosen: f64,
    pub rejected: f64,
}

pub fn reference_logprobs(head: &Matrix, reference: &ReCoParams, quads: &[PreferenceQuad]) -> Result<Vec<RefLogProbs>> {
    quads
        .par_iter()
        .map(|q| {
            Ok(RefLogProbs {
                chosen: seq_logprob(head, reference, &q.chosen, &q.image_bundle)?,
                rejected: seq_logprob(head, reference, &q.rejected, &q.image_bundle)?,
            })
        })
        .collect()
}

fn quad_loss(head: &Matrix, policy: &ReCoParams, q: &PreferenceQuad, r: RefLogProbs, cfg: &DpoConfig) -> Result<f64> {
    let lc = seq_logprob(head, policy, &q.chosen, &q.image_bundle)?;
    let lr = seq_logprob(head, policy, &q.rejected, &q.image_bundle)?;
    let margin = (lc - r.chosen) - (lr - r.rejected);
    Ok(neg_log_sigmoid(cfg.beta * margin) + cfg.lambda * (-lc / q.chosen.tokens.len() as f64))
}

fn quad_loss_grad(
    head: &Matrix,
    policy: &ReCoParams,
    q: &PreferenceQuad,
    r: RefLogProbs,
    cfg: &DpoConfig,
) -> Result<(f64, Gradient)> {
    let (lc, gc) = seq_logprob_grad(head, policy, &q.chosen, &q.image_bundle)?;
    let (lr, gr) = seq_logprob_grad(head, policy, &q.rejected, &q.image_bundle)?;
    let margin = (lc - r.chosen) - (lr - r.rejected);
    let n = q.chosen.tokens.len() as f64;
    let loss = neg_log_sigmoid(cfg.beta * margin) + cfg.lambda * (-lc / n);
    // dℓ/dm = −β σ(−βm)
    let w = -cfg.beta * sigmoid(-cfg.beta * margin);
    let mut grad = gc.clone().scaled(w - cfg.lambda / n);
    grad.w_text.axpy(-w, &gr.w_text);
    grad.w_image.axpy(-w, &gr.w_image);
    Ok((loss, grad))
}

fn batch_refs(head: &Matrix, reference: &ReCoParams, batch: &[PreferenceQuad]) -> Result<Vec<RefLogProbs>> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    reference_logprobs(head, reference, batch)
}

/// Mean loss over `batch`.
pub fn dpo_loss(head: &Matrix, policy: &ReCoParams, reference: &ReCoParams, batch: &[PreferenceQuad], cfg: &DpoConfig) -> Result<f64> {
    let refs = batch_refs(head, reference, batch)?;
    loss_with_refs(head, policy, batch, &refs, cfg)
}

fn loss_with_refs(head: &Matrix, policy: &ReCoParams, batch: &[PreferenceQuad], refs: &[RefLogProbs], cfg: &DpoConfig) -> Result<f64> {
    let losses: Vec<f64> =
        batch.par_iter().zip(refs).map(|(q, &r)| quad_loss(head, policy, q, r, cfg)).collect::<Result<_>>()?;
    Ok(tree_sum(&losses, &|a, b| a + b).ok_or(DpoError::EmptyBatch)? / batch.len() as f64)
}

/// Exact gradient of [`dpo_loss`] with respect to `(W_T, W_I)`.
pub fn grad_analytic(
    head: &Matrix,
    policy: &ReCoParams,
    reference: &ReCoParams,
    batch: &[PreferenceQuad],
    cfg: &DpoConfig,
) -> Result<Gradient> {
    let refs = batch_refs(head, reference, batch)?;
    Ok(loss_and_grad(head, policy, batch, &refs, cfg)?.1)
}

/// Per-quad losses (in batch order) and the mean gradient, reduced with a
/// fixed pairwise tree.
fn loss_and_grad(
    head: &Matrix,
    policy: &ReCoParams,
    batch: &[PreferenceQuad],
    refs: &[RefLogProbs],
    cfg: &DpoConfig,
) -> Result<(Vec<f64>, Gradient)> {
    let parts: Vec<(f64, Gradient)> = batch
        .par_iter()
        .zip(refs)
        .map(|(q, &r)| quad_loss_grad(head, policy, q, r, cfg))
        .collect::<Result<_>>()?;
    let (losses, grads): (Vec<f64>, Vec<Gradient>) = parts.into_iter().unzip();
    let sum = tree_sum(&grads, &Gradient::add).ok_or(DpoError::EmptyBatch)?;
    Ok((losses, sum.scaled(1.0 / batch.len() as f64)))
}

/// Central differences of [`dpo_loss`], entry by entry.
pub fn grad_fd(
    head: &Matrix,
    policy: &ReCoParams,
    reference: &ReCoParams,
    batch: &[PreferenceQuad],
    cfg: &DpoConfig,
    step: f64,
) -> Result<Gradient> {
    if !(step > 0.0) {
        return Err(DpoError::InvalidStep);
    }
    let refs = batch_refs(head, reference, batch)?;
    let d = policy.dim();
    let (wt, wi) = (policy.w_text().clone(), policy.w_image().clone());
    let mut out = Gradient::zeros(d);
    for which in 0..2 {
        for idx in 0..d * d {
            let eval = |delta: f64| -> Result<f64> {
                let (mut a, mut b) = (wt.clone(), wi.clone());
                let target = if which == 0 { &mut a } else { &mut b };
                target.as_mut_slice()[idx] += delta;
                loss_with_refs(head, &ReCoParams::new(a, b)?, batch, &refs, cfg)
            };
            let g = (eval(step)? - eval(-step)?) / (2.0 * step);
            let dst = if which == 0 { &mut out.w_text } else { &mut out.w_image };
            dst.as_mut_slice()[idx] = g;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ReCoParams,
    /// Loss of the untouched initial parameters over the whole set.
    pub initial_loss: f64,
    /// Per-epoch mean of the per-quad losses seen while training.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

struct AdamState {
    m: Gradient,
    v: Gradient,
    t: i32,
}

/// Train from `init`, which is also the frozen reference policy.
pub fn train(head: &Matrix, quads: &[PreferenceQuad], cfg: &DpoConfig, init: &ReCoParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    if quads.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let d = init.dim();
    if let Some(q) = quads.iter().find(|q| q.dim() != d) {
        return Err(DpoError::DimensionMismatch { expected: d, found: q.dim() });
    }
    let refs = reference_logprobs(head, init, quads)?;
    let initial_loss = loss_with_refs(head, init, quads, &refs, cfg)?;

    let (mut wt, mut wi) = init.clone().into_parts();
    let mut adam = AdamState { m: Gradient::zeros(d), v: Gradient::zeros(d), t: 0 };
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..quads.len()).collect();
        Stream::derived(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut seen = vec![0.0; quads.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreferenceQuad> = chunk.iter().map(|&i| quads[i].clone()).collect();
            let batch_refs: Vec<RefLogProbs> = chunk.iter().map(|&i| refs[i]).collect();
            let policy = ReCoParams::new(wt.clone(), wi.clone())?;
            let (losses, grad) = loss_and_grad(head, &policy, &batch, &batch_refs, cfg)?;
            for (&i, l) in chunk.iter().zip(losses) {
                seen[i] = l;
            }
            apply_update(&mut wt, &mut wi, grad, cfg, &mut adam);
            steps += 1;
        }
        epoch_losses.push(tree_sum(&seen, &|a, b| a + b).unwrap() / quads.len() as f64);
    }
    Ok(TrainOutcome { params: ReCoParams::new(wt, wi)?, initial_loss, epoch_losses, steps })
}

fn apply_update(wt: &mut Matrix, wi: &mut Matrix, grad: Gradient, cfg: &DpoConfig, adam: &mut AdamState) {
    match cfg.optimizer {
        Optimizer::GradientDescent => {
            wt.axpy(-cfg.lr, &grad.w_text);
            wi.axpy(-cfg.lr, &grad.w_image);
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            adam.t += 1;
            let c1 = 1.0 - beta1.powi(adam.t);
            let c2 = 1.0 - beta2.powi(adam.t);
            let pairs = [
                (wt, &grad.w_text, &mut adam.m.w_text, &mut adam.v.w_text),
                (wi, &grad.w_image, &mut adam.m.w_image, &mut adam.v.w_image),
            ];
            for (w, g, m, v) in pairs {
                let ws = w.as_mut_slice();
                let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
                for (k, &gk) in g.as_slice().iter().enumerate() {
                    ms[k] = beta1 * ms[k] + (1.0 - beta1) * gk;
                    vs[k] = beta2 * vs[k] + (1.0 - beta2) * gk * gk;
                    ws[k] -= cfg.lr * (ms[k] / c1) / ((vs[k] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Read a cache, convert its records and train. Returns the outcome and the
/// cache checksum.
pub fn train_from_cache(
    path: impl AsRef<Path>,
    head: &Matrix,
    cfg: &DpoConfig,
    init: Option<&ReCoParams>,
) -> Result<(TrainOutcome, u64)> {
    let contents = cache::read_cache(path)?;
    let quads = contents.records.iter().map(PreferenceQuad::from_record).collect::<Result<Vec<_>>>()?;
    let d = contents.header.d as usize;
    let init = match init {
        Some(p) => p.clone(),
        None => ReCoParams::identity_init(d)?,
    };
    Ok((train(head, &quads, cfg, &init)?, contents.checksum))
}
