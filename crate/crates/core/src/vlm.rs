//! A frozen, deterministic toy vision-language generator.
//!
//! The hidden state evolves as
//!
//! ```text
//! h_{t+1} = tanh(A·h_t + E[w_t] + γ₀·ρ^t · C·ī)
//! ```
//!
//! and the next-token distribution is `softmax(H · B)` with `B = h` for the
//! plain model or `B = W_T·h + W_I·ī` with a binder. The explicit `γ₀·ρ^t`
//! factor is the fading-memory knob: with `ρ < 1` the image stops steering
//! generation after a horizon of roughly `1 / (1 − ρ)` steps.
//!
//! # Vocabulary
//!
//! | ids                | meaning       |
//! |--------------------|---------------|
//! | 0                  | BOS           |
//! | 1                  | EOS           |
//! | 2                  | period        |
//! | 3                  | pad           |
//! | 4 .. 4 + n_obj     | object tokens |
//! | 4 + n_obj .. V     | filler tokens |
//!
//! # Weight construction
//!
//! All weights come from [`crate::rng::Stream`] sub-streams of `seed`
//! (stream ids in parentheses), drawing row-major:
//!
//! - object bases `u_k` (1): standard normal, normalized to unit length;
//! - phrase direction `q` (2): standard normal, unit length;
//! - recurrence `A` (3): `0.5·I + 0.05·N`, rescaled so the largest absolute
//!   row sum is exactly 0.9 (contractive);
//! - co-occurrence permutation `π` (4): Fisher-Yates over `0..n_obj`;
//! - embeddings `E` (5): `0.1·N`, then `E[obj k] += 1.5q + 1.2u_π(k) − u_k`
//!   and `E[period] −= 1.5q`;
//! - head `H` (6): `0.3·N`, then `H[obj k] = 4u_k − q`, `H[period] = 3q`,
//!   `H[EOS] = −2q`, `H[BOS] = H[pad] = 0`;
//! - image map `C = 2·I`.
//!
//! Objects therefore follow a language prior (`k` is followed by `π(k)`)
//! that the image overrides only while `γ₀·ρ^t` is large.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binder::{BinderError, ReCoParams};
use crate::ga::{bundle, Vec1};
use crate::linalg::{softmax, Matrix};
use crate::rng::{derive_key, Stream};
use crate::Fnv1a;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PERIOD: u32 = 2;
pub const PAD: u32 = 3;
pub const OBJECT_BASE: u32 = 4;
pub const RESERVED_TOKENS: usize = 4;

const A_DIAG: f64 = 0.5;
const A_NOISE: f64 = 0.05;
const A_ROW_BOUND: f64 = 0.9;
const E_NOISE: f64 = 0.1;
const E_PHRASE: f64 = 1.5;
const E_PRIOR: f64 = 1.0;
const E_REPEAT: f64 = 1.0;
const H_NOISE: f64 = 0.3;
const H_OBJECT: f64 = 4.0;
const H_OBJECT_PHRASE: f64 = 1.0;
const H_PERIOD: f64 = 3.0;
const H_EOS: f64 = 2.0;
const C_GAIN: f64 = 2.0;

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Binder(#[from] BinderError),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, VlmError>;

fn default_jitter() -> f64 {
    0.05
}

/// Toy model configuration. JSON field names follow the short symbols
/// (`d`, `V`, `M`, `n_obj`, `gamma0`, `rho`, `seed`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub d: usize,
    #[serde(rename = "V", alias = "vocab_size")]
    pub vocab_size: usize,
    #[serde(rename = "M", alias = "image_tokens")]
    pub image_tokens: usize,
    pub n_obj: usize,
    pub gamma0: f64,
    pub rho: f64,
    pub seed: u64,
    /// Standard deviation of the per-scene jitter added to image embeddings.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self { d: 32, vocab_size: 64, image_tokens: 8, n_obj: 16, gamma0: 1.0, rho: 0.9, seed: 0, jitter: 0.05 }
    }
}

impl VlmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VlmError::InvalidConfig(m));
        if self.d < 1 || self.vocab_size < 1 || self.image_tokens < 1 {
            return bad("d, V and M must be at least 1".into());
        }
        if self.n_obj < 1 || self.n_obj + RESERVED_TOKENS > self.vocab_size {
            return bad(format!("n_obj = {} must be in 1..={}", self.n_obj, self.vocab_size.saturating_sub(RESERVED_TOKENS)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho = {} must be in (0, 1]", self.rho));
        }
        if !(self.gamma0 >= 0.0 && self.gamma0.is_finite()) {
            return bad(format!("gamma0 = {} must be finite and ≥ 0", self.gamma0));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad(format!("jitter = {} must be finite and ≥ 0", self.jitter));
        }
        Ok(())
    }

    /// Hex FNV-1a of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        format!("{:016x}", Fnv1a::hash(&serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn object_token(&self, object: u32) -> u32 {
        OBJECT_BASE + object
    }

    /// Object id of a token, if it is an object token.
    pub fn token_object(&self, token: u32) -> Option<u32> {
        (token >= OBJECT_BASE && ((token - OBJECT_BASE) as usize) < self.n_obj).then(|| token - OBJECT_BASE)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| VlmError::Json { line: 1, source })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The frozen weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `d × d` recurrence.
    pub recurrence: Matrix,
    /// `V × d` token embeddings.
    pub embedding: Matrix,
    /// `d × d` image-channel map.
    pub image_map: Matrix,
    /// `V × d` prediction head.
    pub head: Matrix,
    /// `n_obj × d` image-token dictionary.
    pub object_bases: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVlm {
    config: VlmConfig,
    weights: Weights,
}

/// Ground-truth content of one synthetic image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(rename = "objects")]
    pub present_objects: BTreeSet<u32>,
    pub scene_seed: u64,
}

impl SceneSpec {
    pub fn new(objects: impl IntoIterator<Item = u32>, scene_seed: u64) -> Result<Self> {
        let present_objects: BTreeSet<u32> = objects.into_iter().collect();
        if present_objects.is_empty() {
            return Err(VlmError::InvalidScene("scene has no objects".into()));
        }
        Ok(Self { present_objects, scene_seed })
    }

    pub fn validate(&self, n_obj: usize) -> Result<()> {
        if self.present_objects.is_empty() {
            return Err(VlmError::InvalidScene("scene has no objects".into()));
        }
        if let Some(&bad) = self.present_objects.iter().find(|&&o| o as usize >= n_obj) {
            return Err(VlmError::InvalidScene(format!("object {bad} outside 0..{n_obj}")));
        }
        Ok(())
    }
}

/// Per-step embeddings of one rollout, ready for caching.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTrace {
    /// The `M` image-token output embeddings.
    pub image_embeddings: Vec<Vec<f64>>,
    /// `hidden_states[i]` is the state that produced `token_ids[i]`.
    pub hidden_states: Vec<Vec<f64>>,
    pub token_ids: Vec<u32>,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Sample from `softmax(logits / temperature)` using a stream keyed by
    /// `seed`; step `i` uses output `i` of that stream.
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Logits behind each generated token.
    pub logits: Vec<Vec<f64>>,
    pub trace: EmbeddingTrace,
}

/// Next-token distributions with and without the image at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct DistPair {
    pub with_image: Vec<f64>,
    pub without_image: Vec<f64>,
}

impl ToyVlm {
    /// Deterministic construction from `config.seed`.
    pub fn build(config: VlmConfig) -> Result<Self> {
        config.validate()?;
        let (d, v, n_obj) = (config.d, config.vocab_size, config.n_obj);
        let seed = config.seed;

        let mut rng = Stream::derived(seed, 1);
        let object_bases = Matrix::from_rows(&(0..n_obj).map(|_| unit_gaussian(&mut rng, d)).collect::<Vec<_>>()).unwrap();
        let phrase = unit_gaussian(&mut Stream::derived(seed, 2), d);

        let mut rng = Stream::derived(seed, 3);
        let mut recurrence =
            Matrix::from_fn(d, d, |i, j| A_NOISE * rng.next_gaussian() + if i == j { A_DIAG } else { 0.0 });
        let row = recurrence.max_abs_row_sum();
        if row > 0.0 {
            recurrence.scale(A_ROW_BOUND / row);
        }

        let mut prior: Vec<usize> = (0..n_obj).collect();
        Stream::derived(seed, 4).shuffle(&mut prior);

        let mut rng = Stream::derived(seed, 5);
        let mut embedding = Matrix::from_fn(v, d, |_, _| E_NOISE * rng.next_gaussian());
        for k in 0..n_obj {
            let row = embedding.row_mut(RESERVED_TOKENS + k);
            for j in 0..d {
                row[j] += E_PHRASE * phrase[j] + E_PRIOR * object_bases[(prior[k], j)] - E_REPEAT * object_bases[(k, j)];
            }
        }
        for (e, q) in embedding.row_mut(PERIOD as usize).iter_mut().zip(&phrase) {
            *e -= E_PHRASE * q;
        }

        let mut rng = Stream::derived(seed, 6);
        let mut head = Matrix::from_fn(v, d, |_, _| H_NOISE * rng.next_gaussian());
        for k in 0..n_obj {
            let row = head.row_mut(RESERVED_TOKENS + k);
            for j in 0..d {
                row[j] = H_OBJECT * object_bases[(k, j)] - H_OBJECT_PHRASE * phrase[j];
            }
        }
        for j in 0..d {
            head[(PERIOD as usize, j)] = H_PERIOD * phrase[j];
            head[(EOS as usize, j)] = -H_EOS * phrase[j];
            head[(BOS as usize, j)] = 0.0;
            head[(PAD as usize, j)] = 0.0;
        }

        let mut image_map = Matrix::identity(d);
        image_map.scale(C_GAIN);

        Ok(Self { config, weights: Weights { recurrence, embedding, image_map, head, object_bases } })
    }

    /// Assemble a model from explicit weights (for hand-sized fixtures).
    pub fn from_weights(config: VlmConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d, config.vocab_size);
        let shapes = [
            (&weights.recurrence, d, d),
            (&weights.embedding, v, d),
            (&weights.image_map, d, d),
            (&weights.head, v, d),
            (&weights.object_bases, config.n_obj, d),
        ];
        for (m, r, c) in shapes {
            if m.rows() != r {
                return Err(VlmError::DimensionMismatch { expected: r, found: m.rows() });
            }
            if m.cols() != c {
                return Err(VlmError::DimensionMismatch { expected: c, found: m.cols() });
            }
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &VlmConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn head(&self) -> &Matrix {
        &self.weights.head
    }

    /// FNV-1a over all weight bytes (f64 LE, row-major, in field order).
    pub fn weight_checksum(&self) -> u64 {
        let w = &self.weights;
        let mut h = Fnv1a::new();
        for m in [&w.recurrence, &w.embedding, &w.image_map, &w.head, &w.object_bases] {
            for x in m.as_slice() {
                h.update(&x.to_le_bytes());
            }
        }
        h.finish()
    }

    /// `M` embeddings, round-robin over the present objects, each a base
    /// vector plus per-scene Gaussian jitter.
    pub fn encode_image(&self, scene: &SceneSpec) -> Result<Vec<Vec1>> {
        scene.validate(self.config.n_obj)?;
        let objects: Vec<u32> = scene.present_objects.iter().copied().collect();
        let mut rng = Stream::new(derive_key(scene.scene_seed, 0x696d_6167_65));
        let d = self.config.d;
        (0..self.config.image_tokens)
            .map(|j| {
                let base = self.weights.object_bases.row(objects[j % objects.len()] as usize);
                let comps: Vec<f64> = (0..d).map(|i| base[i] + self.config.jitter * rng.next_gaussian()).collect();
                Vec1::new(comps).map_err(|e| VlmError::InvalidScene(e.to_string()))
            })
            .collect()
    }

    /// Unnormalized bundle of the scene's image embeddings.
    pub fn image_bundle(&self, scene: &SceneSpec) -> Result<Vec<f64>> {
        let emb = self.encode_image(scene)?;
        Ok(bundle(&emb).expect("M ≥ 1").into_inner())
    }

    /// `C · ī`, the undecayed image drive.
    pub fn image_drive(&self, image_bundle: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(image_bundle.len())?;
        Ok(self.weights.image_map.matvec(image_bundle))
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found == self.config.d {
            Ok(())
        } else {
            Err(VlmError::DimensionMismatch { expected: self.config.d, found })
        }
    }

    fn check_token(&self, token: u32) -> Result<()> {
        if (token as usize) < self.config.vocab_size {
            Ok(())
        } else {
            Err(VlmError::TokenOutOfRange { token, vocab: self.config.vocab_size })
        }
    }

    /// One recurrence step at global position `t`.
    pub fn step(&self, h: &[f64], token: u32, image_bundle: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_dim(h.len())?;
        let drive = self.image_drive(image_bundle)?;
        self.step_with_drive(h, token, &drive, self.config.gamma0, t)
    }

    fn step_with_drive(&self, h: &[f64], token: u32, drive: &[f64], gamma0: f64, t: usize) -> Result<Vec<f64>> {
        self.check_token(token)?;
        let gain = gamma0 * self.config.rho.powi(i32::try_from(t).unwrap_or(i32::MAX));
        let mut pre = self.weights.recurrence.matvec(h);
        let emb = self.weights.embedding.row(token as usize);
        for ((p, e), c) in pre.iter_mut().zip(emb).zip(drive) {
            *p += e + gain * c;
        }
        Ok(pre.into_iter().map(f64::tanh).collect())
    }

    /// `H · B`, with `B = h` or `B = compose(reco, h, ī)`.
    pub fn next_token_logits(&self, h: &[f64], reco: Option<&ReCoParams>, image_bundle: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(h.len())?;
        self.check_dim(image_bundle.len())?;
        Ok(match reco {
            Some(p) => self.weights.head.matvec(&p.compose(h, image_bundle)?),
            None => self.weights.head.matvec(h),
        })
    }

    pub fn next_token_dist(&self, h: &[f64], reco: Option<&ReCoParams>, image_bundle: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.next_token_logits(h, reco, image_bundle)?))
    }

    /// Run the prompt, returning the state after it and the state that was
    /// current before each prompt token.
    fn run_prompt(&self, prompt: &[u32], drive: &[f64], gamma0: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut h = vec![0.0; self.config.d];
        let mut states = Vec::with_capacity(prompt.len());
        for (t, &w) in prompt.iter().enumerate() {
            states.push(h.clone());
            h = self.step_with_drive(&h, w, drive, gamma0, t)?;
        }
        Ok((h, states))
    }

    /// Autoregressive rollout; stops after EOS or `max_len` tokens.
    pub fn generate(
        &self,
        scene: &SceneSpec,
        prompt: &[u32],
        max_len: usize,
        reco: Option<&ReCoParams>,
        mode: DecodeMode,
    ) -> Result<Generation> {
        let images = self.encode_image(scene)?;
        let image_bundle = bundle(&images).expect("M ≥ 1").into_inner();
        let drive = self.image_drive(&image_bundle)?;
        let (mut h, _) = self.run_prompt(prompt, &drive, self.config.gamma0)?;

        let sample_key = match mode {
            DecodeMode::Temperature { seed, .. } => derive_key(seed, 0x7361_6d70),
            DecodeMode::Greedy => 0,
        };
        let mut tokens = Vec::new();
        let mut logits_log = Vec::new();
        let mut states = Vec::new();
        for i in 0..max_len {
            let logits = self.next_token_logits(&h, reco, &image_bundle)?;
            let w = match mode {
                DecodeMode::Greedy => argmax(&logits),
                DecodeMode::Temperature { temperature, .. } => {
                    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
                    let u = (Stream::at(sample_key, i as u64) >> 11) as f64 / (1u64 << 53) as f64;
                    sample_index(&softmax(&scaled), u)
                }
            };
            tokens.push(w);
            logits_log.push(logits);
            states.push(h.clone());
            if w == EOS {
                break;
            }
            h = self.step_with_drive(&h, w, &drive, self.config.gamma0, prompt.len() + i)?;
        }
        Ok(Generation {
            tokens: tokens.clone(),
            logits: logits_log,
            trace: EmbeddingTrace {
                image_embeddings: images.into_iter().map(Vec1::into_inner).collect(),
                hidden_states: states,
                token_ids: tokens,
                config_fingerprint: self.config.fingerprint(),
            },
        })
    }

    /// Teacher-forced states for `prompt` followed by `answer` under the full
    /// image channel. Returns `(prompt_states, answer_states)` where each
    /// state is the one that predicts the token at the same index.
    pub fn teacher_force(&self, image_bundle: &[f64], prompt: &[u32], answer: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let drive = self.image_drive(image_bundle)?;
        let (mut h, prompt_states) = self.run_prompt(prompt, &drive, self.config.gamma0)?;
        let mut answer_states = Vec::with_capacity(answer.len());
        for (i, &w) in answer.iter().enumerate() {
            answer_states.push(h.clone());
            h = self.step_with_drive(&h, w, &drive, self.config.gamma0, prompt.len() + i)?;
        }
        Ok((prompt_states, answer_states))
    }

    /// Two synchronized greedy rollouts over `t_max` steps. The with-image
    /// run picks the tokens; its twin replays them with the image channel
    /// off (`γ₀ = 0`) and, when a binder is given, a zero bundle. EOS does
    /// not end the rollout.
    pub fn dist_pair_with_without_image(
        &self,
        scene: &SceneSpec,
        prompt: &[u32],
        t_max: usize,
        reco: Option<&ReCoParams>,
    ) -> Result<Vec<DistPair>> {
        let image_bundle = self.image_bundle(scene)?;
        let zero = vec![0.0; self.config.d];
        let drive = self.image_drive(&image_bundle)?;
        let (mut h_with, _) = self.run_prompt(prompt, &drive, self.config.gamma0)?;
        let (mut h_without, _) = self.run_prompt(prompt, &drive, 0.0)?;
        let mut out = Vec::with_capacity(t_max);
        for i in 0..t_max {
            let with_logits = self.next_token_logits(&h_with, reco, &image_bundle)?;
            let without_logits = self.next_token_logits(&h_without, reco, &zero)?;
            let w = argmax(&with_logits);
            out.push(DistPair { with_image: softmax(&with_logits), without_image: softmax(&without_logits) });
            let t = prompt.len() + i;
            h_with = self.step_with_drive(&h_with, w, &drive, self.config.gamma0, t)?;
            h_without = self.step_with_drive(&h_without, w, &drive, 0.0, t)?;
        }
        Ok(out)
    }
}

fn unit_gaussian(rng: &mut Stream, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
    let n = crate::linalg::norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Inverse-CDF draw for `u ∈ [0, 1)`.
fn sample_index(p: &[f64], u: f64) -> u32 {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i as u32;
        }
    }
    // Rounding left u above the total; take the last token with mass.
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0) as u32
}

/// Read a scene-set file: one `{"objects":[...],"scene_seed":n}` per line.
/// Blank lines are skipped.
pub fn read_scenes(path: impl AsRef<Path>) -> Result<Vec<SceneSpec>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: SceneSpec = serde_json::from_str(&line).map_err(|source| VlmError::Json { line: i + 1, source })?;
        if scene.present_objects.is_empty() {
            return Err(VlmError::InvalidScene(format!("line {}: scene has no objects", i + 1)));
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn write_scenes(path: impl AsRef<Path>, scenes: &[SceneSpec]) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut f, s).map_err(|source| VlmError::Json { line: 0, source })?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> VlmConfig {
        VlmConfig { d: 2, vocab_size: 8, image_tokens: 2, n_obj: 2, gamma0: 1.0, rho: 0.9, seed: 1, jitter: 0.0 }
    }

    #[test]
    fn config_validation() {
        assert!(VlmConfig::default().validate().is_ok());
        for bad in [
            VlmConfig { n_obj: 61, ..Default::default() },
            VlmConfig { rho: 0.0, ..Default::default() },
            VlmConfig { rho: 1.5, ..Default::default() },
            VlmConfig { d: 0, ..Default::default() },
            VlmConfig { image_tokens: 0, ..Default::default() },
            VlmConfig { gamma0: -1.0, ..Default::default() },
        ] {
            assert!(matches!(ToyVlm::build(bad), Err(VlmError::InvalidConfig(_))));
        }
    }

    #[test]
    fn config_json_uses_short_names() {
        let json = serde_json::to_value(VlmConfig::default()).unwrap();
        assert_eq!(json["V"], 64);
        assert_eq!(json["M"], 8);
        let cfg: VlmConfig =
            serde_json::from_str(r#"{"d":4,"V":10,"M":2,"n_obj":3,"gamma0":1.0,"rho":0.5,"seed":9}"#).unwrap();
        assert_eq!(cfg.vocab_size, 10);
        assert_eq!(cfg.jitter, 0.05);
    }

    #[test]
    fn build_is_deterministic() {
        let a = ToyVlm::build(VlmConfig::default()).unwrap();
        let b = ToyVlm::build(VlmConfig::default()).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
        assert_eq!(a, b);
        let c = ToyVlm::build(VlmConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.weight_checksum(), c.weight_checksum());
    }

    #[test]
    fn tiny_model_invariants() {
        let m = ToyVlm::build(VlmConfig { d: 2, vocab_size: 8, n_obj: 4, image_tokens: 3, ..Default::default() }).unwrap();
        let w = m.weights();
        assert!(w.recurrence.max_abs_row_sum() <= A_ROW_BOUND + 1e-15);
        assert_eq!((w.head.rows(), w.head.cols()), (8, 2));
        assert_eq!(w.object_bases.rows(), 4);
    }

    #[test]
    fn encode_image_round_robin() {
        let m = ToyVlm::build(VlmConfig { jitter: 0.0, image_tokens: 4, ..Default::default() }).unwrap();
        let one = m.encode_image(&SceneSpec::new([3], 7).unwrap()).unwrap();
        assert_eq!(one.len(), 4);
        for e in &one {
            assert_eq!(&e[..], m.weights().object_bases.row(3));
        }
        let four = m.encode_image(&SceneSpec::new([1, 5, 9, 2], 7).unwrap()).unwrap();
        for (e, obj) in four.iter().zip([1, 2, 5, 9]) {
            assert_eq!(&e[..], m.weights().object_bases.row(obj));
        }
        let jittered = ToyVlm::build(VlmConfig::default()).unwrap();
        let e = jittered.encode_image(&SceneSpec::new([3], 7).unwrap()).unwrap();
        let base = jittered.weights().object_bases.row(3);
        let dev = e[0].iter().zip(base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev > 0.0 && dev < 0.5);
        assert!(m.encode_image(&SceneSpec::new([99], 0).unwrap()).is_err());
    }

    #[test]
    fn step_matches_hand_formula() {
        let m = ToyVlm::build(tiny_config()).unwrap();
        let w = m.weights();
        let img = [0.3, -0.7];
        let h1 = m.step(&[0.0, 0.0], BOS, &img, 0).unwrap();
        for i in 0..2 {
            let c_img = w.image_map[(i, 0)] * img[0] + w.image_map[(i, 1)] * img[1];
            let expected = (w.embedding[(0, i)] + 1.0 * c_img).tanh();
            assert!((h1[i] - expected).abs() < 1e-15);
        }
        // Later steps decay the image term by ρ^t.
        let h = [0.1, 0.2];
        let h5 = m.step(&h, 5, &img, 5).unwrap();
        for i in 0..2 {
            let ah = w.recurrence[(i, 0)] * h[0] + w.recurrence[(i, 1)] * h[1];
            let c_img = w.image_map[(i, 0)] * img[0] + w.image_map[(i, 1)] * img[1];
            let expected = (ah + w.embedding[(5, i)] + 0.9f64.powi(5) * c_img).tanh();
            assert!((h5[i] - expected).abs() < 1e-15);
        }
        assert!(matches!(m.step(&h, 8, &img, 0), Err(VlmError::TokenOutOfRange { token: 8, vocab: 8 })));
    }

    #[test]
    fn next_token_dist_hand_sized() {
        let cfg = VlmConfig { d: 2, vocab_size: 5, image_tokens: 1, n_obj: 1, ..tiny_config() };
        let head = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![-1.0, 0.5],
            vec![0.0, 0.0],
        ])
        .unwrap();
        let weights = Weights {
            recurrence: Matrix::zeros(2, 2),
            embedding: Matrix::zeros(5, 2),
            image_map: Matrix::identity(2),
            head,
            object_bases: Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        };
        let m = ToyVlm::from_weights(cfg, weights).unwrap();
        let h = [0.5, -0.25];
        let p = m.next_token_dist(&h, None, &[0.0, 0.0]).unwrap();
        let logits = [0.5, -0.25, 0.25, -0.625, 0.0];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        for (pi, l) in p.iter().zip(logits) {
            assert!((pi - l.exp() / z).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let reco = ReCoParams::identity_init(2).unwrap();
        let with = m.next_token_dist(&h, Some(&reco), &[3.0, 4.0]).unwrap();
        assert!(with.iter().zip(&p).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_head_is_uniform() {
        let base = ToyVlm::build(VlmConfig::default()).unwrap();
        let mut w = base.weights().clone();
        w.head = Matrix::zeros(64, 32);
        let m = ToyVlm::from_weights(VlmConfig::default(), w).unwrap();
        let p = m.next_token_dist(&[0.3; 32], None, &[0.0; 32]).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 64.0).abs() < 1e-15));
    }

    #[test]
    fn gamma_zero_ignores_image() {
        let m = ToyVlm::build(VlmConfig { gamma0: 0.0, ..Default::default() }).unwrap();
        let a = m.generate(&SceneSpec::new([1, 2], 1).unwrap(), &[BOS], 40, None, DecodeMode::Greedy).unwrap();
        let b = m.generate(&SceneSpec::new([7, 11, 12], 99).unwrap(), &[BOS], 40, None, DecodeMode::Greedy).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.trace.hidden_states, b.trace.hidden_states);
        for pair in m.dist_pair_with_without_image(&SceneSpec::new([4], 3).unwrap(), &[BOS], 30, None).unwrap() {
            assert_eq!(pair.with_image, pair.without_image);
        }
    }

    #[test]
    fn generate_basic_properties() {
        let m = ToyVlm::build(VlmConfig::default()).unwrap();
        let scene = SceneSpec::new([2, 5, 9], 4).unwrap();
        let a = m.generate(&scene, &[BOS], 96, None, DecodeMode::Greedy).unwrap();
        let b = m.generate(&scene, &[BOS], 96, None, DecodeMode::Greedy).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.token_ids.len(), a.trace.hidden_states.len());
        assert!(a.trace.hidden_states.iter().flatten().all(|x| x.abs() < 1.0));
        let one = m.generate(&scene, &[BOS], 1, None, DecodeMode::Greedy).unwrap();
        assert_eq!(one.tokens.len(), 1);

        let mode = DecodeMode::Temperature { temperature: 1.0, seed: 3 };
        let s1 = m.generate(&scene, &[BOS], 50, None, mode).unwrap();
        let s2 = m.generate(&scene, &[BOS], 50, None, mode).unwrap();
        assert_eq!(s1.tokens, s2.tokens);
    }

    #[test]
    fn strong_image_names_the_object_first() {
        let cfg = VlmConfig { gamma0: 5.0, rho: 1.0, ..Default::default() };
        let m = ToyVlm::build(cfg.clone()).unwrap();
        for k in 0..cfg.n_obj as u32 {
            let gen = m.generate(&SceneSpec::new([k], 11).unwrap(), &[BOS], 8, None, DecodeMode::Greedy).unwrap();
            // Oracle: enumerate the first-step logits and take the best object.
            let logits = &gen.logits[0];
            let best_obj = (0..cfg.n_obj as u32)
                .max_by(|&a, &b| logits[(OBJECT_BASE + a) as usize].total_cmp(&logits[(OBJECT_BASE + b) as usize]))
                .unwrap();
            assert_eq!(best_obj, k);
            let first_obj = gen.tokens.iter().find_map(|&t| cfg.token_object(t));
            assert_eq!(first_obj, Some(k));
        }
    }

    #[test]
    fn identity_reco_reproduces_generation() {
        let m = ToyVlm::build(VlmConfig::default()).unwrap();
        let reco = ReCoParams::identity_init(32).unwrap();
        let scene = SceneSpec::new([0, 15], 8).unwrap();
        let a = m.generate(&scene, &[BOS], 96, None, DecodeMode::Greedy).unwrap();
        let b = m.generate(&scene, &[BOS], 96, Some(&reco), DecodeMode::Greedy).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scenes_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        let scenes = vec![SceneSpec::new([1, 3], 5).unwrap(), SceneSpec::new([0], 6).unwrap()];
        write_scenes(&path, &scenes).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"objects":[1,3],"scene_seed":5}"#);
        assert_eq!(read_scenes(&path).unwrap(), scenes);
        fs::write(&path, "{\"objects\":[1]}\n").unwrap();
        assert!(matches!(read_scenes(&path), Err(VlmError::Json { line: 1, .. })));
        fs::write(&path, "{\"objects\":[],\"scene_seed\":1}\n").unwrap();
        assert!(matches!(read_scenes(&path), Err(VlmError::InvalidScene(_))));
    }
}
