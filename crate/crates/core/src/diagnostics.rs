//! Image influence on the next-token distribution over generation steps.
//!
//! The distance is the Hellinger distance normalized to `[0, 1]`:
//! `H(P, Q) = sqrt(1 − Σ sqrt(P_i Q_i)) = ‖√P − √Q‖₂ / √2`.
//! It is evaluated in the second form, which is exactly 0 for identical
//! inputs; the first loses about 1e-8 to cancellation near 0.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binder::ReCoParams;
use crate::linalg::tree_sum;
use crate::vlm::{SceneSpec, ToyVlm, VlmError};

/// Slack allowed on `Σ P_i = 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("distributions have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("not a probability vector: {0}")]
    NotADistribution(String),
    #[error("scene set is empty")]
    NoScenes,
    #[error("curve has {steps} steps but {values} values")]
    Ragged { steps: usize, values: usize },
    #[error(transparent)]
    Model(#[from] VlmError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

fn check_distribution(p: &[f64]) -> Result<()> {
    if let Some(x) = p.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(DiagnosticsError::NotADistribution(format!("entry {x}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(DiagnosticsError::NotADistribution(format!("sums to {s}")));
    }
    Ok(())
}

pub fn hellinger(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(DiagnosticsError::LengthMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let sq: f64 = p.iter().zip(q).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    Ok((0.5 * sq).sqrt().min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub scene_count: usize,
    /// FNV-1a of the scene list serialized as JSON lines.
    pub scene_checksum: String,
    pub reco: bool,
    pub config_fingerprint: String,
    pub prompt: Vec<u32>,
    pub t_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceCurve {
    pub steps: Vec<usize>,
    pub hellinger: Vec<f64>,
    pub meta: CurveMeta,
}

impl InfluenceCurve {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean over the steps `t` with `range.start <= t < range.end`; `None`
    /// when the window holds no step.
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> Option<f64> {
        let vals: Vec<f64> = self
            .steps
            .iter()
            .zip(&self.hellinger)
            .filter(|(t, _)| range.contains(t))
            .map(|(_, &h)| h)
            .collect();
        tree_sum(&vals, &|a, b| a + b).map(|s| s / vals.len() as f64)
    }
}

/// Hellinger distance per step for one scene.
pub fn scene_curve(model: &ToyVlm, scene: &SceneSpec, prompt: &[u32], t_max: usize, reco: Option<&ReCoParams>) -> Result<Vec<f64>> {
    model
        .dist_pair_with_without_image(scene, prompt, t_max, reco)?
        .iter()
        .map(|p| hellinger(&p.with_image, &p.without_image))
        .collect()
}

/// Per-scene curves, in scene order.
pub fn per_scene_curves(
    model: &ToyVlm,
    scenes: &[SceneSpec],
    prompt: &[u32],
    t_max: usize,
    reco: Option<&ReCoParams>,
) -> Result<Vec<Vec<f64>>> {
    scenes.par_iter().map(|s| scene_curve(model, s, prompt, t_max, reco)).collect()
}

/// Mean curve over scenes. Parallel over scenes; the per-step sums use a
/// fixed pairwise tree in scene order, so the result does not depend on
/// the thread count.
pub fn influence_curve(
    model: &ToyVlm,
    scenes: &[SceneSpec],
    prompt: &[u32],
    t_max: usize,
    reco: Option<&ReCoParams>,
) -> Result<InfluenceCurve> {
    if scenes.is_empty() {
        return Err(DiagnosticsError::NoScenes);
    }
    let curves = per_scene_curves(model, scenes, prompt, t_max, reco)?;
    let n = scenes.len() as f64;
    let hellinger = (0..t_max)
        .map(|t| {
            let column: Vec<f64> = curves.iter().map(|c| c[t]).collect();
            tree_sum(&column, &|a, b| a + b).unwrap() / n
        })
        .collect();
    Ok(InfluenceCurve {
        steps: (0..t_max).collect(),
        hellinger,
        meta: CurveMeta {
            scene_count: scenes.len(),
            scene_checksum: scene_checksum(scenes),
            reco: reco.is_some(),
            config_fingerprint: model.config().fingerprint(),
            prompt: prompt.to_vec(),
            t_max,
        },
    })
}

pub fn scene_checksum(scenes: &[SceneSpec]) -> String {
    let mut h = crate::Fnv1a::new();
    for s in scenes {
        h.update(&serde_json::to_vec(s).expect("scene serializes"));
        h.update(b"\n");
    }
    format!("{:016x}", h.finish())
}

/// Path of the metadata file that accompanies a curve CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    csv_path.with_file_name(name)
}

/// CSV `t,hellinger` plus `<path>.meta.json`. Values use the shortest
/// representation that parses back to the same f64.
pub fn export_curve(curve: &InfluenceCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if curve.steps.len() != curve.hellinger.len() {
        return Err(DiagnosticsError::Ragged { steps: curve.steps.len(), values: curve.hellinger.len() });
    }
    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,hellinger")?;
    for (t, h) in curve.steps.iter().zip(&curve.hellinger) {
        writeln!(out, "{t},{h}")?;
    }
    out.flush()?;
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&curve.meta)?)?;
    Ok(())
}

/// One column per scene: `t,scene_0,scene_1,...`.
pub fn export_per_scene(curves: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "t")?;
    for i in 0..curves.len() {
        write!(out, ",scene_{i}")?;
    }
    writeln!(out)?;
    let t_max = curves.iter().map(Vec::len).max().unwrap_or(0);
    for t in 0..t_max {
        write!(out, "{t}")?;
        for c in curves {
            match c.get(t) {
                Some(v) => write!(out, ",{v}")?,
                None => write!(out, ",")?,
            }
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Parse a curve CSV written by [`export_curve`] into `(t, hellinger)` rows.
pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("t,hellinger") => {}
        other => return Err(DiagnosticsError::NotADistribution(format!("unexpected header {other:?}"))),
    }
    lines
        .map(|l| {
            let (t, h) = l.split_once(',').ok_or_else(|| DiagnosticsError::NotADistribution(format!("bad row {l:?}")))?;
            let t = t.parse().map_err(|_| DiagnosticsError::NotADistribution(format!("bad step {t:?}")))?;
            let h = h.parse().map_err(|_| DiagnosticsError::NotADistribution(format!("bad value {h:?}")))?;
            Ok((t, h))
        })
        .collect()
}
