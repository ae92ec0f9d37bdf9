//! The matrix binder placed in front of a frozen prediction head.
//!
//! `compose` returns `W_T · T_t + W_I · ī`, where `ī` is the bundle of the
//! image-token embeddings. Identity initialization (`W_T = I`, `W_I = 0`)
//! reproduces the unmodified hidden state bit for bit.
//!
//! # Checkpoint layout
//!
//! ```text
//! offset  size        field
//! 0       8           u64 LE  header length H
//! 8       H           UTF-8 JSON  {"version":1,"d":D}
//! 8+H     8·D·D       W_T, row-major, f64 LE
//! 8+H+8D² 8·D·D       W_I, row-major, f64 LE
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BinderError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding dimension must be at least 1")]
    ZeroDimension,
    #[error("parameter matrices must be finite")]
    NonFinite,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, BinderError>;

/// The two trainable `d × d` matrices of the binder.
#[derive(Debug, Clone, PartialEq)]
pub struct ReCoParams {
    w_text: Matrix,
    w_image: Matrix,
}

impl ReCoParams {
    pub fn new(w_text: Matrix, w_image: Matrix) -> Result<Self> {
        let d = w_text.rows();
        for m in [&w_text, &w_image] {
            if m.rows() != d {
                return Err(BinderError::DimensionMismatch { expected: d, found: m.rows() });
            }
            if m.cols() != d {
                return Err(BinderError::DimensionMismatch { expected: d, found: m.cols() });
            }
            if !m.is_finite() {
                return Err(BinderError::NonFinite);
            }
        }
        if d == 0 {
            return Err(BinderError::ZeroDimension);
        }
        Ok(Self { w_text, w_image })
    }

    /// `W_T = I`, `W_I = 0`.
    pub fn identity_init(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(BinderError::ZeroDimension);
        }
        Ok(Self { w_text: Matrix::identity(d), w_image: Matrix::zeros(d, d) })
    }

    pub fn dim(&self) -> usize {
        self.w_text.rows()
    }

    pub fn w_text(&self) -> &Matrix {
        &self.w_text
    }

    pub fn w_image(&self) -> &Matrix {
        &self.w_image
    }

    pub fn into_parts(self) -> (Matrix, Matrix) {
        (self.w_text, self.w_image)
    }

    /// Same `W_I`, zero `W_T`.
    pub fn image_only(&self) -> Self {
        let d = self.dim();
        Self { w_text: Matrix::zeros(d, d), w_image: self.w_image.clone() }
    }

    /// `W_T · text + W_I · image_bundle`.
    pub fn compose(&self, text: &[f64], image_bundle: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        for len in [text.len(), image_bundle.len()] {
            if len != d {
                return Err(BinderError::DimensionMismatch { expected: d, found: len });
            }
        }
        Ok(self.compose_unchecked(text, image_bundle))
    }

    pub(crate) fn compose_unchecked(&self, text: &[f64], image_bundle: &[f64]) -> Vec<f64> {
        let mut out = self.w_text.matvec(text);
        let img = self.w_image.matvec(image_bundle);
        for (o, i) in out.iter_mut().zip(img) {
            *o += i;
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let header = serde_json::to_vec(&CheckpointHeader { version: CHECKPOINT_VERSION, d })
            .expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + 16 * d * d);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in [&self.w_text, &self.w_image] {
            for x in m.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| BinderError::Format(m.to_string());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| fmt("truncated header length"))?.try_into().unwrap();
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| fmt("header length overflow"))?;
        let header_end = 8usize.checked_add(hlen).ok_or_else(|| fmt("header length overflow"))?;
        let header_bytes = bytes.get(8..header_end).ok_or_else(|| fmt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| BinderError::Format(e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(BinderError::Version(header.version));
        }
        let d = header.d;
        let n = d.checked_mul(d).ok_or_else(|| fmt("dimension overflow"))?;
        let expected = n.checked_mul(16).and_then(|p| p.checked_add(header_end)).ok_or_else(|| fmt("dimension overflow"))?;
        if bytes.len() != expected {
            return Err(BinderError::Format(format!("payload is {} bytes, expected {}", bytes.len(), expected)));
        }
        let floats: Vec<f64> = bytes[header_end..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let w_text = Matrix::from_vec(d, d, floats[..n].to_vec()).unwrap();
        let w_image = Matrix::from_vec(d, d, floats[n..].to_vec()).unwrap();
        Self::new(w_text, w_image)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    d: usize,
}
