//! Reminder composition for frozen generative models.
//!
//! A frozen next-token predictor tends to lose track of its visual
//! conditioning as a generation grows longer. This crate implements a small
//! trainable composition head that re-binds the bundled image embeddings to
//! every hidden state right before the frozen prediction head:
//!
//! ```text
//! B_t = W_T · T_t + W_I · (I_1 ⊕ … ⊕ I_M)
//! ```
//!
//! With `W_T = I` and `W_I = 0` the head is an exact no-op, so the modified
//! model family contains the original model.
//!
//! Modules:
//!
//! - [`ga`]: exact low-dimensional geometric algebra (wedge, geometric
//!   product, bundling) and the orthogonality equivalence check.
//! - [`binder`]: the matrix binder ([`binder::ReCoParams`]) and its
//!   checkpoint format.
//! - [`vlm`]: a deterministic toy vision-language generator with a
//!   controllable fading-memory effect.
//! - [`cache`]: the offline embedding cache (`RECO` file format).
//! - [`dpo`]: preference training of the binder on cached traces, with
//!   analytic and finite-difference gradients.
//! - [`metrics`]: CHAIR, POPE, AMBER and accuracy+.
//! - [`diagnostics`]: Hellinger influence curves.
//! - [`experiment`]: scene sampling, preference data synthesis and the
//!   end-to-end pipeline.
//! - [`cli`]: the `reco-lab` batch driver.

pub mod binder;
pub mod cache;
pub mod cli;
pub mod diagnostics;
pub mod dpo;
pub mod experiment;
pub mod ga;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod vlm;

pub use binder::ReCoParams;
pub use ga::{Multivector, Vec1};
pub use linalg::Matrix;
pub use vlm::{SceneSpec, ToyVlm, VlmConfig};

/// 64-bit FNV-1a offset basis.
pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
/// 64-bit FNV-1a prime.
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental 64-bit FNV-1a hasher, used for cache checksums and weight
/// fingerprints.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }

    pub fn hash(bytes: &[u8]) -> u64 {
        let mut h = Self::new();
        h.update(bytes);
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::Fnv1a;

    #[test]
    fn fnv1a_reference_vectors() {
        assert_eq!(Fnv1a::hash(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(Fnv1a::hash(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(Fnv1a::hash(b"foobar"), 0x8594_4171_f739_67e8);
    }
}
