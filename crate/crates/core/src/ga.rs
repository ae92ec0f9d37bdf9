//! Exact small-dimension geometric algebra over a Euclidean signature.
//!
//! A [`Multivector`] stores one `f64` coefficient per basis blade. Blades are
//! subsets of `{1..n}` held as bitmasks (bit `i-1` set ⇔ index `i` present),
//! which is the same thing as a strictly increasing index sequence. The
//! product of two blades is
//!
//! ```text
//! e_A e_B = sign(A, B) · e_{A Δ B}
//! ```
//!
//! where the sign counts the transpositions needed to sort the concatenated
//! index list; repeated indices square to `+1`.
//!
//! The wedge product of 1-vectors follows the permutation-sum definition
//!
//! ```text
//! v_1 ∧ … ∧ v_k = (1/k!) Σ_σ sign(σ) v_σ(1) ⊗ … ⊗ v_σ(k)
//! ```
//!
//! and coincides with the geometric product exactly when the factors are
//! pairwise orthogonal ([`orthogonal_equivalence_check`]).

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Stream;

/// Largest supported ambient dimension (256 blades).
pub const MAX_DIM: usize = 8;
/// Largest factor count for the permutation-sum wedge (720 terms).
pub const MAX_PERMUTATION_FACTORS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("ambient dimension {0} outside 1..={MAX_DIM}")]
    InvalidDimension(usize),
    #[error("empty input list")]
    Empty,
    #[error("{k} factors exceed the permutation-sum limit of {limit}")]
    TooManyFactors { k: usize, limit: usize },
    #[error("non-finite component")]
    NonFinite,
    #[error("blade index {index} outside 1..={n}")]
    BladeIndex { index: usize, n: usize },
}

pub type Result<T> = std::result::Result<T, GaError>;

/// A basis blade, as a bitmask over `{1..=MAX_DIM}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Blade(u16);

impl Blade {
    pub const SCALAR: Blade = Blade(0);

    pub fn from_bits(bits: u16) -> Self {
        Blade(bits)
    }

    /// Build from 1-based indices in any order; duplicates are rejected by
    /// returning `None`.
    pub fn from_indices(indices: &[usize]) -> Option<Self> {
        let mut bits = 0u16;
        for &i in indices {
            if i == 0 || i > MAX_DIM {
                return None;
            }
            let b = 1u16 << (i - 1);
            if bits & b != 0 {
                return None;
            }
            bits |= b;
        }
        Some(Blade(bits))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn grade(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Ascending 1-based index sequence.
    pub fn indices(self) -> Vec<usize> {
        (0..16).filter(|i| self.0 & (1 << i) != 0).map(|i| i + 1).collect()
    }

    /// Sign and result blade of `e_self · e_other` with all squares `+1`.
    pub fn product(self, other: Blade) -> (f64, Blade) {
        let mut a = self.0 >> 1;
        let mut swaps = 0u32;
        while a != 0 {
            swaps += (a & other.0).count_ones();
            a >>= 1;
        }
        let sign = if swaps % 2 == 0 { 1.0 } else { -1.0 };
        (sign, Blade(self.0 ^ other.0))
    }
}

impl fmt::Display for Blade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return write!(f, "1");
        }
        write!(f, "e")?;
        for i in self.indices() {
            write!(f, "{i}")?;
        }
        Ok(())
    }
}

/// A 1-vector with finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vec1(Vec<f64>);

impl Vec1 {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(GaError::Empty);
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(GaError::NonFinite);
        }
        Ok(Vec1(components))
    }

    pub fn zeros(n: usize) -> Self {
        Vec1(vec![0.0; n])
    }

    /// Basis vector `e_i` (1-based).
    pub fn basis(n: usize, i: usize) -> Self {
        let mut v = vec![0.0; n];
        v[i - 1] = 1.0;
        Vec1(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Vec1(self.0.iter().map(|c| alpha * c).collect())
    }

    pub fn add(&self, other: &Vec1) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Vec1(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn sub(&self, other: &Vec1) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(Vec1(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn dot(&self, other: &Vec1) -> f64 {
        crate::linalg::dot(&self.0, &other.0)
    }

    /// Grade-1 multivector with the same components.
    pub fn to_multivector(&self) -> Result<Multivector> {
        let n = self.dim();
        let mut mv = Multivector::zero(n)?;
        for (i, &c) in self.0.iter().enumerate() {
            mv.add_term(Blade(1 << i), c);
        }
        Ok(mv)
    }
}

impl Deref for Vec1 {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(GaError::DimensionMismatch { expected, found })
    }
}

/// Element of the geometric algebra over `R^n`. Absent blades are zero and
/// exact zeros are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Multivector {
    n: usize,
    coeffs: BTreeMap<Blade, f64>,
}

impl Multivector {
    pub fn zero(n: usize) -> Result<Self> {
        if n == 0 || n > MAX_DIM {
            return Err(GaError::InvalidDimension(n));
        }
        Ok(Self { n, coeffs: BTreeMap::new() })
    }

    pub fn scalar(n: usize, value: f64) -> Result<Self> {
        let mut mv = Self::zero(n)?;
        mv.add_term(Blade::SCALAR, value);
        Ok(mv)
    }

    /// Build from `(indices, coefficient)` terms; repeated blades accumulate.
    pub fn from_terms(n: usize, terms: &[(&[usize], f64)]) -> Result<Self> {
        let mut mv = Self::zero(n)?;
        for (indices, c) in terms {
            if let Some(&index) = indices.iter().find(|&&i| i == 0 || i > n) {
                return Err(GaError::BladeIndex { index, n });
            }
            let blade = Blade::from_indices(indices).ok_or(GaError::BladeIndex { index: 0, n })?;
            mv.add_term(blade, *c);
        }
        Ok(mv)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, blade: Blade) -> f64 {
        self.coeffs.get(&blade).copied().unwrap_or(0.0)
    }

    pub fn coeff(&self, indices: &[usize]) -> f64 {
        Blade::from_indices(indices).map_or(0.0, |b| self.get(b))
    }

    pub fn scalar_part(&self) -> f64 {
        self.get(Blade::SCALAR)
    }

    pub fn terms(&self) -> impl Iterator<Item = (Blade, f64)> + '_ {
        self.coeffs.iter().map(|(&b, &c)| (b, c))
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Grades carrying a nonzero coefficient.
    pub fn grades(&self) -> Vec<usize> {
        let mut g: Vec<usize> = self.coeffs.keys().map(|b| b.grade()).collect();
        g.sort_unstable();
        g.dedup();
        g
    }

    pub fn grade_part(&self, k: usize) -> Multivector {
        Self {
            n: self.n,
            coeffs: self.coeffs.iter().filter(|(b, _)| b.grade() == k).map(|(&b, &c)| (b, c)).collect(),
        }
    }

    fn add_term(&mut self, blade: Blade, c: f64) {
        let entry = self.coeffs.entry(blade).or_insert(0.0);
        *entry += c;
        if *entry == 0.0 {
            self.coeffs.remove(&blade);
        }
    }

    pub fn add(&self, other: &Multivector) -> Result<Multivector> {
        check_dim(self.n, other.n)?;
        let mut out = self.clone();
        for (b, c) in other.terms() {
            out.add_term(b, c);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Multivector) -> Result<Multivector> {
        self.add(&other.scaled(-1.0))
    }

    pub fn scaled(&self, alpha: f64) -> Multivector {
        let mut out = Self { n: self.n, coeffs: BTreeMap::new() };
        for (b, c) in self.terms() {
            out.add_term(b, alpha * c);
        }
        out
    }

    /// `max_A |self_A − other_A|` over the union of blades.
    pub fn max_abs_diff(&self, other: &Multivector) -> Result<f64> {
        check_dim(self.n, other.n)?;
        let mut worst = 0.0f64;
        for (b, c) in self.terms() {
            worst = worst.max((c - other.get(b)).abs());
        }
        for (b, c) in other.terms() {
            if !self.coeffs.contains_key(&b) {
                worst = worst.max(c.abs());
            }
        }
        Ok(worst)
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.values().fold(0.0, |m, c| m.max(c.abs()))
    }
}

impl fmt::Display for Multivector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.coeffs.is_empty() {
            return write!(f, "0");
        }
        for (i, (b, c)) in self.terms().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{c}·{b}")?;
        }
        Ok(())
    }
}

/// Componentwise sum of 1-vectors (the bundle ⊕).
pub fn bundle(vs: &[Vec1]) -> Result<Vec1> {
    let first = vs.first().ok_or(GaError::Empty)?;
    let mut acc = first.0.clone();
    for v in &vs[1..] {
        check_dim(first.dim(), v.dim())?;
        for (a, b) in acc.iter_mut().zip(&v.0) {
            *a += b;
        }
    }
    Ok(Vec1(acc))
}

/// Bundle followed by division by the number of inputs.
pub fn bundle_mean(vs: &[Vec1]) -> Result<Vec1> {
    Ok(bundle(vs)?.scaled(1.0 / vs.len() as f64))
}

/// Bilinear blade-table product.
pub fn geometric_product(a: &Multivector, b: &Multivector) -> Result<Multivector> {
    check_dim(a.n, b.n)?;
    let mut out = Multivector::zero(a.n)?;
    for (ba, ca) in a.terms() {
        for (bb, cb) in b.terms() {
            let (sign, blade) = ba.product(bb);
            out.add_term(blade, sign * ca * cb);
        }
    }
    Ok(out)
}

/// Blade-table outer product: `e_A ∧ e_B` is `e_A e_B` when `A ∩ B = ∅` and
/// zero otherwise.
pub fn outer_product(a: &Multivector, b: &Multivector) -> Result<Multivector> {
    check_dim(a.n, b.n)?;
    let mut out = Multivector::zero(a.n)?;
    for (ba, ca) in a.terms() {
        for (bb, cb) in b.terms() {
            if ba.bits() & bb.bits() == 0 {
                let (sign, blade) = ba.product(bb);
                out.add_term(blade, sign * ca * cb);
            }
        }
    }
    Ok(out)
}

/// Left-to-right geometric product of 1-vectors.
pub fn product_of(vs: &[Vec1]) -> Result<Multivector> {
    product_of_with(vs, &geometric_product)
}

fn product_of_with(vs: &[Vec1], product: &ProductFn) -> Result<Multivector> {
    let first = vs.first().ok_or(GaError::Empty)?;
    let mut acc = first.to_multivector()?;
    for v in &vs[1..] {
        check_dim(first.dim(), v.dim())?;
        acc = product(&acc, &v.to_multivector()?)?;
    }
    Ok(acc)
}

/// Signature of a multivector product, so the property suite can be run
/// against alternative (or deliberately broken) implementations.
pub type ProductFn = dyn Fn(&Multivector, &Multivector) -> Result<Multivector> + Sync;

/// Wedge product by the antisymmetrized permutation sum, for `k ≤ 6`.
pub fn wedge(vs: &[Vec1]) -> Result<Multivector> {
    wedge_with(vs, &geometric_product)
}

pub fn wedge_with(vs: &[Vec1], product: &ProductFn) -> Result<Multivector> {
    let first = vs.first().ok_or(GaError::Empty)?;
    for v in vs {
        check_dim(first.dim(), v.dim())?;
    }
    let k = vs.len();
    if k > MAX_PERMUTATION_FACTORS {
        return Err(GaError::TooManyFactors { k, limit: MAX_PERMUTATION_FACTORS });
    }
    let mut acc = Multivector::zero(first.dim())?;
    let mut count = 0usize;
    for (perm, sign) in permutations(k) {
        let ordered: Vec<Vec1> = perm.iter().map(|&i| vs[i].clone()).collect();
        let term = product_of_with(&ordered, product)?;
        acc = acc.add(&term.scaled(sign))?;
        count += 1;
    }
    Ok(acc.scaled(1.0 / count as f64))
}

/// Wedge product through the blade-table outer product; no factor limit.
pub fn wedge_blade(vs: &[Vec1]) -> Result<Multivector> {
    let first = vs.first().ok_or(GaError::Empty)?;
    let mut acc = first.to_multivector()?;
    for v in &vs[1..] {
        check_dim(first.dim(), v.dim())?;
        acc = outer_product(&acc, &v.to_multivector()?)?;
    }
    Ok(acc)
}

/// All permutations of `0..k` in lexicographic order, with their signs.
fn permutations(k: usize) -> Vec<(Vec<usize>, f64)> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<(Vec<usize>, f64)>) {
        let k = used.len();
        if prefix.len() == k {
            let mut inversions = 0;
            for i in 0..k {
                for j in i + 1..k {
                    if prefix[i] > prefix[j] {
                        inversions += 1;
                    }
                }
            }
            out.push((prefix.clone(), if inversions % 2 == 0 { 1.0 } else { -1.0 }));
            return;
        }
        for i in 0..k {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub max_deviation: f64,
    pub holds: bool,
}

/// Compare `v_1 ⊗ … ⊗ v_k` with `v_1 ∧ … ∧ v_k` coefficientwise.
pub fn orthogonal_equivalence_check(vs: &[Vec1], tol: f64) -> Result<EquivalenceReport> {
    equivalence_with(vs, tol, &geometric_product)
}

fn equivalence_with(vs: &[Vec1], tol: f64, product: &ProductFn) -> Result<EquivalenceReport> {
    let gp = product_of_with(vs, product)?;
    let w = wedge_with(vs, product)?;
    let max_deviation = gp.max_abs_diff(&w)?;
    Ok(EquivalenceReport { max_deviation, holds: max_deviation <= tol })
}

/// Modified Gram-Schmidt, applied twice for orthogonality at machine
/// precision. Vectors that collapse to zero are left at zero.
pub fn gram_schmidt(vs: &[Vec1]) -> Vec<Vec1> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vs.len());
    for v in vs {
        let mut w = v.0.clone();
        for _ in 0..2 {
            for u in &out {
                let uu = crate::linalg::dot(u, u);
                if uu > 0.0 {
                    let c = crate::linalg::dot(&w, u) / uu;
                    for (wi, ui) in w.iter_mut().zip(u) {
                        *wi -= c * ui;
                    }
                }
            }
        }
        out.push(w);
    }
    out.into_iter().map(Vec1).collect()
}

// ── property suite ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub trials: usize,
    pub min_dim: usize,
    pub max_dim: usize,
    pub seed: u64,
    /// Tolerance for the orthogonal equivalence.
    pub equivalence_tol: f64,
    /// Tolerance for associativity and `a ⊗ a = ‖a‖²`.
    pub product_tol: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { trials: 1000, min_dim: 2, max_dim: 5, seed: 0, equivalence_tol: 1e-10, product_tol: 1e-12 }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub checked: usize,
    pub failures: usize,
    pub worst: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub trials: usize,
    pub properties: Vec<PropertyOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.failures == 0)
    }
}

fn random_vec(rng: &mut Stream, n: usize) -> Vec1 {
    Vec1((0..n).map(|_| 2.0 * rng.next_f64() - 1.0).collect())
}

fn random_multivector(rng: &mut Stream, n: usize) -> Multivector {
    let mut mv = Multivector { n, coeffs: BTreeMap::new() };
    for bits in 0..(1u16 << n) {
        mv.add_term(Blade(bits), 2.0 * rng.next_f64() - 1.0);
    }
    mv
}

/// Randomized check of the algebraic laws this module promises.
pub fn run_property_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    run_property_suite_with(cfg, &geometric_product)
}

pub fn run_property_suite_with(cfg: &SuiteConfig, product: &ProductFn) -> Result<SuiteReport> {
    if cfg.min_dim < 2 || cfg.max_dim > MAX_DIM || cfg.min_dim > cfg.max_dim {
        return Err(GaError::InvalidDimension(cfg.max_dim));
    }
    let names = [
        "antisymmetry",
        "nilpotence",
        "orthogonal_equivalence",
        "non_orthogonal_detected",
        "associativity",
        "vector_square_is_norm",
        "unit_square",
    ];
    let mut outcomes: Vec<PropertyOutcome> =
        names.iter().map(|&name| PropertyOutcome { name, ..Default::default() }).collect();
    let mut record = |idx: usize, ok: bool, dev: f64| {
        let o = &mut outcomes[idx];
        o.checked += 1;
        o.worst = o.worst.max(dev);
        if !ok {
            o.failures += 1;
        }
    };
    let mut rng = Stream::derived(cfg.seed, 0x6761);
    let span = (cfg.max_dim - cfg.min_dim + 1) as u64;
    for _ in 0..cfg.trials {
        let n = cfg.min_dim + rng.next_below(span) as usize;
        let a = random_vec(&mut rng, n);
        let b = random_vec(&mut rng, n);

        let ab = wedge_with(&[a.clone(), b.clone()], product)?;
        let ba = wedge_with(&[b.clone(), a.clone()], product)?;
        let dev = ab.max_abs_diff(&ba.scaled(-1.0))?;
        record(0, dev == 0.0, dev);

        let aa = wedge_with(&[a.clone(), a.clone()], product)?;
        record(1, aa.is_zero(), aa.max_abs());

        let k = 2 + rng.next_below((n.min(4) - 1) as u64) as usize;
        let raw: Vec<Vec1> = (0..k).map(|_| random_vec(&mut rng, n)).collect();
        let ortho = gram_schmidt(&raw);
        let rep = equivalence_with(&ortho, cfg.equivalence_tol, product)?;
        record(2, rep.holds, rep.max_deviation);

        // Unit pair whose angle is at least 10° away from a right angle.
        let u = a.scaled(1.0 / a.dot(&a).sqrt());
        let w = gram_schmidt(&[u.clone(), b.clone()]).pop().unwrap_or_else(|| Vec1::zeros(n));
        let wn = w.dot(&w).sqrt();
        if wn > 1e-6 {
            let w = w.scaled(1.0 / wn);
            let off = (10.0 + 70.0 * rng.next_f64()).to_radians();
            let tilted = u.scaled(off.sin()).add(&w.scaled(off.cos()))?;
            let rep = equivalence_with(&[u, tilted], cfg.equivalence_tol, product)?;
            record(3, !rep.holds, rep.max_deviation);
        }

        let na = n.min(5);
        let (x, y, z) = (
            random_multivector(&mut rng, na),
            random_multivector(&mut rng, na),
            random_multivector(&mut rng, na),
        );
        let left = product(&product(&x, &y)?, &z)?;
        let right = product(&x, &product(&y, &z)?)?;
        let dev = left.max_abs_diff(&right)?;
        record(4, dev <= cfg.product_tol, dev);

        let am = a.to_multivector()?;
        let sq = product(&am, &am)?;
        let dev = (sq.scalar_part() - a.dot(&a)).abs();
        record(5, dev <= cfg.product_tol, dev);

        let e1 = Vec1::basis(n, 1).to_multivector()?;
        let one = product(&e1, &e1)?;
        let ok = one == Multivector::scalar(n, 1.0)?;
        record(6, ok, one.max_abs_diff(&Multivector::scalar(n, 1.0)?)?);
    }
    Ok(SuiteReport { trials: cfg.trials, properties: outcomes })
}

/// A geometric product that ignores reordering signs. Only used to show the
/// property suite catches sign errors.
#[doc(hidden)]
pub fn sign_bug_product(a: &Multivector, b: &Multivector) -> Result<Multivector> {
    check_dim(a.n, b.n)?;
    let mut out = Multivector::zero(a.n)?;
    for (ba, ca) in a.terms() {
        for (bb, cb) in b.terms() {
            out.add_term(Blade(ba.bits() ^ bb.bits()), ca * cb);
        }
    }
    Ok(out)
}
