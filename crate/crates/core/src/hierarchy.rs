//! Truncated multi-index space of dissipaton density operators and the
//! hierarchy generator shared by every equation-of-motion variant.
//!
//! The generator acts entrywise as
//!
//! ```text
//! out_n = c0 (-i[H_S, ρ_n] - Σ_s n_s γ_s ρ_n)
//!       - i Σ_s      (λ₋ Q_u ρ_{n+s} - λ₊ ρ_{n+s} Q_u)
//!       - i Σ_{s,v} n_s (λ₋ η_{uvk} Q_v ρ_{n-s} - λ₊ η*_{uvk̄} ρ_{n-s} Q_v)
//! ```
//!
//! with slot `s = (u, k)`. Real-time dynamics uses `(c0, λ₋, λ₊) = (1, 1, 1)`,
//! the work-generating hierarchy uses time-dependent `λ±`, and imaginary-time
//! dynamics uses `(-i, -i, 0)`. Entries beyond the top tier are zero.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use num_traits::Zero;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{DeomError, Result};
use crate::linalg::{conj_acc, gemm_acc, sandwich_acc, trace_of, CMatrix};
use crate::model::{ModeSet, SystemSpec};
use crate::scalar::{cr, Real, C};

/// Default cap on the number of hierarchy entries.
pub const DEFAULT_ENTRY_BUDGET: usize = 4_000_000;

const NONE: u32 = u32::MAX;
const PAR_THRESHOLD: usize = 96;

/// Occupation vector `n = {n_s}` with its cached tier `Σ n_s`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex {
    tier: usize,
    occ: Vec<u16>,
}

impl MultiIndex {
    pub fn new(occ: Vec<u16>) -> Self {
        let tier = occ.iter().map(|&x| x as usize).sum();
        Self { tier, occ }
    }

    #[inline]
    pub fn tier(&self) -> usize {
        self.tier
    }

    #[inline]
    pub fn occ(&self) -> &[u16] {
        &self.occ
    }
}

/// All multi-indices with tier ≤ L in graded lexicographic order, with
/// raise/lower adjacency tables.
#[derive(Debug)]
pub struct IndexSpace {
    n_slots: usize,
    max_tier: usize,
    entries: Vec<MultiIndex>,
    lookup: HashMap<Vec<u16>, u32>,
    raise: Vec<u32>,
    lower: Vec<u32>,
    hash: String,
}

/// `binomial(n, k)` without overflow for the sizes of interest.
pub fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n - k.min(n));
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

impl IndexSpace {
    /// Enumerates the space for `n_u` dissipative modes × `n_poles` poles and
    /// truncation tier `max_tier`.
    pub fn enumerate(n_u: usize, n_poles: usize, max_tier: usize) -> Result<Self> {
        Self::with_budget(n_u * n_poles, max_tier, DEFAULT_ENTRY_BUDGET)
    }

    pub fn with_budget(n_slots: usize, max_tier: usize, budget: usize) -> Result<Self> {
        if max_tier > u16::MAX as usize {
            return Err(DeomError::invalid("truncation tier too large"));
        }
        let count = binomial((n_slots + max_tier) as u64, max_tier as u64);
        if count > budget as u128 || count >= NONE as u128 {
            return Err(DeomError::Budget { entries: count, budget });
        }
        let mut entries = Vec::with_capacity(count as usize);
        let mut occ = vec![0u16; n_slots];
        for tier in 0..=max_tier {
            compositions(&mut occ, 0, tier, &mut entries);
        }
        entries.sort();
        debug_assert_eq!(entries.len() as u128, count);

        let lookup: HashMap<Vec<u16>, u32> = entries
            .iter()
            .enumerate()
            .map(|(i, m)| (m.occ.clone(), i as u32))
            .collect();
        let mut raise = vec![NONE; entries.len() * n_slots];
        let mut lower = vec![NONE; entries.len() * n_slots];
        let mut probe = vec![0u16; n_slots];
        for (i, m) in entries.iter().enumerate() {
            for s in 0..n_slots {
                probe.copy_from_slice(&m.occ);
                if m.tier < max_tier {
                    probe[s] += 1;
                    raise[i * n_slots + s] = lookup[&probe];
                    probe[s] -= 1;
                }
                if m.occ[s] > 0 {
                    probe[s] -= 1;
                    lower[i * n_slots + s] = lookup[&probe];
                }
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(b"deom-index-space-v1");
        hasher.update((n_slots as u64).to_le_bytes());
        hasher.update((max_tier as u64).to_le_bytes());
        for m in &entries {
            for &x in &m.occ {
                hasher.update(x.to_le_bytes());
            }
        }
        let hash = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>();
        Ok(Self {
            n_slots,
            max_tier,
            entries,
            lookup,
            raise,
            lower,
            hash,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    #[inline]
    pub fn max_tier(&self) -> usize {
        self.max_tier
    }

    #[inline]
    pub fn entries(&self) -> &[MultiIndex] {
        &self.entries
    }

    pub fn index_of(&self, occ: &[u16]) -> Option<usize> {
        self.lookup.get(occ).map(|&i| i as usize)
    }

    /// Position of `n⁺_s`, absent at the top tier.
    #[inline]
    pub fn raise(&self, entry: usize, slot: usize) -> Option<usize> {
        let j = self.raise[entry * self.n_slots + slot];
        (j != NONE).then_some(j as usize)
    }

    /// Position of `n⁻_s`, absent when `n_s = 0`.
    #[inline]
    pub fn lower(&self, entry: usize, slot: usize) -> Option<usize> {
        let j = self.lower[entry * self.n_slots + slot];
        (j != NONE).then_some(j as usize)
    }

    /// Hex SHA-256 of the canonical entry order.
    pub fn canonical_hash(&self) -> &str {
        &self.hash
    }

    /// Position of the first-tier entry with a single excitation in `slot`.
    pub fn first_tier(&self, slot: usize) -> Option<usize> {
        self.raise(0, slot)
    }
}

fn compositions(occ: &mut [u16], pos: usize, remaining: usize, out: &mut Vec<MultiIndex>) {
    if pos + 1 == occ.len() {
        occ[pos] = remaining as u16;
        out.push(MultiIndex::new(occ.to_vec()));
        occ[pos] = 0;
        return;
    }
    if occ.is_empty() {
        if remaining == 0 {
            out.push(MultiIndex::new(Vec::new()));
        }
        return;
    }
    for x in (0..=remaining).rev() {
        occ[pos] = x as u16;
        compositions(occ, pos + 1, remaining - x, out);
    }
    occ[pos] = 0;
}

/// Per-entry factors `s_n = Π_s (n_s! w_s^{n_s})^{1/2}` with `w_s = |η_{uuk}|`.
/// Scaled entries hold `ρ_n / s_n`.
pub fn scaling_factors<T: Real>(space: &IndexSpace, modes: &ModeSet<T>) -> Vec<T> {
    let weights: Vec<T> = (0..space.n_slots())
        .map(|s| {
            let (u, k) = modes.slot_uk(s);
            let w = modes.eta_fwd(u, u, k).norm();
            if w > T::lit(1e-300) && w.is_finite() {
                w
            } else {
                T::one()
            }
        })
        .collect();
    space
        .entries()
        .iter()
        .map(|m| {
            let mut f = T::one();
            for (s, &n) in m.occ().iter().enumerate() {
                for j in 1..=n as usize {
                    f *= (T::lit(j as f64) * weights[s]).sqrt();
                }
            }
            f
        })
        .collect()
}

/// Storage representation of a [`DdoStore`].
#[derive(Clone, Debug)]
pub enum Scaling<T: Real> {
    Raw,
    /// Entries are divided by the given per-entry factors.
    Scaled(Arc<Vec<T>>),
}

impl<T: Real> Scaling<T> {
    pub fn is_raw(&self) -> bool {
        matches!(self, Scaling::Raw)
    }

    /// Factor converting stored values of `entry` into raw values.
    #[inline]
    pub fn factor(&self, entry: usize) -> T {
        match self {
            Scaling::Raw => T::one(),
            Scaling::Scaled(f) => f[entry],
        }
    }

    fn flag(&self) -> u8 {
        match self {
            Scaling::Raw => 0,
            Scaling::Scaled(_) => 1,
        }
    }
}

/// The hierarchy state: one d×d matrix per multi-index.
#[derive(Clone, Debug)]
pub struct DdoStore<T: Real> {
    space: Arc<IndexSpace>,
    dim: usize,
    data: Vec<C<T>>,
    scaling: Scaling<T>,
}

impl<T: Real> DdoStore<T> {
    pub fn zeros(space: Arc<IndexSpace>, dim: usize, scaling: Scaling<T>) -> Self {
        let n = space.len();
        if let Scaling::Scaled(f) = &scaling {
            assert_eq!(f.len(), n, "scaling factors do not match the index space");
        }
        Self {
            space,
            dim,
            data: vec![C::zero(); n * dim * dim],
            scaling,
        }
    }

    /// Hierarchy with `rho0` at tier 0 and all other entries zero.
    pub fn from_reduced(space: Arc<IndexSpace>, rho0: &CMatrix<T>, scaling: Scaling<T>) -> Self {
        let mut s = Self::zeros(space, rho0.dim(), scaling);
        s.entry_mut(0).copy_from_slice(rho0.as_slice());
        s
    }

    #[inline]
    pub fn space(&self) -> &Arc<IndexSpace> {
        &self.space
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn scaling(&self) -> &Scaling<T> {
        &self.scaling
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.space.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.space.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[C<T>] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [C<T>] {
        &mut self.data
    }

    #[inline]
    pub fn entry(&self, i: usize) -> &[C<T>] {
        let b = self.dim * self.dim;
        &self.data[i * b..(i + 1) * b]
    }

    #[inline]
    pub fn entry_mut(&mut self, i: usize) -> &mut [C<T>] {
        let b = self.dim * self.dim;
        &mut self.data[i * b..(i + 1) * b]
    }

    /// Raw value of an entry as a matrix.
    pub fn raw_entry(&self, i: usize) -> CMatrix<T> {
        let f = cr(self.scaling.factor(i));
        CMatrix::from_vec(self.dim, self.entry(i).iter().map(|&z| z * f).collect()).expect("block size")
    }

    /// Tier-0 entry (the reduced density operator for a ρ-hierarchy).
    pub fn reduced(&self) -> CMatrix<T> {
        self.raw_entry(0)
    }

    pub fn to_raw(&self) -> Self {
        match &self.scaling {
            Scaling::Raw => self.clone(),
            Scaling::Scaled(f) => {
                let b = self.dim * self.dim;
                let mut data = self.data.clone();
                for (i, chunk) in data.chunks_mut(b).enumerate() {
                    for z in chunk {
                        *z *= f[i];
                    }
                }
                Self {
                    space: self.space.clone(),
                    dim: self.dim,
                    data,
                    scaling: Scaling::Raw,
                }
            }
        }
    }

    /// Re-expresses the store with per-entry `factors`.
    pub fn to_scaled(&self, factors: Arc<Vec<T>>) -> Self {
        let raw = self.to_raw();
        let b = self.dim * self.dim;
        let mut data = raw.data;
        for (i, chunk) in data.chunks_mut(b).enumerate() {
            let inv = T::one() / factors[i];
            for z in chunk {
                *z *= inv;
            }
        }
        Self {
            space: self.space.clone(),
            dim: self.dim,
            data,
            scaling: Scaling::Scaled(factors),
        }
    }

    /// Same representation as `other` (which must share the index space).
    pub fn with_scaling_of(&self, other: &Self) -> Self {
        match &other.scaling {
            Scaling::Raw => self.to_raw(),
            Scaling::Scaled(f) => self.to_scaled(f.clone()),
        }
    }

    /// Trace of the raw tier-0 entry.
    pub fn trace0(&self) -> C<T> {
        trace_of(self.dim, self.entry(0)) * self.scaling.factor(0)
    }

    pub fn max_abs(&self) -> T {
        crate::scalar::max_abs(&self.data)
    }

    pub fn scale_in_place(&mut self, s: C<T>) {
        for z in &mut self.data {
            *z *= s;
        }
    }

    /// Divides every entry by the tier-0 trace.
    pub fn normalize(&mut self) -> Result<C<T>> {
        let tr = self.trace0();
        if tr.norm() == T::zero() || !tr.re.is_finite() {
            return Err(DeomError::invalid(
                "cannot normalize a hierarchy with zero tier-0 trace",
            ));
        }
        self.scale_in_place(C::new(T::one(), T::zero()) / tr);
        Ok(tr)
    }

    /// self += a · x
    pub fn axpy(&mut self, a: C<T>, x: &Self) {
        debug_assert_eq!(self.data.len(), x.data.len());
        for (y, &xv) in self.data.iter_mut().zip(&x.data) {
            *y += a * xv;
        }
    }

    /// Largest elementwise difference in raw representation.
    pub fn max_diff(&self, other: &Self) -> T {
        assert_eq!(self.data.len(), other.data.len());
        let b = self.dim * self.dim;
        let mut m = T::zero();
        for i in 0..self.len() {
            let fa = self.scaling.factor(i);
            let fb = other.scaling.factor(i);
            for j in 0..b {
                m = m.max((self.data[i * b + j] * fa - other.data[i * b + j] * fb).norm());
            }
        }
        m
    }

    /// `max_n ‖ρ_n† - ρ_n̄‖` in raw representation, where `n̄` exchanges the
    /// occupations of every slot with its conjugate-pole partner.
    pub fn pairing_defect(&self, modes: &ModeSet<T>) -> T {
        let d = self.dim;
        let mut worst = T::zero();
        let mut occ = vec![0u16; self.space.n_slots()];
        for (i, m) in self.space.entries().iter().enumerate() {
            for s in 0..occ.len() {
                occ[modes.conj_slot(s)] = m.occ()[s];
            }
            let j = self.space.index_of(&occ).expect("conjugate index in space");
            let fi = self.scaling.factor(i);
            let fj = self.scaling.factor(j);
            let a = self.entry(i);
            let b = self.entry(j);
            for r in 0..d {
                for c in 0..d {
                    let lhs = a[c * d + r].conj() * fi;
                    let rhs = b[r * d + c] * fj;
                    worst = worst.max((lhs - rhs).norm());
                }
            }
        }
        worst
    }

    /// DEOM-space pairing `Σ_n tr[A_n ρ_n]` with an adjoint store.
    ///
    /// Adjoint stores in the scaled representation hold `A_n s_n` (the dual
    /// scaling), so the pairing is taken on stored values directly.
    pub fn pairing(&self, adjoint: &Self) -> C<T> {
        let d = self.dim;
        let mut s = C::zero();
        for i in 0..self.len() {
            s += crate::linalg::trace_product(d, adjoint.entry(i), self.entry(i));
        }
        s
    }

    // -----------------------------------------------------------------------
    // snapshot format

    /// Writes the binary snapshot: magic, version, d, M, L, scaling flag,
    /// scalar width, canonical hash, entry count, optional scaling factors,
    /// then every entry as little-endian (re, im) pairs.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(128 + self.data.len() * 2 * T::BYTES);
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        buf.extend_from_slice(&(self.space.n_slots() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.space.max_tier() as u64).to_le_bytes());
        buf.push(self.scaling.flag());
        buf.push(T::BYTES as u8);
        buf.extend_from_slice(self.space.canonical_hash().as_bytes());
        buf.extend_from_slice(&(self.space.len() as u64).to_le_bytes());
        if let Scaling::Scaled(f) = &self.scaling {
            for &x in f.iter() {
                x.write_le(&mut buf);
            }
        }
        for z in &self.data {
            z.re.write_le(&mut buf);
            z.im.write_le(&mut buf);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a snapshot. When `space` is given its canonical hash must match.
    pub fn read_snapshot<R: Read>(mut r: R, space: Option<Arc<IndexSpace>>) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { b: &bytes, pos: 0 };
        if cur.take(8)? != SNAPSHOT_MAGIC {
            return Err(DeomError::Snapshot("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != SNAPSHOT_VERSION {
            return Err(DeomError::Snapshot(format!("unsupported version {version}")));
        }
        let dim = cur.u64()? as usize;
        let n_slots = cur.u64()? as usize;
        let max_tier = cur.u64()? as usize;
        let flag = cur.take(1)?[0];
        let width = cur.take(1)?[0] as usize;
        if width != T::BYTES {
            return Err(DeomError::Snapshot(format!(
                "scalar width {width} does not match the requested type ({})",
                T::BYTES
            )));
        }
        let hash = std::str::from_utf8(cur.take(64)?)
            .map_err(|_| DeomError::Snapshot("hash is not ASCII".into()))?
            .to_string();
        let n = cur.u64()? as usize;
        let space = match space {
            Some(s) => s,
            None => Arc::new(IndexSpace::with_budget(n_slots, max_tier, usize::MAX)?),
        };
        if space.canonical_hash() != hash || space.len() != n || space.n_slots() != n_slots {
            return Err(DeomError::Snapshot(
                "canonical-order hash does not match the index space".into(),
            ));
        }
        let scaling = match flag {
            0 => Scaling::Raw,
            1 => {
                let mut f = Vec::with_capacity(n);
                for _ in 0..n {
                    f.push(T::read_le(cur.take(T::BYTES)?));
                }
                Scaling::Scaled(Arc::new(f))
            }
            other => return Err(DeomError::Snapshot(format!("unknown scaling flag {other}"))),
        };
        let count = n * dim * dim;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let re = T::read_le(cur.take(T::BYTES)?);
            let im = T::read_le(cur.take(T::BYTES)?);
            data.push(C::new(re, im));
        }
        if cur.pos != bytes.len() {
            return Err(DeomError::Snapshot("trailing bytes".into()));
        }
        Ok(Self {
            space,
            dim,
            data,
            scaling,
        })
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"DEOMSNAP";
const SNAPSHOT_VERSION: u32 = 1;

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(DeomError::Snapshot("truncated file".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Channel weights of the generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorCoefficients<T: Real> {
    /// Multiplies `-i[H_S, ·] - Σ n γ`.
    pub drift: C<T>,
    /// Weight of left system-mode actions (`λ₋`).
    pub left: C<T>,
    /// Weight of right system-mode actions (`λ₊`).
    pub right: C<T>,
    /// Whether the Markovian residual of the mode set acts; it belongs to
    /// real-time dynamics only.
    pub residual: bool,
}

impl<T: Real> GeneratorCoefficients<T> {
    pub fn real_time() -> Self {
        Self::mixing(T::one(), T::one())
    }

    /// λ-augmented real-time coefficients with separate left/right weights.
    pub fn mixing(lam_minus: T, lam_plus: T) -> Self {
        Self {
            drift: cr(T::one()),
            left: cr(lam_minus),
            right: cr(lam_plus),
            residual: true,
        }
    }

    /// Imaginary-time flow `-(H_0^× + H_SB^>)`.
    pub fn imaginary_time() -> Self {
        Self {
            drift: C::new(T::zero(), -T::one()),
            left: C::new(T::zero(), -T::one()),
            right: C::zero(),
            residual: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.drift, self.left, self.right]
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Precomputed coupling tables for one (system, modes, index space,
/// representation) combination.
#[derive(Clone, Debug)]
pub struct Generator<T: Real> {
    space: Arc<IndexSpace>,
    scaling: Scaling<T>,
    dim: usize,
    n_u: usize,
    n_poles: usize,
    q: Vec<Vec<C<T>>>,
    /// `Q_u²` and `δ_u` for modes with a nonzero Markovian residual.
    residual: Vec<(usize, Vec<C<T>>, T)>,
    /// `η_{uvk}` indexed `[k][u * n_u + v]`
    eta_fwd: Vec<Vec<C<T>>>,
    /// `η*_{uvk̄}` indexed `[k][u * n_u + v]`
    eta_bwd: Vec<Vec<C<T>>>,
    /// `Σ_s n_s γ_s` per entry.
    damping: Vec<C<T>>,
    raise_coef: Vec<T>,
    lower_coef: Vec<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(
        space: Arc<IndexSpace>,
        system: &SystemSpec<T>,
        modes: &ModeSet<T>,
        scaling: Scaling<T>,
    ) -> Result<Self> {
        if modes.n_u() != system.n_modes() {
            return Err(DeomError::Dimension(format!(
                "mode set has {} dissipative modes, system has {}",
                modes.n_u(),
                system.n_modes()
            )));
        }
        if modes.n_slots() != space.n_slots() {
            return Err(DeomError::Dimension(format!(
                "index space has {} slots, mode set has {}",
                space.n_slots(),
                modes.n_slots()
            )));
        }
        if !modes.pairing_report().ok() {
            return Err(DeomError::invalid("mode set fails conjugate-pairing checks"));
        }
        if let Scaling::Scaled(f) = &scaling {
            if f.len() != space.len() {
                return Err(DeomError::Dimension("scaling factors do not match index space".into()));
            }
        }
        let n_u = modes.n_u();
        let n_poles = modes.n_poles();
        let m = space.n_slots();
        let eta_fwd = (0..n_poles)
            .map(|k| (0..n_u * n_u).map(|uv| modes.eta_fwd(uv / n_u, uv % n_u, k)).collect())
            .collect();
        let eta_bwd = (0..n_poles)
            .map(|k| (0..n_u * n_u).map(|uv| modes.eta_bwd(uv / n_u, uv % n_u, k)).collect())
            .collect();
        let mut damping = Vec::with_capacity(space.len());
        let mut raise_coef = vec![T::zero(); space.len() * m];
        let mut lower_coef = vec![T::zero(); space.len() * m];
        for (i, e) in space.entries().iter().enumerate() {
            let mut g = C::zero();
            for s in 0..m {
                let (_, k) = modes.slot_uk(s);
                g += modes.gamma(k) * T::lit(e.occ()[s] as f64);
                if let Some(j) = space.raise(i, s) {
                    raise_coef[i * m + s] = scaling.factor(j) / scaling.factor(i);
                }
                if let Some(j) = space.lower(i, s) {
                    lower_coef[i * m + s] = T::lit(e.occ()[s] as f64) * scaling.factor(j) / scaling.factor(i);
                }
            }
            damping.push(g);
        }
        let residual = (0..n_u)
            .filter(|&u| modes.markov_residual(u) != T::zero())
            .map(|u| {
                let q = &system.q_modes()[u];
                (u, (q * q).into_vec(), modes.markov_residual(u))
            })
            .collect();
        Ok(Self {
            space,
            scaling,
            dim: system.dim(),
            n_u,
            n_poles,
            q: system.q_modes().iter().map(|q| q.as_slice().to_vec()).collect(),
            residual,
            eta_fwd,
            eta_bwd,
            damping,
            raise_coef,
            lower_coef,
        })
    }

    #[inline]
    pub fn space(&self) -> &Arc<IndexSpace> {
        &self.space
    }

    #[inline]
    pub fn scaling(&self) -> &Scaling<T> {
        &self.scaling
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `Σ_s n_s γ_s` of an entry.
    #[inline]
    pub fn damping(&self, entry: usize) -> C<T> {
        self.damping[entry]
    }

    pub fn zero_store(&self) -> DdoStore<T> {
        DdoStore::zeros(self.space.clone(), self.dim, self.scaling.clone())
    }

    fn check_store(&self, store: &DdoStore<T>) -> Result<()> {
        if !Arc::ptr_eq(store.space(), &self.space) && store.space().canonical_hash() != self.space.canonical_hash() {
            return Err(DeomError::Dimension("store and generator index spaces differ".into()));
        }
        if store.dim() != self.dim {
            return Err(DeomError::Dimension(format!(
                "store blocks are {}x{}, system is {}x{}",
                store.dim(),
                store.dim(),
                self.dim,
                self.dim
            )));
        }
        if store.scaling().flag() != self.scaling.flag() {
            return Err(DeomError::invalid("store and generator use different representations"));
        }
        Ok(())
    }

    /// Raise/lower coupling terms of one entry (everything except the drift).
    #[inline]
    pub(crate) fn coupling_terms(&self, i: usize, coeffs: &GeneratorCoefficients<T>, input: &[C<T>], out: &mut [C<T>]) {
        let d = self.dim;
        let b = d * d;
        let m = self.space.n_slots();
        let mi = C::new(T::zero(), -T::one());
        let left = mi * coeffs.left;
        let right = mi * coeffs.right;
        if coeffs.residual {
            let x = &input[i * b..(i + 1) * b];
            for (u, q2, delta) in &self.residual {
                // -δ (λ₋² Q²ρ - 2λ₋λ₊ QρQ + λ₊² ρQ²)
                let w = -cr(*delta);
                let (lm, lp) = (coeffs.left, coeffs.right);
                gemm_acc(d, w * lm * lm, q2, x, out);
                gemm_acc(d, w * lp * lp, x, q2, out);
                conj_acc(d, -w * lm * lp * T::lit(2.0), &self.q[*u], x, out);
            }
        }
        for s in 0..m {
            let u = s / self.n_poles;
            let k = s % self.n_poles;
            if let Some(j) = self.space.raise(i, s) {
                let c = self.raise_coef[i * m + s];
                let x = &input[j * b..(j + 1) * b];
                sandwich_acc(d, left * c, right * c, &self.q[u], x, out);
            }
            if let Some(j) = self.space.lower(i, s) {
                let c = self.lower_coef[i * m + s];
                let x = &input[j * b..(j + 1) * b];
                for v in 0..self.n_u {
                    let ef = self.eta_fwd[k][u * self.n_u + v];
                    let eb = self.eta_bwd[k][u * self.n_u + v];
                    sandwich_acc(d, left * ef * c, right * eb * c, &self.q[v], x, out);
                }
            }
        }
    }

    fn apply_entry(&self, i: usize, h: &[C<T>], coeffs: &GeneratorCoefficients<T>, input: &[C<T>], out: &mut [C<T>]) {
        let d = self.dim;
        let b = d * d;
        for z in out.iter_mut() {
            *z = C::zero();
        }
        let x = &input[i * b..(i + 1) * b];
        if coeffs.drift != C::zero() {
            let mi = C::new(T::zero(), -T::one()) * coeffs.drift;
            sandwich_acc(d, mi, mi, h, x, out);
            let g = -coeffs.drift * self.damping[i];
            for (o, &xv) in out.iter_mut().zip(x) {
                *o += g * xv;
            }
        }
        self.coupling_terms(i, coeffs, input, out);
    }

    /// Writes the time derivative of `input` into `out`.
    pub fn apply_into(
        &self,
        h_sys: &CMatrix<T>,
        coeffs: &GeneratorCoefficients<T>,
        input: &DdoStore<T>,
        out: &mut DdoStore<T>,
    ) -> Result<()> {
        self.check_store(input)?;
        self.check_store(out)?;
        if h_sys.dim() != self.dim {
            return Err(DeomError::Dimension("Hamiltonian dimension".into()));
        }
        self.apply_raw(h_sys.as_slice(), coeffs, input.as_slice(), out.as_mut_slice());
        Ok(())
    }

    pub(crate) fn apply_raw(&self, h: &[C<T>], coeffs: &GeneratorCoefficients<T>, input: &[C<T>], out: &mut [C<T>]) {
        let b = self.dim * self.dim;
        if self.space.len() >= PAR_THRESHOLD {
            out.par_chunks_mut(b)
                .enumerate()
                .for_each(|(i, o)| self.apply_entry(i, h, coeffs, input, o));
        } else {
            out.chunks_mut(b)
                .enumerate()
                .for_each(|(i, o)| self.apply_entry(i, h, coeffs, input, o));
        }
    }

    /// Returns the derivative store.
    pub fn apply(
        &self,
        h_sys: &CMatrix<T>,
        coeffs: &GeneratorCoefficients<T>,
        input: &DdoStore<T>,
    ) -> Result<DdoStore<T>> {
        let mut out = self.zero_store();
        self.apply_into(h_sys, coeffs, input, &mut out)?;
        Ok(out)
    }

    fn apply_adjoint_entry(
        &self,
        i: usize,
        h: &[C<T>],
        coeffs: &GeneratorCoefficients<T>,
        input: &[C<T>],
        out: &mut [C<T>],
    ) {
        let d = self.dim;
        let b = d * d;
        let m = self.space.n_slots();
        for z in out.iter_mut() {
            *z = C::zero();
        }
        let mi = C::new(T::zero(), -T::one());
        let x = &input[i * b..(i + 1) * b];
        if coeffs.drift != C::zero() {
            let c = mi * coeffs.drift;
            // A H^× = A H - H A
            sandwich_acc(d, -c, -c, h, x, out);
            let g = -coeffs.drift * self.damping[i];
            for (o, &xv) in out.iter_mut().zip(x) {
                *o += g * xv;
            }
        }
        let left = mi * coeffs.left;
        let right = mi * coeffs.right;
        if coeffs.residual {
            for (u, q2, delta) in &self.residual {
                // transpose of -δ (λ₋² Q²ρ - 2λ₋λ₊ QρQ + λ₊² ρQ²)
                let w = -cr(*delta);
                let (lm, lp) = (coeffs.left, coeffs.right);
                gemm_acc(d, w * lm * lm, x, q2, out);
                gemm_acc(d, w * lp * lp, q2, x, out);
                conj_acc(d, -w * lm * lp * T::lit(2.0), &self.q[*u], x, out);
            }
        }
        for s in 0..m {
            let u = s / self.n_poles;
            let k = s % self.n_poles;
            // forward raise term of entry j = i - s references i
            if let Some(j) = self.space.lower(i, s) {
                let c = self.raise_coef[j * m + s];
                let a = &input[j * b..(j + 1) * b];
                gemm_acc(d, left * c, a, &self.q[u], out);
                gemm_acc(d, -right * c, &self.q[u], a, out);
            }
            // forward lower term of entry j = i + s references i
            if let Some(j) = self.space.raise(i, s) {
                let c = self.lower_coef[j * m + s];
                let a = &input[j * b..(j + 1) * b];
                for v in 0..self.n_u {
                    let ef = self.eta_fwd[k][u * self.n_u + v];
                    let eb = self.eta_bwd[k][u * self.n_u + v];
                    gemm_acc(d, left * ef * c, a, &self.q[v], out);
                    gemm_acc(d, -right * eb * c, &self.q[v], a, out);
                }
            }
        }
    }

    /// Transpose action with respect to the pairing `Σ_n tr[A_n ρ_n]`:
    /// `Σ tr[(G†A)_n ρ_n] = Σ tr[A_n (Gρ)_n]`. Under a scaled generator the
    /// adjoint store uses the dual scaling (see [`DdoStore::pairing`]).
    pub fn apply_adjoint(
        &self,
        h_sys: &CMatrix<T>,
        coeffs: &GeneratorCoefficients<T>,
        input: &DdoStore<T>,
    ) -> Result<DdoStore<T>> {
        self.check_store(input)?;
        let mut out = self.zero_store();
        self.apply_adjoint_raw(h_sys.as_slice(), coeffs, input.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    pub(crate) fn apply_adjoint_raw(
        &self,
        h: &[C<T>],
        coeffs: &GeneratorCoefficients<T>,
        input: &[C<T>],
        out: &mut [C<T>],
    ) {
        let b = self.dim * self.dim;
        if self.space.len() >= PAR_THRESHOLD {
            out.par_chunks_mut(b)
                .enumerate()
                .for_each(|(i, o)| self.apply_adjoint_entry(i, h, coeffs, input, o));
        } else {
            out.chunks_mut(b)
                .enumerate()
                .for_each(|(i, o)| self.apply_adjoint_entry(i, h, coeffs, input, o));
        }
    }
}

/// Zeroes every entry above tier 0 whose largest element (as stored) is
/// below `tol`. Returns the number of entries removed.
pub fn apply_filter<T: Real>(store: &mut DdoStore<T>, tol: T) -> usize {
    if !(tol > T::zero()) {
        return 0;
    }
    let b = store.dim() * store.dim();
    let mut removed = 0;
    for chunk in store.as_mut_slice().chunks_mut(b).skip(1) {
        let m = crate::scalar::max_abs(chunk);
        if m < tol && m > T::zero() {
            chunk.iter_mut().for_each(|z| *z = C::zero());
            removed += 1;
        }
    }
    removed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_drude_matsubara, build_drude_pade, DrudeSpec};

    #[test]
    fn entry_counts() {
        assert_eq!(IndexSpace::enumerate(1, 1, 0).unwrap().len(), 1);
        assert_eq!(IndexSpace::enumerate(1, 2, 2).unwrap().len(), 6);
        assert_eq!(IndexSpace::enumerate(1, 6, 20).unwrap().len(), 230_230);
        assert_eq!(IndexSpace::enumerate(1, 0, 5).unwrap().len(), 1);
        assert_eq!(binomial(26, 20), 230_230);
    }

    #[test]
    fn budget_guard() {
        let r = IndexSpace::with_budget(10, 10, 1000);
        assert!(matches!(r, Err(DeomError::Budget { entries: 184_756, .. })));
    }

    #[test]
    fn graded_order_and_adjacency() {
        let sp = IndexSpace::enumerate(1, 3, 3).unwrap();
        let e = sp.entries();
        assert!(e
            .windows(2)
            .all(|w| (w[0].tier(), w[0].occ()) < (w[1].tier(), w[1].occ())));
        assert_eq!(e[0].tier(), 0);
        for i in 0..sp.len() {
            for s in 0..3 {
                if let Some(j) = sp.raise(i, s) {
                    assert_eq!(sp.lower(j, s), Some(i));
                    assert_eq!(e[j].tier(), e[i].tier() + 1);
                } else {
                    assert_eq!(e[i].tier(), 3);
                }
                if let Some(j) = sp.lower(i, s) {
                    assert_eq!(sp.raise(j, s), Some(i));
                } else {
                    assert_eq!(e[i].occ()[s], 0);
                }
            }
        }
    }

    #[test]
    fn hash_distinguishes_spaces() {
        let a = IndexSpace::enumerate(1, 2, 3).unwrap();
        let b = IndexSpace::enumerate(1, 3, 2).unwrap();
        let c = IndexSpace::enumerate(1, 2, 3).unwrap();
        assert_ne!(a.canonical_hash(), b.canonical_hash());
        assert_eq!(a.canonical_hash(), c.canonical_hash());
    }

    #[test]
    fn filter_limits() {
        let sys = SystemSpec::<f64>::spin_boson(0.5, 1.0);
        let modes = build_drude_pade(&DrudeSpec::new(0.5, 4.0).unwrap(), 0.5, 1).unwrap();
        let sp = Arc::new(IndexSpace::enumerate(1, modes.n_poles(), 2).unwrap());
        let g = Generator::new(sp.clone(), &sys, &modes, Scaling::Raw).unwrap();
        let rho = sys.thermal_state(0.5).unwrap();
        let mut st = DdoStore::from_reduced(sp, &rho, Scaling::Raw);
        for _ in 0..3 {
            let d = g.apply(sys.h_sys(), &GeneratorCoefficients::real_time(), &st).unwrap();
            st.axpy(C::new(0.1, 0.0), &d);
        }
        let before = st.clone();
        assert_eq!(apply_filter(&mut st, 0.0), 0);
        assert_eq!(st.max_diff(&before), 0.0);
        apply_filter(&mut st, f64::INFINITY);
        assert_eq!(st.entry(0), before.entry(0));
        assert!((1..st.len()).all(|i| st.entry(i).iter().all(|z| z.norm() == 0.0)));
    }

    fn sample_store(g: &Generator<f64>, seed: u64) -> DdoStore<f64> {
        let mut st = g.zero_store();
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        for z in st.as_mut_slice() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let a = ((x >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let b = ((x >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            *z = C::new(a, b);
        }
        st
    }

    fn setup(n_pade: usize, tier: usize, scaled: bool) -> (SystemSpec<f64>, ModeSet<f64>, Generator<f64>) {
        let sys = SystemSpec::<f64>::spin_boson(0.5, 1.0);
        let spec = DrudeSpec::new(0.5, 4.0).unwrap();
        let modes = if n_pade == 0 {
            build_drude_matsubara(&spec, 0.5, 0).unwrap()
        } else {
            build_drude_pade(&spec, 0.5, n_pade).unwrap()
        };
        let sp = Arc::new(IndexSpace::enumerate(1, modes.n_poles(), tier).unwrap());
        let scaling = if scaled {
            Scaling::Scaled(Arc::new(scaling_factors(&sp, &modes)))
        } else {
            Scaling::Raw
        };
        let g = Generator::new(sp, &sys, &modes, scaling).unwrap();
        (sys, modes, g)
    }

    fn mm(a: &CMatrix<f64>, b: &CMatrix<f64>) -> CMatrix<f64> {
        a * b
    }

    #[test]
    fn single_pole_tier_one_matches_hand_written_equations() {
        let (sys, modes, g) = setup(0, 1, false);
        let st = sample_store(&g, 3);
        let out = g.apply(sys.h_sys(), &GeneratorCoefficients::real_time(), &st).unwrap();
        let h = sys.h_sys();
        let q = &sys.q_modes()[0];
        let r0 = st.raw_entry(0);
        let r1 = st.raw_entry(1);
        let eta = modes.modes()[0].eta[0];
        let gam = modes.modes()[0].gamma;
        let mi = C::new(0.0, -1.0);
        let e0 = (&(&mm(h, &r0) - &mm(&r0, h)) + &(&mm(q, &r1) - &mm(&r1, q))).scale(mi);
        let e1 = &(&(&mm(h, &r1) - &mm(&r1, h)).scale(mi) - &r1.scale(gam))
            + &(&mm(q, &r0).scale(eta) - &mm(&r0, q).scale(eta.conj())).scale(mi);
        assert!((&out.raw_entry(0) - &e0).max_abs() < 1e-14);
        assert!((&out.raw_entry(1) - &e1).max_abs() < 1e-14);
    }

    #[test]
    fn trace_of_derivative_vanishes() {
        for scaled in [false, true] {
            let (sys, _, g) = setup(2, 3, scaled);
            let st = sample_store(&g, 7);
            let out = g.apply(sys.h_sys(), &GeneratorCoefficients::real_time(), &st).unwrap();
            assert!(out.trace0().norm() < 1e-15);
        }
    }

    #[test]
    fn scaled_and_raw_generators_agree() {
        let (sys, _, graw) = setup(2, 3, false);
        let (_, _, gsc) = setup(2, 3, true);
        let raw = sample_store(&graw, 11);
        let Scaling::Scaled(f) = gsc.scaling().clone() else {
            unreachable!()
        };
        let sc = raw.to_scaled(f);
        let c = GeneratorCoefficients::mixing(0.7, 1.3);
        let a = graw.apply(sys.h_sys(), &c, &raw).unwrap();
        let b = gsc.apply(sys.h_sys(), &c, &sc).unwrap();
        assert!(a.max_diff(&b) < 1e-12 * a.max_abs().max(1.0));
    }

    #[test]
    fn adjoint_is_the_transpose() {
        for scaled in [false, true] {
            let (sys, _, g) = setup(2, 3, scaled);
            let rho = sample_store(&g, 1);
            let a = sample_store(&g, 2);
            for c in [
                GeneratorCoefficients::real_time(),
                GeneratorCoefficients::mixing(0.3, 0.9),
                GeneratorCoefficients::imaginary_time(),
                GeneratorCoefficients {
                    drift: C::new(1.0, 0.0),
                    left: C::new(0.0, 0.0),
                    right: C::new(0.0, 0.0),
                    residual: true,
                },
                GeneratorCoefficients {
                    drift: C::new(0.0, 0.0),
                    left: C::new(1.0, 0.0),
                    right: C::new(0.0, 0.0),
                    residual: true,
                },
                GeneratorCoefficients {
                    drift: C::new(0.0, 0.0),
                    left: C::new(0.0, 0.0),
                    right: C::new(1.0, 0.0),
                    residual: true,
                },
            ] {
                let lhs = a.pairing(&g.apply(sys.h_sys(), &c, &rho).unwrap());
                let rhs = rho.pairing(&g.apply_adjoint(sys.h_sys(), &c, &a).unwrap());
                assert!(
                    (lhs - rhs).norm() < 1e-12 * lhs.norm().max(1.0),
                    "{scaled} {c:?} {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn markov_residual_is_trace_free_and_transposes() {
        use crate::model::build_drude_matsubara_corrected;
        let sys = SystemSpec::<f64>::spin_boson(0.5, 1.0);
        let modes = build_drude_matsubara_corrected(&DrudeSpec::new(0.5, 4.0).unwrap(), 0.5, 2).unwrap();
        assert!(modes.markov_residual(0) > 0.0);
        let sp = Arc::new(IndexSpace::enumerate(1, modes.n_poles(), 3).unwrap());
        let g = Generator::new(
            sp.clone(),
            &sys,
            &modes,
            Scaling::Scaled(Arc::new(scaling_factors(&sp, &modes))),
        )
        .unwrap();
        let plain = build_drude_matsubara(&DrudeSpec::new(0.5, 4.0).unwrap(), 0.5, 2).unwrap();
        let g0 = Generator::new(sp.clone(), &sys, &plain, g.scaling().clone()).unwrap();
        let rho = sample_store(&g, 21);
        let a = sample_store(&g, 22);
        for c in [
            GeneratorCoefficients::real_time(),
            GeneratorCoefficients::mixing(0.7, 0.7),
            GeneratorCoefficients::mixing(0.4, 1.1),
        ] {
            let out = g.apply(sys.h_sys(), &c, &rho).unwrap();
            if c.left == c.right {
                assert!(out.trace0().norm() < 1e-15);
            }
            assert!(out.max_diff(&g0.apply(sys.h_sys(), &c, &rho).unwrap()) > 1e-3);
            let lhs = a.pairing(&out);
            let rhs = rho.pairing(&g.apply_adjoint(sys.h_sys(), &c, &a).unwrap());
            assert!((lhs - rhs).norm() < 1e-12 * lhs.norm().max(1.0));
        }
        // the imaginary-time channel carries no residual
        let c = GeneratorCoefficients::imaginary_time();
        let d = g.apply(sys.h_sys(), &c, &rho).unwrap();
        assert_eq!(d.max_diff(&g0.apply(sys.h_sys(), &c, &rho).unwrap()), 0.0);
    }

    #[test]
    fn generator_preserves_hermitian_pairing() {
        let (sys, modes, g) = setup(2, 3, true);
        let rho = sys.thermal_state(0.5).unwrap();
        let mut st = DdoStore::from_reduced(g.space().clone(), &rho, g.scaling().clone());
        let c = GeneratorCoefficients::real_time();
        for _ in 0..5 {
            let d = g.apply(sys.h_sys(), &c, &st).unwrap();
            st.axpy(C::new(0.05, 0.0), &d);
        }
        assert!(st.max_abs() > 1e-3);
        assert!(st.pairing_defect(&modes) < 1e-14);
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        for scaled in [false, true] {
            let (_, _, g) = setup(1, 3, scaled);
            let st = sample_store(&g, 5);
            let mut buf = Vec::new();
            st.write_snapshot(&mut buf).unwrap();
            let back = DdoStore::<f64>::read_snapshot(&buf[..], Some(g.space().clone())).unwrap();
            assert_eq!(back.as_slice(), st.as_slice());
            assert_eq!(back.scaling().is_raw(), !scaled);
            let back = DdoStore::<f64>::read_snapshot(&buf[..], None).unwrap();
            assert_eq!(back.as_slice(), st.as_slice());
            assert!(DdoStore::<f32>::read_snapshot(&buf[..], None).is_err());
            let mut bad = buf.clone();
            bad[8 + 4 + 24] = 7;
            assert!(matches!(
                DdoStore::<f64>::read_snapshot(&bad[..], None),
                Err(DeomError::Snapshot(_))
            ));
            let other = Arc::new(IndexSpace::enumerate(1, 3, 2).unwrap());
            assert!(DdoStore::<f64>::read_snapshot(&buf[..], Some(other)).is_err());
            assert!(DdoStore::<f64>::read_snapshot(&buf[..buf.len() - 1], None).is_err());
        }
    }

    proptest::proptest! {
        #[test]
        fn generator_is_linear(seed_a in 0u64..1000, seed_b in 1000u64..2000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let (sys, _, g) = setup(1, 2, true);
            let x = sample_store(&g, seed_a);
            let y = sample_store(&g, seed_b);
            let c = GeneratorCoefficients::mixing(0.4, 1.1);
            let mut comb = x.clone();
            comb.scale_in_place(C::new(a, 0.0));
            comb.axpy(C::new(0.0, b), &y);
            let lhs = g.apply(sys.h_sys(), &c, &comb).unwrap();
            let mut rhs = g.apply(sys.h_sys(), &c, &x).unwrap();
            rhs.scale_in_place(C::new(a, 0.0));
            rhs.axpy(C::new(0.0, b), &g.apply(sys.h_sys(), &c, &y).unwrap());
            proptest::prop_assert!(lhs.max_diff(&rhs) < 1e-12 * (1.0 + lhs.max_abs()));
        }

        #[test]
        fn adjacency_round_trips(m in 1usize..5, l in 0usize..5) {
            let sp = IndexSpace::enumerate(1, m, l).unwrap();
            proptest::prop_assert_eq!(sp.len() as u128, binomial((m + l) as u64, l as u64));
            for i in 0..sp.len() {
                proptest::prop_assert_eq!(sp.index_of(sp.entries()[i].occ()), Some(i));
                for s in 0..m {
                    if let Some(j) = sp.raise(i, s) {
                        proptest::prop_assert_eq!(sp.lower(j, s), Some(i));
                    }
                }
            }
        }
    }
}
