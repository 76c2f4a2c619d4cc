//! Composite model: system operators, bath spectral density, and the
//! exponential (dissipaton) decomposition of the bath correlation function.
//!
//! Conventions: ħ = k_B = 1, energies in a user-chosen reference unit and
//! times in the inverse of that unit. The bath correlation is
//!
//! ```text
//! c(t) = (1/π) ∫ dω e^{-iωt} J(ω) / (1 - e^{-βω})  ≈  Σ_k η_k e^{-γ_k t}
//! ```
//!
//! and backward-path coefficients are read through the conjugate pole `k̄`
//! with `γ_k̄ = γ_k*`, so `η^<_k = η_k̄*`.

use std::fmt::Write as _;

use num_traits::Zero;
use serde::Serialize;

use crate::error::{DeomError, Result};
use crate::linalg::{symmetric_tridiagonal_eigenvalues, CMatrix};
use crate::quadrature::{integrate, integrate_semi_infinite, QuadConfig};
use crate::scalar::{cr, Real, C};

const HERMITIAN_TOL: f64 = 1e-12;

/// System Hamiltonian together with the dissipative system modes `Q_u`.
#[derive(Clone, Debug)]
pub struct SystemSpec<T: Real> {
    dim: usize,
    h_sys: CMatrix<T>,
    q_modes: Vec<CMatrix<T>>,
}

impl<T: Real> SystemSpec<T> {
    pub fn new(h_sys: CMatrix<T>, q_modes: Vec<CMatrix<T>>) -> Result<Self> {
        let dim = h_sys.dim();
        if dim == 0 {
            return Err(DeomError::invalid("system dimension must be positive"));
        }
        let tol = T::lit(HERMITIAN_TOL);
        if !h_sys.is_hermitian(tol) {
            return Err(DeomError::NotHermitian(format!(
                "system Hamiltonian (defect {:e})",
                h_sys.hermiticity_defect()
            )));
        }
        for (u, q) in q_modes.iter().enumerate() {
            if q.dim() != dim {
                return Err(DeomError::Dimension(format!(
                    "dissipative mode {u} is {}x{}, system is {dim}x{dim}",
                    q.dim(),
                    q.dim()
                )));
            }
            if !q.is_hermitian(tol) {
                return Err(DeomError::NotHermitian(format!(
                    "dissipative mode {u} (defect {:e})",
                    q.hermiticity_defect()
                )));
            }
        }
        Ok(Self { dim, h_sys, q_modes })
    }

    /// `H_S = ε σ_z + Δ σ_x`, `Q = σ_z`.
    pub fn spin_boson(epsilon: T, delta: T) -> Self {
        let z = T::zero();
        let h = CMatrix::from_vec(2, vec![cr(epsilon), cr(delta), cr(delta), cr(-epsilon)]).expect("2x2");
        let q = CMatrix::from_vec(2, vec![cr(T::one()), cr(z), cr(z), cr(-T::one())]).expect("2x2");
        Self::new(h, vec![q]).expect("spin-boson operators are Hermitian")
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn h_sys(&self) -> &CMatrix<T> {
        &self.h_sys
    }

    #[inline]
    pub fn q_modes(&self) -> &[CMatrix<T>] {
        &self.q_modes
    }

    pub fn n_modes(&self) -> usize {
        self.q_modes.len()
    }

    /// Difference between the largest and smallest eigenvalue of `H_S`.
    pub fn spectral_span(&self) -> Result<T> {
        let (vals, _) = self.h_sys.eigh()?;
        Ok(vals[vals.len() - 1] - vals[0])
    }

    /// `e^{-βH_S} / Z_S`.
    pub fn thermal_state(&self, beta: T) -> Result<CMatrix<T>> {
        let (vals, v) = self.h_sys.eigh()?;
        let e0 = vals[0];
        let w: Vec<T> = vals.iter().map(|&e| (-(e - e0) * beta).exp()).collect();
        let z: T = w.iter().copied().sum();
        let diag: Vec<C<T>> = w.iter().map(|&x| cr(x / z)).collect();
        Ok(&(&v * &CMatrix::from_diag(&diag)) * &v.dagger())
    }

    /// Same system with a different Hamiltonian (used by time-dependent drivers).
    pub fn with_hamiltonian(&self, h_sys: CMatrix<T>) -> Result<Self> {
        Self::new(h_sys, self.q_modes.clone())
    }
}

/// Bath spectral density `J(ω)`, odd on the real axis.
///
/// Quadrature rotates the frequency contour by ±π/4 into the complex plane,
/// so `eval` must be the analytic continuation of `J` and be free of poles in
/// the sectors `|arg ω| ≤ π/4`.
pub trait SpectralDensity<T: Real>: Sync {
    fn eval(&self, w: C<T>) -> C<T>;

    /// `J(ω)/ω` on the real axis, finite at ω = 0.
    fn j_over_omega(&self, w: T) -> T;

    /// A characteristic frequency used to scale integration variables.
    fn frequency_scale(&self) -> T;
}

/// Drude spectral density `J(ω) = ηγω / (ω² + γ²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DrudeSpec<T> {
    pub eta: T,
    pub gamma: T,
}

impl<T: Real> DrudeSpec<T> {
    pub fn new(eta: T, gamma: T) -> Result<Self> {
        if !(eta >= T::zero()) || !eta.is_finite() {
            return Err(DeomError::invalid(format!("Drude coupling must be >= 0, got {eta}")));
        }
        if !(gamma > T::zero()) || !gamma.is_finite() {
            return Err(DeomError::invalid(format!("Drude cutoff must be > 0, got {gamma}")));
        }
        Ok(Self { eta, gamma })
    }

    pub fn j(&self, w: T) -> T {
        self.eta * self.gamma * w / (w * w + self.gamma * self.gamma)
    }
}

impl<T: Real> SpectralDensity<T> for DrudeSpec<T> {
    fn eval(&self, w: C<T>) -> C<T> {
        w * (self.eta * self.gamma) / (w * w + self.gamma * self.gamma)
    }

    fn j_over_omega(&self, w: T) -> T {
        self.eta * self.gamma / (w * w + self.gamma * self.gamma)
    }

    fn frequency_scale(&self) -> T {
        self.gamma
    }
}

/// One exponential component of the bath correlation, shared by every
/// dissipative mode index `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct DissipatonMode<T: Real> {
    pub k: usize,
    pub gamma: C<T>,
    /// `η_{uvk}`, row-major over `(u, v)`.
    pub eta: Vec<C<T>>,
    pub conj_index: usize,
}

#[derive(Clone, Debug)]
pub struct ModeSet<T: Real> {
    beta: T,
    n_u: usize,
    modes: Vec<DissipatonMode<T>>,
    /// White-noise weight `δ_u` standing in for poles left out of the series.
    residual: Vec<T>,
}

/// Result of the conjugate-pairing checks on a [`ModeSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PairingReport {
    pub involution: bool,
    pub conjugate_rates: bool,
    pub self_pairing_iff_real: bool,
    pub positive_decay: bool,
}

impl PairingReport {
    pub fn ok(&self) -> bool {
        self.involution && self.conjugate_rates && self.self_pairing_iff_real && self.positive_decay
    }
}

impl<T: Real> ModeSet<T> {
    /// Builds a mode set; the conjugate pairing is validated.
    pub fn new(beta: T, n_u: usize, modes: Vec<DissipatonMode<T>>) -> Result<Self> {
        let set = Self::new_unchecked(beta, n_u, modes)?;
        let report = set.pairing_report();
        if !report.ok() {
            return Err(DeomError::invalid(format!("mode set fails pairing checks: {report:?}")));
        }
        Ok(set)
    }

    /// Builds a mode set without pairing validation (for diagnostics).
    pub fn new_unchecked(beta: T, n_u: usize, modes: Vec<DissipatonMode<T>>) -> Result<Self> {
        if !(beta > T::zero()) {
            return Err(DeomError::invalid(format!(
                "inverse temperature must be > 0, got {beta}"
            )));
        }
        for m in &modes {
            if m.eta.len() != n_u * n_u {
                return Err(DeomError::Dimension(format!(
                    "mode {} carries {} coefficients, expected {}",
                    m.k,
                    m.eta.len(),
                    n_u * n_u
                )));
            }
            if m.conj_index >= modes.len() {
                return Err(DeomError::invalid(format!(
                    "mode {} pairs with out-of-range index {}",
                    m.k, m.conj_index
                )));
            }
        }
        Ok(Self {
            beta,
            n_u,
            modes,
            residual: vec![T::zero(); n_u],
        })
    }

    /// A set with no modes (closed system).
    pub fn empty(beta: T, n_u: usize) -> Self {
        Self {
            beta,
            n_u,
            modes: Vec::new(),
            residual: vec![T::zero(); n_u],
        }
    }

    /// Attaches a Markovian residual: the omitted part of the correlation is
    /// modelled as `2 δ_u δ(t)`, which adds `-δ_u [Q_u, [Q_u, ·]]` to every
    /// real-time hierarchy entry.
    pub fn with_markov_residual(mut self, delta: Vec<T>) -> Result<Self> {
        if delta.len() != self.n_u || delta.iter().any(|d| !d.is_finite()) {
            return Err(DeomError::invalid(
                "Markovian residual needs one finite weight per mode u",
            ));
        }
        // a negative weight would act as anti-damping
        if delta.iter().any(|&d| d < T::zero()) {
            return Err(DeomError::invalid(
                "pole set overshoots the zero-frequency weight; Markovian residual would be negative (change the number of poles)",
            ));
        }
        self.residual = delta;
        Ok(self)
    }

    /// Markovian residual weight of dissipative mode `u` (zero by default).
    #[inline]
    pub fn markov_residual(&self, u: usize) -> T {
        self.residual[u]
    }

    #[inline]
    pub fn beta(&self) -> T {
        self.beta
    }

    #[inline]
    pub fn n_u(&self) -> usize {
        self.n_u
    }

    #[inline]
    pub fn n_poles(&self) -> usize {
        self.modes.len()
    }

    /// Number of hierarchy slots, one per `(u, k)`.
    #[inline]
    pub fn n_slots(&self) -> usize {
        self.n_u * self.modes.len()
    }

    #[inline]
    pub fn modes(&self) -> &[DissipatonMode<T>] {
        &self.modes
    }

    /// Slot index of `(u, k)`.
    #[inline]
    pub fn slot(&self, u: usize, k: usize) -> usize {
        u * self.modes.len() + k
    }

    /// `(u, k)` of a slot index.
    #[inline]
    pub fn slot_uk(&self, slot: usize) -> (usize, usize) {
        (slot / self.modes.len(), slot % self.modes.len())
    }

    #[inline]
    pub fn gamma(&self, k: usize) -> C<T> {
        self.modes[k].gamma
    }

    /// Forward coefficient `η^>_{uvk} = η_{uvk}`.
    #[inline]
    pub fn eta_fwd(&self, u: usize, v: usize, k: usize) -> C<T> {
        self.modes[k].eta[u * self.n_u + v]
    }

    /// Backward coefficient `η^<_{uvk} = η*_{uvk̄}`.
    #[inline]
    pub fn eta_bwd(&self, u: usize, v: usize, k: usize) -> C<T> {
        let kb = self.modes[k].conj_index;
        self.modes[kb].eta[u * self.n_u + v].conj()
    }

    /// Slot obtained by exchanging `k` with `k̄`.
    #[inline]
    pub fn conj_slot(&self, slot: usize) -> usize {
        let (u, k) = self.slot_uk(slot);
        self.slot(u, self.modes[k].conj_index)
    }

    /// `Σ_k η_{uvk} e^{-γ_k t}`.
    pub fn correlation(&self, u: usize, v: usize, t: T) -> C<T> {
        self.modes
            .iter()
            .map(|m| m.eta[u * self.n_u + v] * (-m.gamma * t).exp())
            .fold(C::zero(), |a, b| a + b)
    }

    pub fn pairing_report(&self) -> PairingReport {
        let tol = T::lit(1e-12);
        let n = self.modes.len();
        let mut r = PairingReport {
            involution: true,
            conjugate_rates: true,
            self_pairing_iff_real: true,
            positive_decay: true,
        };
        for (k, m) in self.modes.iter().enumerate() {
            let kb = m.conj_index;
            if kb >= n || self.modes[kb].conj_index != k {
                r.involution = false;
                continue;
            }
            let scale = m.gamma.norm().max(T::one());
            if (self.modes[kb].gamma - m.gamma.conj()).norm() > tol * scale {
                r.conjugate_rates = false;
            }
            let is_real = m.gamma.im.abs() <= tol * scale;
            if is_real != (kb == k) {
                r.self_pairing_iff_real = false;
            }
            if !(m.gamma.re > T::zero()) {
                r.positive_decay = false;
            }
        }
        r
    }

    /// Writes the mode table as CSV: `u,k,re_gamma,im_gamma,re_eta,im_eta,conj_k`,
    /// one row per `(u, k)` with the diagonal coefficient `η_{uuk}`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("# deom mode table v1\nu,k,re_gamma,im_gamma,re_eta,im_eta,conj_k\n");
        for u in 0..self.n_u {
            for (k, m) in self.modes.iter().enumerate() {
                let e = m.eta[u * self.n_u + u];
                let _ = writeln!(
                    s,
                    "{u},{k},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                    m.gamma.re, m.gamma.im, e.re, e.im, m.conj_index
                );
            }
        }
        s
    }

    /// Reads a single-dissipative-mode table written by [`ModeSet::to_csv`].
    pub fn from_csv(beta: T, text: &str) -> Result<Self> {
        let mut modes = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("u,") {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(DeomError::invalid(format!("mode table row has {} fields", f.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| DeomError::invalid(format!("bad number {s:?}: {e}")))
            };
            let int = |s: &str| -> Result<usize> {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| DeomError::invalid(format!("bad index {s:?}: {e}")))
            };
            if int(f[0])? != 0 {
                return Err(DeomError::invalid(
                    "mode table import supports a single dissipative mode",
                ));
            }
            let k = int(f[1])?;
            if k != modes.len() {
                return Err(DeomError::invalid("mode table rows must be in pole order"));
            }
            modes.push(DissipatonMode {
                k,
                gamma: C::new(T::lit(num(f[2])?), T::lit(num(f[3])?)),
                eta: vec![C::new(T::lit(num(f[4])?), T::lit(num(f[5])?))],
                conj_index: int(f[6])?,
            });
        }
        Self::new(beta, 1, modes)
    }
}

// ---------------------------------------------------------------------------
// Drude decompositions

fn drude_pole<T: Real>(spec: &DrudeSpec<T>, beta: T) -> Result<DissipatonMode<T>> {
    let half = T::lit(0.5);
    let x = beta * spec.gamma * half;
    let s = x.sin();
    if s.abs() < T::lit(1e-10) {
        return Err(DeomError::invalid(
            "Drude pole coincides with a Bose-function pole (βγ = 2πj)",
        ));
    }
    let cot = x.cos() / s;
    let pref = spec.eta * spec.gamma * half;
    Ok(DissipatonMode {
        k: 0,
        gamma: cr(spec.gamma),
        eta: vec![C::new(pref * cot, -pref)],
        conj_index: 0,
    })
}

/// Residue of a simple pole `ν = ξ/β` of the approximated Bose function with
/// weight `κ`.
fn bose_pole<T: Real>(spec: &DrudeSpec<T>, beta: T, k: usize, xi: T, kappa: T) -> Result<DissipatonMode<T>> {
    let nu = xi / beta;
    let g2 = spec.gamma * spec.gamma;
    if (nu * nu - g2).abs() < T::lit(1e-10) * g2 {
        return Err(DeomError::invalid(format!(
            "Bose pole {k} coincides with the Drude pole"
        )));
    }
    let two = T::lit(2.0);
    let eta = two * kappa * spec.eta * spec.gamma / beta * nu / (nu * nu - g2);
    Ok(DissipatonMode {
        k,
        gamma: cr(nu),
        eta: vec![cr(eta)],
        conj_index: k,
    })
}

/// Drude pole plus the first `n_matsubara` Matsubara poles `ν_j = 2πj/β`.
pub fn build_drude_matsubara<T: Real>(spec: &DrudeSpec<T>, beta: T, n_matsubara: usize) -> Result<ModeSet<T>> {
    if !(beta > T::zero()) {
        return Err(DeomError::invalid(format!(
            "inverse temperature must be > 0, got {beta}"
        )));
    }
    let mut modes = vec![drude_pole(spec, beta)?];
    for j in 1..=n_matsubara {
        let xi = T::lit(2.0) * T::PI() * T::lit(j as f64);
        modes.push(bose_pole(spec, beta, j, xi, T::one())?);
    }
    ModeSet::new(beta, 1, modes)
}

/// `Σ_{j>n} η_j/ν_j` over the Matsubara poles beyond the first `n`, using
/// `Σ_{j≥1} η_j/ν_j = (η/βγ)(1 - (βγ/2) cot(βγ/2))`.
pub fn drude_matsubara_tail<T: Real>(spec: &DrudeSpec<T>, beta: T, n_matsubara: usize) -> Result<T> {
    let x = beta * spec.gamma * T::lit(0.5);
    if x.sin().abs() < T::lit(1e-10) {
        return Err(DeomError::invalid(
            "Drude pole coincides with a Bose-function pole (βγ = 2πj)",
        ));
    }
    let total = spec.eta / (beta * spec.gamma) * (T::one() - x * x.cos() / x.sin());
    let mut partial = T::zero();
    for j in 1..=n_matsubara {
        let nu = T::lit(2.0) * T::PI() * T::lit(j as f64) / beta;
        partial += T::lit(2.0) * spec.eta * spec.gamma / beta / (nu * nu - spec.gamma * spec.gamma);
    }
    Ok(total - partial)
}

/// Matsubara series with the omitted poles folded into a Markovian residual.
pub fn build_drude_matsubara_corrected<T: Real>(
    spec: &DrudeSpec<T>,
    beta: T,
    n_matsubara: usize,
) -> Result<ModeSet<T>> {
    let tail = drude_matsubara_tail(spec, beta, n_matsubara)?;
    build_drude_matsubara(spec, beta, n_matsubara)?.with_markov_residual(vec![tail])
}

/// `∫₀^∞ Re c(t) dt - Σ_k Re(η_k/γ_k)` for a Drude bath, i.e. the
/// zero-frequency weight the pole set misses. The exact integral is `η/(βγ)`.
pub fn drude_markov_residual<T: Real>(spec: &DrudeSpec<T>, modes: &ModeSet<T>) -> T {
    let kept = modes
        .modes()
        .iter()
        .fold(T::zero(), |acc, m| acc + (m.eta[0] / m.gamma).re);
    spec.eta / (modes.beta() * spec.gamma) - kept
}

/// Padé decomposition with the residual zero-frequency weight treated as a
/// white-noise term.
pub fn build_drude_pade_corrected<T: Real>(spec: &DrudeSpec<T>, beta: T, n_pade: usize) -> Result<ModeSet<T>> {
    let set = build_drude_pade(spec, beta, n_pade)?;
    let delta = drude_markov_residual(spec, &set);
    set.with_markov_residual(vec![delta])
}

/// Poles `ξ_j` and weights `κ_j` of the `[N-1/N]` Padé approximant
/// `1/(1-e^{-x}) ≈ 1/x + 1/2 + Σ_j 2κ_j x / (x² + ξ_j²)`.
pub fn pade_poles<T: Real>(n: usize) -> Result<(Vec<T>, Vec<T>)> {
    if n == 0 {
        return Err(DeomError::invalid("Padé order must be >= 1"));
    }
    let poles_of = |size: usize, offset: f64| -> Result<Vec<T>> {
        let off: Vec<T> = (0..size - 1)
            .map(|k| {
                let k = k as f64;
                T::one() / T::lit(((2.0 * k + offset) * (2.0 * k + offset + 2.0)).sqrt())
            })
            .collect();
        let ev = symmetric_tridiagonal_eigenvalues(&off)?;
        Ok(ev.into_iter().take(size / 2).map(|v| -T::lit(2.0) / v).collect())
    };
    let mut xi = poles_of(2 * n, 3.0)?;
    let mut zeta = if n > 1 { poles_of(2 * n - 1, 5.0)? } else { Vec::new() };
    xi.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    zeta.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    zeta.truncate(n.saturating_sub(1));

    // the eigenproblem is well posed only while every pole is finite,
    // positive and separated from its neighbours
    let degenerate = |v: &[T]| {
        v.iter().any(|x| !x.is_finite() || *x <= T::zero())
            || v.windows(2).any(|w| (w[1] - w[0]) <= T::lit(1e3) * T::epsilon() * w[1])
    };
    if xi.len() != n || degenerate(&xi) || degenerate(&zeta) {
        return Err(DeomError::Singular(format!(
            "degenerate Padé eigenproblem at order {n}; reduce the order for this precision"
        )));
    }

    let nn = T::lit(n as f64);
    let pref = T::lit(0.5) * nn * (T::lit(2.0) * nn + T::lit(3.0));
    let mut kappa = Vec::with_capacity(n);
    for j in 0..n {
        let xj2 = xi[j] * xi[j];
        let mut term = pref;
        for k in 0..n - 1 {
            let num = zeta[k] * zeta[k] - xj2;
            let den = if k == j { T::one() } else { xi[k] * xi[k] - xj2 };
            term = term * num / den;
        }
        let den = if j == n - 1 {
            T::one()
        } else {
            xi[n - 1] * xi[n - 1] - xj2
        };
        term /= den;
        if !term.is_finite() || term <= T::zero() {
            return Err(DeomError::Singular(format!(
                "non-positive Padé weight {term:e} at order {n}"
            )));
        }
        kappa.push(term);
    }
    Ok((xi, kappa))
}

/// Drude pole plus `n_pade` poles of the `[N-1/N]` Padé Bose approximant.
/// The Drude residue keeps the exact Bose factor.
pub fn build_drude_pade<T: Real>(spec: &DrudeSpec<T>, beta: T, n_pade: usize) -> Result<ModeSet<T>> {
    if !(beta > T::zero()) {
        return Err(DeomError::invalid(format!(
            "inverse temperature must be > 0, got {beta}"
        )));
    }
    let (xi, kappa) = pade_poles::<T>(n_pade)?;
    let mut modes = vec![drude_pole(spec, beta)?];
    for (j, (&x, &kap)) in xi.iter().zip(&kappa).enumerate() {
        modes.push(bose_pole(spec, beta, j + 1, x, kap)?);
    }
    ModeSet::new(beta, 1, modes)
}

/// Smallest Padé order in `1..=max_order` whose reconstruction meets
/// `tol` over `(0, t_max]`.
pub fn build_drude_pade_adaptive<T: Real>(
    spec: &DrudeSpec<T>,
    beta: T,
    tol: T,
    t_max: T,
    n_samples: usize,
    max_order: usize,
) -> Result<(ModeSet<T>, ValidationReport)> {
    let oracle = QuadratureOracle::new(*spec, beta);
    let reference = sample_oracle(&oracle, t_max, n_samples)?;
    let mut last = None;
    for n in 1..=max_order {
        let set = build_drude_pade(spec, beta, n)?;
        let report = validate_against(&set, &reference);
        if report.max_rel_error < tol.to_f64().unwrap_or(f64::INFINITY) {
            return Ok((set, report));
        }
        last = Some(report.max_rel_error);
    }
    Err(DeomError::NoConvergence {
        what: "adaptive Padé decomposition".into(),
        detail: format!("order {max_order} reached with error {:e}", last.unwrap_or(f64::NAN)),
    })
}

// ---------------------------------------------------------------------------
// quadrature oracle

fn quad_cfg<T: Real>() -> QuadConfig<T> {
    QuadConfig {
        abs_tol: T::lit(1e-15),
        rel_tol: T::lit(1e-12),
        max_intervals: 40_000,
    }
}

/// Thermal part `(2/π) ∫_0^∞ J(ω) cos(ωt) / (e^{βω} - 1) dω`, cut off where
/// the envelope falls below 1e-14 of its ω→0 value.
fn thermal_part<T: Real, J: SpectralDensity<T> + ?Sized>(j: &J, beta: T, t: T) -> Result<T> {
    let envelope = |w: T| -> T {
        let x = beta * w;
        let bx = if x == T::zero() { T::one() } else { x / x.exp_m1() };
        j.j_over_omega(w) * bx / beta
    };
    let peak = envelope(T::zero()).abs().max(T::min_positive_value());
    let mut cutoff = T::one() / beta;
    let floor = T::lit(1e-14) * peak;
    let mut iter = 0;
    while envelope(cutoff).abs() > floor || cutoff < T::lit(4.0) * j.frequency_scale() {
        cutoff *= T::lit(1.5);
        iter += 1;
        if iter > 400 {
            return Err(DeomError::NoConvergence {
                what: "thermal correlation quadrature".into(),
                detail: "integrand envelope does not decay".into(),
            });
        }
    }
    let r = integrate(|w: T| cr(envelope(w) * (w * t).cos()), T::zero(), cutoff, &quad_cfg())?;
    Ok(r.value.re * T::lit(2.0) / T::PI())
}

/// `(1/π) ∫_0^∞ J(ω) e^{-iσωt} dω` for `t > 0`, with the contour rotated onto
/// the ray `ω = r e^{-iσπ/4}` where the integrand decays exponentially.
fn vacuum_part<T: Real, J: SpectralDensity<T> + ?Sized>(j: &J, t: T, sigma: T) -> Result<C<T>> {
    let theta = T::FRAC_PI_4() * sigma;
    let dir = C::new(theta.cos(), -theta.sin());
    let decay = t * T::FRAC_PI_4().sin();
    let r = integrate_semi_infinite(
        |r: T| {
            let w = dir * r;
            j.eval(w) * (-C::<T>::i() * w * (t * sigma)).exp() * dir
        },
        T::zero(),
        T::one() / decay,
        &quad_cfg(),
    )?;
    Ok(r.value / T::PI())
}

/// Bath correlation `c(t) = ⟨F(t)F(0)⟩` by quadrature over the spectral
/// density. Independent of any pole decomposition.
///
/// At `t = 0` the value exists only when `J` decays faster than `1/ω`; for a
/// Drude density `Re c(0)` diverges logarithmically and an error is returned.
pub fn bath_correlation_quadrature<T: Real, J: SpectralDensity<T> + ?Sized>(j: &J, beta: T, t: T) -> Result<C<T>> {
    if !(beta > T::zero()) {
        return Err(DeomError::invalid("inverse temperature must be > 0"));
    }
    if t < T::zero() {
        return Err(DeomError::invalid("bath_correlation_quadrature requires t >= 0"));
    }
    let th = thermal_part(j, beta, t)?;
    let vac = if t > T::zero() {
        vacuum_part(j, t, T::one())?
    } else {
        let s = j.frequency_scale();
        let big = s * T::lit(1e6);
        let mid = s * T::lit(1e3);
        let tail_big = (j.eval(cr(big)).re * big).abs();
        let tail_mid = (j.eval(cr(mid)).re * mid).abs();
        if tail_big > T::lit(0.5) * tail_mid {
            return Err(DeomError::NoConvergence {
                what: "bath correlation at t = 0".into(),
                detail: "spectral density decays as 1/ω; c(0) diverges".into(),
            });
        }
        let r = integrate_semi_infinite(|w: T| j.eval(cr(w)), T::zero(), s, &quad_cfg())?;
        r.value / T::PI()
    };
    Ok(cr(th) + vac)
}

/// `⟨F(0)F(t)⟩ = c(-t)` evaluated on the mirrored contour; equals `c(t)*`
/// when the quadrature is consistent with time-reversal symmetry.
pub fn bath_correlation_reversed<T: Real, J: SpectralDensity<T> + ?Sized>(j: &J, beta: T, t: T) -> Result<C<T>> {
    if !(t > T::zero()) {
        return Err(DeomError::invalid("reversed correlation requires t > 0"));
    }
    Ok(cr(thermal_part(j, beta, t)?) + vacuum_part(j, t, -T::one())?)
}

/// `θ = ∫_0^∞ φ(t) dt = (2/π) ∫_0^∞ J(ω)/ω dω`, the static response of the bath
/// force to the dissipative mode.
pub fn static_response<T: Real, J: SpectralDensity<T> + ?Sized>(j: &J) -> Result<T> {
    let r = integrate_semi_infinite(
        |w: T| cr(j.j_over_omega(w)),
        T::zero(),
        j.frequency_scale(),
        &quad_cfg(),
    )?;
    Ok(r.value.re * T::lit(2.0) / T::PI())
}

/// `∫_0^t dτ (t-τ) Re c(τ) = (1/π) ∫_0^∞ J(ω) coth(βω/2) (1 - cos ωt)/ω² dω`.
pub fn dephasing_exponent<T: Real, J: SpectralDensity<T> + ?Sized>(j: &J, beta: T, t: T) -> Result<T> {
    if t == T::zero() {
        return Ok(T::zero());
    }
    let two = T::lit(2.0);
    // J(ω) coth(βω/2) / ω² for ω > 0
    let h = |w: T| -> T {
        let x = beta * w / two;
        j.j_over_omega(w) * (two / beta) * (x / x.tanh()) / (w * w)
    };
    let integrand = |w: T| -> C<T> {
        let s = (w * t / two).sin();
        if w == T::zero() {
            return cr(j.j_over_omega(w) * (two / beta) * t * t / two);
        }
        cr(h(w) * two * s * s)
    };
    // Mapping the oscillating integrand onto a finite interval piles its
    // oscillations up against the endpoint. Integrate it directly up to a
    // cutoff and split the tail into the smooth ∫h minus ∫h cos(ωt), the
    // latter from two integrations by parts.
    let scale = j.frequency_scale().max(T::one() / beta);
    let cut = (T::lit(200.0) * scale).max(T::lit(400.0) / t.abs());
    let head = integrate(integrand, T::zero(), cut, &quad_cfg())?.value.re;
    let smooth = integrate_semi_infinite(|w: T| cr(h(w)), cut, cut, &quad_cfg())?
        .value
        .re;
    let dw = cut * T::lit(1e-4);
    let dh = (h(cut + dw) - h(cut - dw)) / (two * dw);
    let (s, c) = (cut * t).sin_cos();
    let osc = -h(cut) * s / t - dh * c / (t * t);
    Ok((head + smooth - osc) / T::PI())
}

/// A reference correlation function to validate decompositions against.
pub trait CorrelationOracle<T: Real> {
    fn correlation(&self, t: T) -> Result<C<T>>;
}

/// Quadrature over a spectral density at fixed inverse temperature.
pub struct QuadratureOracle<T, J> {
    pub density: J,
    pub beta: T,
}

impl<T: Real, J: SpectralDensity<T>> QuadratureOracle<T, J> {
    pub fn new(density: J, beta: T) -> Self {
        Self { density, beta }
    }
}

impl<T: Real, J: SpectralDensity<T>> CorrelationOracle<T> for QuadratureOracle<T, J> {
    fn correlation(&self, t: T) -> Result<C<T>> {
        bath_correlation_quadrature(&self.density, self.beta, t)
    }
}

impl<T: Real, F: Fn(T) -> C<T>> CorrelationOracle<T> for F {
    fn correlation(&self, t: T) -> Result<C<T>> {
        Ok(self(t))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    /// `max_i |c_N(t_i) - c(t_i)| / max_i |c(t_i)|` over the sample grid.
    pub max_rel_error: f64,
    /// Largest pointwise error relative to the local magnitude.
    pub max_pointwise_rel_error: f64,
    pub worst_time: f64,
    pub t_max: f64,
    pub n_samples: usize,
    pub pairing: PairingReport,
}

fn sample_oracle<T: Real, O: CorrelationOracle<T> + ?Sized>(
    oracle: &O,
    t_max: T,
    n_samples: usize,
) -> Result<Vec<(T, C<T>)>> {
    if n_samples == 0 || !(t_max > T::zero()) {
        return Err(DeomError::invalid("validation needs t_max > 0 and at least one sample"));
    }
    (1..=n_samples)
        .map(|i| {
            let t = t_max * T::lit(i as f64) / T::lit(n_samples as f64);
            Ok((t, oracle.correlation(t)?))
        })
        .collect()
}

fn validate_against<T: Real>(m: &ModeSet<T>, reference: &[(T, C<T>)]) -> ValidationReport {
    let peak = reference.iter().fold(T::zero(), |a, (_, c)| a.max(c.norm()));
    let mut worst = (T::zero(), T::zero());
    let mut worst_local = T::zero();
    for &(t, c) in reference {
        let err = (m.correlation(0, 0, t) - c).norm();
        if err > worst.0 {
            worst = (err, t);
        }
        if c.norm() > T::zero() {
            worst_local = worst_local.max(err / c.norm());
        } else if err > T::zero() {
            worst_local = T::infinity();
        }
    }
    let rel = if peak > T::zero() { worst.0 / peak } else { worst.0 };
    ValidationReport {
        max_rel_error: rel.to_f64().unwrap_or(f64::NAN),
        max_pointwise_rel_error: worst_local.to_f64().unwrap_or(f64::NAN),
        worst_time: worst.1.to_f64().unwrap_or(f64::NAN),
        t_max: reference
            .last()
            .map(|r| r.0.to_f64().unwrap_or(f64::NAN))
            .unwrap_or(0.0),
        n_samples: reference.len(),
        pairing: m.pairing_report(),
    }
}

/// Compares `Σ_k η_k e^{-γ_k t}` against the oracle on `t_i = i·t_max/n`,
/// `i = 1..=n`. The grid omits `t = 0`, where a Drude correlation diverges.
pub fn validate_modeset<T: Real, O: CorrelationOracle<T> + ?Sized>(
    m: &ModeSet<T>,
    oracle: &O,
    t_max: T,
    n_samples: usize,
) -> Result<ValidationReport> {
    let reference = sample_oracle(oracle, t_max, n_samples)?;
    Ok(validate_against(m, &reference))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig_bath() -> DrudeSpec<f64> {
        DrudeSpec::new(0.5, 4.0).unwrap()
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(DrudeSpec::new(-1.0, 1.0).is_err());
        assert!(DrudeSpec::new(1.0, 0.0).is_err());
        assert!(build_drude_matsubara(&fig_bath(), 0.0, 2).is_err());
        assert!(build_drude_matsubara(&fig_bath(), -1.0, 2).is_err());
        assert!(build_drude_pade(&fig_bath(), 1.0, 0).is_err());
        let h = CMatrix::<f64>::from_real_rows(&[&[0.0, 1.0], &[0.5, 0.0]]);
        assert!(matches!(SystemSpec::new(h, vec![]), Err(DeomError::NotHermitian(_))));
        let q3 = CMatrix::<f64>::identity(3);
        assert!(matches!(
            SystemSpec::new(CMatrix::identity(2), vec![q3]),
            Err(DeomError::Dimension(_))
        ));
    }

    #[test]
    fn zero_coupling_gives_zero_residues() {
        let spec = DrudeSpec::new(0.0, 4.0).unwrap();
        for set in [
            build_drude_matsubara(&spec, 0.7, 5).unwrap(),
            build_drude_pade(&spec, 0.7, 4).unwrap(),
        ] {
            assert!(set
                .modes()
                .iter()
                .all(|m| m.eta[0] == C::new(0.0, 0.0) || m.eta[0].norm() == 0.0));
        }
    }

    #[test]
    fn drude_residue_matches_closed_form() {
        let set = build_drude_matsubara(&fig_bath(), 0.5, 0).unwrap();
        assert_eq!(set.n_poles(), 1);
        let m = &set.modes()[0];
        assert_eq!(m.gamma, C::new(4.0, 0.0));
        let cot = 1.0 / (0.5f64 * 4.0 / 2.0).tan();
        assert!((m.eta[0] - C::new(cot, -1.0)).norm() < 1e-14);
        assert_eq!(m.conj_index, 0);
    }

    #[test]
    fn residues_agree_with_quadrature_away_from_zero() {
        // 20 Matsubara terms leave a tail of order e^{-21·2π/β·t}
        let spec = fig_bath();
        let beta = 0.5;
        let set = build_drude_matsubara(&spec, beta, 20).unwrap();
        for t in [0.5, 1.0, 3.0] {
            let q = bath_correlation_quadrature(&spec, beta, t).unwrap();
            let rec = set.correlation(0, 0, t);
            assert!((q - rec).norm() < 1e-12, "t={t}: {q} vs {rec}");
        }
    }

    #[test]
    fn imaginary_part_is_temperature_independent() {
        // Im c(t) = -(1/π)∫ J sin ωt dω = -(ηγ/2) e^{-γt}
        let spec = fig_bath();
        for beta in [0.5, 3.0] {
            for t in [0.01, 0.3, 2.0] {
                let c = bath_correlation_quadrature(&spec, beta, t).unwrap();
                let exact = -0.5 * 0.5 * 4.0 * (-4.0 * t).exp();
                assert!((c.im - exact).abs() < 1e-11, "beta={beta} t={t}: {} vs {exact}", c.im);
            }
        }
    }

    #[test]
    fn quadrature_zero_coupling_and_time_reversal() {
        let zero = DrudeSpec::new(0.0, 4.0).unwrap();
        assert_eq!(bath_correlation_quadrature(&zero, 0.5, 0.3).unwrap().norm(), 0.0);
        let spec = fig_bath();
        for t in [0.05, 0.5, 1.7, 4.0] {
            let fwd = bath_correlation_quadrature(&spec, 0.5, t).unwrap();
            let rev = bath_correlation_reversed(&spec, 0.5, t).unwrap();
            assert!((fwd.conj() - rev).norm() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn drude_correlation_diverges_at_zero() {
        let r = bath_correlation_quadrature(&fig_bath(), 0.5, 0.0);
        assert!(matches!(r, Err(DeomError::NoConvergence { .. })));
    }

    #[test]
    fn dephasing_exponent_matches_reference_values() {
        // high-precision quadrature of the same integral
        let spec = DrudeSpec::new(0.5, 4.0).unwrap();
        let cases: [(f64, f64, f64); 8] = [
            (0.5, 0.05, 0.0024800217419210663),
            (0.5, 0.5, 0.08499271839145636),
            (0.5, 3.0, 0.7045534742489927),
            (0.5, 20.0, 4.954553227676906),
            (2.0, 0.05, 0.0020622189497599621),
            (2.0, 0.5, 0.04821701879667225),
            (2.0, 3.0, 0.2181266430151049),
            (2.0, 20.0, 1.2806346916157334),
        ];
        for (beta, t, g) in cases {
            let q = dephasing_exponent(&spec, beta, t).unwrap();
            assert!((q - g).abs() < 1e-8 * g, "β {beta} t {t}: {q} vs {g}");
        }
        assert_eq!(dephasing_exponent(&spec, 0.5, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn matsubara_tail_matches_direct_sum() {
        let spec = fig_bath();
        let beta = 0.5f64;
        let term = |j: usize| {
            let nu = 2.0 * std::f64::consts::PI * j as f64 / beta;
            2.0 * 0.5 * 4.0 / beta / (nu * nu - 16.0)
        };
        let big = 200_000;
        for n in [0usize, 1, 4, 10] {
            let direct: f64 = (n + 1..=big).map(term).sum::<f64>()
                + 2.0 * 0.5 * 4.0 * beta / (4.0 * std::f64::consts::PI.powi(2)) / (big as f64 + 0.5);
            let tail = drude_matsubara_tail(&spec, beta, n).unwrap();
            assert!((tail - direct).abs() < 1e-12, "n={n}: {tail} vs {direct}");
        }
        for n in [0usize, 3, 9] {
            let m = build_drude_matsubara(&spec, beta, n).unwrap();
            let general = drude_markov_residual(&spec, &m);
            assert!((general - drude_matsubara_tail(&spec, beta, n).unwrap()).abs() < 1e-14);
        }
        // too few Padé poles at low temperature overshoot the weight
        assert!(build_drude_pade_corrected(&spec, 1.0 / 0.3, 1).is_err());
        let set = build_drude_matsubara_corrected(&spec, beta, 3).unwrap();
        assert_eq!(set.markov_residual(0), drude_matsubara_tail(&spec, beta, 3).unwrap());
        assert_eq!(build_drude_matsubara(&spec, beta, 3).unwrap().markov_residual(0), 0.0);
    }

    #[test]
    fn static_response_of_drude_is_eta() {
        let th = static_response(&fig_bath()).unwrap();
        assert!((th - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pade_first_pole_is_near_first_matsubara() {
        let (xi, kappa) = pade_poles::<f64>(6).unwrap();
        assert!((xi[0] - 2.0 * std::f64::consts::PI).abs() < 1e-8);
        assert!((kappa[0] - 1.0).abs() < 1e-8);
        assert!(xi.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn pade_approximant_reproduces_bose_function() {
        let n = 5;
        let (xi, kappa) = pade_poles::<f64>(n).unwrap();
        for x in [0.1f64, 1.0, 3.0, 7.0] {
            let approx = 1.0 / x
                + 0.5
                + xi.iter()
                    .zip(&kappa)
                    .map(|(&p, &k)| 2.0 * k * x / (x * x + p * p))
                    .sum::<f64>();
            let exact = 1.0 / (1.0 - (-x).exp());
            assert!((approx - exact).abs() < 1e-6, "x={x}: {approx} vs {exact}");
        }
    }

    #[test]
    fn pairing_report_flags_corruption() {
        let set = build_drude_pade(&fig_bath(), 0.5, 3).unwrap();
        assert!(set.pairing_report().ok());
        let mut modes = set.modes().to_vec();
        modes[1].conj_index = 2;
        let bad = ModeSet::new_unchecked(0.5, 1, modes.clone()).unwrap();
        assert!(!bad.pairing_report().involution);
        assert!(ModeSet::new(0.5, 1, modes).is_err());
    }

    #[test]
    fn mode_table_round_trip() {
        let set = build_drude_pade(&fig_bath(), 0.5, 3).unwrap();
        let csv = set.to_csv();
        let back = ModeSet::from_csv(0.5, &csv).unwrap();
        assert_eq!(back.modes(), set.modes());
    }

    #[test]
    fn single_exponential_toy_is_exact() {
        let set = ModeSet::new(
            1.0,
            1,
            vec![DissipatonMode {
                k: 0,
                gamma: C::new(1.3, 0.0),
                eta: vec![C::new(0.4, -0.2)],
                conj_index: 0,
            }],
        )
        .unwrap();
        let toy = |t: f64| C::new(0.4, -0.2) * (-1.3 * t).exp();
        let r = validate_modeset(&set, &toy, 5.0, 100).unwrap();
        assert!(r.max_rel_error < 1e-15);
        assert!(r.pairing.ok());
    }

    proptest::proptest! {
        #[test]
        fn decompositions_pair_and_keep_zero_frequency_weight(
            eta in 0.05f64..2.0,
            gamma in 0.5f64..10.0,
            temp in 0.2f64..5.0,
            n in 0usize..8,
        ) {
            let spec = DrudeSpec::new(eta, gamma).unwrap();
            let beta = 1.0 / temp;
            let bare = build_drude_matsubara(&spec, beta, n).unwrap();
            proptest::prop_assert!(bare.pairing_report().ok());
            let m = match build_drude_matsubara_corrected(&spec, beta, n) {
                Ok(m) => m,
                // omitted poles below γ carry negative weight
                Err(_) => {
                    proptest::prop_assert!(drude_markov_residual(&spec, &bare) < 0.0);
                    return Ok(());
                }
            };
            let kept: f64 = m.modes().iter().map(|k| (k.eta[0] / k.gamma).re).sum();
            let total = eta / (beta * gamma);
            proptest::prop_assert!((kept + m.markov_residual(0) - total).abs() < 1e-10 * total);
            let p = build_drude_pade(&spec, beta, n + 1).unwrap();
            proptest::prop_assert!(p.pairing_report().ok());
            // the backward coefficients reproduce c(t)*
            let t = 0.37;
            let c = p.correlation(0, 0, t);
            let cb = (0..p.n_poles()).fold(C::new(0.0, 0.0), |acc, k| acc + p.eta_bwd(0, 0, k) * (-p.gamma(k) * t).exp());
            proptest::prop_assert!((c.conj() - cb).norm() < 1e-10 * (1.0 + c.norm()));
        }
    }
}
