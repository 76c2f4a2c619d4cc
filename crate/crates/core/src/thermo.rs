//! Equilibrium and nonequilibrium thermodynamics of system–bath mixing:
//! imaginary-time hierarchies, λ-integration for the hybridization free
//! energy and work statistics of λ(t)-driven mixing.

use std::borrow::Cow;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{integrate, Drive, Picture, PropagateConfig};
use crate::error::{DeomError, Result};
use crate::hierarchy::{DdoStore, Generator, GeneratorCoefficients};
use crate::linalg::CMatrix;
use crate::model::SystemSpec;
use crate::scalar::{Real, C};
use crate::steady::{sci_iterate, SciConfig};

// ---------------------------------------------------------------------------
// imaginary time

#[derive(Clone, Debug)]
pub struct ImagResult<T: Real> {
    /// Unnormalized hierarchy at `τ = β`.
    pub final_store: DdoStore<T>,
    /// `|tr ϱ_0(β)|`.
    pub z_hyb: T,
    /// Phase of `tr ϱ_0(β)`; zero for an exact bath, small for a truncated one.
    pub z_phase: T,
    /// `-ln(z_hyb)/β`.
    pub a_hyb: T,
    pub steps: usize,
}

impl<T: Real> ImagResult<T> {
    /// Final hierarchy divided by its tier-0 trace.
    pub fn normalized(&self) -> Result<DdoStore<T>> {
        let mut s = self.final_store.clone();
        s.normalize()?;
        Ok(s)
    }
}

/// Integrates the imaginary-time hierarchy from the system Gibbs state to
/// `τ = β` with fixed RK4 steps of at most `d_tau` (the last step lands on β).
pub fn ideom_propagate<T: Real>(
    gen: &Generator<T>,
    system: &SystemSpec<T>,
    beta: T,
    d_tau: T,
) -> Result<ImagResult<T>> {
    if !(beta > T::zero()) || !beta.is_finite() {
        return Err(DeomError::invalid(format!(
            "inverse temperature must be > 0, got {beta}"
        )));
    }
    if !(d_tau > T::zero()) {
        return Err(DeomError::invalid(format!(
            "imaginary-time step must be > 0, got {d_tau}"
        )));
    }
    let rho = system.thermal_state(beta)?;
    let mut store = DdoStore::from_reduced(gen.space().clone(), &rho, gen.scaling().clone());
    let n = (beta / d_tau).ceil().to_usize().unwrap_or(1).max(1);
    let cfg = PropagateConfig {
        t_final: beta,
        dt: beta / T::lit(n as f64),
        filter_tol: T::zero(),
        divergence_bound: T::lit(1e8),
        sample_stride: n,
    };
    let drive = crate::dynamics::ScaledDrive {
        h_sys: system.h_sys(),
        coefficients: GeneratorCoefficients::imaginary_time(),
    };
    integrate(
        gen,
        &drive,
        Picture::Schrodinger,
        &mut store,
        T::zero(),
        &cfg,
        &mut |_, _| Ok(()),
    )?;
    let z = store.trace0();
    let z_hyb = z.norm();
    if !(z_hyb > T::zero()) || !z_hyb.is_finite() {
        return Err(DeomError::Divergence {
            time: beta.to_f64().unwrap_or(f64::NAN),
            norm: z_hyb.to_f64().unwrap_or(f64::NAN),
            bound: 1e8,
        });
    }
    Ok(ImagResult {
        final_store: store,
        z_hyb,
        z_phase: z.arg(),
        a_hyb: -z_hyb.ln() / beta,
        steps: n,
    })
}

// ---------------------------------------------------------------------------
// λ-integration

/// Solver used at each point of a λ sweep.
#[derive(Clone, Copy, Debug)]
pub enum SweepSolver<T> {
    Sci(SciConfig<T>),
    /// Long-time propagation to the given final time.
    Propagation(PropagateConfig<T>),
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaSweep {
    pub grid: Vec<f64>,
    /// `⟨H_SB⟩_λ / λ` at each completed grid point.
    pub integrand: Vec<f64>,
    /// Trapezoidal integral; NaN when the sweep did not complete.
    pub a_hyb: f64,
    /// Set when a point failed; earlier points are retained.
    pub failure: Option<String>,
}

impl LambdaSweep {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none() && self.integrand.len() == self.grid.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# deom lambda sweep v1\nlambda,integrand\n");
        for (l, v) in self.grid.iter().zip(&self.integrand) {
            let _ = writeln!(s, "{l:.16e},{v:.16e}");
        }
        s
    }
}

/// Uniform grid on `[0, 1]`.
pub fn uniform_lambda_grid(points: usize) -> Vec<f64> {
    let n = points.max(2) - 1;
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// `Σ_{u,k} tr[Q_u ρ_{0⁺_{uk}}]`, the coupling energy per unit λ.
pub fn coupling_energy_per_lambda<T: Real>(store: &DdoStore<T>, system: &SystemSpec<T>, n_poles: usize) -> T {
    let d = store.dim();
    let mut s = C::new(T::zero(), T::zero());
    for (u, q) in system.q_modes().iter().enumerate() {
        for k in 0..n_poles {
            if let Some(e) = store.space().first_tier(u * n_poles + k) {
                s += crate::linalg::trace_product(d, q.as_slice(), store.entry(e)) * store.scaling().factor(e);
            }
        }
    }
    s.re
}

/// Thermodynamic integration of the hybridization free energy. Each grid
/// point is solved with coupling `λ Q` on both channels, warm-started from
/// the previous point.
pub fn lambda_sweep<T: Real>(
    gen: &Generator<T>,
    system: &SystemSpec<T>,
    n_poles: usize,
    grid: &[f64],
    solver: &SweepSolver<T>,
) -> Result<LambdaSweep> {
    if grid.len() < 2 || grid[0] != 0.0 || *grid.last().expect("non-empty") != 1.0 {
        return Err(DeomError::invalid("λ grid must start at 0 and end at 1"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(DeomError::invalid("λ grid must be strictly increasing"));
    }
    // λ = 0: product state, coupling energy vanishes identically
    let rho0 = gen.zero_store();
    let mut current = {
        let mut s = rho0;
        let d = gen.dim();
        for i in 0..d {
            s.entry_mut(0)[i * d + i] = C::new(T::one() / T::lit(d as f64), T::zero());
        }
        s
    };
    let mut integrand = vec![0.0];
    let mut failure = None;
    for &lam in &grid[1..] {
        let l = T::lit(lam);
        let coeffs = GeneratorCoefficients::mixing(l, l);
        let solved = match solver {
            SweepSolver::Sci(cfg) => {
                // population relaxation scales with λ², so a fixed shift would
                // stall the iteration near the weak-coupling end
                let cfg = SciConfig {
                    epsilon: cfg.epsilon * T::lit((lam * lam).max(1e-2)),
                    ..*cfg
                };
                sci_iterate(gen, system.h_sys(), &coeffs, &cfg, &current).and_then(|r| {
                    if r.converged {
                        Ok(r.store)
                    } else {
                        Err(DeomError::NoConvergence {
                            what: "self-consistent iteration".into(),
                            detail: format!("residual {:e} at λ = {lam}", r.residual().to_f64().unwrap_or(f64::NAN)),
                        })
                    }
                })
            }
            SweepSolver::Propagation(cfg) => {
                crate::steady::steady_by_propagation(gen, system.h_sys(), &coeffs, &current, cfg)
            }
        };
        match solved {
            Ok(s) => {
                integrand.push(
                    coupling_energy_per_lambda(&s, system, n_poles)
                        .to_f64()
                        .unwrap_or(f64::NAN),
                );
                current = s;
            }
            Err(e) => {
                failure = Some(format!("λ = {lam}: {e}"));
                break;
            }
        }
    }
    let a_hyb = if failure.is_none() {
        trapezoid(grid, &integrand)
    } else {
        f64::NAN
    };
    Ok(LambdaSweep {
        grid: grid.to_vec(),
        integrand,
        a_hyb,
        failure,
    })
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

// ---------------------------------------------------------------------------
// protocols and work statistics

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum ProtocolShape {
    /// `(1 - e^{-αt}) / (1 - e^{-αt_f})`, linear in the limit α → 0.
    Exponential { alpha: f64 },
    /// `λ ≡ value`.
    Constant { value: f64 },
}

/// Mixing function `λ(t)` on `[0, t_f]`; the backward process runs
/// `λ̄(t) = λ(t_f - t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Protocol {
    pub shape: ProtocolShape,
    pub t_final: f64,
    pub direction: Direction,
}

impl Protocol {
    pub fn exponential(alpha: f64, t_final: f64) -> Result<Self> {
        if !(t_final > 0.0) || !alpha.is_finite() {
            return Err(DeomError::invalid("protocol needs t_f > 0 and finite α"));
        }
        Ok(Self {
            shape: ProtocolShape::Exponential { alpha },
            t_final,
            direction: Direction::Forward,
        })
    }

    pub fn constant(value: f64, t_final: f64) -> Result<Self> {
        if !(t_final > 0.0) {
            return Err(DeomError::invalid("protocol needs t_f > 0"));
        }
        Ok(Self {
            shape: ProtocolShape::Constant { value },
            t_final,
            direction: Direction::Forward,
        })
    }

    pub fn reversed(&self) -> Self {
        Self {
            direction: match self.direction {
                Direction::Forward => Direction::Backward,
                Direction::Backward => Direction::Forward,
            },
            ..*self
        }
    }

    fn forward_value(&self, t: f64) -> (f64, f64) {
        match self.shape {
            ProtocolShape::Constant { value } => (value, 0.0),
            ProtocolShape::Exponential { alpha } => {
                let tf = self.t_final;
                if alpha.abs() * tf < 1e-8 {
                    (t / tf, 1.0 / tf)
                } else {
                    let den = -(-alpha * tf).exp_m1();
                    (-(-alpha * t).exp_m1() / den, alpha * (-alpha * t).exp() / den)
                }
            }
        }
    }

    /// `(λ(t), λ̇(t))` for this direction.
    pub fn value(&self, t: f64) -> (f64, f64) {
        match self.direction {
            Direction::Forward => self.forward_value(t),
            Direction::Backward => {
                let (l, dl) = self.forward_value(self.t_final - t);
                (l, -dl)
            }
        }
    }

    pub fn lambda(&self, t: f64) -> f64 {
        self.value(t).0
    }
}

/// Generator input of the work-generating hierarchy: `λ∓(t) = λ ∓ (τ/2) λ̇`
/// on the left/right channels.
struct WorkDrive<'a, T: Real> {
    h_sys: &'a CMatrix<T>,
    protocol: Protocol,
    tau: f64,
}

impl<T: Real> Drive<T> for WorkDrive<'_, T> {
    fn hamiltonian(&self, _t: T) -> Cow<'_, CMatrix<T>> {
        Cow::Borrowed(self.h_sys)
    }

    fn coefficients(&self, t: T) -> GeneratorCoefficients<T> {
        let (l, dl) = self.protocol.value(t.to_f64().unwrap_or(f64::NAN));
        let h = 0.5 * self.tau * dl;
        GeneratorCoefficients::mixing(T::lit(l - h), T::lit(l + h))
    }
}

/// `χ(τ) = tr W_0(t_f; τ)` propagated from `init`.
pub fn work_characteristic<T: Real>(
    gen: &Generator<T>,
    h_sys: &CMatrix<T>,
    protocol: &Protocol,
    tau: f64,
    dt: T,
    init: &DdoStore<T>,
    divergence_bound: T,
) -> Result<C<T>> {
    let drive = WorkDrive {
        h_sys,
        protocol: *protocol,
        tau,
    };
    let cfg = PropagateConfig {
        t_final: T::lit(protocol.t_final),
        dt,
        filter_tol: T::zero(),
        divergence_bound,
        sample_stride: usize::MAX,
    };
    let mut w = init.with_scaling_of(&gen.zero_store());
    integrate(
        gen,
        &drive,
        Picture::Schrodinger,
        &mut w,
        T::zero(),
        &cfg,
        &mut |_, _| Ok(()),
    )?;
    Ok(w.trace0())
}

#[derive(Clone, Copy, Debug)]
pub struct WorkConfig {
    /// Number of non-negative τ points (including τ = 0) on the half-grid
    /// before any extension.
    pub n_half: usize,
    pub tau_max: f64,
    /// RK4 step. The top tier decays at up to `L·max Re γ_k`, and the step
    /// must keep `dt` times that below about 2.8.
    pub dt: f64,
    /// w-grid refinement relative to the DFT grid, applied when χ has decayed.
    pub oversample: usize,
    /// `|χ(τ_max)|` target; the half-grid is doubled until it is met.
    pub decay_tol: f64,
    pub max_extensions: usize,
    pub divergence_bound: f64,
}

impl Default for WorkConfig {
    fn default() -> Self {
        Self {
            n_half: 81,
            tau_max: 40.0,
            dt: 0.02,
            oversample: 8,
            decay_tol: 1e-3,
            max_extensions: 2,
            divergence_bound: 1e8,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WorkDistribution {
    pub direction: Direction,
    pub beta: f64,
    pub d_tau: f64,
    /// Non-negative half grid; negative τ follow from `χ(-τ) = χ(τ)*`.
    pub tau: Vec<f64>,
    pub chi_re: Vec<f64>,
    pub chi_im: Vec<f64>,
    pub w: Vec<f64>,
    pub p: Vec<f64>,
    pub dw: f64,
    pub normalization: f64,
    pub negative_mass: f64,
    pub mean_work: f64,
    pub tail: f64,
    pub resolved: bool,
}

impl WorkDistribution {
    pub fn chi_csv(&self) -> String {
        let mut s = String::from("# deom work characteristic v1\ntau,re_chi,im_chi\n");
        for i in (1..self.tau.len()).rev() {
            let _ = writeln!(
                s,
                "{:.16e},{:.16e},{:.16e}",
                -self.tau[i], self.chi_re[i], -self.chi_im[i]
            );
        }
        for i in 0..self.tau.len() {
            let _ = writeln!(
                s,
                "{:.16e},{:.16e},{:.16e}",
                self.tau[i], self.chi_re[i], self.chi_im[i]
            );
        }
        s
    }

    pub fn p_csv(&self) -> String {
        let mut s = String::from("# deom work distribution v1\nw,p\n");
        for (w, p) in self.w.iter().zip(&self.p) {
            let _ = writeln!(s, "{w:.16e},{p:.16e}");
        }
        s
    }

    /// Index of `w = 0` on the symmetric grid.
    fn zero_index(&self) -> usize {
        self.w.len() / 2
    }
}

/// Builds `p(w)` from `χ` on the half-grid `τ_j = j Δτ`, using the
/// conjugate-mirrored trapezoid sum `p(w) = (Δτ/2π) Σ_j c_j χ(τ_j) e^{-iwτ_j}`.
/// The w-grid spacing is `2π / (n_tau Δτ) / oversample` with `n_tau = 2(len-1)`.
pub fn distribution_from_chi(
    direction: Direction,
    beta: f64,
    d_tau: f64,
    chi: &[C<f64>],
    oversample: usize,
    decay_tol: f64,
) -> WorkDistribution {
    let n = chi.len() - 1;
    let tail = chi[n].norm();
    let resolved = tail <= decay_tol;
    let os = if resolved { oversample.max(1) } else { 1 };
    let n_tau = 2 * n.max(1);
    let dw = 2.0 * std::f64::consts::PI / (n_tau as f64 * d_tau) / os as f64;
    let half_points = (n_tau * os) / 2;
    let w: Vec<f64> = (0..=2 * half_points)
        .map(|m| (m as f64 - half_points as f64) * dw)
        .collect();
    let p: Vec<f64> = w
        .iter()
        .map(|&wv| {
            let mut s = chi[0].re;
            for (j, z) in chi.iter().enumerate().skip(1) {
                let c = if j == n { 1.0 } else { 2.0 };
                let ph = C::new(0.0, -wv * j as f64 * d_tau).exp();
                s += c * (z * ph).re;
            }
            s * d_tau / (2.0 * std::f64::consts::PI)
        })
        .collect();
    // the two end points are the same frequency on the periodic DFT grid
    let weights: Vec<f64> = (0..w.len())
        .map(|m| if m == 0 || m == w.len() - 1 { 0.5 } else { 1.0 })
        .collect();
    let normalization: f64 = p.iter().zip(&weights).map(|(p, c)| p * c * dw).sum();
    let negative_mass: f64 = p.iter().zip(&weights).map(|(p, c)| (-p).max(0.0) * c * dw).sum();
    let mean_work = p
        .iter()
        .zip(&w)
        .zip(&weights)
        .map(|((p, w), c)| p * w * c * dw)
        .sum::<f64>()
        / normalization;
    WorkDistribution {
        direction,
        beta,
        d_tau,
        tau: (0..=n).map(|j| j as f64 * d_tau).collect(),
        chi_re: chi.iter().map(|z| z.re).collect(),
        chi_im: chi.iter().map(|z| z.im).collect(),
        w,
        p,
        dw,
        normalization,
        negative_mass,
        mean_work,
        tail,
        resolved,
    }
}

/// Work distribution of `protocol` started from `init`. Every τ point is an
/// independent propagation and runs in parallel.
pub fn work_distribution(
    gen: &Generator<f64>,
    h_sys: &CMatrix<f64>,
    protocol: &Protocol,
    beta: f64,
    init: &DdoStore<f64>,
    cfg: &WorkConfig,
) -> Result<WorkDistribution> {
    if cfg.n_half < 2 || !(cfg.tau_max > 0.0) {
        return Err(DeomError::invalid("work grid needs n_half >= 2 and tau_max > 0"));
    }
    let d_tau = cfg.tau_max / (cfg.n_half - 1) as f64;
    let eval = |taus: &[f64]| -> Result<Vec<C<f64>>> {
        taus.par_iter()
            .map(|&tau| work_characteristic(gen, h_sys, protocol, tau, cfg.dt, init, cfg.divergence_bound))
            .collect()
    };
    let mut taus: Vec<f64> = (0..cfg.n_half).map(|j| j as f64 * d_tau).collect();
    let mut chi = eval(&taus)?;
    let mut ext = 0;
    while chi.last().expect("non-empty").norm() > cfg.decay_tol && ext < cfg.max_extensions {
        let start = taus.len();
        let extra: Vec<f64> = (start..2 * start - 1).map(|j| j as f64 * d_tau).collect();
        chi.extend(eval(&extra)?);
        taus.extend(extra);
        ext += 1;
    }
    Ok(distribution_from_chi(
        protocol.direction,
        beta,
        d_tau,
        &chi,
        cfg.oversample,
        cfg.decay_tol,
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct JarzynskiReport {
    pub lhs: f64,
    pub rhs: f64,
    pub a_hyb_ref: f64,
    pub beta: f64,
    pub rel_err: f64,
    /// Fraction of `lhs` carried by negative `p(w)` values.
    pub negative_weight_fraction: f64,
    pub warning: Option<String>,
}

/// `⟨e^{-βw}⟩` against `e^{-βA_hyb}`.
pub fn jarzynski_check(wd: &WorkDistribution, a_hyb_ref: f64) -> JarzynskiReport {
    let b = wd.beta;
    let last = wd.w.len() - 1;
    let mut lhs = 0.0;
    let mut neg = 0.0;
    for (m, (&w, &p)) in wd.w.iter().zip(&wd.p).enumerate() {
        let c = if m == 0 || m == last { 0.5 } else { 1.0 };
        let v = p * (-b * w).exp() * wd.dw * c;
        lhs += v;
        if v < 0.0 {
            neg -= v;
        }
    }
    let rhs = (-b * a_hyb_ref).exp();
    let frac = if lhs != 0.0 { neg / lhs.abs() } else { f64::INFINITY };
    let warning = (frac > 0.1).then(|| {
        format!(
            "negative p(w) carries {:.1}% of the exponential average; refine the τ grid",
            100.0 * frac
        )
    });
    JarzynskiReport {
        lhs,
        rhs,
        a_hyb_ref,
        beta: b,
        rel_err: (lhs / rhs - 1.0).abs(),
        negative_weight_fraction: frac,
        warning,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CrooksReport {
    pub beta: f64,
    pub a_hyb_ref: f64,
    pub slope: f64,
    pub intercept: f64,
    /// Where `p(w)` and `p̄(-w)` cross, if found.
    pub crossing: Option<f64>,
    pub n_bins: usize,
    pub floor: f64,
    pub inconclusive: bool,
    /// `-intercept / slope`, the free energy implied by the fit.
    pub fitted_a_hyb: f64,
}

/// Fits `ln[p(w)/p̄(-w)]` against `w` over bins where both exceed
/// `floor · peak`, and locates the crossing of the two curves.
pub fn crooks_check(
    forward: &WorkDistribution,
    backward: &WorkDistribution,
    a_hyb_ref: f64,
    floor: f64,
) -> Result<CrooksReport> {
    if forward.w.len() != backward.w.len() || (forward.dw - backward.dw).abs() > 1e-12 * forward.dw {
        return Err(DeomError::invalid("forward and backward work grids differ"));
    }
    let n = forward.w.len();
    let z = forward.zero_index();
    let p = &forward.p;
    let pb = |m: usize| backward.p[2 * z - m];
    let peak_f = p.iter().cloned().fold(0.0, f64::max);
    let peak_b = backward.p.iter().cloned().fold(0.0, f64::max);
    let (mut sx, mut sy, mut sxx, mut sxy, mut k) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for m in 0..n {
        if p[m] > floor * peak_f && pb(m) > floor * peak_b {
            let x = forward.w[m];
            let y = (p[m] / pb(m)).ln();
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
            k += 1;
        }
    }
    let (slope, intercept) = if k >= 2 {
        let kf = k as f64;
        let den = kf * sxx - sx * sx;
        let s = (kf * sxy - sx * sy) / den;
        (s, (sy - s * sx) / kf)
    } else {
        (f64::NAN, f64::NAN)
    };
    // crossing between the two peaks
    let arg = |f: &dyn Fn(usize) -> f64| (0..n).fold(0, |b, m| if f(m) > f(b) { m } else { b });
    let mf = arg(&|m| p[m]);
    let mb = arg(&|m| pb(m));
    let crossing = if mf == mb {
        Some(forward.w[mf])
    } else {
        let (lo, hi) = (mf.min(mb), mf.max(mb));
        let diff = |m: usize| p[m] - pb(m);
        (lo..hi).find_map(|m| {
            let (a, b) = (diff(m), diff(m + 1));
            if a == 0.0 {
                Some(forward.w[m])
            } else if a * b < 0.0 {
                Some(forward.w[m] + forward.dw * a / (a - b))
            } else {
                None
            }
        })
    };
    Ok(CrooksReport {
        beta: forward.beta,
        a_hyb_ref,
        slope,
        intercept,
        crossing,
        n_bins: k,
        floor,
        inconclusive: k < 5,
        fitted_a_hyb: -intercept / slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_endpoints_and_derivative() {
        let p = Protocol::exponential(0.01, 50.0).unwrap();
        assert!(p.lambda(0.0).abs() < 1e-12);
        assert!((p.lambda(50.0) - 1.0).abs() < 1e-12);
        let b = p.reversed();
        assert!((b.lambda(0.0) - 1.0).abs() < 1e-12);
        assert!(b.lambda(50.0).abs() < 1e-12);
        for &t in &[0.0f64, 7.3, 31.0, 50.0] {
            let h = 1e-5;
            for q in [p, b] {
                let fd =
                    (q.lambda((t + h).min(50.0)) - q.lambda((t - h).max(0.0))) / ((t + h).min(50.0) - (t - h).max(0.0));
                assert!((fd - q.value(t).1).abs() < 1e-8);
            }
        }
        let lin = Protocol::exponential(0.0, 10.0).unwrap();
        assert!((lin.lambda(2.5) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn constant_characteristic_gives_single_bin() {
        let chi = vec![C::new(1.0, 0.0); 33];
        let wd = distribution_from_chi(Direction::Forward, 1.0, 0.25, &chi, 8, 1e-3);
        assert!(!wd.resolved);
        let z = wd.zero_index();
        assert_eq!(wd.w[z], 0.0);
        assert!((wd.p[z] * wd.dw - 1.0).abs() < 1e-12);
        for (m, p) in wd.p.iter().enumerate() {
            if m != z {
                assert!(p.abs() < 1e-12, "{m} {p}");
            }
        }
        assert!((wd.normalization - 1.0).abs() < 1e-12);
        // round-off at the band edge is amplified by e^{-βw}
        let j = jarzynski_check(&wd, 0.0);
        assert!((j.lhs - 1.0).abs() < 1e-8 && j.rel_err < 1e-8, "{j:?}");
        let c = crooks_check(&wd, &wd, 0.0, 1e-4).unwrap();
        assert_eq!(c.crossing, Some(0.0));
        assert!(c.inconclusive);
    }

    #[test]
    fn gaussian_characteristic_recovers_density_and_crooks_slope() {
        // Gaussian work with mean μ and variance σ²; Crooks-consistent pair
        // has backward mean -(μ - βσ²) and slope β.
        let (beta, sigma, a): (f64, f64, f64) = (0.5, 0.4, -0.3);
        let mu = a + 0.5 * beta * sigma * sigma;
        let mu_b = -(mu - beta * sigma * sigma);
        let dtau = 0.2;
        let mk = |m: f64| -> Vec<C<f64>> {
            (0..=150)
                .map(|j| {
                    let t = j as f64 * dtau;
                    C::new(-0.5 * sigma * sigma * t * t, m * t).exp()
                })
                .collect()
        };
        let f = distribution_from_chi(Direction::Forward, beta, dtau, &mk(mu), 4, 1e-3);
        let b = distribution_from_chi(Direction::Backward, beta, dtau, &mk(mu_b), 4, 1e-3);
        assert!(f.resolved);
        assert!((f.normalization - 1.0).abs() < 1e-10);
        assert!((f.mean_work - mu).abs() < 1e-10);
        let j = jarzynski_check(&f, a);
        assert!(j.rel_err < 1e-10, "{j:?}");
        let c = crooks_check(&f, &b, a, 1e-4).unwrap();
        assert!((c.slope - beta).abs() < 1e-6, "{c:?}");
        assert!((c.fitted_a_hyb - a).abs() < 1e-6);
        assert!((c.crossing.unwrap() - a).abs() < 1e-3);
    }

    #[test]
    fn lambda_grid_validation() {
        let g = uniform_lambda_grid(11);
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[10], 1.0);
        assert!((trapezoid(&g, &g.iter().map(|x| x * x).collect::<Vec<_>>()) - 0.335).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn gaussian_characteristic_gives_normalized_distribution(mu in -1.0f64..1.0, sigma in 0.1f64..0.5) {
            let d_tau = 0.2;
            let chi: Vec<C<f64>> = (0..400)
                .map(|j| {
                    let t = j as f64 * d_tau;
                    C::new(-0.5 * sigma * sigma * t * t, mu * t).exp()
                })
                .collect();
            let wd = distribution_from_chi(Direction::Forward, 1.0, d_tau, &chi, 1, 1e-3);
            proptest::prop_assert!(wd.resolved);
            proptest::prop_assert!((wd.normalization - 1.0).abs() < 1e-8);
            proptest::prop_assert!((wd.mean_work - mu).abs() < 1e-8);
            proptest::prop_assert!(wd.negative_mass < 1e-8);
        }
    }
}
