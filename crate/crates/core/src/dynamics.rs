//! Real-time propagation of hierarchies in the Schrödinger and Heisenberg
//! pictures, observable mappings and two-time correlation functions.

use std::borrow::Cow;
use std::fmt::Write as _;

use num_traits::Zero;

use crate::error::{DeomError, Result};
use crate::hierarchy::{apply_filter, DdoStore, Generator, GeneratorCoefficients, Scaling};
use crate::linalg::{gemm_acc, CMatrix};
use crate::model::ModeSet;
use crate::scalar::{cr, Real, C};

/// Time-dependent input to the generator: the system Hamiltonian and the
/// channel coefficients, both evaluated per RK4 stage.
pub trait Drive<T: Real>: Sync {
    fn hamiltonian(&self, t: T) -> Cow<'_, CMatrix<T>>;

    fn coefficients(&self, _t: T) -> GeneratorCoefficients<T> {
        GeneratorCoefficients::real_time()
    }
}

impl<T: Real> Drive<T> for CMatrix<T> {
    fn hamiltonian(&self, _t: T) -> Cow<'_, CMatrix<T>> {
        Cow::Borrowed(self)
    }
}

/// Hamiltonian given by a callback, e.g. a classical external field.
pub struct FieldDrive<F>(pub F);

impl<T: Real, F: Fn(T) -> CMatrix<T> + Sync> Drive<T> for FieldDrive<F> {
    fn hamiltonian(&self, t: T) -> Cow<'_, CMatrix<T>> {
        Cow::Owned((self.0)(t))
    }
}

/// Static Hamiltonian with fixed, possibly non-unit, channel coefficients.
pub struct ScaledDrive<'a, T: Real> {
    pub h_sys: &'a CMatrix<T>,
    pub coefficients: GeneratorCoefficients<T>,
}

impl<T: Real> Drive<T> for ScaledDrive<'_, T> {
    fn hamiltonian(&self, _t: T) -> Cow<'_, CMatrix<T>> {
        Cow::Borrowed(self.h_sys)
    }

    fn coefficients(&self, _t: T) -> GeneratorCoefficients<T> {
        self.coefficients
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PropagateConfig<T> {
    pub t_final: T,
    pub dt: T,
    /// Entries below this magnitude (as stored) are zeroed after every step.
    pub filter_tol: T,
    /// Abort when any stored element exceeds this magnitude.
    pub divergence_bound: T,
    /// Record observables every `sample_stride` steps.
    pub sample_stride: usize,
}

impl<T: Real> PropagateConfig<T> {
    pub fn new(t_final: T, dt: T) -> Self {
        Self {
            t_final,
            dt,
            filter_tol: T::zero(),
            divergence_bound: T::lit(1e8),
            sample_stride: 1,
        }
    }

    /// Number of steps and the step actually used, which lands exactly on
    /// `t_final`.
    pub fn steps(&self) -> Result<(usize, T)> {
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return Err(DeomError::invalid(format!("time step must be > 0, got {}", self.dt)));
        }
        if !(self.t_final >= T::zero()) || !self.t_final.is_finite() {
            return Err(DeomError::invalid(format!(
                "final time must be finite and >= 0, got {}",
                self.t_final
            )));
        }
        if self.sample_stride == 0 {
            return Err(DeomError::invalid("sample stride must be >= 1"));
        }
        let n = (self.t_final / self.dt).round().to_usize().unwrap_or(0);
        if n == 0 {
            return Ok((0, self.dt));
        }
        Ok((n, self.t_final / T::lit(n as f64)))
    }
}

/// Scratch buffers for the classic fourth-order Runge–Kutta step.
pub(crate) struct Rk4<T: Real> {
    base: Vec<C<T>>,
    k: Vec<C<T>>,
    tmp: Vec<C<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Picture {
    Schrodinger,
    Heisenberg,
}

impl<T: Real> Rk4<T> {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            base: vec![C::zero(); n],
            k: vec![C::zero(); n],
            tmp: vec![C::zero(); n],
        }
    }

    fn eval(gen: &Generator<T>, drive: &dyn Drive<T>, pic: Picture, t: T, x: &[C<T>], out: &mut [C<T>]) {
        let h = drive.hamiltonian(t);
        let c = drive.coefficients(t);
        match pic {
            Picture::Schrodinger => gen.apply_raw(h.as_slice(), &c, x, out),
            Picture::Heisenberg => gen.apply_adjoint_raw(h.as_slice(), &c, x, out),
        }
    }

    pub(crate) fn step(&mut self, gen: &Generator<T>, drive: &dyn Drive<T>, pic: Picture, t: T, dt: T, y: &mut [C<T>]) {
        let half = dt * T::lit(0.5);
        let w1 = dt / T::lit(6.0);
        let w2 = dt / T::lit(3.0);
        self.base.copy_from_slice(y);
        Self::eval(gen, drive, pic, t, &self.base, &mut self.k);
        for ((yi, &bi), &ki) in y.iter_mut().zip(&self.base).zip(&self.k) {
            *yi = bi + ki * w1;
        }
        for ((ti, &bi), &ki) in self.tmp.iter_mut().zip(&self.base).zip(&self.k) {
            *ti = bi + ki * half;
        }
        Self::eval(gen, drive, pic, t + half, &self.tmp, &mut self.k);
        for (yi, &ki) in y.iter_mut().zip(&self.k) {
            *yi += ki * w2;
        }
        for ((ti, &bi), &ki) in self.tmp.iter_mut().zip(&self.base).zip(&self.k) {
            *ti = bi + ki * half;
        }
        Self::eval(gen, drive, pic, t + half, &self.tmp, &mut self.k);
        for (yi, &ki) in y.iter_mut().zip(&self.k) {
            *yi += ki * w2;
        }
        for ((ti, &bi), &ki) in self.tmp.iter_mut().zip(&self.base).zip(&self.k) {
            *ti = bi + ki * dt;
        }
        Self::eval(gen, drive, pic, t + dt, &self.tmp, &mut self.k);
        for (yi, &ki) in y.iter_mut().zip(&self.k) {
            *yi += ki * w1;
        }
    }
}

fn check_divergence<T: Real>(store: &DdoStore<T>, t: T, bound: T) -> Result<()> {
    let norm = store.max_abs();
    if !(norm <= bound) {
        return Err(DeomError::Divergence {
            time: t.to_f64().unwrap_or(f64::NAN),
            norm: norm.to_f64().unwrap_or(f64::NAN),
            bound: bound.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// Integrates `store` in place from `t0` over `cfg`, calling `on_sample`
/// at `t0` and every `sample_stride` steps (always at the final time).
/// Returns the number of entries removed by the filter.
pub(crate) fn integrate<T: Real>(
    gen: &Generator<T>,
    drive: &dyn Drive<T>,
    pic: Picture,
    store: &mut DdoStore<T>,
    t0: T,
    cfg: &PropagateConfig<T>,
    on_sample: &mut dyn FnMut(T, &DdoStore<T>) -> Result<()>,
) -> Result<usize> {
    let (n, dt) = cfg.steps()?;
    let mut rk = Rk4::new(store.as_slice().len());
    let mut filtered = 0;
    on_sample(t0, store)?;
    for step in 1..=n {
        let t = t0 + dt * T::lit((step - 1) as f64);
        rk.step(gen, drive, pic, t, dt, store.as_mut_slice());
        let t_new = t0 + dt * T::lit(step as f64);
        if cfg.filter_tol > T::zero() {
            filtered += apply_filter(store, cfg.filter_tol);
        }
        check_divergence(store, t_new, cfg.divergence_bound)?;
        if step % cfg.sample_stride == 0 || step == n {
            on_sample(t_new, store)?;
        }
    }
    Ok(filtered)
}

/// Kind of operator whose expectation value is extracted from a hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservableKind {
    /// Pure system operator `A_S`.
    System,
    /// Hybrid operator `B_S f_{uk}`.
    Hybrid,
    /// Dissipaton momentum `B_S φ_{uk}`.
    Momentum,
}

#[derive(Clone, Debug)]
pub struct ObservableSpec<T: Real> {
    pub name: String,
    pub kind: ObservableKind,
    pub matrix: CMatrix<T>,
    /// `(u, k)`, present iff the kind is not `System`.
    pub mode: Option<(usize, usize)>,
}

impl<T: Real> ObservableSpec<T> {
    pub fn system(name: impl Into<String>, a: CMatrix<T>) -> Self {
        Self {
            name: name.into(),
            kind: ObservableKind::System,
            matrix: a,
            mode: None,
        }
    }

    pub fn hybrid(name: impl Into<String>, b: CMatrix<T>, u: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            kind: ObservableKind::Hybrid,
            matrix: b,
            mode: Some((u, k)),
        }
    }

    pub fn momentum(name: impl Into<String>, b: CMatrix<T>, u: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            kind: ObservableKind::Momentum,
            matrix: b,
            mode: Some((u, k)),
        }
    }

    fn validate(&self, dim: usize, modes: &ModeSet<T>) -> Result<()> {
        if self.matrix.dim() != dim {
            return Err(DeomError::Dimension(format!(
                "observable {} is {}x{}, system is {dim}x{dim}",
                self.name,
                self.matrix.dim(),
                self.matrix.dim()
            )));
        }
        match (self.kind, self.mode) {
            (ObservableKind::System, None) => Ok(()),
            (ObservableKind::System, Some(_)) => Err(DeomError::invalid(format!(
                "system observable {} carries a mode",
                self.name
            ))),
            (_, None) => Err(DeomError::invalid(format!("observable {} needs a mode", self.name))),
            (_, Some((u, k))) => {
                if u >= modes.n_u() || k >= modes.n_poles() {
                    Err(DeomError::invalid(format!(
                        "observable {} references mode ({u},{k}) outside the mode set",
                        self.name
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Hierarchy entry and prefactor this observable reads from.
    fn target(&self, store_space: &crate::hierarchy::IndexSpace, modes: &ModeSet<T>) -> Result<(usize, C<T>)> {
        match self.kind {
            ObservableKind::System => Ok((0, cr(T::one()))),
            kind => {
                let (u, k) = self.mode.expect("validated");
                let entry = store_space.first_tier(modes.slot(u, k)).ok_or_else(|| {
                    DeomError::invalid(format!(
                        "observable {} needs tier 1 but the hierarchy is truncated at L=0",
                        self.name
                    ))
                })?;
                let pref = if kind == ObservableKind::Momentum {
                    -modes.gamma(k)
                } else {
                    cr(T::one())
                };
                Ok((entry, pref))
            }
        }
    }
}

/// `⟨O⟩` from a ρ-hierarchy: `tr[A ρ_0]`, `tr[B ρ_{0⁺}]` or `-γ_k tr[B ρ_{0⁺}]`.
pub fn expectation<T: Real>(store: &DdoStore<T>, obs: &ObservableSpec<T>, modes: &ModeSet<T>) -> Result<C<T>> {
    obs.validate(store.dim(), modes)?;
    let (entry, pref) = obs.target(store.space(), modes)?;
    let f = store.scaling().factor(entry);
    Ok(crate::linalg::trace_product(store.dim(), obs.matrix.as_slice(), store.entry(entry)) * pref * f)
}

/// Assembled `⟨F_u⟩ = Σ_k ⟨f_{uk}⟩`.
pub fn mean_force<T: Real>(store: &DdoStore<T>, modes: &ModeSet<T>, u: usize) -> Result<C<T>> {
    let id = CMatrix::identity(store.dim());
    let mut s = C::zero();
    for k in 0..modes.n_poles() {
        s += expectation(store, &ObservableSpec::hybrid("f", id.clone(), u, k), modes)?;
    }
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct PropagationResult<T: Real> {
    pub times: Vec<T>,
    pub names: Vec<String>,
    /// `values[j][i]` is observable `j` at `times[i]`.
    pub values: Vec<Vec<C<T>>>,
    pub final_store: DdoStore<T>,
    /// Total entries zeroed by the filter over the run.
    pub filtered: usize,
}

impl<T: Real> PropagationResult<T> {
    pub fn series(&self, name: &str) -> Option<&[C<T>]> {
        self.names.iter().position(|n| n == name).map(|j| &self.values[j][..])
    }

    /// `t,re_<name>,im_<name>,...` with full double precision.
    pub fn to_csv(&self) -> String {
        trajectory_csv(&self.times, &self.names, &self.values)
    }
}

pub(crate) fn trajectory_csv<T: Real>(times: &[T], names: &[String], values: &[Vec<C<T>>]) -> String {
    let mut s = String::from("# deom trajectory v1\nt");
    for n in names {
        let _ = write!(s, ",re_{n},im_{n}");
    }
    s.push('\n');
    for (i, t) in times.iter().enumerate() {
        let _ = write!(s, "{:.16e}", t.to_f64().unwrap_or(f64::NAN));
        for v in values {
            let z = v[i];
            let _ = write!(
                s,
                ",{:.16e},{:.16e}",
                z.re.to_f64().unwrap_or(f64::NAN),
                z.im.to_f64().unwrap_or(f64::NAN)
            );
        }
        s.push('\n');
    }
    s
}

/// Propagates `store0` under the generator and records observables.
pub fn propagate<T: Real>(
    gen: &Generator<T>,
    drive: &dyn Drive<T>,
    modes: &ModeSet<T>,
    store0: &DdoStore<T>,
    cfg: &PropagateConfig<T>,
    observables: &[ObservableSpec<T>],
) -> Result<PropagationResult<T>> {
    for o in observables {
        o.validate(gen.dim(), modes)?;
        o.target(gen.space(), modes)?;
    }
    let mut store = store0.with_scaling_of(&gen.zero_store());
    let mut times = Vec::new();
    let mut values: Vec<Vec<C<T>>> = vec![Vec::new(); observables.len()];
    let filtered = integrate(
        gen,
        drive,
        Picture::Schrodinger,
        &mut store,
        T::zero(),
        cfg,
        &mut |t, s| {
            times.push(t);
            for (o, v) in observables.iter().zip(values.iter_mut()) {
                v.push(expectation(s, o, modes)?);
            }
            Ok(())
        },
    )?;
    Ok(PropagationResult {
        times,
        names: observables.iter().map(|o| o.name.clone()).collect(),
        values,
        final_store: store,
        filtered,
    })
}

/// Propagates a ρ-hierarchy and returns the final store only.
pub fn propagate_store<T: Real>(
    gen: &Generator<T>,
    drive: &dyn Drive<T>,
    store0: &DdoStore<T>,
    cfg: &PropagateConfig<T>,
) -> Result<DdoStore<T>> {
    let mut store = store0.with_scaling_of(&gen.zero_store());
    integrate(
        gen,
        drive,
        Picture::Schrodinger,
        &mut store,
        T::zero(),
        cfg,
        &mut |_, _| Ok(()),
    )?;
    Ok(store)
}

/// Adjoint hierarchy representing `O` at `t = 0`, so that the pairing with
/// a ρ-hierarchy returns `⟨O⟩`. Uses the dual scaling of the generator.
pub fn adjoint_from_observable<T: Real>(
    gen: &Generator<T>,
    obs: &ObservableSpec<T>,
    modes: &ModeSet<T>,
) -> Result<DdoStore<T>> {
    obs.validate(gen.dim(), modes)?;
    let (entry, pref) = obs.target(gen.space(), modes)?;
    let mut a = gen.zero_store();
    let f = gen.scaling().factor(entry);
    for (dst, &src) in a.entry_mut(entry).iter_mut().zip(obs.matrix.as_slice()) {
        // pairing is tr[A ρ], so the adjoint entry holds the operator itself
        *dst = src * pref * f;
    }
    Ok(a)
}

#[derive(Clone, Debug)]
pub struct HeisenbergResult<T: Real> {
    pub times: Vec<T>,
    /// `⟨⟨A(t)|ρ(0)⟩⟩` when a probe hierarchy was supplied.
    pub pairings: Vec<C<T>>,
    pub final_store: DdoStore<T>,
}

/// Evolves the adjoint hierarchy of `obs` under the transpose generator with a
/// static Hamiltonian. With a `probe` ρ-hierarchy the pairing is recorded at
/// every sample, giving `⟨O(t)⟩` for that initial state.
pub fn heisenberg_propagate<T: Real>(
    gen: &Generator<T>,
    h_sys: &CMatrix<T>,
    obs: &ObservableSpec<T>,
    modes: &ModeSet<T>,
    cfg: &PropagateConfig<T>,
    probe: Option<&DdoStore<T>>,
) -> Result<HeisenbergResult<T>> {
    let mut a = adjoint_from_observable(gen, obs, modes)?;
    let probe = probe.map(|p| p.with_scaling_of(&gen.zero_store()));
    let mut times = Vec::new();
    let mut pairings = Vec::new();
    integrate(gen, h_sys, Picture::Heisenberg, &mut a, T::zero(), cfg, &mut |t, s| {
        times.push(t);
        if let Some(p) = &probe {
            pairings.push(p.pairing(s));
        }
        Ok(())
    })?;
    Ok(HeisenbergResult {
        times,
        pairings,
        final_store: a,
    })
}

/// Information lost when a hybrid operator is mapped at the truncation tier.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TruncationReport {
    /// Top-tier entries whose raised partner was dropped.
    pub truncated_entries: usize,
    /// Largest raw element among those top-tier entries.
    pub top_tier_magnitude: f64,
}

/// `ρ(0; B^>)`: the hierarchy of `B ρ_st`.
pub fn map_b_operator<T: Real>(
    steady: &DdoStore<T>,
    b: &ObservableSpec<T>,
    modes: &ModeSet<T>,
) -> Result<(DdoStore<T>, TruncationReport)> {
    b.validate(steady.dim(), modes)?;
    let raw = steady.to_raw();
    let space = raw.space().clone();
    let d = raw.dim();
    let mut out = DdoStore::zeros(space.clone(), d, Scaling::Raw);
    let bm = b.matrix.as_slice();
    let one = cr(T::one());
    let mut report = TruncationReport::default();
    for i in 0..space.len() {
        let mut acc = vec![C::zero(); d * d];
        match b.kind {
            ObservableKind::System => gemm_acc(d, one, bm, raw.entry(i), &mut acc),
            kind => {
                let (u, k) = b.mode.expect("validated");
                let (w_plus, w_minus) = if kind == ObservableKind::Momentum {
                    (-modes.gamma(k), modes.gamma(k))
                } else {
                    (one, one)
                };
                match space.raise(i, modes.slot(u, k)) {
                    Some(j) => gemm_acc(d, w_plus, bm, raw.entry(j), &mut acc),
                    None => {
                        report.truncated_entries += 1;
                        report.top_tier_magnitude = report
                            .top_tier_magnitude
                            .max(crate::scalar::max_abs(raw.entry(i)).to_f64().unwrap_or(f64::NAN));
                    }
                }
                let occ = space.entries()[i].occ();
                for v in 0..modes.n_u() {
                    let s = modes.slot(v, k);
                    if let Some(j) = space.lower(i, s) {
                        let c = w_minus * modes.eta_fwd(v, u, k) * T::lit(occ[s] as f64);
                        gemm_acc(d, c, bm, raw.entry(j), &mut acc);
                    }
                }
            }
        }
        out.entry_mut(i).copy_from_slice(&acc);
    }
    Ok((out.with_scaling_of(steady), report))
}

#[derive(Clone, Debug)]
pub struct CorrelationResult<T: Real> {
    pub times: Vec<T>,
    pub values: Vec<C<T>>,
    pub truncation: TruncationReport,
}

impl<T: Real> CorrelationResult<T> {
    pub fn to_csv(&self, name: &str) -> String {
        trajectory_csv(&self.times, &[name.to_string()], std::slice::from_ref(&self.values))
    }
}

/// `⟨A(t) B(0)⟩` in the stationary state `steady`.
pub fn correlation<T: Real>(
    gen: &Generator<T>,
    h_sys: &CMatrix<T>,
    modes: &ModeSet<T>,
    a: &ObservableSpec<T>,
    b: &ObservableSpec<T>,
    steady: &DdoStore<T>,
    cfg: &PropagateConfig<T>,
) -> Result<CorrelationResult<T>> {
    let (init, truncation) = map_b_operator(steady, b, modes)?;
    let r = propagate(gen, h_sys, modes, &init, cfg, std::slice::from_ref(a))?;
    Ok(CorrelationResult {
        times: r.times,
        values: r.values.into_iter().next().unwrap_or_default(),
        truncation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{scaling_factors, IndexSpace};
    use crate::model::{build_drude_pade, DrudeSpec, SystemSpec};
    use std::sync::Arc;

    fn bench(eta: f64, tier: usize) -> (SystemSpec<f64>, ModeSet<f64>, Generator<f64>) {
        let sys = SystemSpec::<f64>::spin_boson(0.5, 1.0);
        let modes = build_drude_pade(&DrudeSpec::new(eta, 4.0).unwrap(), 0.5, 2).unwrap();
        let sp = Arc::new(IndexSpace::enumerate(1, modes.n_poles(), tier).unwrap());
        let f = Arc::new(scaling_factors(&sp, &modes));
        let g = Generator::new(sp, &sys, &modes, Scaling::Scaled(f)).unwrap();
        (sys, modes, g)
    }

    #[test]
    fn step_count_lands_on_final_time() {
        let c = PropagateConfig::<f64>::new(1.0, 0.3);
        let (n, dt) = c.steps().unwrap();
        assert_eq!(n, 3);
        assert!((dt * 3.0 - 1.0).abs() < 1e-15);
        assert!(PropagateConfig::<f64>::new(1.0, 0.0).steps().is_err());
        assert!(PropagateConfig::<f64>::new(1.0, -0.1).steps().is_err());
    }

    #[test]
    fn identity_expectation_is_one_and_decoupled_hybrid_is_zero() {
        let (sys, modes, g) = bench(0.0, 2);
        let rho = sys.thermal_state(0.5).unwrap();
        let st = DdoStore::from_reduced(g.space().clone(), &rho, g.scaling().clone());
        let r = propagate(
            &g,
            sys.h_sys(),
            &modes,
            &st,
            &PropagateConfig::new(1.0, 0.01),
            &[
                ObservableSpec::system("id", CMatrix::identity(2)),
                ObservableSpec::hybrid("f0", CMatrix::identity(2), 0, 0),
            ],
        )
        .unwrap();
        for z in r.series("id").unwrap() {
            assert!((z - C::new(1.0, 0.0)).norm() < 1e-13);
        }
        for z in r.series("f0").unwrap() {
            assert_eq!(z.norm(), 0.0);
        }
    }

    #[test]
    fn hybrid_observable_rejected_at_tier_zero() {
        let (sys, modes, _) = bench(0.5, 0);
        let sp = Arc::new(IndexSpace::enumerate(1, modes.n_poles(), 0).unwrap());
        let st = DdoStore::from_reduced(sp, &sys.thermal_state(0.5).unwrap(), Scaling::Raw);
        let o = ObservableSpec::hybrid("f", CMatrix::identity(2), 0, 0);
        assert!(expectation(&st, &o, &modes).is_err());
        let bad = ObservableSpec::hybrid("f", CMatrix::identity(2), 0, 9);
        assert!(expectation(&st, &bad, &modes).is_err());
    }

    #[test]
    fn divergence_is_reported_with_time() {
        let (sys, modes, g) = bench(0.5, 2);
        let st = DdoStore::from_reduced(g.space().clone(), &sys.thermal_state(0.5).unwrap(), g.scaling().clone());
        let mut cfg = PropagateConfig::new(10.0, 0.5);
        cfg.divergence_bound = 1e3;
        match propagate(&g, sys.h_sys(), &modes, &st, &cfg, &[]) {
            Err(DeomError::Divergence { time, .. }) => assert!(time > 0.0 && time <= 10.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let (sys, modes, g) = bench(0.5, 1);
        let st = DdoStore::from_reduced(g.space().clone(), &sys.thermal_state(0.5).unwrap(), g.scaling().clone());
        let mut cfg = PropagateConfig::new(0.1, 0.01);
        cfg.sample_stride = 5;
        let r = propagate(
            &g,
            sys.h_sys(),
            &modes,
            &st,
            &cfg,
            &[ObservableSpec::system(
                "sz",
                CMatrix::from_real_rows(&[&[1.0, 0.0], &[0.0, -1.0]]),
            )],
        )
        .unwrap();
        assert_eq!(r.times.len(), 3);
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[1], "t,re_sz,im_sz");
        assert_eq!(lines.len(), 5);
    }
}
