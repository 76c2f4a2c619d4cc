//! Stationary hierarchies by self-consistent iteration, with long-time
//! propagation as an independent route.
//!
//! Each entry obeys `0 = -i𝓛_n ρ_n + C_n[ρ]`, where `C_n` collects the raise
//! and lower couplings. Adding `ε ρ_n` to both sides gives the update
//! `ρ_n ← (i𝓛_n + ε)⁻¹ (ε ρ_n + C_n[ρ])`.

use num_traits::Zero;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{propagate_store, Drive, PropagateConfig, ScaledDrive};
use crate::error::{DeomError, Result};
use crate::hierarchy::{DdoStore, Generator, GeneratorCoefficients};
use crate::linalg::{gemm_acc, CMatrix};
use crate::model::SystemSpec;
use crate::scalar::{cr, Real, C};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SweepMode {
    /// Sequential sweep in canonical order using freshly updated neighbours.
    GaussSeidel,
    /// Every entry updated from the previous iterate; runs in parallel.
    Jacobi,
}

#[derive(Clone, Copy, Debug)]
pub struct SciConfig<T> {
    pub epsilon: T,
    pub tol: T,
    pub max_iter: usize,
    /// Under-relaxation factor in (0, 1].
    pub mixing: T,
    pub sweep: SweepMode,
}

impl<T: Real> SciConfig<T> {
    /// Shift set to the spectral span of the system Hamiltonian.
    pub fn for_system(system: &SystemSpec<T>) -> Result<Self> {
        let span = system.spectral_span()?;
        Ok(Self {
            epsilon: if span > T::zero() { span } else { T::one() },
            tol: T::lit(1e-10),
            max_iter: 20_000,
            mixing: T::one(),
            sweep: SweepMode::GaussSeidel,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > T::zero()) || !self.epsilon.is_finite() {
            return Err(DeomError::invalid(format!(
                "SCI shift must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.mixing > T::zero() && self.mixing <= T::one()) {
            return Err(DeomError::invalid(format!(
                "mixing must lie in (0, 1], got {}",
                self.mixing
            )));
        }
        if !(self.tol > T::zero()) {
            return Err(DeomError::invalid("SCI tolerance must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SciResult<T: Real> {
    pub store: DdoStore<T>,
    /// Residual after each sweep.
    pub history: Vec<T>,
    pub converged: bool,
}

impl<T: Real> SciResult<T> {
    pub fn residual(&self) -> T {
        self.history.last().copied().unwrap_or_else(T::infinity)
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("# deom sci residuals v1\niteration,residual\n");
        for (i, r) in self.history.iter().enumerate() {
            s.push_str(&format!("{},{:.16e}\n", i + 1, r.to_f64().unwrap_or(f64::NAN)));
        }
        s
    }
}

/// Max-abs of the generator applied to `store`.
pub fn residual<T: Real>(
    gen: &Generator<T>,
    h_sys: &CMatrix<T>,
    coeffs: &GeneratorCoefficients<T>,
    store: &DdoStore<T>,
) -> Result<T> {
    Ok(gen.apply(h_sys, coeffs, store)?.max_abs())
}

/// Tier 0 maximally mixed, everything else zero.
pub fn maximally_mixed<T: Real>(gen: &Generator<T>) -> DdoStore<T> {
    let d = gen.dim();
    let rho = CMatrix::identity(d).scale(cr(T::one() / T::lit(d as f64)));
    DdoStore::from_reduced(gen.space().clone(), &rho, gen.scaling().clone())
}

/// Per-entry resolvent `(i𝓛_n + ε)⁻¹` applied in the eigenbasis of `H_S`,
/// where the Liouvillian superoperator is diagonal.
struct Resolvent<T: Real> {
    d: usize,
    u: Vec<C<T>>,
    u_dag: Vec<C<T>>,
    energies: Vec<T>,
    epsilon: T,
}

impl<T: Real> Resolvent<T> {
    fn new(h: &CMatrix<T>, epsilon: T) -> Result<Self> {
        let (energies, u) = h.eigh()?;
        Ok(Self {
            d: h.dim(),
            u_dag: u.dagger().into_vec(),
            u: u.into_vec(),
            energies,
            epsilon,
        })
    }

    fn check(&self, damping: &[C<T>]) -> Result<()> {
        let scale = self.epsilon
            + self.energies.iter().fold(T::zero(), |m, e| m.max(e.abs()))
            + damping.iter().fold(T::zero(), |m, g| m.max(g.norm()));
        for g in damping {
            for &ea in &self.energies {
                for &eb in &self.energies {
                    let den = C::new(T::zero(), ea - eb) + *g + self.epsilon;
                    if den.norm() < T::lit(1e-13) * scale {
                        return Err(DeomError::Singular(format!(
                            "SCI resolvent is singular (|denominator| = {:e}); increase epsilon",
                            den.norm()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn apply(&self, damping: C<T>, x: &mut [C<T>], work: &mut [C<T>]) {
        let d = self.d;
        let one = cr(T::one());
        work.iter_mut().for_each(|z| *z = C::zero());
        // work = U† x U
        let mut tmp = vec![C::zero(); d * d];
        gemm_acc(d, one, &self.u_dag, x, &mut tmp);
        gemm_acc(d, one, &tmp, &self.u, work);
        for a in 0..d {
            for b in 0..d {
                let den = C::new(T::zero(), self.energies[a] - self.energies[b]) + damping + self.epsilon;
                work[a * d + b] /= den;
            }
        }
        tmp.iter_mut().for_each(|z| *z = C::zero());
        gemm_acc(d, one, &self.u, work, &mut tmp);
        x.iter_mut().for_each(|z| *z = C::zero());
        gemm_acc(d, one, &tmp, &self.u_dag, x);
    }
}

/// Runs the iteration without treating non-convergence as an error.
pub fn sci_iterate<T: Real>(
    gen: &Generator<T>,
    h_sys: &CMatrix<T>,
    coeffs: &GeneratorCoefficients<T>,
    cfg: &SciConfig<T>,
    init: &DdoStore<T>,
) -> Result<SciResult<T>> {
    cfg.validate()?;
    if coeffs.drift != cr(T::one()) {
        return Err(DeomError::invalid("SCI requires real-time drift coefficients"));
    }
    let res = Resolvent::new(h_sys, cfg.epsilon)?;
    let n = gen.space().len();
    let damping: Vec<C<T>> = (0..n).map(|i| gen.damping(i)).collect();
    res.check(&damping)?;

    let mut store = init.with_scaling_of(&gen.zero_store());
    store.normalize()?;
    let d = gen.dim();
    let b = d * d;
    let eps = cr(cfg.epsilon);
    let mix = cfg.mixing;
    let keep = T::one() - mix;
    let mut history = Vec::new();
    let mut deriv = gen.zero_store();

    let update = |i: usize, data: &[C<T>], out: &mut [C<T>]| {
        let mut acc: Vec<C<T>> = data[i * b..(i + 1) * b].iter().map(|&z| z * eps).collect();
        gen.coupling_terms(i, coeffs, data, &mut acc);
        let mut work = vec![C::zero(); b];
        res.apply(damping[i], &mut acc, &mut work);
        for ((o, &old), &new) in out.iter_mut().zip(&data[i * b..(i + 1) * b]).zip(&acc) {
            *o = old * keep + new * mix;
        }
    };

    for _ in 0..cfg.max_iter {
        match cfg.sweep {
            SweepMode::GaussSeidel => {
                let mut out = vec![C::zero(); b];
                for i in 0..n {
                    update(i, store.as_slice(), &mut out);
                    store.entry_mut(i).copy_from_slice(&out);
                }
            }
            SweepMode::Jacobi => {
                let old = store.as_slice().to_vec();
                store
                    .as_mut_slice()
                    .par_chunks_mut(b)
                    .enumerate()
                    .for_each(|(i, o)| update(i, &old, o));
            }
        }
        if store.normalize().is_err() {
            // the iterate blew up; surface it as non-convergence
            history.push(T::infinity());
            break;
        }
        gen.apply_into(h_sys, coeffs, &store, &mut deriv)?;
        let r = deriv.max_abs();
        history.push(r);
        if !r.is_finite() {
            break;
        }
        if r < cfg.tol {
            return Ok(SciResult {
                store,
                history,
                converged: true,
            });
        }
    }
    Ok(SciResult {
        store,
        history,
        converged: false,
    })
}

/// Stationary hierarchy with `tr ρ_0 = 1`; fails when the residual does not
/// drop below `cfg.tol` within `cfg.max_iter` sweeps.
pub fn sci_solve<T: Real>(
    gen: &Generator<T>,
    h_sys: &CMatrix<T>,
    coeffs: &GeneratorCoefficients<T>,
    cfg: &SciConfig<T>,
    init: &DdoStore<T>,
) -> Result<SciResult<T>> {
    let r = sci_iterate(gen, h_sys, coeffs, cfg, init)?;
    if r.converged {
        return Ok(r);
    }
    let tail: Vec<String> = r
        .history
        .iter()
        .rev()
        .take(5)
        .rev()
        .map(|x| format!("{:.3e}", x.to_f64().unwrap_or(f64::NAN)))
        .collect();
    Err(DeomError::NoConvergence {
        what: "self-consistent iteration".into(),
        detail: format!(
            "residual {:e} above {:e} after {} sweeps; last residuals [{}]",
            r.residual().to_f64().unwrap_or(f64::NAN),
            cfg.tol.to_f64().unwrap_or(f64::NAN),
            r.history.len(),
            tail.join(", ")
        ),
    })
}

/// Stationary hierarchy by propagating `init` to `t_final` and renormalizing.
pub fn steady_by_propagation<T: Real>(
    gen: &Generator<T>,
    h_sys: &CMatrix<T>,
    coeffs: &GeneratorCoefficients<T>,
    init: &DdoStore<T>,
    cfg: &PropagateConfig<T>,
) -> Result<DdoStore<T>> {
    let drive = ScaledDrive {
        h_sys,
        coefficients: *coeffs,
    };
    let mut s = propagate_store(gen, &drive as &dyn Drive<T>, init, cfg)?;
    s.normalize()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{scaling_factors, IndexSpace, Scaling};
    use crate::model::{build_drude_pade, DrudeSpec, ModeSet};
    use std::sync::Arc;

    fn bench(tier: usize) -> (SystemSpec<f64>, ModeSet<f64>, Generator<f64>) {
        let sys = SystemSpec::<f64>::spin_boson(0.5, 1.0);
        let modes = build_drude_pade(&DrudeSpec::new(0.5, 4.0).unwrap(), 0.5, 2).unwrap();
        let sp = Arc::new(IndexSpace::enumerate(1, modes.n_poles(), tier).unwrap());
        let f = Arc::new(scaling_factors(&sp, &modes));
        let g = Generator::new(sp, &sys, &modes, Scaling::Scaled(f)).unwrap();
        (sys, modes, g)
    }

    #[test]
    fn config_validation() {
        let sys = SystemSpec::<f64>::spin_boson(0.5, 1.0);
        let c = SciConfig::for_system(&sys).unwrap();
        assert!((c.epsilon - 2.0 * (1.25f64).sqrt()).abs() < 1e-12);
        assert!(SciConfig { epsilon: 0.0, ..c }.validate().is_err());
        assert!(SciConfig { mixing: 0.0, ..c }.validate().is_err());
        assert!(SciConfig { mixing: 1.5, ..c }.validate().is_err());
    }

    #[test]
    fn residual_of_zero_store_is_zero() {
        let (sys, _, g) = bench(2);
        let r = residual(&g, sys.h_sys(), &GeneratorCoefficients::real_time(), &g.zero_store()).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn converges_and_is_stationary() {
        let (sys, modes, g) = bench(3);
        let c = GeneratorCoefficients::real_time();
        let cfg = SciConfig::for_system(&sys).unwrap();
        let r = sci_solve(&g, sys.h_sys(), &c, &cfg, &maximally_mixed(&g)).unwrap();
        assert!(r.residual() < 1e-10);
        assert!(residual(&g, sys.h_sys(), &c, &r.store).unwrap() < 1e-10);
        assert!((r.store.trace0() - C::new(1.0, 0.0)).norm() < 1e-14);
        assert!(r.store.pairing_defect(&modes) < 1e-9);

        let jac = SciConfig {
            sweep: SweepMode::Jacobi,
            mixing: 0.8,
            ..cfg
        };
        let other_init = DdoStore::from_reduced(
            g.space().clone(),
            &CMatrix::from_real_rows(&[&[1.0, 0.0], &[0.0, 0.0]]),
            g.scaling().clone(),
        );
        let r2 = sci_solve(&g, sys.h_sys(), &c, &jac, &other_init).unwrap();
        assert!(r.store.max_diff(&r2.store) < 1e-9);
    }

    #[test]
    fn tiny_shift_does_not_converge_quickly() {
        let (sys, _, g) = bench(2);
        let c = GeneratorCoefficients::real_time();
        let cfg = SciConfig {
            epsilon: 1e-6,
            max_iter: 200,
            ..SciConfig::for_system(&sys).unwrap()
        };
        let r = sci_iterate(&g, sys.h_sys(), &c, &cfg, &maximally_mixed(&g)).unwrap();
        assert!(!r.converged);
        assert!(matches!(
            sci_solve(&g, sys.h_sys(), &c, &cfg, &maximally_mixed(&g)),
            Err(DeomError::NoConvergence { .. })
        ));
    }
}
