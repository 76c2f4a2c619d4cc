//! Subcommand drivers. Each returns the artifacts it produced; nothing is
//! written to disk here.

use std::path::Path;
use std::sync::Arc;

use deom::dynamics::{correlation, propagate, ObservableKind, PropagationResult};
use deom::hierarchy::{scaling_factors, Scaling};
use deom::model::{validate_modeset, QuadratureOracle};
use deom::steady::{maximally_mixed, sci_iterate, SweepMode};
use deom::thermo::{
    crooks_check, ideom_propagate, jarzynski_check, lambda_sweep, uniform_lambda_grid, work_distribution, Protocol,
    SweepSolver, WorkConfig, WorkDistribution,
};
use deom::{
    Complex, DdoStore, DeomError, Generator, GeneratorCoefficients, IndexSpace, Matrix, ModeSet, ObservableSpec,
    PropagateConfig, SciConfig, SystemSpec,
};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;

/// Acceptance thresholds echoed in the fluctuation-theorem reports.
pub const JARZYNSKI_TOL: f64 = 0.02;
pub const CROOKS_SLOPE_TOL: f64 = 0.05;
pub const CROOKS_CROSSING_TOL: f64 = 0.05;

pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// Artifacts of a run, plus the error that ended it early (if any). A failed
/// numerical run still hands back diagnostics such as residual histories.
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub index_space: String,
    pub failure: Option<CliError>,
}

struct Setup {
    cfg: RunConfig,
    system: SystemSpec,
    modes: ModeSet,
    gen: Generator,
    beta: f64,
}

impl Setup {
    fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let system = cfg.system()?;
        let modes = cfg.modes()?;
        let gen = generator(cfg, &system, &modes)?;
        Ok(Self {
            cfg: cfg.clone(),
            system,
            modes,
            gen,
            beta: cfg.beta(),
        })
    }

    fn hash(&self) -> String {
        self.gen.space().canonical_hash().to_string()
    }

    fn sci_config(&self) -> Result<SciConfig, CliError> {
        let s = &self.cfg.steady;
        let mut c = SciConfig::for_system(&self.system)?;
        if s.epsilon > 0.0 {
            c.epsilon = s.epsilon;
        }
        c.tol = s.tol;
        c.max_iter = s.max_iter;
        c.mixing = s.mixing;
        c.sweep = if s.sweep == "jacobi" {
            SweepMode::Jacobi
        } else {
            SweepMode::GaussSeidel
        };
        Ok(c)
    }

    /// Equilibrium of the full coupling, from a saved snapshot when one with
    /// a matching index space exists in `reuse`.
    fn steady_store(&self, reuse: Option<&Path>) -> Result<DdoStore, CliError> {
        if let Some(p) = reuse {
            if p.exists() {
                return read_snapshot(p, &self.gen);
            }
        }
        let r = sci_iterate(
            &self.gen,
            self.system.h_sys(),
            &GeneratorCoefficients::real_time(),
            &self.sci_config()?,
            &maximally_mixed(&self.gen),
        )?;
        if !r.converged {
            return Err(DeomError::NoConvergence {
                what: "self-consistent iteration".into(),
                detail: format!("residual {:e} after {} sweeps", r.residual(), r.history.len()),
            }
            .into());
        }
        Ok(r.store)
    }

    /// Reference hybridization free energy for the fluctuation checks.
    fn reference_free_energy(&self) -> Result<(f64, &'static str), CliError> {
        if self.cfg.work.reference == "ideom" {
            let r = ideom_propagate(
                &self.gen,
                &self.system,
                self.beta,
                self.beta / self.cfg.ideom.steps as f64,
            )?;
            return Ok((r.a_hyb, "ideom"));
        }
        let sw = run_sweep(self)?;
        match sw.failure {
            Some(f) => Err(DeomError::NoConvergence {
                what: "λ sweep".into(),
                detail: f,
            }
            .into()),
            None => Ok((sw.a_hyb, "lambda-sweep")),
        }
    }
}

fn generator(cfg: &RunConfig, system: &SystemSpec, modes: &ModeSet) -> Result<Generator, CliError> {
    let space = Arc::new(IndexSpace::enumerate(
        modes.n_u(),
        modes.n_poles(),
        cfg.hierarchy.max_tier,
    )?);
    let scaling = if cfg.hierarchy.representation == "raw" {
        Scaling::Raw
    } else {
        Scaling::Scaled(Arc::new(scaling_factors(&space, modes)))
    };
    Ok(Generator::new(space, system, modes, scaling)?)
}

fn read_snapshot(path: &Path, gen: &Generator) -> Result<DdoStore, CliError> {
    let bytes = std::fs::read(path)?;
    let store = DdoStore::read_snapshot(&bytes[..], Some(gen.space().clone()))?;
    if store.dim() != gen.dim() {
        return Err(CliError::Config(format!(
            "snapshot {} holds {}x{} blocks, system is {}x{}",
            path.display(),
            store.dim(),
            store.dim(),
            gen.dim(),
            gen.dim()
        )));
    }
    Ok(store.with_scaling_of(&gen.zero_store()))
}

fn snapshot_bytes(store: &DdoStore) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    store.write_snapshot(&mut buf)?;
    Ok(buf)
}

/// Inserts the index-space hash as the second header line of a CSV.
fn stamp(csv: String, hash: &str) -> Vec<u8> {
    match csv.split_once('\n') {
        Some((first, rest)) => format!("{first}\n# index_space {hash}\n{rest}").into_bytes(),
        None => csv.into_bytes(),
    }
}

fn json_bytes<S: Serialize>(value: &S) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

fn artifact(name: &str, bytes: Vec<u8>) -> Artifact {
    Artifact {
        name: name.to_string(),
        bytes,
    }
}

fn finite_or_null(x: f64) -> serde_json::Value {
    if x.is_finite() {
        json!(x)
    } else {
        serde_json::Value::Null
    }
}

fn matrix_json(m: &Matrix) -> serde_json::Value {
    let d = m.dim();
    let rows: Vec<Vec<[f64; 2]>> = (0..d)
        .map(|i| (0..d).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
        .collect();
    json!(rows)
}

/// A named quantity read from a hierarchy.
enum Probe {
    Spec(ObservableSpec),
    /// `Σ_k ⟨f_{0k}⟩`, expanded into per-pole hybrid observables.
    MeanForce,
}

fn pauli(name: &str) -> Option<Matrix> {
    let c = |re: f64, im: f64| Complex::new(re, im);
    let v = match name {
        "sx" => vec![c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)],
        "sy" => vec![c(0.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(0.0, 0.0)],
        "sz" => vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)],
        _ => return None,
    };
    Matrix::from_vec(2, v).ok()
}

/// Observable names: `sx`, `sy`, `sz` (two-level systems), `q`, `h`, `id`,
/// `f` (total bath force), `f:<k>` and `phi:<k>` (dissipaton `k`).
fn probe(name: &str, system: &SystemSpec, modes: &ModeSet) -> Result<Probe, CliError> {
    let d = system.dim();
    let id = Matrix::identity(d);
    let pole = |s: &str| -> Result<usize, CliError> {
        let k: usize = s
            .parse()
            .map_err(|_| CliError::Config(format!("bad pole index in observable `{name}`")))?;
        if k >= modes.n_poles() {
            return Err(CliError::Config(format!(
                "observable `{name}` references pole {k}, the mode set has {}",
                modes.n_poles()
            )));
        }
        Ok(k)
    };
    let spec = match name {
        "sx" | "sy" | "sz" => {
            if d != 2 {
                return Err(CliError::Config(format!(
                    "observable `{name}` needs a two-level system"
                )));
            }
            ObservableSpec::system(name, pauli(name).expect("pauli"))
        }
        "q" => ObservableSpec::system(name, system.q_modes()[0].clone()),
        "h" => ObservableSpec::system(name, system.h_sys().clone()),
        "id" => ObservableSpec::system(name, id),
        "f" => return Ok(Probe::MeanForce),
        _ => {
            if let Some(k) = name.strip_prefix("f:") {
                ObservableSpec::hybrid(name, id, 0, pole(k)?)
            } else if let Some(k) = name.strip_prefix("phi:") {
                ObservableSpec::momentum(name, id, 0, pole(k)?)
            } else {
                return Err(CliError::Config(format!("unknown observable `{name}`")));
            }
        }
    };
    Ok(Probe::Spec(spec))
}

fn single_spec(name: &str, system: &SystemSpec, modes: &ModeSet) -> Result<ObservableSpec, CliError> {
    match probe(name, system, modes)? {
        Probe::Spec(s) => Ok(s),
        Probe::MeanForce => Err(CliError::Config(
            "the total force `f` is not a single operator here; use `f:<k>`".into(),
        )),
    }
}

/// Initial hierarchy named by `propagate.init`.
fn initial_store(s: &Setup, out_dir: &Path) -> Result<DdoStore, CliError> {
    let init = s.cfg.propagate.init.as_str();
    let d = s.system.dim();
    let reduced = match init {
        "thermal-product" => s.system.thermal_state(s.beta)?,
        "excited" => {
            let mut m = Matrix::zeros(d);
            m[(0, 0)] = Complex::new(1.0, 0.0);
            m
        }
        "ground" => {
            let (_, v) = s.system.h_sys().eigh()?;
            let mut m = Matrix::zeros(d);
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] = v[(i, 0)] * v[(j, 0)].conj();
                }
            }
            m
        }
        "steady" => return s.steady_store(Some(&out_dir.join("steady.snap"))),
        other => {
            if let Some(p) = other.strip_prefix("snapshot:") {
                return read_snapshot(Path::new(p), &s.gen);
            }
            return Err(CliError::Config(format!("unknown propagate.init `{other}`")));
        }
    };
    Ok(DdoStore::from_reduced(
        s.gen.space().clone(),
        &reduced,
        s.gen.scaling().clone(),
    ))
}

pub fn decompose(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let modes = cfg.modes()?;
    let spec = cfg.drude()?;
    let oracle = QuadratureOracle::new(spec, cfg.beta());
    let report = validate_modeset(
        &modes,
        &oracle,
        cfg.decomposition.validate_t_max,
        cfg.decomposition.validate_samples,
    )?;
    let space = IndexSpace::enumerate(modes.n_u(), modes.n_poles(), cfg.hierarchy.max_tier)?;
    let hash = space.canonical_hash().to_string();
    let summary = json!({
        "scheme": cfg.decomposition.scheme,
        "poles": modes.n_poles(),
        "beta": cfg.beta(),
        "markov_residual": modes.markov_residual(0),
        "hierarchy_entries": space.len(),
        "validation": report,
    });
    Ok(Outcome {
        artifacts: vec![
            artifact("modes.csv", stamp(modes.to_csv(), &hash)),
            artifact("decompose.json", json_bytes(&summary)),
        ],
        index_space: hash,
        failure: None,
    })
}

pub fn run_propagate(cfg: &RunConfig, out_dir: &Path) -> Result<Outcome, CliError> {
    let s = Setup::new(cfg)?;
    let p = &cfg.propagate;
    let mut specs = Vec::new();
    // (column name, indices into specs that sum to it)
    let mut columns: Vec<(String, Vec<usize>)> = Vec::new();
    for name in &p.observables {
        match probe(name, &s.system, &s.modes)? {
            Probe::Spec(o) => {
                columns.push((name.clone(), vec![specs.len()]));
                specs.push(o);
            }
            Probe::MeanForce => {
                let id = Matrix::identity(s.system.dim());
                let idx: Vec<usize> = (0..s.modes.n_poles()).map(|k| specs.len() + k).collect();
                for k in 0..s.modes.n_poles() {
                    specs.push(ObservableSpec::hybrid(format!("f:{k}"), id.clone(), 0, k));
                }
                columns.push((name.clone(), idx));
            }
        }
    }
    let store0 = initial_store(&s, out_dir)?;
    let pc = PropagateConfig {
        t_final: p.t_final,
        dt: p.dt,
        filter_tol: cfg.hierarchy.filter_tol,
        divergence_bound: p.divergence_bound,
        sample_stride: p.sample_stride,
    };
    let r = propagate(&s.gen, s.system.h_sys(), &s.modes, &store0, &pc, &specs)?;
    let values: Vec<Vec<Complex>> = columns
        .iter()
        .map(|(_, idx)| {
            (0..r.times.len())
                .map(|i| idx.iter().map(|&j| r.values[j][i]).sum())
                .collect()
        })
        .collect();
    let names: Vec<String> = columns.iter().map(|(n, _)| n.clone()).collect();
    let trace_drift = (r.final_store.trace0() - Complex::new(1.0, 0.0)).norm();
    let combined = PropagationResult {
        times: r.times,
        names,
        values,
        final_store: r.final_store,
        filtered: r.filtered,
    };
    let hash = s.hash();
    let summary = json!({
        "t_final": p.t_final,
        "dt": p.dt,
        "init": p.init,
        "samples": combined.times.len(),
        "filtered_entries": combined.filtered,
        "final_trace_drift": trace_drift,
        "final_pairing_defect": combined.final_store.pairing_defect(&s.modes),
        "final_reduced": matrix_json(&combined.final_store.reduced()),
    });
    Ok(Outcome {
        artifacts: vec![
            artifact("trajectory.csv", stamp(combined.to_csv(), &hash)),
            artifact("final.snap", snapshot_bytes(&combined.final_store)?),
            artifact("propagate.json", json_bytes(&summary)),
        ],
        index_space: hash,
        failure: None,
    })
}

pub fn run_steady(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let s = Setup::new(cfg)?;
    let sc = s.sci_config()?;
    let r = sci_iterate(
        &s.gen,
        s.system.h_sys(),
        &GeneratorCoefficients::real_time(),
        &sc,
        &maximally_mixed(&s.gen),
    )?;
    let hash = s.hash();
    let mut obs = serde_json::Map::new();
    for name in ["sx", "sy", "sz", "q"] {
        if let Ok(Probe::Spec(o)) = probe(name, &s.system, &s.modes) {
            let v = deom::dynamics::expectation(&r.store, &o, &s.modes)?;
            obs.insert(name.into(), json!([v.re, v.im]));
        }
    }
    let f = deom::dynamics::mean_force(&r.store, &s.modes, 0)?;
    obs.insert("f".into(), json!([f.re, f.im]));
    let summary = json!({
        "converged": r.converged,
        "iterations": r.history.len(),
        "residual": finite_or_null(r.residual()),
        "epsilon": sc.epsilon,
        "tol": sc.tol,
        "reduced": matrix_json(&r.store.reduced()),
        "observables": obs,
    });
    let mut artifacts = vec![
        artifact("steady_history.csv", stamp(r.history_csv(), &hash)),
        artifact("steady.json", json_bytes(&summary)),
    ];
    let failure = if r.converged {
        artifacts.push(artifact("steady.snap", snapshot_bytes(&r.store)?));
        None
    } else {
        Some(
            DeomError::NoConvergence {
                what: "self-consistent iteration".into(),
                detail: format!("residual {:e} after {} sweeps", r.residual(), r.history.len()),
            }
            .into(),
        )
    };
    Ok(Outcome {
        artifacts,
        index_space: hash,
        failure,
    })
}

pub fn run_ideom(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let s = Setup::new(cfg)?;
    let r = ideom_propagate(&s.gen, &s.system, s.beta, s.beta / cfg.ideom.steps as f64)?;
    let normalized = r.normalized()?;
    let hash = s.hash();
    let summary = json!({
        "beta": s.beta,
        "steps": r.steps,
        "z_hyb": r.z_hyb,
        "z_phase": r.z_phase,
        "a_hyb": r.a_hyb,
        "reduced": matrix_json(&normalized.reduced()),
    });
    Ok(Outcome {
        artifacts: vec![
            artifact("ideom.snap", snapshot_bytes(&normalized)?),
            artifact("ideom.json", json_bytes(&summary)),
        ],
        index_space: hash,
        failure: None,
    })
}

fn run_sweep(s: &Setup) -> Result<deom::thermo::LambdaSweep, CliError> {
    let grid = uniform_lambda_grid(s.cfg.free_energy.points);
    let solver = if s.cfg.free_energy.solver == "propagation" {
        SweepSolver::Propagation(PropagateConfig::new(s.cfg.free_energy.t_relax, s.cfg.propagate.dt))
    } else {
        SweepSolver::Sci(s.sci_config()?)
    };
    Ok(lambda_sweep(&s.gen, &s.system, s.modes.n_poles(), &grid, &solver)?)
}

pub fn run_free_energy(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let s = Setup::new(cfg)?;
    let sw = run_sweep(&s)?;
    let hash = s.hash();
    let summary = json!({
        "points": sw.grid.len(),
        "solver": cfg.free_energy.solver,
        "a_hyb": finite_or_null(sw.a_hyb),
        "complete": sw.is_complete(),
        "failure": sw.failure,
    });
    let failure = sw.failure.clone().map(|f| {
        DeomError::NoConvergence {
            what: "λ sweep".into(),
            detail: f,
        }
        .into()
    });
    Ok(Outcome {
        artifacts: vec![
            artifact("lambda_sweep.csv", stamp(sw.to_csv(), &hash)),
            artifact("free_energy.json", json_bytes(&summary)),
        ],
        index_space: hash,
        failure,
    })
}

fn work_config(cfg: &RunConfig) -> WorkConfig {
    let w = &cfg.work;
    WorkConfig {
        n_half: w.n_half,
        tau_max: w.tau_max,
        dt: w.dt,
        oversample: w.oversample,
        decay_tol: w.decay_tol,
        max_extensions: w.max_extensions,
        divergence_bound: w.divergence_bound,
    }
}

fn distribution_summary(wd: &WorkDistribution) -> serde_json::Value {
    json!({
        "normalization": wd.normalization,
        "negative_mass": wd.negative_mass,
        "mean_work": wd.mean_work,
        "chi_tail": wd.tail,
        "resolved": wd.resolved,
        "tau_points": wd.tau.len(),
        "d_tau": wd.d_tau,
        "dw": wd.dw,
    })
}

fn forward_run(s: &Setup, protocol: &Protocol) -> Result<WorkDistribution, CliError> {
    let rho = s.system.thermal_state(s.beta)?;
    let init = DdoStore::from_reduced(s.gen.space().clone(), &rho, s.gen.scaling().clone());
    Ok(work_distribution(
        &s.gen,
        s.system.h_sys(),
        protocol,
        s.beta,
        &init,
        &work_config(&s.cfg),
    )?)
}

pub fn run_work(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let s = Setup::new(cfg)?;
    let protocol = Protocol::exponential(cfg.work.alpha, cfg.work.t_final)?;
    let (a_ref, source) = s.reference_free_energy()?;
    let wd = forward_run(&s, &protocol)?;
    let jz = jarzynski_check(&wd, a_ref);
    let hash = s.hash();
    let summary = json!({
        "beta": s.beta,
        "protocol": { "alpha": cfg.work.alpha, "t_final": cfg.work.t_final },
        "a_hyb_reference": a_ref,
        "reference_source": source,
        "distribution": distribution_summary(&wd),
        "mean_work_minus_a_hyb": wd.mean_work - a_ref,
        "jarzynski": jz,
        "tolerance": JARZYNSKI_TOL,
        "pass": jz.rel_err < JARZYNSKI_TOL,
    });
    Ok(Outcome {
        artifacts: vec![
            artifact("work_chi.csv", stamp(wd.chi_csv(), &hash)),
            artifact("work_p.csv", stamp(wd.p_csv(), &hash)),
            artifact("work.json", json_bytes(&summary)),
        ],
        index_space: hash,
        failure: None,
    })
}

pub fn run_crooks(cfg: &RunConfig, out_dir: &Path) -> Result<Outcome, CliError> {
    let s = Setup::new(cfg)?;
    let protocol = Protocol::exponential(cfg.work.alpha, cfg.work.t_final)?;
    let (a_ref, source) = s.reference_free_energy()?;
    let fwd = forward_run(&s, &protocol)?;
    let eq = s.steady_store(Some(&out_dir.join("steady.snap")))?;
    let bwd = work_distribution(
        &s.gen,
        s.system.h_sys(),
        &protocol.reversed(),
        s.beta,
        &eq,
        &work_config(cfg),
    )?;
    let report = crooks_check(&fwd, &bwd, a_ref, cfg.work.crooks_floor)?;
    let jf = jarzynski_check(&fwd, a_ref);
    let jb = jarzynski_check(&bwd, -a_ref);
    let slope_err = (report.slope / s.beta - 1.0).abs();
    let crossing_err = report.crossing.map(|c| (c - a_ref).abs());
    let hash = s.hash();
    let summary = json!({
        "beta": s.beta,
        "protocol": { "alpha": cfg.work.alpha, "t_final": cfg.work.t_final },
        "a_hyb_reference": a_ref,
        "reference_source": source,
        "forward": distribution_summary(&fwd),
        "backward": distribution_summary(&bwd),
        "crooks": report,
        "slope_rel_err": finite_or_null(slope_err),
        "crossing_abs_err": crossing_err,
        "jarzynski_forward": jf,
        "jarzynski_backward": jb,
        "tolerances": {
            "slope_rel": CROOKS_SLOPE_TOL,
            "crossing_abs": CROOKS_CROSSING_TOL,
            "jarzynski_rel": JARZYNSKI_TOL,
        },
        "pass": !report.inconclusive
            && slope_err < CROOKS_SLOPE_TOL
            && crossing_err.is_some_and(|e| e < CROOKS_CROSSING_TOL),
    });
    Ok(Outcome {
        artifacts: vec![
            artifact("crooks_forward_chi.csv", stamp(fwd.chi_csv(), &hash)),
            artifact("crooks_forward_p.csv", stamp(fwd.p_csv(), &hash)),
            artifact("crooks_backward_chi.csv", stamp(bwd.chi_csv(), &hash)),
            artifact("crooks_backward_p.csv", stamp(bwd.p_csv(), &hash)),
            artifact("crooks.json", json_bytes(&summary)),
        ],
        index_space: hash,
        failure: None,
    })
}

pub fn run_correlate(cfg: &RunConfig, out_dir: &Path) -> Result<Outcome, CliError> {
    let s = Setup::new(cfg)?;
    let c = &cfg.correlate;
    let a = single_spec(&c.a, &s.system, &s.modes)?;
    let b = single_spec(&c.b, &s.system, &s.modes)?;
    let eq = s.steady_store(Some(&out_dir.join("steady.snap")))?;
    let pc = PropagateConfig {
        t_final: c.t_final,
        dt: c.dt,
        filter_tol: cfg.hierarchy.filter_tol,
        divergence_bound: cfg.propagate.divergence_bound,
        sample_stride: c.sample_stride,
    };
    let r = correlation(&s.gen, s.system.h_sys(), &s.modes, &a, &b, &eq, &pc)?;
    let name = format!("{}_{}", c.a.replace(':', ""), c.b.replace(':', ""));
    let hash = s.hash();
    let summary = json!({
        "a": c.a,
        "b": c.b,
        "b_kind": match b.kind {
            ObservableKind::System => "system",
            ObservableKind::Hybrid => "hybrid",
            ObservableKind::Momentum => "momentum",
        },
        "samples": r.times.len(),
        "t0_value": r.values.first().map(|z| [z.re, z.im]),
        "truncated_entries": r.truncation.truncated_entries,
        "top_tier_magnitude": r.truncation.top_tier_magnitude,
    });
    Ok(Outcome {
        artifacts: vec![
            artifact("correlation.csv", stamp(r.to_csv(&name), &hash)),
            artifact("correlate.json", json_bytes(&summary)),
        ],
        index_space: hash,
        failure: None,
    })
}
