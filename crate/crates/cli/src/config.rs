//! Run configuration: a sectioned TOML file plus `section.key=value`
//! overrides from the command line.

use std::path::Path;

use deom::model::{
    build_drude_matsubara, build_drude_matsubara_corrected, build_drude_pade, build_drude_pade_corrected,
};
use deom::{DrudeSpec, Matrix, ModeSet, SystemSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// The shipped benchmark configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/benchmark.toml");

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub bath: BathSection,
    pub decomposition: DecompositionSection,
    pub hierarchy: HierarchySection,
    #[serde(default)]
    pub propagate: PropagateSection,
    #[serde(default)]
    pub steady: SteadySection,
    #[serde(default)]
    pub ideom: IdeomSection,
    #[serde(default)]
    pub free_energy: FreeEnergySection,
    #[serde(default)]
    pub work: WorkSection,
    #[serde(default)]
    pub correlate: CorrelateSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// "spin-boson" (H = ε σz + Δ σx, Q = σz) or "custom".
    pub preset: String,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    /// Custom system: real part of H_S, row by row.
    #[serde(default)]
    pub h_re: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub h_im: Option<Vec<Vec<f64>>>,
    /// Custom system: the (real symmetric) coupling operator Q.
    #[serde(default)]
    pub q: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BathSection {
    pub eta: f64,
    pub gamma: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecompositionSection {
    /// "pade" or "matsubara".
    pub scheme: String,
    pub poles: usize,
    /// Fold the omitted poles into a white-noise term.
    #[serde(default)]
    pub markov_residual: bool,
    /// Window for the decomposition validation report.
    #[serde(default = "default_validate_t_max")]
    pub validate_t_max: f64,
    #[serde(default = "default_validate_samples")]
    pub validate_samples: usize,
}

fn default_validate_t_max() -> f64 {
    5.0
}

fn default_validate_samples() -> usize {
    200
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HierarchySection {
    pub max_tier: usize,
    #[serde(default)]
    pub filter_tol: f64,
    /// "scaled" or "raw".
    #[serde(default = "default_representation")]
    pub representation: String,
}

fn default_representation() -> String {
    "scaled".into()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PropagateSection {
    pub t_final: f64,
    pub dt: f64,
    pub sample_stride: usize,
    /// "thermal-product", "ground", "excited", "steady", or "snapshot:<path>".
    pub init: String,
    pub observables: Vec<String>,
    pub divergence_bound: f64,
}

impl Default for PropagateSection {
    fn default() -> Self {
        Self {
            t_final: 50.0,
            dt: 0.01,
            sample_stride: 10,
            init: "excited".into(),
            observables: vec!["sz".into(), "sx".into(), "sy".into(), "f".into()],
            divergence_bound: 1e8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SteadySection {
    /// Resolvent shift; 0 selects the spectral span of H_S.
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub mixing: f64,
    /// "gauss-seidel" or "jacobi".
    pub sweep: String,
}

impl Default for SteadySection {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            tol: 1e-10,
            max_iter: 20000,
            mixing: 1.0,
            sweep: "gauss-seidel".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct IdeomSection {
    /// RK4 steps across [0, β].
    pub steps: usize,
}

impl Default for IdeomSection {
    fn default() -> Self {
        Self { steps: 2000 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FreeEnergySection {
    pub points: usize,
    /// "sci" or "propagation".
    pub solver: String,
    /// Propagation time per λ point when solver = "propagation".
    pub t_relax: f64,
}

impl Default for FreeEnergySection {
    fn default() -> Self {
        Self {
            points: 21,
            solver: "sci".into(),
            t_relax: 200.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorkSection {
    /// Protocol λ(t) = (1 - e^{-αt}) / (1 - e^{-α t_f}).
    pub alpha: f64,
    pub t_final: f64,
    pub dt: f64,
    pub n_half: usize,
    pub tau_max: f64,
    pub oversample: usize,
    pub decay_tol: f64,
    pub max_extensions: usize,
    pub divergence_bound: f64,
    pub crooks_floor: f64,
    /// Source of the reference free energy: "lambda-sweep" or "ideom".
    pub reference: String,
}

impl Default for WorkSection {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            t_final: 50.0,
            dt: 0.02,
            n_half: 81,
            tau_max: 40.0,
            oversample: 8,
            decay_tol: 1e-3,
            max_extensions: 2,
            divergence_bound: 1e8,
            crooks_floor: 1e-4,
            reference: "lambda-sweep".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelateSection {
    pub a: String,
    pub b: String,
    pub t_final: f64,
    pub dt: f64,
    pub sample_stride: usize,
}

impl Default for CorrelateSection {
    fn default() -> Self {
        Self {
            a: "sz".into(),
            b: "sz".into(),
            t_final: 20.0,
            dt: 0.01,
            sample_stride: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "deom-out".into() }
    }
}

/// Parses `text`, applies `section.key=value` overrides and validates.
pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut value: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: RunConfig = value.try_into().map_err(|e| CliError::Config(format!("{e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => {
            std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?
        }
        None => DEFAULT_CONFIG.to_string(),
    };
    parse(&text, overrides)
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    // parse as a TOML value, falling back to a bare string
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for p in &path[..path.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn positive(name: &str, x: f64) -> Result<(), CliError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive and finite, got {x}")))
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Vec<f64>, CliError> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(CliError::Config(format!("{what} must be a non-empty square matrix")));
    }
    Ok(rows.iter().flatten().copied().collect())
}

impl RunConfig {
    pub fn beta(&self) -> f64 {
        1.0 / self.bath.temperature
    }

    pub fn validate(&self) -> Result<(), CliError> {
        positive("bath.temperature", self.bath.temperature)?;
        positive("bath.gamma", self.bath.gamma)?;
        if !(self.bath.eta >= 0.0 && self.bath.eta.is_finite()) {
            return Err(CliError::Config(format!(
                "bath.eta must be >= 0, got {}",
                self.bath.eta
            )));
        }
        match self.decomposition.scheme.as_str() {
            "pade" if self.decomposition.poles == 0 => {
                return Err(CliError::Config("decomposition.poles must be >= 1 for pade".into()))
            }
            "pade" | "matsubara" => {}
            s => return Err(CliError::Config(format!("unknown decomposition.scheme `{s}`"))),
        }
        positive("decomposition.validate_t_max", self.decomposition.validate_t_max)?;
        if !matches!(self.hierarchy.representation.as_str(), "scaled" | "raw") {
            return Err(CliError::Config(format!(
                "hierarchy.representation must be scaled or raw, got `{}`",
                self.hierarchy.representation
            )));
        }
        if !(self.hierarchy.filter_tol >= 0.0) {
            return Err(CliError::Config("hierarchy.filter_tol must be >= 0".into()));
        }
        positive("propagate.t_final", self.propagate.t_final)?;
        positive("propagate.dt", self.propagate.dt)?;
        positive("propagate.divergence_bound", self.propagate.divergence_bound)?;
        if self.propagate.sample_stride == 0 || self.correlate.sample_stride == 0 {
            return Err(CliError::Config("sample_stride must be >= 1".into()));
        }
        if !(self.steady.epsilon >= 0.0) {
            return Err(CliError::Config(
                "steady.epsilon must be >= 0 (0 selects the spectral span)".into(),
            ));
        }
        positive("steady.tol", self.steady.tol)?;
        if !(self.steady.mixing > 0.0 && self.steady.mixing <= 1.0) {
            return Err(CliError::Config("steady.mixing must lie in (0, 1]".into()));
        }
        if !matches!(self.steady.sweep.as_str(), "gauss-seidel" | "jacobi") {
            return Err(CliError::Config(format!(
                "unknown steady.sweep `{}`",
                self.steady.sweep
            )));
        }
        if self.ideom.steps == 0 {
            return Err(CliError::Config("ideom.steps must be >= 1".into()));
        }
        if self.free_energy.points < 2 {
            return Err(CliError::Config("free_energy.points must be >= 2".into()));
        }
        if !matches!(self.free_energy.solver.as_str(), "sci" | "propagation") {
            return Err(CliError::Config(format!(
                "unknown free_energy.solver `{}`",
                self.free_energy.solver
            )));
        }
        positive("free_energy.t_relax", self.free_energy.t_relax)?;
        let w = &self.work;
        if !(w.alpha >= 0.0 && w.alpha.is_finite()) {
            return Err(CliError::Config("work.alpha must be >= 0".into()));
        }
        positive("work.t_final", w.t_final)?;
        positive("work.dt", w.dt)?;
        positive("work.tau_max", w.tau_max)?;
        positive("work.decay_tol", w.decay_tol)?;
        positive("work.divergence_bound", w.divergence_bound)?;
        positive("work.crooks_floor", w.crooks_floor)?;
        if w.n_half < 2 || w.oversample == 0 {
            return Err(CliError::Config(
                "work.n_half must be >= 2 and work.oversample >= 1".into(),
            ));
        }
        if !matches!(w.reference.as_str(), "lambda-sweep" | "ideom") {
            return Err(CliError::Config(format!("unknown work.reference `{}`", w.reference)));
        }
        positive("correlate.t_final", self.correlate.t_final)?;
        positive("correlate.dt", self.correlate.dt)?;
        if self.output.dir.is_empty() {
            return Err(CliError::Config("output.dir must not be empty".into()));
        }
        self.system()?;
        Ok(())
    }

    pub fn system(&self) -> Result<SystemSpec, CliError> {
        let m = &self.model;
        match m.preset.as_str() {
            "spin-boson" => {
                let e = m
                    .epsilon
                    .ok_or_else(|| CliError::Config("model.epsilon missing".into()))?;
                let d = m.delta.ok_or_else(|| CliError::Config("model.delta missing".into()))?;
                if !(e.is_finite() && d.is_finite()) {
                    return Err(CliError::Config("model.epsilon and model.delta must be finite".into()));
                }
                Ok(SystemSpec::spin_boson(e, d))
            }
            "custom" => {
                let h_re = m
                    .h_re
                    .as_ref()
                    .ok_or_else(|| CliError::Config("model.h_re missing".into()))?;
                let q = m.q.as_ref().ok_or_else(|| CliError::Config("model.q missing".into()))?;
                let re = matrix(h_re, "model.h_re")?;
                let d = h_re.len();
                let im = match &m.h_im {
                    Some(rows) => matrix(rows, "model.h_im")?,
                    None => vec![0.0; d * d],
                };
                let qv = matrix(q, "model.q")?;
                if im.len() != d * d || qv.len() != d * d {
                    return Err(CliError::Config("model matrices have different sizes".into()));
                }
                let h = Matrix::from_vec(d, re.iter().zip(&im).map(|(&a, &b)| deom::Complex::new(a, b)).collect())?;
                let q = Matrix::from_vec(d, qv.iter().map(|&a| deom::Complex::new(a, 0.0)).collect())?;
                Ok(SystemSpec::new(h, vec![q]).map_err(|e| CliError::Config(e.to_string()))?)
            }
            p => Err(CliError::Config(format!("unknown model.preset `{p}`"))),
        }
    }

    pub fn drude(&self) -> Result<DrudeSpec, CliError> {
        DrudeSpec::new(self.bath.eta, self.bath.gamma).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Mode set at the configured temperature.
    pub fn modes(&self) -> Result<ModeSet, CliError> {
        self.modes_at(self.beta())
    }

    pub fn modes_at(&self, beta: f64) -> Result<ModeSet, CliError> {
        let spec = self.drude()?;
        let d = &self.decomposition;
        let set = match (d.scheme.as_str(), d.markov_residual) {
            ("pade", false) => build_drude_pade(&spec, beta, d.poles),
            ("pade", true) => build_drude_pade_corrected(&spec, beta, d.poles),
            (_, false) => build_drude_matsubara(&spec, beta, d.poles),
            (_, true) => build_drude_matsubara_corrected(&spec, beta, d.poles),
        };
        set.map_err(|e| CliError::Config(e.to_string()))
    }

    /// Canonical TOML rendering of the resolved configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(o: &[&str]) -> Vec<String> {
        o.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn shipped_config_parses_and_round_trips() {
        let cfg = parse(DEFAULT_CONFIG, &[]).unwrap();
        assert_eq!(cfg.bath.temperature, 2.0);
        assert_eq!(cfg.hierarchy.max_tier, 4);
        let again = parse(&cfg.canonical(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.modes().unwrap().n_poles(), 3);
    }

    #[test]
    fn overrides_take_numbers_strings_and_arrays() {
        let cfg = parse(
            DEFAULT_CONFIG,
            &set(&[
                "bath.temperature=0.3",
                "decomposition.scheme=pade",
                "decomposition.markov_residual=false",
                "propagate.observables=[\"sz\", \"q\"]",
                "output.dir=/tmp/x y",
            ]),
        )
        .unwrap();
        assert!((cfg.beta() - 1.0 / 0.3).abs() < 1e-12);
        assert_eq!(cfg.decomposition.scheme, "pade");
        assert_eq!(cfg.propagate.observables, vec!["sz", "q"]);
        assert_eq!(cfg.output.dir, "/tmp/x y");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in [
            "bath.temperature=-1",
            "bath.gamma=0",
            "decomposition.scheme=fourier",
            "steady.mixing=1.5",
            "work.n_half=1",
            "hierarchy.representation=dense",
            "model.preset=ising",
            "bath.colour=3",
            "nonsense",
        ] {
            let r = parse(DEFAULT_CONFIG, &set(&[o]));
            assert!(matches!(r, Err(CliError::Config(_))), "{o} accepted");
        }
    }

    #[test]
    fn custom_model_is_checked() {
        let base = DEFAULT_CONFIG.replace("preset = \"spin-boson\"", "preset = \"custom\"");
        let ok = parse(
            &base,
            &set(&[
                "model.h_re=[[1.0, 0.2], [0.2, -1.0]]",
                "model.q=[[1.0, 0.0], [0.0, -1.0]]",
            ]),
        )
        .unwrap();
        assert_eq!(ok.system().unwrap().dim(), 2);
        let not_hermitian = parse(
            &base,
            &set(&[
                "model.h_re=[[1.0, 0.2], [0.3, -1.0]]",
                "model.q=[[1.0, 0.0], [0.0, -1.0]]",
            ]),
        );
        assert!(not_hermitian.is_err());
        let ragged = parse(
            &base,
            &set(&["model.h_re=[[1.0, 0.2], [0.2]]", "model.q=[[1.0, 0.0], [0.0, -1.0]]"]),
        );
        assert!(ragged.is_err());
    }
}
