//! Scenario configuration: a versioned JSON document, SI units throughout.

use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub geometry: GeometryBlock,
    pub medium: MediumBlock,
    pub membrane: MembraneBlock,
    #[serde(default)]
    pub damping: DampingBlock,
    pub source: SourceBlock,
    pub numerics: NumericsBlock,
    /// Points where the pressure is sampled, in m.
    #[serde(default)]
    pub probes: Vec<Vec<f64>>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub validate: ValidateBlock,
    #[serde(default)]
    pub magnus: Option<MagnusBlock>,
    #[serde(default)]
    pub output: OutputBlock,
    /// Seeds the random modal combinations of the piston diagnostic.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryBlock {
    /// Box edge lengths in m, one per dimension (1 to 3).
    pub lengths: Vec<f64>,
    pub patches: Vec<PatchBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SideName {
    Low,
    High,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchBlock {
    /// Normal axis of the face the patch sits on.
    pub axis: usize,
    pub side: SideName,
    /// Extents along the tangent axes in m; empty on a 1D cavity.
    #[serde(default)]
    pub lo: Vec<f64>,
    #[serde(default)]
    pub hi: Vec<f64>,
    /// Stiffness eigenvalue (1/m^2) of the rigid mode of a 1D piston.
    #[serde(default)]
    pub piston_gamma: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumBlock {
    /// Speed of sound, m/s.
    pub c: f64,
    /// Fluid density, kg/m^3.
    pub rho0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MembraneBlock {
    /// Membrane density, kg/m^3.
    pub rho_m: f64,
    /// Thickness d, m.
    pub thickness: f64,
    /// Tension wave speed squared, m^2/s^2.
    pub c_m2: f64,
    /// Bending coefficient, m^2/s^2.
    #[serde(default)]
    pub c_h2: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DampingBlock {
    #[serde(default)]
    pub model: DampingModel,
    /// Rate in 1/s; ignored for `none`.
    #[serde(default)]
    pub alpha: f64,
    /// How the effective mass enters the membrane kernel.
    #[serde(default)]
    pub mass: MassModel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassModel {
    /// Averaged over the lag `t - tau`.
    #[default]
    LagAverage,
    /// Evaluated at the source time.
    Pointwise,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DampingModel {
    #[default]
    None,
    Exponential,
    Rational,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceBlock {
    /// Complex amplitude `[re, im]` of the external pressure, Pa.
    pub amplitude: [f64; 2],
    /// Angular frequency, rad/s.
    pub omega: f64,
    /// Which patches feel the external pressure, one flag per patch.
    pub patches: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsBlock {
    /// Cavity modes per axis.
    pub cavity_modes: usize,
    /// Patch modes per tangent axis.
    #[serde(default = "one")]
    pub patch_modes: usize,
    /// End of the simulated interval, s.
    pub t_end: f64,
    /// Time step as a fraction of the fastest modal period / 2 pi.
    #[serde(default = "step_fraction")]
    pub step_fraction: f64,
    #[serde(default = "picard_iterations")]
    pub picard_iterations: usize,
    /// Perturbation strength; defaults to g^2.
    #[serde(default)]
    pub eps: Option<f64>,
    /// Every n-th time sample is written.
    #[serde(default = "one")]
    pub output_stride: usize,
}

fn one() -> usize {
    1
}

fn step_fraction() -> f64 {
    0.2
}

fn picard_iterations() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Relative L2 bound of `validate`; defaults to max(10 g^2, 1e-3).
    #[serde(default)]
    pub validate: Option<f64>,
    /// Residual of the second-order eigenvalue shift, relative to max(1, lambda).
    #[serde(default = "eigs_tol")]
    pub eigs: f64,
    /// Optional bound on the order-3 Magnus propagator error.
    #[serde(default)]
    pub magnus: Option<f64>,
}

fn eigs_tol() -> f64 {
    1e-8
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            validate: None,
            eigs: eigs_tol(),
            magnus: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateBlock {
    /// FDTD cell size, m.
    #[serde(default = "dx")]
    pub dx: f64,
    #[serde(default = "cfl")]
    pub cfl: f64,
}

/// Where results go when `--out` is not given.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    /// Relative paths resolve against the config file's directory.
    #[serde(default)]
    pub dir: Option<std::path::PathBuf>,
}

fn dx() -> f64 {
    2.5e-4
}

fn cfl() -> f64 {
    0.5
}

impl Default for ValidateBlock {
    fn default() -> Self {
        ValidateBlock { dx: dx(), cfl: cfl() }
    }
}

/// Generator `A(t) = a0 + t a1` checked on `[tau, t]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagnusBlock {
    pub a0: Vec<Vec<f64>>,
    pub a1: Vec<Vec<f64>>,
    #[serde(default)]
    pub tau: f64,
    pub t: f64,
}

impl Default for MagnusBlock {
    fn default() -> Self {
        MagnusBlock {
            a0: vec![vec![0.0, 1.0], vec![0.0, 0.0]],
            a1: vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            tau: 0.0,
            t: 1.0,
        }
    }
}

/// A configuration problem, anchored to a line of the file when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

/// Line (1-based) of the last key of a dotted path, found by walking the
/// path's keys in document order.
fn line_of(text: &str, path: &str) -> Option<usize> {
    let lines: Vec<&str> = text.lines().collect();
    let mut at = 0;
    for key in path.split('.').map(|k| k.trim_end_matches("[]")) {
        let needle = format!("\"{key}\"");
        at += lines[at..].iter().position(|l| l.contains(&needle))?;
    }
    Some(at + 1)
}

pub fn parse(text: &str) -> Result<ScenarioConfig, ConfigIssue> {
    let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| ConfigIssue {
        line: Some(e.line()),
        column: Some(e.column()),
        message: e.to_string(),
    })?;
    cfg.validate().map_err(|(key, message)| ConfigIssue {
        line: line_of(text, key),
        column: None,
        message,
    })?;
    Ok(cfg)
}

type Invalid = (&'static str, String);

fn positive(path: &'static str, v: f64) -> Result<(), Invalid> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err((path, format!("{path} must be positive and finite, got {v}")))
    }
}

impl ScenarioConfig {
    /// Semantic checks; the error names the offending key.
    pub fn validate(&self) -> Result<(), Invalid> {
        if self.schema_version != SCHEMA_VERSION {
            return Err((
                "schema_version",
                format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let dim = self.geometry.lengths.len();
        if !(1..=3).contains(&dim) {
            return Err(("geometry.lengths", format!("geometry.lengths needs 1 to 3 entries, got {dim}")));
        }
        for &l in &self.geometry.lengths {
            positive("geometry.lengths", l)?;
        }
        if self.geometry.patches.is_empty() {
            return Err(("geometry.patches", "geometry.patches must list at least one patch".into()));
        }
        for p in &self.geometry.patches {
            if let Some(g) = p.piston_gamma {
                positive("geometry.patches[].piston_gamma", g)?;
            }
        }
        positive("medium.c", self.medium.c)?;
        positive("medium.rho0", self.medium.rho0)?;
        positive("membrane.rho_m", self.membrane.rho_m)?;
        positive("membrane.thickness", self.membrane.thickness)?;
        positive("membrane.c_m2", self.membrane.c_m2)?;
        if !(self.membrane.c_h2 >= 0.0) {
            return Err(("membrane.c_h2", format!("membrane.c_h2 must be non-negative, got {}", self.membrane.c_h2)));
        }
        if self.membrane.rho_m <= self.medium.rho0 {
            return Err(("membrane.rho_m", "membrane.rho_m must exceed medium.rho0 (light-fluid coupling)".into()));
        }
        if self.damping.model != DampingModel::None {
            positive("damping.alpha", self.damping.alpha)?;
        }
        if !self.source.omega.is_finite() || self.source.omega < 0.0 {
            return Err(("source.omega", format!("source.omega must be non-negative, got {}", self.source.omega)));
        }
        if self.source.patches.len() != self.geometry.patches.len() {
            return Err((
                "source.patches",
                format!(
                    "source.patches has {} flags for {} geometry patches",
                    self.source.patches.len(),
                    self.geometry.patches.len()
                ),
            ));
        }
        let n = &self.numerics;
        if n.cavity_modes == 0 {
            return Err(("numerics.cavity_modes", "numerics.cavity_modes must be at least 1".into()));
        }
        if n.patch_modes == 0 {
            return Err(("numerics.patch_modes", "numerics.patch_modes must be at least 1".into()));
        }
        positive("numerics.t_end", n.t_end)?;
        positive("numerics.step_fraction", n.step_fraction)?;
        if n.picard_iterations < 2 {
            return Err(("numerics.picard_iterations", "numerics.picard_iterations must be at least 2".into()));
        }
        if let Some(e) = n.eps {
            positive("numerics.eps", e)?;
        }
        if n.output_stride == 0 {
            return Err(("numerics.output_stride", "numerics.output_stride must be at least 1".into()));
        }
        for p in &self.probes {
            if p.len() != dim {
                return Err(("probes", format!("probe {p:?} does not have {dim} coordinates")));
            }
            for (x, l) in p.iter().zip(&self.geometry.lengths) {
                if !(*x >= 0.0 && x <= l) {
                    return Err(("probes", format!("probe {p:?} lies outside the cavity")));
                }
            }
        }
        positive("validate.dx", self.validate.dx)?;
        positive("validate.cfl", self.validate.cfl)?;
        if let Some(t) = self.tolerances.validate {
            positive("tolerances.validate", t)?;
        }
        positive("tolerances.eigs", self.tolerances.eigs)?;
        if let Some(m) = &self.magnus {
            let d = m.a0.len();
            let square = |a: &Vec<Vec<f64>>| a.len() == d && a.iter().all(|r| r.len() == d);
            if d == 0 || !square(&m.a0) || !square(&m.a1) {
                return Err(("magnus.a0", "magnus.a0 and magnus.a1 must be square matrices of equal size".into()));
            }
            if !(m.t > m.tau) {
                return Err(("magnus.t", "magnus.t must exceed magnus.tau".into()));
            }
        }
        Ok(())
    }

    pub fn strength(&self) -> f64 {
        self.medium.rho0 / self.membrane.rho_m
    }
}
