//! Scenario files: TOML with one section per problem kind.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use imtrack::simulate::Method;
use imtrack::IntegratorConfig;
use imtrack::{Matrix, Vec64};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Quadratic,
    Quartic,
    Traffic,
    Mismatch,
    Custom,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Kind::Quadratic => "quadratic",
            Kind::Quartic => "quartic",
            Kind::Traffic => "traffic",
            Kind::Mismatch => "mismatch",
            Kind::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Which controller drives the loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    /// Observer-based gradient feedback with the exosystem as internal model.
    #[default]
    InternalModel,
    /// `x = H_c(θ)` with `θ` measured directly.
    ParameterFeedback,
    /// Same observer, with the exosystem copy replaced by zero dynamics.
    NoInternalModel,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub kind: Kind,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default)]
    pub controller: Controller,
    #[serde(default)]
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub output: OutputSection,
    pub quadratic: Option<QuadraticSection>,
    pub quartic: Option<QuarticSection>,
    pub traffic: Option<TrafficSection>,
    pub mismatch: Option<MismatchSection>,
    pub custom: Option<CustomSection>,
    /// Directory the scenario was loaded from; side files resolve against it.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_margin() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Rk4,
    #[default]
    Rk45,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    #[serde(default)]
    pub method: MethodName,
    pub step: Option<f64>,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_h_min")]
    pub h_min: f64,
    pub h_max: Option<f64>,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_rtol() -> f64 {
    1e-9
}
fn default_atol() -> f64 {
    1e-12
}
fn default_h_min() -> f64 {
    1e-12
}
fn default_t_end() -> f64 {
    20.0
}
fn default_samples() -> usize {
    1001
}

impl Default for IntegratorSection {
    fn default() -> Self {
        IntegratorSection {
            method: MethodName::default(),
            step: None,
            rtol: default_rtol(),
            atol: default_atol(),
            h_min: default_h_min(),
            h_max: None,
            t_end: default_t_end(),
            samples: default_samples(),
        }
    }
}

impl IntegratorSection {
    pub fn build(&self) -> Result<IntegratorConfig, String> {
        let cfg = match self.method {
            MethodName::Rk4 => {
                let step = self.step.ok_or("integrator: rk4 needs `step`")?;
                IntegratorConfig::rk4(step, self.t_end)
            }
            MethodName::Rk45 => {
                if self.step.is_some() {
                    return Err("integrator: `step` only applies to rk4".into());
                }
                IntegratorConfig::rk45(self.rtol, self.atol, self.t_end)
                    .with_step_bounds(self.h_min, self.h_max.unwrap_or(f64::INFINITY))
            }
        }
        .with_samples(self.samples);
        cfg.validate().map_err(|e| format!("integrator: {e}"))?;
        if let Method::Rk4 { step } = cfg.method {
            if !step.is_finite() {
                return Err("integrator: step must be finite".into());
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_csv")]
    pub trajectory: String,
    #[serde(default = "default_summary")]
    pub summary: String,
    /// Fraction of the horizon used for tail statistics.
    #[serde(default = "default_tail")]
    pub tail_fraction: f64,
}

fn default_csv() -> String {
    "trajectory.csv".into()
}
fn default_summary() -> String {
    "summary.json".into()
}
fn default_tail() -> f64 {
    0.2
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            trajectory: default_csv(),
            summary: default_summary(),
            tail_fraction: default_tail(),
        }
    }
}

/// A matrix written inline as rows, or the path of a CSV file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Rows(Vec<Vec<f64>>),
    File(String),
}

impl MatrixSpec {
    pub fn load(&self, what: &str, base: Option<&Path>) -> Result<Matrix, String> {
        let rows = match self {
            MatrixSpec::Rows(rows) => rows.clone(),
            MatrixSpec::File(path) => read_csv_matrix(&resolve(path, base)).map_err(|e| format!("{what}: {e}"))?,
        };
        rows_to_matrix(&rows).map_err(|e| format!("{what}: {e}"))
    }
}

pub fn resolve(path: &str, base: Option<&Path>) -> PathBuf {
    let p = Path::new(path);
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

fn read_csv_matrix(path: &Path) -> Result<Vec<Vec<f64>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Matrix, String> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err("matrix has no rows".into());
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err("matrix rows must be non-empty and of equal length".into());
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err("matrix entries must be finite".into());
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Matrix::from_row_slice(nrows, ncols, &flat))
}

pub fn vector(values: &[f64], what: &str) -> Result<Vec64, String> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(format!("{what} entries must be finite"));
    }
    Ok(Vec64::from_column_slice(values))
}

/// Random instance with seeded `R`, `S` and `θ(0)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSection {
    pub dimension: usize,
    pub theta0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuarticSection {
    /// Constant parameter value.
    pub theta0: f64,
    #[serde(default = "default_newton_tol")]
    pub tol: f64,
    #[serde(default = "default_newton_iter")]
    pub max_iter: usize,
}

fn default_newton_tol() -> f64 {
    1e-12
}
fn default_newton_iter() -> usize {
    50
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSection {
    /// Network file; the bundled Braess network when absent.
    pub network: Option<String>,
    #[serde(default)]
    pub inflow: InflowSection,
    /// KKT level that counts as having reached equilibrium.
    #[serde(default = "default_settle")]
    pub settle_threshold: f64,
    /// Samples before this time are excluded from the oracle comparison.
    #[serde(default = "default_transient")]
    pub transient: f64,
}

fn default_settle() -> f64 {
    1e-3
}
fn default_transient() -> f64 {
    2.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InflowSection {
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub phi1: f64,
    pub phi2: f64,
}

impl Default for InflowSection {
    fn default() -> Self {
        let p = imtrack::traffic::InflowModel::<f64>::reference();
        InflowSection {
            theta0: p.theta0,
            theta1: p.theta1,
            theta2: p.theta2,
            omega1: p.omega1,
            omega2: p.omega2,
            phi1: p.phi1,
            phi2: p.phi2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchModel {
    /// 2×2 Jordan-block exosystem with tunable model error.
    Jordan,
    /// Seeded random loop with a constant exosystem.
    Random,
    /// All matrices given explicitly.
    Explicit,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MismatchSection {
    pub model: MismatchModel,
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    pub dimension: Option<usize>,
    pub a_c: Option<MatrixSpec>,
    pub b_c: Option<MatrixSpec>,
    pub g_c: Option<MatrixSpec>,
    pub r: Option<MatrixSpec>,
    pub q: Option<MatrixSpec>,
    pub s: Option<MatrixSpec>,
    pub sigma: Option<MatrixSpec>,
    pub theta0: Option<Vec<f64>>,
}

/// Explicit quadratic problem. The exosystem is either a matrix `s` or a
/// bank of harmonic oscillators.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSection {
    pub r: MatrixSpec,
    pub q: MatrixSpec,
    pub s: Option<MatrixSpec>,
    pub frequencies: Option<Vec<f64>>,
    #[serde(default)]
    pub constant: bool,
    pub theta0: Vec<f64>,
    pub z0: Option<Vec<f64>>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string().trim_end().to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut sc = Scenario::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        sc.base_dir = path.parent().map(Path::to_path_buf);
        Ok(sc)
    }

    /// Structural checks that need no numerics.
    pub fn validate(&self) -> Result<(), String> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(format!(
                "name {:?} must be non-empty and use only ASCII letters, digits, '_' or '-'",
                self.name
            ));
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(format!("margin must be positive and finite, got {}", self.margin));
        }
        if !(self.output.tail_fraction > 0.0 && self.output.tail_fraction <= 1.0) {
            return Err(format!(
                "output.tail_fraction must lie in (0, 1], got {}",
                self.output.tail_fraction
            ));
        }
        for (key, file) in [("trajectory", &self.output.trajectory), ("summary", &self.output.summary)] {
            let p = Path::new(file);
            if file.is_empty() || p.is_absolute() || p.components().count() != 1 {
                return Err(format!("output.{key} must be a plain file name, got {file:?}"));
            }
        }
        self.integrator.build()?;

        let present = [
            (Kind::Quadratic, self.quadratic.is_some()),
            (Kind::Quartic, self.quartic.is_some()),
            (Kind::Traffic, self.traffic.is_some()),
            (Kind::Mismatch, self.mismatch.is_some()),
            (Kind::Custom, self.custom.is_some()),
        ];
        if present.iter().any(|&(kind, has)| kind == self.kind && !has) {
            return Err(format!("kind = \"{}\" needs a [{}] section", self.kind, self.kind));
        }
        for (kind, has) in present {
            if kind != self.kind && has {
                return Err(format!("section [{kind}] does not apply to kind = \"{}\"", self.kind));
            }
        }
        if self.controller != Controller::InternalModel && !matches!(self.kind, Kind::Quadratic | Kind::Custom) {
            return Err(format!("controller choice is only available for quadratic and custom kinds, not {}", self.kind));
        }

        match self.kind {
            Kind::Quadratic => {
                let q = self.quadratic.as_ref().unwrap();
                if q.dimension == 0 {
                    return Err("quadratic.dimension must be positive".into());
                }
                if let Some(t) = &q.theta0 {
                    if t.len() != q.dimension {
                        return Err(format!("quadratic.theta0 has {} entries, expected {}", t.len(), q.dimension));
                    }
                }
            }
            Kind::Quartic => {
                let q = self.quartic.as_ref().unwrap();
                if !q.theta0.is_finite() || !(q.tol > 0.0) || q.max_iter == 0 {
                    return Err("quartic: theta0 must be finite, tol and max_iter positive".into());
                }
            }
            Kind::Traffic => {
                let t = self.traffic.as_ref().unwrap();
                if !(t.settle_threshold > 0.0) || !(t.transient >= 0.0) {
                    return Err("traffic: settle_threshold must be positive and transient non-negative".into());
                }
            }
            Kind::Mismatch => {
                let m = self.mismatch.as_ref().unwrap();
                let explicit = [&m.a_c, &m.b_c, &m.g_c, &m.r, &m.q, &m.s];
                match m.model {
                    MismatchModel::Jordan => {
                        if m.eps1.is_none() || m.eps2.is_none() {
                            return Err("mismatch: the jordan model needs eps1 and eps2".into());
                        }
                        if m.theta0.as_ref().is_some_and(|t| t.len() != 2) {
                            return Err("mismatch.theta0 must have 2 entries for the jordan model".into());
                        }
                    }
                    MismatchModel::Random => {
                        if m.dimension.unwrap_or(0) == 0 {
                            return Err("mismatch: the random model needs a positive dimension".into());
                        }
                    }
                    MismatchModel::Explicit => {
                        if explicit.iter().any(|e| e.is_none()) || m.theta0.is_none() {
                            return Err("mismatch: the explicit model needs a_c, b_c, g_c, r, q, s and theta0".into());
                        }
                    }
                }
                if m.model != MismatchModel::Explicit && (explicit.iter().any(|e| e.is_some()) || m.sigma.is_some()) {
                    return Err("mismatch: matrices are only read by the explicit model".into());
                }
            }
            Kind::Custom => {
                let c = self.custom.as_ref().unwrap();
                if c.s.is_some() == c.frequencies.is_some() {
                    return Err("custom: give exactly one of `s` or `frequencies`".into());
                }
                if c.s.is_some() && c.constant {
                    return Err("custom: `constant` only applies with `frequencies`".into());
                }
            }
        }
        Ok(())
    }
}
