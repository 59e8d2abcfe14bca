//! Experiment configuration: a strict TOML schema and its translation into
//! core types.
//!
//! Every table rejects unknown keys. Defaults live in the `default_*`
//! functions below and are repeated in [`SCHEMA_HELP`].

use std::path::Path;

use gle_core::homogenize::{HyperParams, Scalar1d, VanishingSetup};
use gle_core::matops::{self, Matrix};
use gle_core::model::{CoefficientField, GLEModel, InitialLaw};
use gle_core::realization::{preset, KernelRealization, NoiseRealization, Preset};
use gle_core::simulate::{SimConfig, StiffPolicy};
use gle_core::Provenance;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_HELP: &str = "\
CONFIG FILE (TOML; unknown keys are errors)

[model]                       optional for `presets` and limit kind `general`
  dim = 1                     state dimension d
  mass = 1.0
  gamma0, sigma0, g, h, sigma, fe
                              number, expression string, list or list of rows;
                              expressions use t, x (= x0), x1, ..., pi,
                              + - * / ^n, sin, cos, exp.
                              A number or expression on a square field fills
                              the diagonal; a list on a square field is the
                              diagonal, on fe it is the column.
                              Defaults: gamma0 = 0, sigma0 = none (no white
                              noise), g = h = sigma = identity, fe = 0.
  x0 = [0.0, ...], v0 = [0.0, ...]
  [model.bath]                optional; omit for no memory and colored noise
    preset = \"M1\"             gamma_1, gamma_2, beta
    preset = \"M2\"             gamma_1, beta
    preset = \"hyper\"          gamma_1, gamma_2, gamma_3, beta
    preset = \"exponential\"    gamma_1, beta

[run]
  t_end = 10.0, dt = 0.01, seed = 0, paths = 100
  record_dt                   default: every step (msd: t_end / 200)
  policy = \"explicit\"         or \"ou_splitting\"
  auto_shrink = true          shrink dt to eps/20 for stiff families
  per_path_files = false      simulate: one CSV per path instead of long format

[msd]
  method = \"auto\"             auto (Monte Carlo, plus the exact formula when
                              admissible), monte_carlo, exact, both
  fit_window = 0.5            fraction of the time range used for the exponent

[spectrum]
  omega_min = 0.0, omega_max = 10.0, omega_points = 201
  t_max = 10.0, t_points = 201

[converge]
  epsilons = [0.2, 0.1, 0.05, 0.025]   strictly decreasing, in (0, 1]

[limit]
  kind                        smallMass | vanishingDamping | corollary1d_smallMass
                              | corollary1d_vanishing | fdt | hyper | general
  simulate = false            also simulate the limit with [run]
  phi                         corollary kinds: reduce via U = phi*Y - Z (needs g = phi*sigma)
  beta, gamma_1, gamma_2, m0  vanishing kinds (scalar family); m0 also for hyper
  b2, b4, gamma21, gamma22, gamma41, gamma42
                              vanishingDamping with matrix-valued blocks
  [limit.general]             a1, a2, b1, b2, sigma1, sigma2 (fields over X)
";

fn default_dim() -> usize {
    1
}
fn default_mass() -> f64 {
    1.0
}
fn default_t_end() -> f64 {
    10.0
}
fn default_dt() -> f64 {
    0.01
}
fn default_paths() -> usize {
    100
}
fn default_true() -> bool {
    true
}
fn default_fit_window() -> f64 {
    0.5
}
fn default_omega_max() -> f64 {
    10.0
}
fn default_points() -> usize {
    201
}
fn default_t_max() -> f64 {
    10.0
}
fn default_epsilons() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}
fn default_policy() -> StiffPolicy {
    StiffPolicy::Explicit
}
fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub msd: MsdSection,
    #[serde(default)]
    pub spectrum: SpectrumSection,
    #[serde(default)]
    pub converge: ConvergeSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<LimitSection>,
    /// Written by `gle limit`; checked against the rebuilt system on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saved_limit: Option<SavedLimit>,
}

/// One matrix entry: a number or an expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Number(f64),
    Expr(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Scalar(Cell),
    Rows(Vec<Vec<Cell>>),
    List(Vec<Cell>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_mass")]
    pub mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma0: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fe: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bath: Option<Preset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_dt: Option<f64>,
    #[serde(default = "default_policy")]
    pub policy: StiffPolicy,
    #[serde(default = "default_true")]
    pub auto_shrink: bool,
    #[serde(default)]
    pub per_path_files: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            t_end: default_t_end(),
            dt: default_dt(),
            seed: 0,
            paths: default_paths(),
            record_dt: None,
            policy: default_policy(),
            auto_shrink: true,
            per_path_files: false,
        }
    }
}

impl RunSection {
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            policy: self.policy,
            auto_shrink: self.auto_shrink,
            record_dt: self.record_dt,
            ..SimConfig::new(self.t_end, self.dt, self.seed, self.paths)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MsdMethodChoice {
    #[default]
    Auto,
    MonteCarlo,
    Exact,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsdSection {
    #[serde(default)]
    pub method: MsdMethodChoice,
    #[serde(default = "default_fit_window")]
    pub fit_window: f64,
}

impl Default for MsdSection {
    fn default() -> Self {
        Self { method: MsdMethodChoice::Auto, fit_window: default_fit_window() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSection {
    #[serde(default)]
    pub omega_min: f64,
    #[serde(default = "default_omega_max")]
    pub omega_max: f64,
    #[serde(default = "default_points")]
    pub omega_points: usize,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_points")]
    pub t_points: usize,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        Self {
            omega_min: 0.0,
            omega_max: default_omega_max(),
            omega_points: default_points(),
            t_max: default_t_max(),
            t_points: default_points(),
        }
    }
}

/// `n` evenly spaced points from `a` to `b`, endpoints exact.
pub fn grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeSection {
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
}

impl Default for ConvergeSection {
    fn default() -> Self {
        Self { epsilons: default_epsilons() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LimitKind {
    #[serde(rename = "smallMass")]
    SmallMass,
    #[serde(rename = "vanishingDamping")]
    VanishingDamping,
    #[serde(rename = "corollary1d_smallMass")]
    Corollary1dSmallMass,
    #[serde(rename = "corollary1d_vanishing")]
    Corollary1dVanishing,
    #[serde(rename = "fdt")]
    Fdt,
    #[serde(rename = "hyper")]
    Hyper,
    #[serde(rename = "general")]
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralFields {
    pub a1: FieldSpec,
    pub a2: FieldSpec,
    pub b1: FieldSpec,
    pub b2: FieldSpec,
    pub sigma1: FieldSpec,
    pub sigma2: FieldSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitSection {
    pub kind: LimitKind,
    #[serde(default, skip_serializing_if = "is_false")]
    pub simulate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b4: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma21: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma22: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma41: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma42: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub general: Option<GeneralFields>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedLimit {
    pub provenance: Provenance,
    pub layout: Vec<String>,
    pub wiener: [usize; 2],
}

// ---------------------------------------------------------------------------
// Parsing

/// 1-based line of a byte offset.
fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Line of an unknown key. Serde reports the enclosing table's span (for
/// tagged tables only its header), so look for `key =` from the span start
/// to the next table header.
fn unknown_key_line(src: &str, message: &str, start: usize) -> Option<usize> {
    let key = message.strip_prefix("unknown field `")?.split('`').next()?;
    let first = line_of(src, start);
    src.lines()
        .enumerate()
        .skip(first - 1)
        .take_while(|(i, l)| *i + 1 == first || !l.trim_start().starts_with('['))
        .find(|(_, l)| l.trim_start().strip_prefix(key).is_some_and(|r| r.trim_start().starts_with('=')))
        .map(|(i, _)| i + 1)
}

pub fn parse_str(src: &str) -> Result<ExperimentConfig, CliError> {
    toml::from_str(src).map_err(|e| {
        let message = e.message().to_string();
        let line = e.span().map(|s| unknown_key_line(src, &message, s.start).unwrap_or_else(|| line_of(src, s.start)));
        CliError::Parse { line, message }
    })
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let src = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_str(&src)
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String, CliError> {
    toml::to_string(cfg).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
}

// ---------------------------------------------------------------------------
// Validation and model assembly

impl ExperimentConfig {
    /// Range checks that do not need a built model.
    pub fn check(&self) -> Result<(), CliError> {
        self.run.sim_config().validate()?;
        let eps = &self.converge.epsilons;
        if eps.is_empty() {
            return Err(CliError::Config("converge.epsilons is empty".into()));
        }
        if let Some(e) = eps.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(CliError::Validation {
                tag: "epsilon-range",
                message: format!("converge.epsilons entry {e} outside (0, 1]"),
            });
        }
        if eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(CliError::Validation {
                tag: "epsilon-order",
                message: format!("converge.epsilons must be strictly decreasing, got {eps:?}"),
            });
        }
        if !(self.msd.fit_window > 0.0 && self.msd.fit_window <= 1.0) {
            return Err(CliError::Config(format!("msd.fit_window {} outside (0, 1]", self.msd.fit_window)));
        }
        let s = &self.spectrum;
        if !(s.omega_min >= 0.0 && s.omega_max >= s.omega_min && s.t_max >= 0.0) {
            return Err(CliError::Config("spectrum grid needs 0 <= omega_min <= omega_max and t_max >= 0".into()));
        }
        if let Some(m) = &self.model {
            if m.dim == 0 {
                return Err(CliError::Config("model.dim must be >= 1".into()));
            }
            if !(m.mass > 0.0 && m.mass.is_finite()) {
                return Err(CliError::Config(format!("model.mass must be positive, got {}", m.mass)));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<&ModelConfig, CliError> {
        self.model.as_ref().ok_or_else(|| CliError::Config("missing [model] section".into()))
    }

    pub fn limit_section(&self) -> Result<&LimitSection, CliError> {
        self.limit.as_ref().ok_or_else(|| CliError::Config("missing [limit] section".into()))
    }
}

/// Target shape: fixed rows, columns fixed or free.
#[derive(Debug, Clone, Copy)]
struct Shape {
    rows: usize,
    cols: Option<usize>,
}

fn cell_str(c: &Cell) -> String {
    match c {
        Cell::Number(v) => format!("{v:?}"),
        Cell::Expr(s) => s.clone(),
    }
}

fn from_cells(rows: usize, cols: usize, cells: Vec<Cell>) -> Result<CoefficientField, CliError> {
    if cells.iter().all(|c| matches!(c, Cell::Number(_))) {
        let v: Vec<f64> = cells.iter().map(|c| if let Cell::Number(v) = c { *v } else { 0.0 }).collect();
        return Ok(CoefficientField::constant(Matrix::from_row_slice(rows, cols, &v)));
    }
    let strs: Vec<String> = cells.iter().map(cell_str).collect();
    let refs: Vec<&str> = strs.iter().map(String::as_str).collect();
    Ok(CoefficientField::expr(rows, cols, &refs)?)
}

fn diagonal(n: usize, entries: &[Cell]) -> Vec<Cell> {
    let mut cells = vec![Cell::Number(0.0); n * n];
    for (i, e) in entries.iter().enumerate() {
        cells[i * n + i] = e.clone();
    }
    cells
}

fn build_field(name: &str, spec: &FieldSpec, shape: Shape) -> Result<CoefficientField, CliError> {
    let bad = |what: String| CliError::Config(format!("{name}: {what}"));
    let n = shape.rows;
    match spec {
        FieldSpec::Scalar(c) => match shape.cols {
            Some(1) => from_cells(n, 1, vec![c.clone(); n]),
            Some(k) if k != n => Err(bad(format!("a single value cannot fill a {n}x{k} field; give rows"))),
            _ => from_cells(n, n, diagonal(n, &vec![c.clone(); n])),
        },
        FieldSpec::List(v) => {
            if v.len() != n {
                return Err(bad(format!("expected {n} entries, got {}", v.len())));
            }
            match shape.cols {
                Some(1) => from_cells(n, 1, v.clone()),
                Some(k) if k != n => Err(bad(format!("a list cannot fill a {n}x{k} field; give rows"))),
                _ => from_cells(n, n, diagonal(n, v)),
            }
        }
        FieldSpec::Rows(rows) => {
            if rows.len() != n {
                return Err(bad(format!("expected {n} rows, got {}", rows.len())));
            }
            let k = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != k) {
                return Err(bad("rows have different lengths".into()));
            }
            if let Some(c) = shape.cols {
                if c != k {
                    return Err(bad(format!("expected {c} columns, got {k}")));
                }
            }
            from_cells(n, k, rows.iter().flatten().cloned().collect())
        }
    }
}

fn rows_of(spec: &FieldSpec) -> usize {
    match spec {
        FieldSpec::Rows(r) => r.len(),
        FieldSpec::List(v) => v.len(),
        FieldSpec::Scalar(_) => 1,
    }
}

fn optional_field(
    name: &str,
    spec: &Option<FieldSpec>,
    shape: Shape,
    default: impl FnOnce() -> CoefficientField,
) -> Result<CoefficientField, CliError> {
    match spec {
        Some(s) => build_field(name, s, shape),
        None => Ok(default()),
    }
}

fn state_vector(name: &str, v: &Option<Vec<f64>>, d: usize) -> Result<Vec<f64>, CliError> {
    match v {
        None => Ok(vec![0.0; d]),
        Some(v) if v.len() == d => Ok(v.clone()),
        Some(v) => Err(CliError::Config(format!("model.{name}: expected {d} entries, got {}", v.len()))),
    }
}

/// Fields of a model, with `q` and `r` the kernel and noise output sizes.
pub struct Fields {
    pub gamma0: CoefficientField,
    pub sigma0: CoefficientField,
    pub g: CoefficientField,
    pub h: CoefficientField,
    pub sigma: CoefficientField,
    pub fe: CoefficientField,
    pub initial: InitialLaw,
}

impl ModelConfig {
    pub fn bath(&self) -> Result<(KernelRealization, NoiseRealization), CliError> {
        match &self.bath {
            Some(p) => Ok(preset(p)?),
            None => Ok((KernelRealization::empty(), NoiseRealization::empty())),
        }
    }

    pub fn fields(&self, q: usize, r: usize) -> Result<Fields, CliError> {
        let d = self.dim;
        let id = |a: usize, b: usize| move || CoefficientField::constant(Matrix::identity(a, b));
        Ok(Fields {
            gamma0: optional_field("model.gamma0", &self.gamma0, Shape { rows: d, cols: Some(d) }, || {
                CoefficientField::zeros(d, d)
            })?,
            sigma0: optional_field("model.sigma0", &self.sigma0, Shape { rows: d, cols: None }, || {
                CoefficientField::zeros(d, 0)
            })?,
            g: optional_field("model.g", &self.g, Shape { rows: d, cols: Some(q) }, id(d, q))?,
            h: optional_field("model.h", &self.h, Shape { rows: q, cols: Some(d) }, id(q, d))?,
            sigma: optional_field("model.sigma", &self.sigma, Shape { rows: d, cols: Some(r) }, id(d, r))?,
            fe: optional_field("model.fe", &self.fe, Shape { rows: d, cols: Some(1) }, || CoefficientField::zeros(d, 1))?,
            initial: InitialLaw { x0: state_vector("x0", &self.x0, d)?, v0: state_vector("v0", &self.v0, d)? },
        })
    }

    pub fn build(&self) -> Result<GLEModel, CliError> {
        let (kernel, noise) = self.bath()?;
        let d = self.dim;
        let q = kernel.out_dim().unwrap_or(d);
        let r = noise.out_dim().unwrap_or(d);
        let f = self.fields(q, r)?;
        let m = GLEModel {
            dim: d,
            mass: self.mass,
            gamma0: f.gamma0,
            sigma0: f.sigma0,
            g: f.g,
            h: f.h,
            sigma: f.sigma,
            fe: f.fe,
            kernel,
            noise,
            initial: f.initial,
        };
        m.check_dimensions()?;
        Ok(m)
    }

    /// Scalar fields for the one-dimensional corollaries.
    pub fn scalar1d(&self) -> Result<Scalar1d, CliError> {
        if self.dim != 1 {
            return Err(CliError::Config(format!("one-dimensional limit kinds need model.dim = 1, got {}", self.dim)));
        }
        let f = self.fields(1, 1)?;
        let mut s = Scalar1d::new(f.g, f.h, f.sigma, f.fe);
        s.x0 = f.initial.x0[0];
        Ok(s)
    }
}

pub(crate) fn need(v: Option<f64>, key: &str) -> Result<f64, CliError> {
    v.ok_or_else(|| CliError::Config(format!("limit.{key} is required for this limit kind")))
}

fn matrix(rows: &[Vec<f64>], key: &str) -> Result<Matrix, CliError> {
    matops::from_rows(rows).map_err(|e| CliError::Config(format!("limit.{key}: {e}")))
}

impl LimitSection {
    /// β and Γ₁ from the section, falling back to an M2 bath.
    pub fn beta_gamma1(&self, model: &ModelConfig) -> Result<(f64, f64), CliError> {
        match (self.beta, self.gamma_1, &model.bath) {
            (Some(b), Some(g), _) => Ok((b, g)),
            (None, None, Some(Preset::M2 { gamma_1, beta })) => Ok((*beta, *gamma_1)),
            _ => Err(CliError::Config("set limit.beta and limit.gamma_1, or use an M2 bath".into())),
        }
    }

    pub fn hyper_params(&self, model: &ModelConfig) -> Result<HyperParams, CliError> {
        match model.bath {
            Some(Preset::Hyper { gamma_1, gamma_2, gamma_3, beta }) => {
                Ok(HyperParams { beta, gamma1: gamma_1, gamma2: gamma_2, gamma3: gamma_3, m0: need(self.m0, "m0")? })
            }
            _ => Err(CliError::Config("limit kind hyper needs a hyper bath preset".into())),
        }
    }

    pub fn vanishing_setup(&self, model: &ModelConfig) -> Result<VanishingSetup, CliError> {
        if model.bath.is_some() {
            return Err(CliError::Config(
                "vanishing-damping limits define memory and noise in [limit]; remove [model.bath]".into(),
            ));
        }
        let m0 = need(self.m0, "m0")?;
        let lists = [&self.b2, &self.b4].iter().any(|v| v.is_some())
            || [&self.gamma21, &self.gamma22, &self.gamma41, &self.gamma42].iter().any(|v| v.is_some());
        if !lists {
            let s = model.scalar1d()?;
            let mut setup =
                VanishingSetup::scalar(s.g, s.h, s.sigma, s.fe, need(self.beta, "beta")?, need(self.gamma_1, "gamma_1")?, need(self.gamma_2, "gamma_2")?, m0);
            setup.initial = InitialLaw { x0: state_vector("x0", &model.x0, 1)?, v0: state_vector("v0", &model.v0, 1)? };
            return Ok(setup);
        }
        let list = |v: &Option<Vec<f64>>, key: &str| v.clone().ok_or_else(|| CliError::Config(format!("limit.{key} is required")));
        let b2 = matrix(self.b2.as_deref().ok_or_else(|| CliError::Config("limit.b2 is required".into()))?, "b2")?;
        let b4 = matrix(self.b4.as_deref().ok_or_else(|| CliError::Config("limit.b4 is required".into()))?, "b4")?;
        let f = model.fields(b2.nrows(), b4.nrows())?;
        Ok(VanishingSetup {
            dim: model.dim,
            m0,
            g: f.g,
            h: f.h,
            sigma: f.sigma,
            fe: f.fe,
            b2,
            b4,
            gamma21: list(&self.gamma21, "gamma21")?,
            gamma22: list(&self.gamma22, "gamma22")?,
            gamma41: list(&self.gamma41, "gamma41")?,
            gamma42: list(&self.gamma42, "gamma42")?,
            initial: f.initial,
        })
    }
}

impl GeneralFields {
    /// `(A₁, A₂, B₁, B₂, Σ₁, Σ₂)` over a slow state of dimension `n1`.
    pub fn build(&self, n1: usize) -> Result<[CoefficientField; 6], CliError> {
        let n2 = rows_of(&self.a2);
        Ok([
            build_field("limit.general.a1", &self.a1, Shape { rows: n1, cols: Some(n2) })?,
            build_field("limit.general.a2", &self.a2, Shape { rows: n2, cols: Some(n2) })?,
            build_field("limit.general.b1", &self.b1, Shape { rows: n1, cols: Some(1) })?,
            build_field("limit.general.b2", &self.b2, Shape { rows: n2, cols: Some(1) })?,
            build_field("limit.general.sigma1", &self.sigma1, Shape { rows: n1, cols: None })?,
            build_field("limit.general.sigma2", &self.sigma2, Shape { rows: n2, cols: None })?,
        ])
    }
}
