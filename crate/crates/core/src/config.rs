//! Run configuration: a TOML file with one table per block.
//!
//! ```toml
//! [geometry]
//! kind = "cylinder"        # or "interval"
//! n_x = 16
//! n_theta = 16             # cylinder only, defaults to n_x
//! length = 1.0             # interval only
//!
//! [metric]
//! family = "pulsating"     # flat | pulsating | conformal-pulse | custom
//! eps = 0.2
//! omega = 2.0
//! horizon = 1.0
//! # a = "1 + 0.1*sin(t)"   # custom only
//! # b = "1"
//!
//! [masses]
//! m = -1.0                 # number or expression in t, x, theta
//! m_b = "-1 - 0.5*x"
//!
//! [source]
//! bulk = "sin(t)*cos(pi*x)"
//! boundary = 0.0
//!
//! [initial]
//! u = "cos(pi*x)"
//! w = 0.0
//! random = "smooth"        # optional: smooth | white, added to u and w
//! scale = 1.0
//!
//! [nonlinearity]
//! alpha = 3.0
//! beta = 3.0
//! p = -1.0
//! p_b = -1.0
//! q = 0.0
//! q_b = 0.0
//! dimension = 2            # declared manifold dimension, defaults to the geometry's
//! lipschitz = "empirical"  # or "analytic", which needs k (and k_b)
//!
//! [solver]
//! dt = 0.01
//!
//! [[sweep.axes]]
//! path = "metric.eps"
//! values = [0.0, 0.05, 0.1]
//! ```
//!
//! Every key is optional except `geometry.kind`, `geometry.n_x` and
//! `metric.horizon`; unknown keys are rejected.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assembly::{Quadrature, StateVector};
use crate::error::{Error, Hypothesis, Result, Violation};
use crate::evolution::{M0Options, SourceSpec, System};
use crate::expr::Field;
use crate::geometry::{Mesh, MeshKind, MetricSpec};
use crate::nonlinear::{
    validate_exponents, ContinuationOptions, GrowthConstants, LipschitzMode, LipschitzOptions, NonlinearitySpec,
    PicardOptions,
};
use crate::random::{self, streams};

/// A scalar field written either as a number or as an expression string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Number(f64),
    Expr(String),
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec::Number(0.0)
    }
}

impl FieldSpec {
    pub fn to_field(&self) -> Result<Field> {
        match self {
            FieldSpec::Number(v) => Ok(Field::constant(*v)),
            FieldSpec::Expr(s) => Field::expr(s),
        }
    }
}

impl fmt::Display for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldSpec::Number(v) => write!(f, "{v}"),
            FieldSpec::Expr(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    LinearAuto,
    LinearNonauto,
    Nonlinear,
    Verify,
    Sweep,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::LinearAuto => "linear-auto",
            Mode::LinearNonauto => "linear-nonauto",
            Mode::Nonlinear => "nonlinear",
            Mode::Verify => "verify",
            Mode::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryKind {
    Interval,
    Cylinder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryBlock {
    pub kind: GeometryKind,
    pub n_x: usize,
    pub n_theta: Option<usize>,
    #[serde(default = "one")]
    pub length: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricFamily {
    Flat,
    Pulsating,
    ConformalPulse,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricBlock {
    #[serde(default = "flat_family")]
    pub family: MetricFamily,
    #[serde(default)]
    pub eps: f64,
    #[serde(default = "one")]
    pub omega: f64,
    pub horizon: f64,
    pub a: Option<FieldSpec>,
    pub b: Option<FieldSpec>,
}

fn flat_family() -> MetricFamily {
    MetricFamily::Flat
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MassesBlock {
    pub m: FieldSpec,
    pub m_b: FieldSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceBlock {
    pub bulk: FieldSpec,
    pub boundary: FieldSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandomData {
    Smooth,
    White,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialBlock {
    pub u: FieldSpec,
    pub w: FieldSpec,
    pub random: Option<RandomData>,
    pub scale: f64,
    pub modes: usize,
}

impl Default for InitialBlock {
    fn default() -> Self {
        Self { u: FieldSpec::default(), w: FieldSpec::default(), random: None, scale: 1.0, modes: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LipschitzChoice {
    Empirical,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearityBlock {
    pub alpha: f64,
    pub beta: f64,
    pub p: FieldSpec,
    pub p_b: FieldSpec,
    pub q: FieldSpec,
    pub q_b: FieldSpec,
    pub dimension: Option<usize>,
    pub c: Option<f64>,
    pub c_b: Option<f64>,
    pub k: Option<f64>,
    pub k_b: Option<f64>,
    pub lipschitz: LipschitzChoice,
    pub embedding: f64,
}

impl Default for NonlinearityBlock {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            p: FieldSpec::default(),
            p_b: FieldSpec::default(),
            q: FieldSpec::default(),
            q_b: FieldSpec::default(),
            dimension: None,
            c: None,
            c_b: None,
            k: None,
            k_b: None,
            lipschitz: LipschitzChoice::Empirical,
            embedding: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadratureChoice {
    Nodal,
    Consistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverBlock {
    pub dt: f64,
    pub quadrature: QuadratureChoice,
    /// Resolvent parameters probed in verify mode.
    pub lambdas: Vec<f64>,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Continuation stops once `||X||` exceeds this multiple of `||X0||`.
    pub norm_cap: f64,
    pub seed: u64,
    pub m0_starts: usize,
    pub m0_states: usize,
    pub lipschitz_samples: usize,
    pub kato_points: usize,
    pub dissipativity_states: usize,
    pub resolvent_rhs: usize,
    /// Nonlinear mode continues to the horizon after the first window.
    pub continuation: bool,
    /// Times at which field snapshots are written.
    pub snapshots: Vec<f64>,
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            quadrature: QuadratureChoice::Nodal,
            lambdas: vec![0.1, 1.0, 10.0],
            picard_tol: 1e-10,
            picard_max_iter: 100,
            norm_cap: 1e6,
            seed: 0,
            m0_starts: 6,
            m0_states: 6,
            lipschitz_samples: 32,
            kato_points: 10,
            dissipativity_states: 100,
            resolvent_rhs: 20,
            continuation: true,
            snapshots: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted key path, e.g. `metric.eps`.
    pub path: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    /// Mode run at every point.
    #[serde(default = "nonauto")]
    pub mode: Mode,
    pub axes: Vec<SweepAxis>,
}

fn nonauto() -> Mode {
    Mode::LinearNonauto
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub geometry: GeometryBlock,
    pub metric: MetricBlock,
    #[serde(default)]
    pub masses: MassesBlock,
    #[serde(default)]
    pub source: SourceBlock,
    #[serde(default)]
    pub initial: InitialBlock,
    #[serde(default)]
    pub nonlinearity: NonlinearityBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    pub sweep: Option<SweepBlock>,
}

/// A parsed config together with hypothesis violations that were downgraded
/// to warnings.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub raw: toml::Value,
    pub warnings: Vec<Violation>,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Parses TOML text; errors carry the line number of the offending item.
pub fn parse_config(src: &str) -> Result<(RunConfig, toml::Value)> {
    let located = |e: toml::de::Error| {
        let at = e.span().map(|s| format!("line {}: ", line_of(src, s.start))).unwrap_or_default();
        Error::Config(format!("{at}{}", e.message()))
    };
    let raw: toml::Value = toml::from_str(src).map_err(located)?;
    let config: RunConfig = toml::from_str(src).map_err(located)?;
    Ok((config, raw))
}

/// Reads, parses and validates a config. Hypothesis violations are errors
/// unless `allow_unchecked`, in which case they are returned as warnings.
pub fn load_config(path: &Path, allow_unchecked: bool) -> Result<LoadedConfig> {
    let src = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    load_config_str(&src, allow_unchecked)
}

pub fn load_config_str(src: &str, allow_unchecked: bool) -> Result<LoadedConfig> {
    let (config, raw) = parse_config(src)?;
    let warnings = gate(&config, allow_unchecked)?;
    Ok(LoadedConfig { config, raw, warnings })
}

/// Runs structural and hypothesis validation; see [`load_config`].
pub fn gate(config: &RunConfig, allow_unchecked: bool) -> Result<Vec<Violation>> {
    config.check_structure()?;
    let violations = config.hypothesis_violations()?;
    if violations.is_empty() || allow_unchecked {
        Ok(violations)
    } else {
        Err(Error::Hypothesis(violations))
    }
}

/// Deserializes a config from an already parsed TOML value (sweep points).
pub fn config_from_value(value: toml::Value) -> Result<RunConfig> {
    value.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

/// Replaces the value at a dotted key path, creating tables as needed.
pub fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("sweep path {path}: {} is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            table.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = table.entry((*key).to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::Config(format!("empty sweep path {path:?}")))
}

impl RunConfig {
    fn check_structure(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.geometry.n_x == 0 || self.geometry.n_theta == Some(0) {
            return bad("geometry resolutions must be positive".into());
        }
        if self.geometry.kind == GeometryKind::Cylinder && self.geometry.n_theta.is_some_and(|n| n < 3) {
            return bad("geometry.n_theta must be at least 3".into());
        }
        if !(self.geometry.length > 0.0) {
            return bad(format!("geometry.length must be positive, got {}", self.geometry.length));
        }
        if !(self.metric.horizon > 0.0) || !self.metric.horizon.is_finite() {
            return bad(format!("metric.horizon must be positive, got {}", self.metric.horizon));
        }
        if self.metric.family == MetricFamily::Custom && self.metric.a.is_none() {
            return bad("metric.family = \"custom\" needs metric.a".into());
        }
        if self.metric.family != MetricFamily::Custom && (self.metric.a.is_some() || self.metric.b.is_some()) {
            return bad("metric.a and metric.b are only read for family = \"custom\"".into());
        }
        let s = &self.solver;
        if !(s.dt > 0.0) {
            return bad(format!("solver.dt must be positive, got {}", s.dt));
        }
        let steps = self.metric.horizon / s.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return bad(format!("metric.horizon = {} is not a multiple of solver.dt = {}", self.metric.horizon, s.dt));
        }
        if s.lambdas.iter().any(|&l| !(l > 0.0)) {
            return bad("solver.lambdas must be positive".into());
        }
        if !(s.picard_tol > 0.0) || s.picard_max_iter == 0 || !(s.norm_cap > 1.0) {
            return bad("solver.picard_tol, solver.picard_max_iter must be positive and solver.norm_cap > 1".into());
        }
        if s.m0_starts == 0 || s.m0_states == 0 || s.kato_points < 2 || s.dissipativity_states == 0 || s.resolvent_rhs == 0 {
            return bad("solver probe counts must be positive (kato_points >= 2)".into());
        }
        if s.snapshots.iter().any(|&t| t < 0.0 || t > self.metric.horizon) {
            return bad("solver.snapshots must lie in [0, horizon]".into());
        }
        if let Some(sweep) = &self.sweep {
            if sweep.mode == Mode::Sweep || sweep.axes.is_empty() || sweep.axes.iter().any(|a| a.values.is_empty()) {
                return bad("sweep needs a non-sweep mode and non-empty axes".into());
            }
        }
        // expressions must parse
        for (name, f) in [
            ("masses.m", &self.masses.m),
            ("masses.m_b", &self.masses.m_b),
            ("source.bulk", &self.source.bulk),
            ("source.boundary", &self.source.boundary),
            ("initial.u", &self.initial.u),
            ("initial.w", &self.initial.w),
            ("nonlinearity.p", &self.nonlinearity.p),
            ("nonlinearity.p_b", &self.nonlinearity.p_b),
            ("nonlinearity.q", &self.nonlinearity.q),
            ("nonlinearity.q_b", &self.nonlinearity.q_b),
        ] {
            f.to_field().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Violations of the modelling hypotheses, each naming the hypothesis.
    pub fn hypothesis_violations(&self) -> Result<Vec<Violation>> {
        let mut out = Vec::new();
        let mesh = self.mesh()?;
        let metric = self.metric_spec()?;
        let samples = ((self.metric.horizon / self.solver.dt).round() as usize + 1).clamp(17, 2001);
        match metric.validate(&mesh, samples) {
            Ok(()) => {}
            Err(Error::Hypothesis(v)) => out.extend(v),
            Err(e @ Error::NonPositiveMetric { .. }) => {
                out.push(Violation { hypothesis: Hypothesis::SmoothMetric, message: e.to_string() })
            }
            Err(e) => return Err(e),
        }
        let nl = &self.nonlinearity;
        if !(nl.alpha >= 1.0) || !(nl.beta >= 1.0) {
            out.push(Violation {
                hypothesis: Hypothesis::Growth,
                message: format!("exponents must satisfy alpha, beta >= 1 (got {}, {})", nl.alpha, nl.beta),
            });
        }
        out.extend(validate_exponents(nl.alpha, nl.beta, self.dimension()).into_violations());
        if nl.lipschitz == LipschitzChoice::Analytic {
            let spec = self.nonlinearity_spec()?;
            let bulk = !(spec.bulk_coeff.is_zero() && spec.bulk_velocity.is_zero());
            let boundary = !(spec.boundary_coeff.is_zero() && spec.boundary_velocity.is_zero());
            if (bulk && nl.k.is_none()) || (boundary && nl.k_b.is_none()) {
                out.push(Violation {
                    hypothesis: Hypothesis::Growth,
                    message: "analytic Lipschitz mode needs the declared constants k (bulk) and k_b (boundary)".into(),
                });
            }
        }
        Ok(out)
    }

    /// Declared dimension, defaulting to the geometry's.
    pub fn dimension(&self) -> usize {
        self.nonlinearity.dimension.unwrap_or(match self.geometry.kind {
            GeometryKind::Interval => 1,
            GeometryKind::Cylinder => 2,
        })
    }

    pub fn mesh(&self) -> Result<Mesh> {
        match self.geometry.kind {
            GeometryKind::Interval => Mesh::interval(self.geometry.length, self.geometry.n_x),
            GeometryKind::Cylinder => Mesh::cylinder(self.geometry.n_x, self.geometry.n_theta.unwrap_or(self.geometry.n_x)),
        }
    }

    pub fn metric_spec(&self) -> Result<MetricSpec> {
        let m = &self.metric;
        let kind = match self.geometry.kind {
            GeometryKind::Interval => MeshKind::Interval,
            GeometryKind::Cylinder => MeshKind::Cylinder,
        };
        let length = if kind == MeshKind::Interval { self.geometry.length } else { 1.0 };
        let base = match m.family {
            MetricFamily::Flat => MetricSpec::flat(m.horizon),
            MetricFamily::Pulsating => MetricSpec::pulsating(kind, m.eps, m.omega, m.horizon),
            MetricFamily::ConformalPulse => MetricSpec::conformal_pulse(length, m.eps, m.omega, m.horizon),
            MetricFamily::Custom => {
                let mut s = MetricSpec::flat(m.horizon);
                s.a = m.a.as_ref().map_or(Ok(Field::constant(1.0)), FieldSpec::to_field)?;
                s.b = m.b.as_ref().map_or(Ok(Field::constant(1.0)), FieldSpec::to_field)?;
                s.name = "custom".into();
                s
            }
        };
        Ok(base.with_masses(self.masses.m.to_field()?, self.masses.m_b.to_field()?))
    }

    pub fn quadrature(&self) -> Quadrature {
        match self.solver.quadrature {
            QuadratureChoice::Nodal => Quadrature::Nodal,
            QuadratureChoice::Consistent => Quadrature::Consistent,
        }
    }

    pub fn system(&self) -> Result<System> {
        Ok(System::new(self.mesh()?, self.metric_spec()?).with_quadrature(self.quadrature()))
    }

    pub fn source_spec(&self) -> Result<SourceSpec> {
        Ok(SourceSpec::new(self.source.bulk.to_field()?, self.source.boundary.to_field()?))
    }

    pub fn nonlinearity_spec(&self) -> Result<NonlinearitySpec> {
        let nl = &self.nonlinearity;
        Ok(NonlinearitySpec {
            alpha: nl.alpha,
            beta: nl.beta,
            bulk_coeff: nl.p.to_field()?,
            boundary_coeff: nl.p_b.to_field()?,
            bulk_velocity: nl.q.to_field()?,
            boundary_velocity: nl.q_b.to_field()?,
            constants: GrowthConstants { c: nl.c, c_b: nl.c_b, k: nl.k, k_b: nl.k_b },
        })
    }

    /// Interpolated initial data plus the optional seeded random part.
    pub fn initial_state(&self, mesh: &Mesh, seed: u64) -> Result<StateVector<f64>> {
        let (fu, fw) = (self.initial.u.to_field()?, self.initial.w.to_field()?);
        let mut x = StateVector { u: mesh.interpolate(|p| fu.eval(0.0, p)), w: mesh.interpolate(|p| fw.eval(0.0, p)) };
        if let Some(kind) = self.initial.random {
            let mut rng = random::stream(seed, streams::DATA);
            let r = match kind {
                RandomData::Smooth => random::smooth_state(&mut rng, mesh, self.initial.modes.max(1)),
                RandomData::White => random::white_state(&mut rng, mesh.dof_count()),
            };
            x = x.axpy(self.initial.scale, &r);
        }
        Ok(x)
    }

    pub fn lipschitz_mode(&self) -> LipschitzMode {
        match self.nonlinearity.lipschitz {
            LipschitzChoice::Empirical => LipschitzMode::Empirical,
            LipschitzChoice::Analytic => LipschitzMode::Analytic,
        }
    }

    pub fn m0_options(&self, seed: u64) -> M0Options {
        M0Options { starts: self.solver.m0_starts, random_states: self.solver.m0_states, seed, ..M0Options::default() }
    }

    pub fn lipschitz_options(&self, seed: u64) -> LipschitzOptions {
        LipschitzOptions {
            samples: self.solver.lipschitz_samples,
            seed,
            embedding: self.nonlinearity.embedding,
            ..LipschitzOptions::default()
        }
    }

    pub fn picard_options(&self) -> PicardOptions {
        PicardOptions { tol: self.solver.picard_tol, max_iter: self.solver.picard_max_iter, ..PicardOptions::default() }
    }

    pub fn continuation_options(&self, seed: u64) -> ContinuationOptions {
        ContinuationOptions {
            dt: self.solver.dt,
            cap_factor: self.solver.norm_cap,
            picard: self.picard_options(),
            m0: self.m0_options(seed),
            lipschitz: self.lipschitz_options(seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[geometry]\nkind = \"interval\"\nn_x = 8\n\n[metric]\nhorizon = 1.0\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let c = load_config_str(MINIMAL, false).unwrap();
        assert!(c.warnings.is_empty());
        let cfg = c.config;
        assert_eq!(cfg.metric.family, MetricFamily::Flat);
        assert_eq!(cfg.solver.dt, 1e-2);
        assert_eq!(cfg.solver.lambdas, vec![0.1, 1.0, 10.0]);
        assert_eq!(cfg.masses.m, FieldSpec::Number(0.0));
        assert!(cfg.nonlinearity_spec().unwrap().is_zero());
        assert_eq!(cfg.dimension(), 1);
    }

    #[test]
    fn positive_mass_is_a_hypothesis_violation() {
        let src = format!("{MINIMAL}\n[masses]\nm = 1.0\n");
        match load_config_str(&src, false) {
            Err(Error::Hypothesis(v)) => assert_eq!(v[0].hypothesis, Hypothesis::NonPositiveMass),
            other => panic!("expected hypothesis violation, got {other:?}"),
        }
        let c = load_config_str(&src, true).unwrap();
        assert_eq!(c.warnings[0].hypothesis, Hypothesis::NonPositiveMass);
    }

    #[test]
    fn supercritical_exponent_is_rejected() {
        let src = format!("{MINIMAL}\n[nonlinearity]\nalpha = 4.0\ndimension = 3\np = 1.0\n");
        match load_config_str(&src, false) {
            Err(Error::Hypothesis(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].hypothesis, Hypothesis::SubcriticalExponents);
                assert!(v[0].message.contains('3'));
            }
            other => panic!("expected hypothesis violation, got {other:?}"),
        }
        let ok = format!("{MINIMAL}\n[nonlinearity]\nalpha = 3.0\ndimension = 3\np = 1.0\n");
        assert!(load_config_str(&ok, false).is_ok());
    }

    #[test]
    fn parse_errors_report_lines() {
        let src = "[geometry]\nkind = \"interval\"\nn_x = \"eight\"\n[metric]\nhorizon = 1.0\n";
        let e = load_config_str(src, false).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let typo = format!("{MINIMAL}[solver]\ndtt = 0.1\n");
        let e = load_config_str(&typo, false).unwrap_err().to_string();
        assert!(e.contains("line 8") && e.contains("dtt"), "{e}");
    }

    #[test]
    fn structural_errors_are_config_errors() {
        let src = format!("{MINIMAL}[solver]\ndt = 0.3\n");
        assert!(matches!(load_config_str(&src, false), Err(Error::Config(_))));
        let src = format!("{MINIMAL}[source]\nbulk = \"sin(\"\n");
        assert!(matches!(load_config_str(&src, false), Err(Error::Config(_))));
    }

    #[test]
    fn nonpositive_metric_is_flagged() {
        let src = "[geometry]\nkind = \"interval\"\nn_x = 8\n[metric]\nfamily = \"pulsating\"\neps = 1.5\nomega = 5.0\nhorizon = 1.0\n";
        match load_config_str(src, false) {
            Err(Error::Hypothesis(v)) => assert_eq!(v[0].hypothesis, Hypothesis::SmoothMetric),
            other => panic!("expected hypothesis violation, got {other:?}"),
        }
    }

    #[test]
    fn analytic_lipschitz_needs_constants() {
        let src = format!("{MINIMAL}[nonlinearity]\nalpha = 3.0\np = 1.0\nlipschitz = \"analytic\"\n");
        match load_config_str(&src, false) {
            Err(Error::Hypothesis(v)) => assert_eq!(v[0].hypothesis, Hypothesis::Growth),
            other => panic!("expected hypothesis violation, got {other:?}"),
        }
        let ok = format!("{MINIMAL}[nonlinearity]\nalpha = 3.0\np = 1.0\nlipschitz = \"analytic\"\nk = 2.0\n");
        assert!(load_config_str(&ok, false).is_ok());
    }

    #[test]
    fn sweep_paths_rewrite_values() {
        let (_, mut raw) = parse_config(MINIMAL).unwrap();
        set_path(&mut raw, "metric.eps", toml::Value::Float(0.1)).unwrap();
        set_path(&mut raw, "solver.dt", toml::Value::Float(0.05)).unwrap();
        let cfg = config_from_value(raw).unwrap();
        assert_eq!(cfg.metric.eps, 0.1);
        assert_eq!(cfg.solver.dt, 0.05);
    }

    #[test]
    fn initial_state_is_deterministic() {
        let src = format!("{MINIMAL}[initial]\nu = \"x\"\nrandom = \"smooth\"\nscale = 0.1\n");
        let cfg = load_config_str(&src, false).unwrap().config;
        let mesh = cfg.mesh().unwrap();
        assert_eq!(cfg.initial_state(&mesh, 4).unwrap(), cfg.initial_state(&mesh, 4).unwrap());
        assert_ne!(cfg.initial_state(&mesh, 4).unwrap(), cfg.initial_state(&mesh, 5).unwrap());
    }
}
