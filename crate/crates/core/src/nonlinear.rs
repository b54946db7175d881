//! Semilinear layer: power-type nonlinearities, the exponent gate,
//! Lipschitz estimation, the existence certificate, Picard iteration for mild
//! solutions, restart/gluing, and maximal continuation with blow-up detection.

use std::fmt;
use std::path::Path;
use std::sync::Mutex;

use rand::Rng;
use rayon::prelude::*;

use crate::assembly::{DiscreteOperator, NormKind, StateVector};
use crate::error::{Error, Hypothesis, Result, Violation};
use crate::evolution::{
    estimate_m0, evolve_linear, midpoint_step_with, Forcing, M0Options, NoForcing, System, TimeGrid, Trajectory,
};
use crate::expr::Field;
use crate::geometry::Mesh;
use crate::random::{self, streams};

/// Declared growth constants of the nonlinearity.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GrowthConstants {
    pub c: Option<f64>,
    pub c_b: Option<f64>,
    pub k: Option<f64>,
    pub k_b: Option<f64>,
}

/// `N(t,p,u,w) = P |u|^(alpha-1) u + Q w` in the bulk and
/// `N_b(t,q,v,z) = P_b |v|^(beta-1) v + Q_b z` on the boundary.
#[derive(Debug, Clone)]
pub struct NonlinearitySpec {
    pub alpha: f64,
    pub beta: f64,
    pub bulk_coeff: Field,
    pub boundary_coeff: Field,
    pub bulk_velocity: Field,
    pub boundary_velocity: Field,
    pub constants: GrowthConstants,
}

impl Default for NonlinearitySpec {
    fn default() -> Self {
        Self::zero()
    }
}

#[inline]
fn power(u: f64, p: f64) -> f64 {
    if p == 1.0 {
        u
    } else if p == 3.0 {
        u * u * u
    } else if p == 2.0 {
        u.abs() * u
    } else {
        u.abs().powf(p - 1.0) * u
    }
}

#[inline]
fn power_derivative(u: f64, p: f64) -> f64 {
    if p == 1.0 {
        1.0
    } else if p == 3.0 {
        3.0 * u * u
    } else {
        p * u.abs().powf(p - 1.0)
    }
}

impl NonlinearitySpec {
    pub fn zero() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            bulk_coeff: Field::zero(),
            boundary_coeff: Field::zero(),
            bulk_velocity: Field::zero(),
            boundary_velocity: Field::zero(),
            constants: GrowthConstants::default(),
        }
    }

    /// Pure power type with constant coefficients.
    pub fn power(alpha: f64, p: f64, beta: f64, p_b: f64) -> Self {
        Self {
            alpha,
            beta,
            bulk_coeff: Field::constant(p),
            boundary_coeff: Field::constant(p_b),
            ..Self::zero()
        }
    }

    pub fn with_velocity_terms(mut self, q: Field, q_b: Field) -> Self {
        self.bulk_velocity = q;
        self.boundary_velocity = q_b;
        self
    }

    pub fn is_zero(&self) -> bool {
        self.bulk_coeff.is_zero()
            && self.boundary_coeff.is_zero()
            && self.bulk_velocity.is_zero()
            && self.boundary_velocity.is_zero()
    }

    pub fn check_exponents(&self) -> Result<()> {
        if !(self.alpha >= 1.0) || !(self.beta >= 1.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "exponents must satisfy alpha, beta >= 1 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    fn coefficients(&self, mesh: &Mesh, t: f64) -> [Vec<f64>; 4] {
        [&self.bulk_coeff, &self.boundary_coeff, &self.bulk_velocity, &self.boundary_velocity]
            .map(|f| mesh.interpolate(|p| f.eval(t, p)))
    }

    /// Nodal values of `N` (all nodes) and `N_b` (boundary nodes, zero elsewhere).
    pub fn eval_nodal(&self, mesh: &Mesh, t: f64, x: &StateVector<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = mesh.dof_count();
        if x.u.len() != n {
            return Err(Error::Dimension { expected: n, got: x.u.len() });
        }
        let [p, pb, q, qb] = self.coefficients(mesh, t);
        let bulk: Vec<f64> = (0..n).map(|i| p[i] * power(x.u[i], self.alpha) + q[i] * x.w[i]).collect();
        let mut boundary = vec![0.0; n];
        for &i in mesh.boundary_node_ids() {
            boundary[i] = pb[i] * power(x.u[i], self.beta) + qb[i] * x.w[i];
        }
        if bulk.iter().chain(&boundary).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t });
        }
        Ok((bulk, boundary))
    }

    /// Load vector `BulkMass N + BoundaryMass N_b`.
    pub fn load(&self, mesh: &Mesh, op: &DiscreteOperator, t: f64, x: &StateVector<f64>) -> Result<Vec<f64>> {
        let (b, g) = self.eval_nodal(mesh, t, x)?;
        Ok(op.load(&b, &g))
    }

    /// The source `(0, Mass^{-1} load)` as a state.
    pub fn eval_rhs(&self, mesh: &Mesh, op: &DiscreteOperator, t: f64, x: &StateVector<f64>) -> Result<StateVector<f64>> {
        op.load_to_state(&self.load(mesh, op, t, x)?)
    }

    /// Load of the linearization at `x` applied to `d`.
    fn linearized_load(&self, mesh: &Mesh, op: &DiscreteOperator, coeffs: &[Vec<f64>; 4], x: &StateVector<f64>, d: &StateVector<f64>) -> Vec<f64> {
        let [p, pb, q, qb] = coeffs;
        let n = mesh.dof_count();
        let bulk: Vec<f64> =
            (0..n).map(|i| p[i] * power_derivative(x.u[i], self.alpha) * d.u[i] + q[i] * d.w[i]).collect();
        let mut bd = vec![0.0; n];
        for &i in mesh.boundary_node_ids() {
            bd[i] = pb[i] * power_derivative(x.u[i], self.beta) * d.u[i] + qb[i] * d.w[i];
        }
        op.load(&bulk, &bd)
    }

    /// Transpose of [`Self::linearized_load`] applied to a nodal vector `y`.
    fn linearized_load_transpose(&self, mesh: &Mesh, op: &DiscreteOperator, coeffs: &[Vec<f64>; 4], x: &StateVector<f64>, y: &[f64]) -> StateVector<f64> {
        let [p, pb, q, qb] = coeffs;
        let my = op.bulk_mass().matvec(y);
        let by = op.boundary_mass().matvec(y);
        let n = mesh.dof_count();
        let mut out = StateVector::zeros(n);
        for i in 0..n {
            out.u[i] = p[i] * power_derivative(x.u[i], self.alpha) * my[i];
            out.w[i] = q[i] * my[i];
        }
        for &i in mesh.boundary_node_ids() {
            out.u[i] += pb[i] * power_derivative(x.u[i], self.beta) * by[i];
            out.w[i] += qb[i] * by[i];
        }
        out
    }
}

/// Critical exponents and the verdict of the subcriticality gate.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentReport {
    pub dimension: usize,
    pub c_bulk: f64,
    pub c_boundary: f64,
    pub alpha_ok: bool,
    pub beta_ok: bool,
    pub violations: Vec<String>,
}

impl ExponentReport {
    pub fn accepted(&self) -> bool {
        self.alpha_ok && self.beta_ok
    }
}

/// `C_M = 2n/(n-2)` for `n >= 3`, `C_dM = (2n-2)/(n-3)` for `n >= 4`, infinite
/// otherwise; accepts iff `alpha <= C_M / 2` and `beta <= C_dM / 2`.
/// Dimension 1 is accepted like dimension 2.
pub fn validate_exponents(alpha: f64, beta: f64, n: usize) -> ExponentReport {
    let n_f = n as f64;
    let c_bulk = if n >= 3 { 2.0 * n_f / (n_f - 2.0) } else { f64::INFINITY };
    let c_boundary = if n >= 4 { (2.0 * n_f - 2.0) / (n_f - 3.0) } else { f64::INFINITY };
    let alpha_ok = alpha <= c_bulk / 2.0;
    let beta_ok = beta <= c_boundary / 2.0;
    let mut violations = Vec::new();
    if !alpha_ok {
        violations.push(format!("alpha = {alpha} exceeds C_M/2 = {} in dimension {n}", c_bulk / 2.0));
    }
    if !beta_ok {
        violations.push(format!("beta = {beta} exceeds C_dM/2 = {} in dimension {n}", c_boundary / 2.0));
    }
    ExponentReport { dimension: n, c_bulk, c_boundary, alpha_ok, beta_ok, violations }
}

impl ExponentReport {
    pub fn into_violations(self) -> Vec<Violation> {
        self.violations
            .into_iter()
            .map(|message| Violation { hypothesis: Hypothesis::SubcriticalExponents, message })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LipschitzMode {
    Analytic,
    Empirical,
}

#[derive(Debug, Clone, Copy)]
pub struct LipschitzOptions {
    /// Random base points.
    pub samples: usize,
    pub safety: f64,
    pub seed: u64,
    /// Discrete sup-norm embedding constant for the analytic bound.
    pub embedding: f64,
    /// Times sampled in the time range.
    pub times: usize,
    pub power_iterations: usize,
}

impl Default for LipschitzOptions {
    fn default() -> Self {
        Self { samples: 32, safety: 1.5, seed: 0, embedding: 1.0, times: 3, power_iterations: 8 }
    }
}

fn base_point(rng: &mut impl Rng, mesh: &Mesh, kind: usize) -> StateVector<f64> {
    let n = mesh.dof_count();
    match kind % 4 {
        0 | 1 => random::smooth_state(rng, mesh, 4),
        2 => {
            let c: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let d: f64 = rng.random_range(-1.0..1.0);
            StateVector { u: vec![c; n], w: vec![d; n] }
        }
        _ => {
            let mut u = vec![0.0; n];
            let mut w = vec![0.0; n];
            u[rng.random_range(0..n)] = if rng.random::<bool>() { 1.0 } else { -1.0 };
            w[rng.random_range(0..n)] = rng.random_range(-1.0..1.0);
            StateVector { u, w }
        }
    }
}

/// Estimate of the Lipschitz constant of `X -> F(t, X)` on the ball of
/// radius `radius` in the control norm, for `t` in `t_range`.
pub fn lipschitz_estimate(
    sys: &System,
    spec: &NonlinearitySpec,
    radius: f64,
    t_range: (f64, f64),
    mode: LipschitzMode,
    opts: &LipschitzOptions,
) -> Result<f64> {
    if !(radius > 0.0) || !(t_range.1 >= t_range.0) {
        return Err(Error::InvalidArgument(format!("Lipschitz ball radius must be positive, got {radius}")));
    }
    if spec.is_zero() {
        return Ok(0.0);
    }
    match mode {
        LipschitzMode::Analytic => analytic_lipschitz(spec, radius, opts.embedding),
        LipschitzMode::Empirical => empirical_lipschitz(sys, spec, radius, t_range, opts),
    }
}

fn analytic_lipschitz(spec: &NonlinearitySpec, radius: f64, embedding: f64) -> Result<f64> {
    let r = embedding * radius;
    let bulk_active = !spec.bulk_coeff.is_zero() || !spec.bulk_velocity.is_zero();
    let boundary_active = !spec.boundary_coeff.is_zero() || !spec.boundary_velocity.is_zero();
    let mut l = 0.0;
    if bulk_active {
        let k = spec.constants.k.ok_or(Error::MissingConstant("K"))?;
        l += k * (1.0 + 2.0 * r.powf(spec.alpha - 1.0));
    }
    if boundary_active {
        let k_b = spec.constants.k_b.ok_or(Error::MissingConstant("K_b"))?;
        l += k_b * (1.0 + 2.0 * r.powf(spec.beta - 1.0));
    }
    Ok(embedding * l)
}

fn empirical_lipschitz(
    sys: &System,
    spec: &NonlinearitySpec,
    radius: f64,
    t_range: (f64, f64),
    opts: &LipschitzOptions,
) -> Result<f64> {
    if opts.samples < 2 {
        return Err(Error::InvalidArgument("empirical Lipschitz estimation needs at least 2 samples".into()));
    }
    let mesh = sys.mesh();
    let kind = sys.control_norm_kind()?;
    let n_times = opts.times.max(1);
    let times: Vec<f64> = (0..n_times)
        .map(|i| {
            if n_times == 1 {
                t_range.0
            } else {
                t_range.0 + (t_range.1 - t_range.0) * i as f64 / (n_times - 1) as f64
            }
        })
        .collect();
    const FRACTIONS: [f64; 5] = [1.0 / 16.0, 0.125, 0.25, 0.5, 1.0];

    let per_time: Vec<f64> = times
        .par_iter()
        .enumerate()
        .map(|(ti, &t)| -> Result<f64> {
            let op = sys.operator(t)?;
            let coeffs = spec.coefficients(mesh, t);
            let mut rng = random::stream(opts.seed, streams::LIPSCHITZ * 1000 + ti as u64);
            let unit = |x: StateVector<f64>| -> Result<Option<StateVector<f64>>> {
                let nx = op.norm(kind, &x)?;
                Ok((nx > 0.0).then(|| x.scaled(1.0 / nx)))
            };
            let ratio = |x: &StateVector<f64>, y: &StateVector<f64>| -> Result<f64> {
                let d = op.norm(kind, &x.sub(y))?;
                if !(d > 0.0) {
                    return Ok(0.0);
                }
                let mut lx = spec.load(mesh, &op, t, x)?;
                let ly = spec.load(mesh, &op, t, y)?;
                for (a, b) in lx.iter_mut().zip(ly) {
                    *a -= b;
                }
                Ok(op.load_norm(&lx)? / d)
            };
            let mut best: f64 = 0.0;
            let mut linearization_points = Vec::new();
            for s in 0..opts.samples {
                let Some(xb) = unit(base_point(&mut rng, mesh, s))? else { continue };
                let Some(yb) = unit(base_point(&mut rng, mesh, s + 1))? else { continue };
                let Some(db) = unit(random::white_state(&mut rng, mesh.dof_count()))? else { continue };
                for &f in &FRACTIONS {
                    let x = xb.scaled(f * radius);
                    // distant pair inside the ball
                    best = best.max(ratio(&x, &yb.scaled(f * radius))?);
                    // nearby pair probing the local slope
                    let y = x.axpy(1e-4 * f * radius, &db);
                    if op.norm(kind, &y)? <= radius {
                        best = best.max(ratio(&x, &y)?);
                    }
                    if f == 1.0 {
                        linearization_points.push(x);
                    }
                }
            }
            // power iteration on the linearization at the largest points
            for x in linearization_points.iter().take(8) {
                let mut d = random::white_state(&mut rng, mesh.dof_count());
                for _ in 0..opts.power_iterations {
                    let nd = op.norm(kind, &d)?;
                    if !(nd > 0.0) {
                        break;
                    }
                    d = d.scaled(1.0 / nd);
                    let l = spec.linearized_load(mesh, &op, &coeffs, x, &d);
                    let jd = op.solve_mass(&l)?;
                    let val = l.iter().zip(&jd).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt();
                    best = best.max(val);
                    let g = spec.linearized_load_transpose(mesh, &op, &coeffs, x, &jd);
                    d = gram_solve(&op, kind, &g)?;
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let raw = per_time.into_iter().fold(0.0, f64::max);
    Ok(raw * opts.safety)
}

fn gram_solve(op: &DiscreteOperator, kind: NormKind, y: &StateVector<f64>) -> Result<StateVector<f64>> {
    let su = match kind {
        NormKind::Energy => op.shifted_solver(0.0, 1.0)?,
        NormKind::Graph => op.shifted_solver(1.0, 1.0)?,
    };
    Ok(StateVector { u: su.solve(&y.u)?, w: op.solve_mass(&y.w)? })
}

/// Local existence data: `tau = min{T, 1/(2 M0 L)}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExistenceCertificate {
    pub rho: f64,
    pub m0: f64,
    pub lipschitz: f64,
    pub horizon: f64,
    pub tau: f64,
    pub solution_bound: f64,
    pub contraction_factor: f64,
}

pub fn existence_time(rho: f64, m0: f64, lipschitz: f64, horizon: f64) -> Result<ExistenceCertificate> {
    if !(rho >= 0.0) || !(m0 > 0.0) || !(lipschitz >= 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "certificate inputs must be positive (rho = {rho}, M0 = {m0}, L = {lipschitz}, T = {horizon})"
        )));
    }
    let tau = if lipschitz == 0.0 { horizon } else { horizon.min(1.0 / (2.0 * m0 * lipschitz)) };
    Ok(ExistenceCertificate {
        rho,
        m0,
        lipschitz,
        horizon,
        tau,
        solution_bound: rho * (1.0 + m0),
        contraction_factor: tau * m0 * lipschitz,
    })
}

impl fmt::Display for ExistenceCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rho: {:.12e}", self.rho)?;
        writeln!(f, "M0: {:.12e}", self.m0)?;
        writeln!(f, "L: {:.12e}", self.lipschitz)?;
        writeln!(f, "T: {:.12e}", self.horizon)?;
        writeln!(f, "tau: {:.12e}", self.tau)?;
        writeln!(f, "solution_bound: {:.12e}", self.solution_bound)?;
        writeln!(f, "contraction_factor: {:.12e}", self.contraction_factor)
    }
}

/// Builds the certificate for `x0` over `[t0, t0 + span]`: `rho = ||x0||`,
/// `M0` measured on the grid, `L` on the ball of radius `rho (1 + M0)`.
pub fn certify(
    sys: &System,
    spec: &NonlinearitySpec,
    x0: &StateVector<f64>,
    grid: &TimeGrid,
    m0_opts: &M0Options,
    lip_opts: &LipschitzOptions,
) -> Result<ExistenceCertificate> {
    let rho = sys.operator(grid.t0)?.control_norm(x0)?;
    let m0 = estimate_m0(sys, &probe_grid(grid), m0_opts)?.value;
    let span = grid.end() - grid.t0;
    let l = if rho > 0.0 {
        lipschitz_estimate(sys, spec, rho * (1.0 + m0), (grid.t0, grid.end()), LipschitzMode::Empirical, lip_opts)?
    } else {
        0.0
    };
    existence_time(rho, m0, l, span.max(grid.dt))
}

/// Grid used for `M0` probes: the run grid when small, else a coarser one
/// with at most 400 steps over the same span.
pub fn probe_grid(grid: &TimeGrid) -> TimeGrid {
    if grid.steps <= 400 {
        *grid
    } else {
        let stride = grid.steps.div_ceil(400);
        TimeGrid::with_steps(grid.t0, grid.dt * stride as f64, grid.steps / stride)
    }
}

/// Initial Picard iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialIterate {
    /// `X_0(t) = U(t, t0) X0`.
    #[default]
    Linear,
    /// `X_0(t) = X0` at `t0`, zero afterwards.
    ZeroExtended,
}

#[derive(Debug, Clone, Copy)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub initial: InitialIterate,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 100, initial: InitialIterate::Linear }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardIteration {
    pub iter: usize,
    pub sup_diff: f64,
    /// `sup_diff / previous sup_diff`; NaN for the first iteration.
    pub ratio: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PicardReport {
    pub iterations: Vec<PicardIteration>,
    pub converged: bool,
}

impl PicardReport {
    /// Largest contraction ratio, skipping iterations already at round-off.
    pub fn max_ratio(&self, floor: f64) -> f64 {
        self.iterations
            .windows(2)
            .filter(|w| w[0].sup_diff > floor && w[1].sup_diff > floor)
            .map(|w| w[1].ratio)
            .fold(0.0, f64::max)
    }

    /// Writes `iter,sup_diff,ratio`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "sup_diff", "ratio"])?;
        for it in &self.iterations {
            w.write_record([it.iter.to_string(), format!("{:.17e}", it.sup_diff), format!("{:.17e}", it.ratio)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Source frozen from a previous iterate: step `j` uses `N` at the average of
/// the iterate's states at both ends of the step.
struct FrozenSource<'a> {
    spec: &'a NonlinearitySpec,
    states: &'a [StateVector<f64>],
    base: &'a dyn Forcing,
}

impl Forcing for FrozenSource<'_> {
    fn step_load(&self, sys: &System, op_mid: &DiscreteOperator, t_mid: f64, step: usize) -> Result<Option<Vec<f64>>> {
        let avg = self.states[step].axpy(1.0, &self.states[step + 1]).scaled(0.5);
        let mut l = self.spec.load(sys.mesh(), op_mid, t_mid, &avg)?;
        if let Some(b) = self.base.step_load(sys, op_mid, t_mid, step)? {
            for (a, bi) in l.iter_mut().zip(b) {
                *a += bi;
            }
        }
        Ok(Some(l))
    }
}

/// `max_k ||a_k - b_k||` in the control norm at the grid times of `a`.
pub fn sup_diff(sys: &System, a: &Trajectory, b: &Trajectory) -> Result<f64> {
    let kind = sys.control_norm_kind()?;
    let mut m: f64 = 0.0;
    for ((&t, x), y) in a.times.iter().zip(&a.states).zip(&b.states) {
        m = m.max(sys.operator(t)?.norm(kind, &x.sub(y))?);
    }
    Ok(m)
}

/// Picard iteration `X_{k+1} = Phi(X_k)` for the mild formulation over `grid`,
/// each iterate one sourced linear evolution. `base` is an additional
/// state-independent forcing.
pub fn picard_solve(
    sys: &System,
    spec: &NonlinearitySpec,
    x0: &StateVector<f64>,
    grid: &TimeGrid,
    base: &dyn Forcing,
    opts: &PicardOptions,
) -> Result<(Trajectory, PicardReport)> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("Picard tolerance must be positive".into()));
    }
    let mut current = match opts.initial {
        InitialIterate::Linear => evolve_linear(sys, x0, base, grid)?,
        InitialIterate::ZeroExtended => {
            let mut t = Trajectory::starting_at(grid.t0, x0.clone());
            for k in 1..=grid.steps {
                t.times.push(grid.time(k));
                t.states.push(StateVector::zeros(x0.dofs()));
                t.residuals.push(0.0);
            }
            t
        }
    };
    let mut report = PicardReport::default();
    if spec.is_zero() && opts.initial == InitialIterate::Linear {
        report.iterations.push(PicardIteration { iter: 1, sup_diff: 0.0, ratio: f64::NAN });
        report.converged = true;
        return Ok((current, report));
    }
    let mut prev_diff = f64::NAN;
    for iter in 1..=opts.max_iter {
        let frozen = FrozenSource { spec, states: &current.states, base };
        let next = evolve_linear(sys, x0, &frozen, grid)?;
        let diff = sup_diff(sys, &next, &current)?;
        if !diff.is_finite() {
            return Err(Error::NonFinite { t: grid.end() });
        }
        report.iterations.push(PicardIteration { iter, sup_diff: diff, ratio: diff / prev_diff });
        prev_diff = diff;
        current = next;
        if diff <= opts.tol {
            report.converged = true;
            return Ok((current, report));
        }
    }
    Err(Error::NotConverged { iterations: opts.max_iter, last_diff: prev_diff, last_ratio: report.iterations.last().map_or(f64::NAN, |i| i.ratio) })
}

/// Production path: midpoint stepping with a fixed-point solve per step.
pub fn evolve_nonlinear(
    sys: &System,
    spec: &NonlinearitySpec,
    x0: &StateVector<f64>,
    grid: &TimeGrid,
    base: &dyn Forcing,
    inner_tol: f64,
    max_inner: usize,
) -> Result<Trajectory> {
    let kind = sys.control_norm_kind()?;
    let mut traj = Trajectory::starting_at(grid.t0, x0.clone());
    let mut x = x0.clone();
    for k in 0..grid.steps {
        let t_mid = grid.time(k) + 0.5 * grid.dt;
        let op = sys.operator(t_mid)?;
        let base_load = base.step_load(sys, &op, t_mid, k)?;
        let mut guess = x.clone();
        let mut converged = false;
        let mut last = (0.0, 0.0);
        for _ in 0..max_inner {
            let avg = x.axpy(1.0, &guess).scaled(0.5);
            let mut l = spec.load(sys.mesh(), &op, t_mid, &avg)?;
            if let Some(b) = &base_load {
                for (a, bi) in l.iter_mut().zip(b) {
                    *a += bi;
                }
            }
            let out = midpoint_step_with(&op, &x, grid.dt, Some(&l))?;
            if !out.state.is_finite() {
                return Err(Error::NonFinite { t: grid.time(k + 1) });
            }
            let d = op.norm(kind, &out.state.sub(&guess))?;
            let scale = op.norm(kind, &out.state)?.max(1.0);
            last = (d, out.residual);
            guess = out.state;
            if d <= inner_tol * scale {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NotConverged { iterations: max_inner, last_diff: last.0, last_ratio: f64::NAN });
        }
        x = guess;
        traj.times.push(grid.time(k + 1));
        traj.states.push(x.clone());
        traj.residuals.push(last.1);
        traj.source_norms.push(0.0);
    }
    Ok(traj)
}

/// Sup-discrepancy between a direct solve on `grid` and a solve restarted at
/// grid time `t1` with the shifted family.
pub fn restart_check(
    sys: &System,
    spec: &NonlinearitySpec,
    x0: &StateVector<f64>,
    grid: &TimeGrid,
    t1: f64,
    opts: &PicardOptions,
) -> Result<f64> {
    let k1 = grid
        .index_of(t1)
        .filter(|&k| k > 0 && k < grid.steps)
        .ok_or_else(|| Error::InvalidArgument(format!("restart time {t1} is not an interior grid time")))?;
    let (direct, _) = picard_solve(sys, spec, x0, grid, &NoForcing, opts)?;
    let first = TimeGrid::with_steps(grid.t0, grid.dt, k1);
    let (mut glued, _) = picard_solve(sys, spec, x0, &first, &NoForcing, opts)?;
    let second = TimeGrid::with_steps(grid.time(k1), grid.dt, grid.steps - k1);
    let (rest, _) = picard_solve(sys, spec, glued.last(), &second, &NoForcing, opts)?;
    glued.glue(rest)?;
    sup_diff(sys, &direct, &glued)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    ReachedHorizon,
    NormCap,
    WindowUnderflow,
    PicardFailure(String),
}

impl StopReason {
    pub fn is_blow_up(&self) -> bool {
        !matches!(self, StopReason::ReachedHorizon)
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::ReachedHorizon => f.write_str("reached horizon"),
            StopReason::NormCap => f.write_str("norm cap exceeded"),
            StopReason::WindowUnderflow => f.write_str("existence window below dt"),
            StopReason::PicardFailure(m) => write!(f, "Picard failure: {m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowRecord {
    pub t_start: f64,
    pub length: f64,
    pub rho: f64,
    pub lipschitz: f64,
    pub tau: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct ContinuationOptions {
    pub dt: f64,
    /// Blow-up is declared once the norm exceeds this multiple of `||X0||`.
    pub cap_factor: f64,
    pub picard: PicardOptions,
    pub m0: M0Options,
    pub lipschitz: LipschitzOptions,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            cap_factor: 1e6,
            picard: PicardOptions::default(),
            m0: M0Options::default(),
            lipschitz: LipschitzOptions::default(),
        }
    }
}

/// Maximal continuation result.
#[derive(Debug, Clone)]
pub struct Continuation {
    pub trajectory: Trajectory,
    pub windows: Vec<WindowRecord>,
    pub reason: StopReason,
    pub m0: f64,
    /// Last time reached.
    pub t_stop: f64,
    /// Estimate of the maximal existence time.
    pub t_plus: f64,
    /// Length of the last window.
    pub error_bar: f64,
}

impl Continuation {
    pub fn blew_up(&self) -> bool {
        self.reason.is_blow_up()
    }

    /// Writes `window,t_start,length,rho,L,tau,iterations`.
    pub fn write_windows_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["window", "t_start", "length", "rho", "L", "tau", "iterations"])?;
        for (i, r) in self.windows.iter().enumerate() {
            w.write_record([
                i.to_string(),
                format!("{:.17e}", r.t_start),
                format!("{:.17e}", r.length),
                format!("{:.17e}", r.rho),
                format!("{:.17e}", r.lipschitz),
                format!("{:.17e}", r.tau),
                r.iterations.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Lipschitz estimates on a geometric ladder of radii, computed lazily.
struct LipschitzLadder<'a> {
    sys: &'a System,
    spec: &'a NonlinearitySpec,
    range: (f64, f64),
    opts: LipschitzOptions,
    base: f64,
    cache: Mutex<Vec<(i32, f64)>>,
}

impl LipschitzLadder<'_> {
    fn at(&self, radius: f64) -> Result<f64> {
        let k = (4.0 * (radius / self.base).log2()).ceil().max(-200.0) as i32;
        if let Some(&(_, l)) = self.cache.lock().unwrap().iter().find(|e| e.0 == k) {
            return Ok(l);
        }
        let r = self.base * 2f64.powf(k as f64 / 4.0);
        let l = lipschitz_estimate(self.sys, self.spec, r, self.range, LipschitzMode::Empirical, &self.opts)?;
        self.cache.lock().unwrap().push((k, l));
        Ok(l)
    }
}

/// Continues the mild solution over windows of certified length until the
/// horizon, the norm cap, or window underflow.
pub fn continue_maximal(
    sys: &System,
    spec: &NonlinearitySpec,
    x0: &StateVector<f64>,
    horizon: f64,
    opts: &ContinuationOptions,
) -> Result<Continuation> {
    let dt = opts.dt;
    let total = TimeGrid::new(0.0, horizon, dt)?;
    let kind = sys.control_norm_kind()?;
    let rho0 = sys.operator(0.0)?.norm(kind, x0)?;
    let m0 = estimate_m0(sys, &probe_grid(&total), &opts.m0)?.value;
    let mut traj = Trajectory::starting_at(0.0, x0.clone());
    let mut windows = Vec::new();
    if rho0 == 0.0 && spec.is_zero() {
        let tr = evolve_linear(sys, x0, &NoForcing, &total)?;
        return Ok(Continuation {
            trajectory: tr,
            windows,
            reason: StopReason::ReachedHorizon,
            m0,
            t_stop: horizon,
            t_plus: horizon,
            error_bar: 0.0,
        });
    }
    let cap = opts.cap_factor * rho0.max(f64::MIN_POSITIVE);
    let ladder = LipschitzLadder {
        sys,
        spec,
        range: (0.0, horizon),
        opts: opts.lipschitz,
        base: rho0.max(1e-12),
        cache: Mutex::new(Vec::new()),
    };
    let mut k = 0usize;
    let reason = loop {
        if k >= total.steps {
            break StopReason::ReachedHorizon;
        }
        let t = total.time(k);
        let x = traj.last().clone();
        let rho = sys.operator(t)?.norm(kind, &x)?;
        if !rho.is_finite() || rho > cap {
            break StopReason::NormCap;
        }
        let l = if rho > 0.0 { ladder.at(rho * (1.0 + m0))? } else { 0.0 };
        let tau = if l == 0.0 { horizon - t } else { (horizon - t).min(1.0 / (2.0 * m0 * l)) };
        let steps = ((tau / dt) * (1.0 + 1e-12)).floor() as usize;
        let steps = steps.min(total.steps - k);
        if steps == 0 {
            break StopReason::WindowUnderflow;
        }
        let grid = TimeGrid::with_steps(t, dt, steps);
        let picard = PicardOptions { tol: opts.picard.tol * rho.max(1.0), ..opts.picard };
        match picard_solve(sys, spec, &x, &grid, &NoForcing, &picard) {
            Ok((piece, report)) => {
                windows.push(WindowRecord {
                    t_start: t,
                    length: steps as f64 * dt,
                    rho,
                    lipschitz: l,
                    tau,
                    iterations: report.iterations.len(),
                });
                traj.glue(piece)?;
                k += steps;
            }
            Err(e @ (Error::NonFinite { .. } | Error::NotConverged { .. })) => {
                break StopReason::PicardFailure(e.to_string());
            }
            Err(e) => return Err(e),
        }
    };
    let t_stop = traj.end_time();
    let error_bar = windows.last().map_or(0.0, |w| w.length);
    let t_plus = if reason.is_blow_up() { t_stop + extrapolate_remaining(sys, &traj, dt)? } else { horizon };
    Ok(Continuation { trajectory: traj, windows, reason, m0, t_stop, t_plus, error_bar })
}

/// Remaining time to blow-up from the growth of `g = log ||X||` at the end of
/// the trajectory: for `||X|| ~ C (t+ - t)^(-gamma)`, `t+ - t = g' / g''`.
fn extrapolate_remaining(sys: &System, traj: &Trajectory, dt: f64) -> Result<f64> {
    let kind = sys.control_norm_kind()?;
    let n = traj.len();
    let log_norm = |i: usize| -> Result<f64> { Ok(sys.operator(traj.times[i])?.norm(kind, &traj.states[i])?.ln()) };
    let estimate = |stride: usize| -> Result<Option<f64>> {
        if n < 2 * stride + 1 || stride == 0 {
            return Ok(None);
        }
        let (c, b, a) = (log_norm(n - 1)?, log_norm(n - 1 - stride)?, log_norm(n - 1 - 2 * stride)?);
        let h = stride as f64 * dt;
        let g1 = (3.0 * c - 4.0 * b + a) / (2.0 * h);
        let g2 = (c - 2.0 * b + a) / (h * h);
        Ok((g1 > 0.0 && g2 > 0.0 && g1.is_finite() && g2.is_finite()).then(|| g1 / g2))
    };
    let Some(r0) = estimate(10.min((n - 1) / 2))? else { return Ok(0.0) };
    let stride = ((r0 / 50.0 / dt).round() as usize).clamp(1, (n - 1) / 2);
    Ok(estimate(stride)?.unwrap_or(r0).max(0.0))
}
