//! Linear evolution: resolvent, implicit midpoint evolution family, sourced
//! trajectories, and probes of the evolution family.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::assembly::{assemble_with, DiscreteOperator, NormKind, Quadrature, StateVector};
use crate::error::{Error, Result};
use crate::expr::Field;
use crate::geometry::{sample_metric, Mesh, MeshKind, MetricSpec};
use crate::random::{self, streams};
use crate::scalar::Scalar;

/// Largest dof count accepted by dense probes.
pub const DENSE_CAP: usize = 400;

/// Mesh, metric and an operator cache keyed by quantized time.
#[derive(Debug)]
pub struct System {
    mesh: Mesh,
    metric: MetricSpec,
    quadrature: Quadrature,
    frozen_at: Option<f64>,
    cache: Mutex<OperatorCache>,
}

#[derive(Debug)]
struct OperatorCache {
    map: HashMap<i64, Arc<DiscreteOperator>>,
    order: VecDeque<i64>,
    capacity: usize,
}

impl System {
    pub fn new(mesh: Mesh, metric: MetricSpec) -> Self {
        // roughly 256 MB of cached operators
        let capacity = (256_000_000 / (mesh.dof_count() * 2_000)).clamp(16, 4096);
        Self {
            mesh,
            metric,
            quadrature: Quadrature::Nodal,
            frozen_at: None,
            cache: Mutex::new(OperatorCache { map: HashMap::new(), order: VecDeque::new(), capacity }),
        }
    }

    pub fn with_quadrature(mut self, q: Quadrature) -> Self {
        self.quadrature = q;
        self.clear_cache();
        self
    }

    /// Every operator request is answered with the operator at time `t`.
    pub fn frozen_at(mut self, t: f64) -> Self {
        self.frozen_at = Some(t);
        self.clear_cache();
        self
    }

    fn clear_cache(&mut self) {
        let c = self.cache.get_mut().expect("operator cache poisoned");
        c.map.clear();
        c.order.clear();
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }
    pub fn metric(&self) -> &MetricSpec {
        &self.metric
    }
    pub fn horizon(&self) -> f64 {
        self.metric.horizon
    }
    pub fn quadrature(&self) -> Quadrature {
        self.quadrature
    }
    pub fn is_autonomous(&self) -> bool {
        self.frozen_at.is_some() || self.metric.is_autonomous()
    }

    /// Assembled operator at time `t`.
    pub fn operator(&self, t: f64) -> Result<Arc<DiscreteOperator>> {
        let (key, t_eval) = match self.frozen_at {
            Some(t0) => (0, t0),
            None if self.metric.is_autonomous() => (0, 0.0),
            None => ((t * 1e10).round() as i64, t),
        };
        {
            let cache = self.cache.lock().expect("operator cache poisoned");
            if let Some(op) = cache.map.get(&key) {
                return Ok(op.clone());
            }
        }
        // validates the time range even when the metric is autonomous
        if self.frozen_at.is_none() {
            sample_metric(&self.metric, &self.mesh, t)?;
        }
        let sample = sample_metric(&self.metric, &self.mesh, t_eval)?;
        let op = Arc::new(assemble_with(&self.mesh, &sample, self.quadrature)?);
        let mut cache = self.cache.lock().expect("operator cache poisoned");
        if !cache.map.contains_key(&key) {
            if cache.order.len() >= cache.capacity {
                if let Some(old) = cache.order.pop_front() {
                    cache.map.remove(&old);
                }
            }
            cache.order.push_back(key);
            cache.map.insert(key, op.clone());
        }
        Ok(op)
    }

    /// Norm kind used for bounds; fixed per system (the mass signs are
    /// sampled at `t = 0`).
    pub fn control_norm_kind(&self) -> Result<NormKind> {
        Ok(self.operator(self.frozen_at.unwrap_or(0.0))?.control_norm_kind())
    }
}

/// Uniform time grid `t0 + k dt`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !(t1 >= t0) {
            return Err(Error::InvalidArgument(format!("bad time grid [{t0}, {t1}] with dt = {dt}")));
        }
        let steps = ((t1 - t0) / dt).round() as usize;
        if ((steps as f64) * dt - (t1 - t0)).abs() > 1e-9 * dt.max(t1 - t0) {
            return Err(Error::InvalidArgument(format!(
                "interval [{t0}, {t1}] is not a multiple of dt = {dt}"
            )));
        }
        Ok(Self { t0, dt, steps })
    }

    pub fn with_steps(t0: f64, dt: f64, steps: usize) -> Self {
        Self { t0, dt, steps }
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.steps)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Grid index of `t`, if `t` is a grid time.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = ((t - self.t0) / self.dt).round();
        (k >= 0.0 && k <= self.steps as f64 && (self.time(k as usize) - t).abs() <= 1e-9 * self.dt)
            .then_some(k as usize)
    }
}

/// Right-hand side of the sourced linear problem, as a load per step.
pub trait Forcing: Sync {
    /// Load vector for step `step` of a grid, evaluated at the midpoint
    /// `t_mid` with the midpoint operator. `None` means zero.
    fn step_load(&self, sys: &System, op_mid: &DiscreteOperator, t_mid: f64, step: usize) -> Result<Option<Vec<f64>>>;
}

/// No forcing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoForcing;

impl Forcing for NoForcing {
    fn step_load(&self, _: &System, _: &DiscreteOperator, _: f64, _: usize) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

/// Interior source `F(t, p)` and boundary source `G(t, q)`.
#[derive(Debug, Clone, Default)]
pub struct SourceSpec {
    pub bulk: Field,
    pub boundary: Field,
}

impl SourceSpec {
    pub fn new(bulk: Field, boundary: Field) -> Self {
        Self { bulk, boundary }
    }

    pub fn is_zero(&self) -> bool {
        self.bulk.is_zero() && self.boundary.is_zero()
    }

    /// Load vector `BulkMass F + BoundaryMass G` at time `t`.
    pub fn load(&self, mesh: &Mesh, op: &DiscreteOperator, t: f64) -> Result<Vec<f64>> {
        let f = mesh.interpolate(|p| self.bulk.eval(t, p));
        let g = mesh.interpolate(|p| self.boundary.eval(t, p));
        if let Some(v) = f.iter().chain(&g).find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("source evaluates to {v} at t = {t}")));
        }
        Ok(op.load(&f, &g))
    }
}

impl Forcing for SourceSpec {
    fn step_load(&self, sys: &System, op_mid: &DiscreteOperator, t_mid: f64, _: usize) -> Result<Option<Vec<f64>>> {
        if self.is_zero() {
            return Ok(None);
        }
        self.load(sys.mesh(), op_mid, t_mid).map(Some)
    }
}

/// Solution of `(A_h + lambda) X = F` with its relative residual.
#[derive(Debug, Clone)]
pub struct ResolventSolution<S = f64> {
    pub state: StateVector<S>,
    pub residual: f64,
}

/// Solves `(A_h + lambda) X = F` by eliminating `u`:
/// `(lambda^2 Mass + Stiff) w = lambda Mass F_w - Stiff F_u`, `u = (F_u + w) / lambda`.
pub fn resolvent_solve<S: Scalar>(
    op: &DiscreteOperator,
    lambda: f64,
    f: &StateVector<S>,
) -> Result<ResolventSolution<S>> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("resolvent parameter must be positive, got {lambda}")));
    }
    let n = op.dofs();
    if f.u.len() != n || f.w.len() != n {
        return Err(Error::Dimension { expected: n, got: f.u.len() });
    }
    let mf = op.mass().matvec(&f.w);
    let kf = op.stiff().matvec(&f.u);
    let rhs: Vec<S> = mf.iter().zip(&kf).map(|(&a, &b)| a.scale(lambda) - b).collect();
    let w = op.shifted_solver(lambda * lambda, 1.0)?.solve(&rhs)?;
    let u: Vec<S> = f.u.iter().zip(&w).map(|(&a, &b)| (a + b).scale(1.0 / lambda)).collect();
    let state = StateVector { u, w };
    if !state.is_finite() {
        return Err(Error::Solver("resolvent solve produced non-finite values".into()));
    }
    let ax = op.apply_a(&state)?;
    let defect = ax.axpy(lambda, &state).sub(f);
    let rel = |kind| -> Result<f64> {
        let fn_ = op.norm(kind, f)?;
        let d = op.norm(kind, &defect)?;
        Ok(if fn_ > 0.0 { d / fn_ } else { d })
    };
    let residual = rel(NormKind::Energy)?.max(rel(NormKind::Graph)?);
    Ok(ResolventSolution { state, residual })
}

/// One step with a given midpoint operator and midpoint load.
#[derive(Debug, Clone)]
pub struct StepOutcome<S = f64> {
    pub state: StateVector<S>,
    /// Relative residual of the SPD solve.
    pub residual: f64,
}

/// Implicit midpoint step with the operator frozen at the midpoint:
/// `(Mass + h^2 Stiff) w+ = (Mass - h^2 Stiff) w - dt Stiff u + dt load`,
/// `u+ = u + h (w+ + w)`, `h = dt / 2`.
pub fn midpoint_step_with<S: Scalar>(
    op: &DiscreteOperator,
    x: &StateVector<S>,
    dt: f64,
    load: Option<&[f64]>,
) -> Result<StepOutcome<S>> {
    let n = op.dofs();
    if x.u.len() != n || x.w.len() != n {
        return Err(Error::Dimension { expected: n, got: x.u.len() });
    }
    let h = 0.5 * dt;
    let h2 = h * h;
    let ku = op.stiff().matvec(&x.u);
    let kw = op.stiff().matvec(&x.w);
    let mw = op.mass().matvec(&x.w);
    let mut rhs: Vec<S> = (0..n).map(|i| mw[i] - kw[i].scale(h2) - ku[i].scale(dt)).collect();
    if let Some(l) = load {
        for (r, &li) in rhs.iter_mut().zip(l) {
            *r += S::from_real(dt * li);
        }
    }
    let w_new = op.shifted_solver(1.0, h2)?.solve(&rhs)?;
    let u_new: Vec<S> = (0..n).map(|i| x.u[i] + (w_new[i] + x.w[i]).scale(h)).collect();
    let state = StateVector { u: u_new, w: w_new };
    let mwn = op.mass().matvec(&state.w);
    let kwn = op.stiff().matvec(&state.w);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        num += (mwn[i] + kwn[i].scale(h2) - rhs[i]).abs_sq();
        den += rhs[i].abs_sq();
    }
    let residual = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
    Ok(StepOutcome { state, residual })
}

/// Transpose of the midpoint step map in the Euclidean pairing of `[u; w]`.
pub fn midpoint_step_transpose(op: &DiscreteOperator, y: &StateVector<f64>, dt: f64) -> Result<StateVector<f64>> {
    let h = 0.5 * dt;
    let n = op.dofs();
    let r: Vec<f64> = (0..n).map(|i| h * y.u[i] + y.w[i]).collect();
    let q = op.shifted_solver(1.0, h * h)?.solve(&r)?;
    let kq = op.stiff().matvec(&q);
    let mq = op.mass().matvec(&q);
    Ok(StateVector {
        u: (0..n).map(|i| y.u[i] - 2.0 * h * kq[i]).collect(),
        w: (0..n).map(|i| h * y.u[i] + mq[i] - h * h * kq[i]).collect(),
    })
}

/// Advances `x` from `t` to `t + dt`.
pub fn step_midpoint<S: Scalar>(
    sys: &System,
    x: &StateVector<S>,
    t: f64,
    dt: f64,
    forcing: &dyn Forcing,
    step: usize,
) -> Result<StepOutcome<S>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let t_mid = t + 0.5 * dt;
    let op = sys.operator(t_mid)?;
    let load = forcing.step_load(sys, &op, t_mid, step)?;
    let out = midpoint_step_with(&op, x, dt, load.as_deref())?;
    if !out.state.is_finite() {
        return Err(Error::NonFinite { t: t + dt });
    }
    Ok(out)
}

/// One row of the exported trajectory diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x_norm: f64,
    pub energy: f64,
    pub u_norm_v: f64,
    pub w_norm_u: f64,
    pub residual: f64,
    pub control_norm: f64,
}

/// Grid times, states, and per-step solver data.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector<f64>>,
    /// Relative residual of the step ending at each time (0 at the start).
    pub residuals: Vec<f64>,
    /// Per step: the X-norm of the source at the step endpoints.
    pub source_norms: Vec<f64>,
}

impl Trajectory {
    pub fn starting_at(t0: f64, x0: StateVector<f64>) -> Self {
        Self { times: vec![t0], states: vec![x0], residuals: vec![0.0], source_norms: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &StateVector<f64> {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("trajectory is never empty")
    }

    fn push(&mut self, t: f64, x: StateVector<f64>, residual: f64) {
        self.times.push(t);
        self.states.push(x);
        self.residuals.push(residual);
    }

    /// Appends `other`, which must start at this trajectory's end time.
    pub fn glue(&mut self, other: Trajectory) -> Result<()> {
        let t_end = self.end_time();
        if (other.times[0] - t_end).abs() > 1e-9 * t_end.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "cannot glue trajectory starting at {} onto one ending at {t_end}",
                other.times[0]
            )));
        }
        self.times.extend_from_slice(&other.times[1..]);
        self.states.extend(other.states.into_iter().skip(1));
        self.residuals.extend_from_slice(&other.residuals[1..]);
        self.source_norms.extend(other.source_norms);
        Ok(())
    }

    /// Norms at every grid time, measured with the operator at that time.
    pub fn diagnostics(&self, sys: &System) -> Result<Vec<TrajectoryRow>> {
        let kind = sys.control_norm_kind()?;
        self.times
            .iter()
            .zip(&self.states)
            .zip(&self.residuals)
            .map(|((&t, x), &residual)| {
                let op = sys.operator(t)?;
                let uv = op.stiff().quad_form(&x.u).max(0.0);
                let wu = op.mass().quad_form(&x.w).max(0.0);
                let energy = op.x_inner(x, x)?;
                Ok(TrajectoryRow {
                    t,
                    x_norm: energy.max(0.0).sqrt(),
                    energy,
                    u_norm_v: uv.sqrt(),
                    w_norm_u: wu.sqrt(),
                    residual,
                    control_norm: op.norm(kind, x)?,
                })
            })
            .collect()
    }

    /// Writes `t,x_norm,energy,u_norm_V,w_norm_U,residual`.
    pub fn write_csv(&self, sys: &System, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "x_norm", "energy", "u_norm_V", "w_norm_U", "residual"])?;
        for r in self.diagnostics(sys)? {
            w.write_record(
                [r.t, r.x_norm, r.energy, r.u_norm_v, r.w_norm_u, r.residual].map(|v| format!("{v:.17e}")),
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the fields at grid index `k` as `x,theta,u,w` or `x,u,w`.
    pub fn write_snapshot(&self, mesh: &Mesh, k: usize, path: &Path) -> Result<()> {
        let x = self
            .states
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("snapshot index {k} out of range")))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let cyl = mesh.kind() == MeshKind::Cylinder;
        if cyl {
            w.write_record(["x", "theta", "u", "w"])?;
        } else {
            w.write_record(["x", "u", "w"])?;
        }
        for (i, p) in mesh.coords().iter().enumerate() {
            let mut rec = vec![format!("{:.17e}", p.x)];
            if cyl {
                rec.push(format!("{:.17e}", p.theta));
            }
            rec.push(format!("{:.17e}", x.u[i]));
            rec.push(format!("{:.17e}", x.w[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Source state `(0, Mass_mid^{-1} load)` measured at the step endpoints.
fn source_norm(sys: &System, op_mid: &DiscreteOperator, load: &[f64], t0: f64, t1: f64) -> Result<f64> {
    let f = op_mid.solve_mass(load)?;
    let mut worst: f64 = 0.0;
    for t in [t0, t1] {
        let m = sys.operator(t)?.mass().quad_form(&f);
        worst = worst.max(m.max(0.0).sqrt());
    }
    Ok(worst)
}

/// Evolves `x0` over `grid` with repeated midpoint steps.
pub fn evolve_linear(sys: &System, x0: &StateVector<f64>, forcing: &dyn Forcing, grid: &TimeGrid) -> Result<Trajectory> {
    if !x0.is_finite() {
        return Err(Error::InvalidArgument("initial state is not finite".into()));
    }
    let mut traj = Trajectory::starting_at(grid.t0, x0.clone());
    let mut x = x0.clone();
    for k in 0..grid.steps {
        let (t, t1) = (grid.time(k), grid.time(k + 1));
        let t_mid = t + 0.5 * grid.dt;
        let op = sys.operator(t_mid)?;
        let load = forcing.step_load(sys, &op, t_mid, k)?;
        let out = midpoint_step_with(&op, &x, grid.dt, load.as_deref())?;
        if !out.state.is_finite() {
            return Err(Error::NonFinite { t: t1 });
        }
        traj.source_norms.push(match &load {
            Some(l) => source_norm(sys, &op, l, t, t1)?,
            None => 0.0,
        });
        x = out.state;
        traj.push(t1, x.clone(), out.residual);
    }
    Ok(traj)
}

/// Outcome of the a priori bound `||X(t)|| <= M0 (||X0|| + t max ||F||)`.
#[derive(Debug, Clone, Copy)]
pub struct BoundCheck {
    pub m0: f64,
    pub max_source: f64,
    /// Largest `||X(t_k)|| / (M0 (||X0|| + t_k max ||F||))`.
    pub worst_ratio: f64,
    pub worst_time: f64,
    pub pass: bool,
}

pub fn apriori_bound_check(sys: &System, traj: &Trajectory, m0: f64, slack: f64) -> Result<BoundCheck> {
    let kind = sys.control_norm_kind()?;
    let t0 = traj.times[0];
    let x0 = sys.operator(t0)?.norm(kind, &traj.states[0])?;
    let max_source = traj.source_norms.iter().copied().fold(0.0, f64::max);
    let mut worst = (0.0_f64, t0);
    for (&t, x) in traj.times.iter().zip(&traj.states) {
        let n = sys.operator(t)?.norm(kind, x)?;
        let bound = m0 * (x0 + (t - t0) * max_source);
        let r = if bound > 0.0 { n / bound } else if n == 0.0 { 0.0 } else { f64::INFINITY };
        if r > worst.0 {
            worst = (r, t);
        }
    }
    Ok(BoundCheck { m0, max_source, worst_ratio: worst.0, worst_time: worst.1, pass: worst.0 <= 1.0 + slack })
}

/// Probe settings for [`estimate_m0`].
#[derive(Debug, Clone, Copy)]
pub struct M0Options {
    /// Number of start times `s`, spread evenly over the grid.
    pub starts: usize,
    /// Random unit states per start time.
    pub random_states: usize,
    /// Power iterations on each of the worst pairs.
    pub power_iterations: usize,
    /// Number of worst pairs refined by power iteration.
    pub refined_pairs: usize,
    pub seed: u64,
}

impl Default for M0Options {
    fn default() -> Self {
        Self { starts: 6, random_states: 6, power_iterations: 12, refined_pairs: 3, seed: 0 }
    }
}

/// Lower estimate of `sup_{s <= t} ||U(t, s)||` over grid pairs.
#[derive(Debug, Clone, Copy)]
pub struct M0Estimate {
    pub value: f64,
    pub worst_pair: (f64, f64),
    pub pairs_probed: usize,
    pub states_probed: usize,
}

/// Gram blocks of the control norm and a solver for the `u` block.
fn gram_u_solver(op: &DiscreteOperator, kind: NormKind) -> Result<Arc<crate::sparse::SpdSolver>> {
    match kind {
        NormKind::Energy => op.shifted_solver(0.0, 1.0),
        NormKind::Graph => op.shifted_solver(1.0, 1.0),
    }
}

fn gram_apply(op: &DiscreteOperator, kind: NormKind, x: &StateVector<f64>) -> StateVector<f64> {
    let mut gu = op.stiff().matvec(&x.u);
    if kind == NormKind::Graph {
        for (g, m) in gu.iter_mut().zip(op.mass().matvec(&x.u)) {
            *g += m;
        }
    }
    StateVector { u: gu, w: op.mass().matvec(&x.w) }
}

fn gram_solve(op: &DiscreteOperator, kind: NormKind, y: &StateVector<f64>) -> Result<StateVector<f64>> {
    Ok(StateVector { u: gram_u_solver(op, kind)?.solve(&y.u)?, w: op.solve_mass(&y.w)? })
}

/// `U(t_j, t_i) x` on the grid.
fn propagate(sys: &System, grid: &TimeGrid, i: usize, j: usize, x: &StateVector<f64>) -> Result<StateVector<f64>> {
    let mut y = x.clone();
    for k in i..j {
        y = step_midpoint(sys, &y, grid.time(k), grid.dt, &NoForcing, k)?.state;
    }
    Ok(y)
}

fn propagate_transpose(sys: &System, grid: &TimeGrid, i: usize, j: usize, y: &StateVector<f64>) -> Result<StateVector<f64>> {
    let mut z = y.clone();
    for k in (i..j).rev() {
        let op = sys.operator(grid.time(k) + 0.5 * grid.dt)?;
        z = midpoint_step_transpose(&op, &z, grid.dt)?;
    }
    Ok(z)
}

/// Estimates `M0` by random probing from several start times followed by
/// power iteration on the worst pairs. Norms are the control norm at the
/// respective times.
pub fn estimate_m0(sys: &System, grid: &TimeGrid, opts: &M0Options) -> Result<M0Estimate> {
    if opts.starts == 0 || opts.random_states == 0 {
        return Err(Error::InvalidArgument("M0 estimation needs at least one probe".into()));
    }
    let kind = sys.control_norm_kind()?;
    let n_steps = grid.steps;
    let starts: Vec<usize> = if n_steps == 0 {
        vec![0]
    } else {
        let m = opts.starts.min(n_steps);
        let mut v: Vec<usize> = (0..m).map(|q| q * n_steps / m).collect();
        v.dedup();
        v
    };

    // (ratio, i, j) for every probed pair, best over random states
    let per_start: Vec<Vec<(f64, usize, usize)>> = starts
        .par_iter()
        .map(|&i| -> Result<Vec<(f64, usize, usize)>> {
            let mut rng = random::stream(opts.seed, streams::M0 * 10_000 + i as u64);
            let op_s = sys.operator(grid.time(i))?;
            let mut best = vec![0.0_f64; n_steps + 1];
            for r in 0..opts.random_states {
                let x = if r % 2 == 0 {
                    random::smooth_state(&mut rng, sys.mesh(), 4)
                } else {
                    random::white_state(&mut rng, sys.mesh().dof_count())
                };
                let nx = op_s.norm(kind, &x)?;
                if nx == 0.0 {
                    continue;
                }
                let mut y = x.scaled(1.0 / nx);
                best[i] = best[i].max(1.0);
                for k in i..n_steps {
                    y = step_midpoint(sys, &y, grid.time(k), grid.dt, &NoForcing, k)?.state;
                    let ny = sys.operator(grid.time(k + 1))?.norm(kind, &y)?;
                    best[k + 1] = best[k + 1].max(ny);
                }
            }
            Ok((i..=n_steps).map(|j| (best[j], i, j)).collect())
        })
        .collect::<Result<_>>()?;
    let mut pairs: Vec<(f64, usize, usize)> = per_start.into_iter().flatten().collect();
    let pairs_probed = pairs.len();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let refined: Vec<(f64, usize, usize)> = pairs
        .iter()
        .filter(|p| p.2 > p.1)
        .take(opts.refined_pairs)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&&(r0, i, j)| -> Result<(f64, usize, usize)> {
            let op_s = sys.operator(grid.time(i))?;
            let op_t = sys.operator(grid.time(j))?;
            let mut rng = random::stream(opts.seed, streams::M0 * 10_000 + 5_000 + (i * (n_steps + 1) + j) as u64);
            let mut v = random::smooth_state(&mut rng, sys.mesh(), 6);
            let mut best = r0;
            for _ in 0..opts.power_iterations {
                let nv = op_s.norm(kind, &v)?;
                if !(nv > 0.0) {
                    break;
                }
                v = v.scaled(1.0 / nv);
                let y = propagate(sys, grid, i, j, &v)?;
                best = best.max(op_t.norm(kind, &y)?);
                let z = propagate_transpose(sys, grid, i, j, &gram_apply(&op_t, kind, &y))?;
                v = gram_solve(&op_s, kind, &z)?;
            }
            Ok((best, i, j))
        })
        .collect::<Result<_>>()?;

    let top = refined
        .into_iter()
        .chain(pairs.first().copied())
        .fold((1.0_f64, 0usize, 0usize), |a, b| if b.0 > a.0 { b } else { a });
    Ok(M0Estimate {
        value: top.0,
        worst_pair: (grid.time(top.1), grid.time(top.2)),
        pairs_probed,
        states_probed: starts.len() * opts.random_states,
    })
}

/// Dense `B(t, s) = (A_h(t) + I)(A_h(s) + I)^{-1}` and its operator norm.
#[derive(Debug, Clone)]
pub struct KatoProbe {
    pub s: f64,
    pub t: f64,
    pub matrix: DMatrix<f64>,
    /// Operator norm in the control norm at time `s`.
    pub norm: f64,
}

fn dense_gram(op: &DiscreteOperator, kind: NormKind) -> DMatrix<f64> {
    let n = op.dofs();
    let (gu, m) = op.gram_blocks(kind);
    let mut g = DMatrix::zeros(2 * n, 2 * n);
    g.view_mut((0, 0), (n, n)).copy_from(&gu.to_dense());
    g.view_mut((n, n), (n, n)).copy_from(&m.to_dense());
    g
}

/// Operator norm of `b` in the norm with Gram matrix `g`.
pub fn gram_operator_norm(b: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<f64> {
    let l = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solver("reference Gram matrix is not positive definite".into()))?
        .l();
    // ||L^T B L^{-T}||_2
    let lt = l.transpose();
    let linv_t = lt
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Solver("singular Cholesky factor".into()))?;
    let c = &lt * b * linv_t;
    Ok(c.singular_values().max())
}

fn kato_matrix(sys: &System, s: f64, t: f64) -> Result<DMatrix<f64>> {
    let n = sys.mesh().dof_count();
    if n > DENSE_CAP {
        return Err(Error::CapExceeded { dofs: n, cap: DENSE_CAP });
    }
    let op_s = sys.operator(s)?;
    let op_t = sys.operator(t)?;
    let cols: Vec<Vec<f64>> = (0..2 * n)
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>> {
            let mut e = vec![0.0; 2 * n];
            e[j] = 1.0;
            let x = resolvent_solve(&op_s, 1.0, &StateVector::from_flat(&e))?.state;
            Ok(x.axpy(1.0, &op_t.apply_a(&x)?).to_flat())
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(2 * n, 2 * n, |i, j| cols[j][i]))
}

pub fn kato_probe(sys: &System, s: f64, t: f64) -> Result<KatoProbe> {
    let matrix = kato_matrix(sys, s, t)?;
    let g = dense_gram(&*sys.operator(s)?, sys.control_norm_kind()?);
    let norm = gram_operator_norm(&matrix, &g)?;
    Ok(KatoProbe { s, t, matrix, norm })
}

/// `||B(t, s)||` over a square grid, with variation and derivative estimates.
#[derive(Debug, Clone)]
pub struct KatoScan {
    pub times: Vec<f64>,
    /// `norms[i][j] = ||B(times[i], times[j])||`.
    pub norms: Vec<Vec<f64>>,
    pub max_norm: f64,
    /// Largest over `s` of `sum_i ||B(t_{i+1}, s) - B(t_i, s)||`.
    pub bv_sum: f64,
    /// Largest finite-difference estimate of `||dB/dt||`.
    pub max_dbdt: f64,
}

impl KatoScan {
    /// Writes `t,s,norm`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "s", "norm"])?;
        for (i, &t) in self.times.iter().enumerate() {
            for (j, &s) in self.times.iter().enumerate() {
                w.write_record([t, s, self.norms[i][j]].map(|v| format!("{v:.17e}")))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Scans `B(t, s)` for `t, s` on `points` equispaced times in `[0, T]`.
pub fn kato_scan(sys: &System, points: usize) -> Result<KatoScan> {
    if points < 2 {
        return Err(Error::InvalidArgument("Kato scan needs at least two times".into()));
    }
    let horizon = sys.horizon();
    let times: Vec<f64> = (0..points).map(|i| horizon * i as f64 / (points - 1) as f64).collect();
    let delta = 1e-5 * horizon;
    let kind = sys.control_norm_kind()?;
    let columns: Vec<(Vec<f64>, f64, f64)> = times
        .par_iter()
        .map(|&s| -> Result<(Vec<f64>, f64, f64)> {
            let g = dense_gram(&*sys.operator(s)?, kind);
            let bs: Vec<DMatrix<f64>> = times.iter().map(|&t| kato_matrix(sys, s, t)).collect::<Result<_>>()?;
            let norms = bs.iter().map(|b| gram_operator_norm(b, &g)).collect::<Result<Vec<_>>>()?;
            let mut bv = 0.0;
            for w in bs.windows(2) {
                bv += gram_operator_norm(&(&w[1] - &w[0]), &g)?;
            }
            let mut dbdt: f64 = 0.0;
            for (&t, b) in times.iter().zip(&bs) {
                let t2 = if t + delta <= horizon { t + delta } else { t - delta };
                let b2 = kato_matrix(sys, s, t2)?;
                dbdt = dbdt.max(gram_operator_norm(&(&b2 - b), &g)? / delta);
            }
            Ok((norms, bv, dbdt))
        })
        .collect::<Result<_>>()?;
    let mut norms = vec![vec![0.0; points]; points];
    let (mut bv_sum, mut max_dbdt, mut max_norm) = (0.0_f64, 0.0_f64, 0.0_f64);
    for (j, (col, bv, d)) in columns.into_iter().enumerate() {
        for (i, v) in col.into_iter().enumerate() {
            norms[i][j] = v;
            max_norm = max_norm.max(v);
        }
        bv_sum = bv_sum.max(bv);
        max_dbdt = max_dbdt.max(d);
    }
    Ok(KatoScan { times, norms, max_norm, bv_sum, max_dbdt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MeshKind;
    use std::f64::consts::PI;

    fn interval_system(n: usize, metric: MetricSpec) -> System {
        System::new(Mesh::interval(1.0, n).unwrap(), metric)
    }

    fn dense_block(op: &DiscreteOperator, lambda: f64) -> DMatrix<f64> {
        // (A_h + lambda) on [u; w] with A_h = [[0, -I], [M^{-1} K, 0]]
        let n = op.dofs();
        let minv_k = op.mass().to_dense().lu().solve(&op.stiff().to_dense()).unwrap();
        let mut a = DMatrix::<f64>::identity(2 * n, 2 * n) * lambda;
        for i in 0..n {
            a[(i, n + i)] -= 1.0;
        }
        a.view_mut((n, 0), (n, n)).copy_from(&minv_k);
        a
    }

    #[test]
    fn resolvent_zero_rhs_gives_zero() {
        let sys = interval_system(6, MetricSpec::flat(1.0));
        let op = sys.operator(0.0).unwrap();
        let x = resolvent_solve(&op, 1.0, &StateVector::<f64>::zeros(7)).unwrap();
        assert!(x.state.u.iter().chain(&x.state.w).all(|&v| v == 0.0));
    }

    #[test]
    fn resolvent_on_constants_without_masses() {
        let sys = interval_system(8, MetricSpec::flat(1.0));
        let op = sys.operator(0.0).unwrap();
        let (c, lambda) = (2.5, 4.0);
        let f = StateVector::new(vec![0.0; 9], vec![c; 9]).unwrap();
        let x = resolvent_solve(&op, lambda, &f).unwrap().state;
        for i in 0..9 {
            assert!((x.w[i] - c / lambda).abs() < 1e-13);
            assert!((x.u[i] - c / (lambda * lambda)).abs() < 1e-13);
        }
    }

    #[test]
    fn resolvent_matches_dense_block_system() {
        let sys = interval_system(10, MetricSpec::flat(1.0).with_constant_masses(-0.5, -1.0));
        let op = sys.operator(0.0).unwrap();
        let mut rng = random::stream(11, 0);
        let f = random::white_state::<f64>(&mut rng, 11);
        let x = resolvent_solve(&op, 1.0, &f).unwrap();
        let dense = dense_block(&op, 1.0).lu().solve(&nalgebra::DVector::from_vec(f.to_flat())).unwrap();
        let got = x.state.to_flat();
        let scale = dense.norm();
        for i in 0..got.len() {
            assert!((got[i] - dense[i]).abs() <= 1e-10 * scale);
        }
        assert!(x.residual < 1e-12);
    }

    #[test]
    fn resolvent_rejects_nonpositive_lambda() {
        let sys = interval_system(4, MetricSpec::flat(1.0));
        let op = sys.operator(0.0).unwrap();
        for l in [0.0, -1.0, f64::NAN] {
            assert!(resolvent_solve(&op, l, &StateVector::<f64>::zeros(5)).is_err());
        }
    }

    #[test]
    fn zero_state_stays_zero() {
        let sys = interval_system(5, MetricSpec::flat(1.0));
        let out = step_midpoint(&sys, &StateVector::<f64>::zeros(6), 0.0, 0.1, &NoForcing, 0).unwrap();
        assert!(out.state.u.iter().chain(&out.state.w).all(|&v| v == 0.0));
    }

    #[test]
    fn midpoint_step_conserves_energy() {
        let sys = System::new(Mesh::cylinder(6, 8).unwrap(), MetricSpec::flat(1.0).with_constant_masses(-1.0, -0.5));
        let op = sys.operator(0.0).unwrap();
        let x = random::smooth_state(&mut random::stream(2, 0), sys.mesh(), 3);
        let y = step_midpoint(&sys, &x, 0.0, 0.05, &NoForcing, 0).unwrap().state;
        let (e0, e1) = (op.x_inner(&x, &x).unwrap(), op.x_inner(&y, &y).unwrap());
        assert!(((e1 - e0) / e0).abs() < 1e-12);
    }

    #[test]
    fn transpose_step_is_the_transpose() {
        let sys = interval_system(7, MetricSpec::pulsating(MeshKind::Interval, 0.2, 1.0, 1.0).with_constant_masses(-1.0, 0.0));
        let op = sys.operator(0.3).unwrap();
        let mut rng = random::stream(5, 0);
        let x = random::white_state::<f64>(&mut rng, 8);
        let y = random::white_state::<f64>(&mut rng, 8);
        let phi_x = midpoint_step_with(&op, &x, 0.1, None).unwrap().state;
        let phit_y = midpoint_step_transpose(&op, &y, 0.1).unwrap();
        let dot = |a: &StateVector<f64>, b: &StateVector<f64>| -> f64 {
            a.to_flat().iter().zip(b.to_flat()).map(|(p, q)| p * q).sum()
        };
        assert!((dot(&phi_x, &y) - dot(&x, &phit_y)).abs() < 1e-12);
    }

    #[test]
    fn time_reversal_returns_initial_state() {
        let sys = interval_system(12, MetricSpec::flat(1.0));
        let x = random::smooth_state(&mut random::stream(4, 0), sys.mesh(), 3);
        let y = step_midpoint(&sys, &x, 0.0, 0.02, &NoForcing, 0).unwrap().state.reversed();
        let z = step_midpoint(&sys, &y, 0.0, 0.02, &NoForcing, 0).unwrap().state.reversed();
        let err = x.sub(&z).to_flat().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12);
    }

    #[test]
    fn time_grid_indexing() {
        let g = TimeGrid::new(0.5, 1.5, 0.1).unwrap();
        assert_eq!(g.steps, 10);
        assert_eq!(g.index_of(0.8), Some(3));
        assert_eq!(g.index_of(0.85), None);
        assert!(TimeGrid::new(0.0, 1.0, 0.3).is_err());
    }

    #[test]
    fn source_load_of_constant_is_mass_weighted() {
        let sys = System::new(Mesh::cylinder(4, 8).unwrap(), MetricSpec::flat(1.0));
        let op = sys.operator(0.0).unwrap();
        let src = SourceSpec::new(Field::constant(1.0), Field::constant(2.0));
        let l = src.load(sys.mesh(), &op, 0.0).unwrap();
        let total: f64 = l.iter().sum();
        assert!((total - (2.0 * PI + 2.0 * 4.0 * PI)).abs() < 1e-10);
    }

    #[test]
    fn autonomous_m0_is_one() {
        let sys = System::new(Mesh::cylinder(4, 6).unwrap(), MetricSpec::flat(1.0).with_constant_masses(-1.0, -1.0));
        let grid = TimeGrid::new(0.0, 1.0, 0.05).unwrap();
        let est = estimate_m0(&sys, &grid, &M0Options::default()).unwrap();
        assert!(est.value >= 1.0 && est.value <= 1.0 + 1e-8, "{}", est.value);
    }

    #[test]
    fn kato_identity_cases() {
        let sys = interval_system(6, MetricSpec::pulsating(MeshKind::Interval, 0.2, 1.0, 2.0));
        let p = kato_probe(&sys, 0.7, 0.7).unwrap();
        assert!((p.norm - 1.0).abs() < 1e-10);
        let flat = interval_system(6, MetricSpec::flat(2.0).with_constant_masses(-1.0, -1.0));
        let q = kato_probe(&flat, 0.1, 1.9).unwrap();
        let id = DMatrix::<f64>::identity(14, 14);
        assert!((&q.matrix - id).amax() < 1e-10);
    }

    #[test]
    fn dense_cap_is_enforced() {
        let sys = System::new(Mesh::cylinder(20, 20).unwrap(), MetricSpec::flat(1.0));
        assert!(matches!(kato_probe(&sys, 0.0, 0.5), Err(Error::CapExceeded { .. })));
    }

    #[test]
    fn trajectory_csv_has_expected_header() {
        let sys = interval_system(4, MetricSpec::flat(1.0));
        let x0 = StateVector::new(vec![1.0; 5], vec![0.5; 5]).unwrap();
        let traj = evolve_linear(&sys, &x0, &NoForcing, &TimeGrid::new(0.0, 0.2, 0.1).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        traj.write_csv(&sys, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,x_norm,energy,u_norm_V,w_norm_U,residual\n"));
        assert_eq!(text.lines().count(), 4);
        let q = dir.path().join("snap.csv");
        traj.write_snapshot(sys.mesh(), 2, &q).unwrap();
        assert!(std::fs::read_to_string(&q).unwrap().starts_with("x,u,w\n"));
    }
}
