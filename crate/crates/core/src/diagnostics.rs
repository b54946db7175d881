//! Verification instruments: energy, structural checks, dense oracles,
//! manufactured solutions, trace reconstruction, propagation speed, and a
//! reference ODE integrator.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::assembly::{DiscreteOperator, StateVector};
use crate::error::{Error, Result};
use rayon::prelude::*;

use crate::evolution::{
    apriori_bound_check, estimate_m0, evolve_linear, kato_scan, midpoint_step_with, resolvent_solve, M0Options, NoForcing,
    SourceSpec, System, TimeGrid, DENSE_CAP,
};
use crate::nonlinear::{
    existence_time, lipschitz_estimate, picard_solve, probe_grid, restart_check, sup_diff, LipschitzMode, LipschitzOptions,
    NonlinearitySpec, PicardOptions,
};
use crate::expr::{Field, Point};
use crate::geometry::{Mesh, MeshKind, MetricSpec};
use crate::random::{self, streams};
use crate::scalar::Scalar;

/// `E = ||X||_X^2`.
pub fn energy<S: Scalar>(op: &DiscreteOperator, x: &StateVector<S>) -> Result<f64> {
    Ok(op.x_inner(x, x)?.re())
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub tolerance: f64,
    pub context: String,
}

impl CheckReport {
    /// Passes when `value <= tolerance`.
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64, context: impl Into<String>) -> Self {
        Self { name: name.into(), pass: value.is_finite() && value <= tolerance, value, tolerance, context: context.into() }
    }

    /// Passes when `value` lies in `[lo, hi]`; the tolerance column holds `hi`.
    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64, context: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass: value >= lo && value <= hi,
            value,
            tolerance: hi,
            context: format!("range [{lo}, {hi}]; {}", context.into()),
        }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: value = {:.3e}, tolerance = {:.3e} ({})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance,
            self.context
        )
    }
}

/// Writes `check,pass,value,tolerance`.
pub fn write_checks_csv(reports: &[CheckReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["check", "pass", "value", "tolerance"])?;
    for r in reports {
        w.write_record([r.name.clone(), r.pass.to_string(), format!("{:.17e}", r.value), format!("{:.17e}", r.tolerance)])?;
    }
    w.flush()?;
    Ok(())
}

/// `max |Re <X, A_h X>_X| / ||X||_X^2` over random states.
pub fn dissipativity_check(op: &DiscreteOperator, n_random: usize, seed: u64) -> Result<CheckReport> {
    if n_random == 0 {
        return Err(Error::InvalidArgument("dissipativity check needs at least one state".into()));
    }
    let mut rng = random::stream(seed, streams::DISSIPATIVITY);
    let mut worst: f64 = 0.0;
    for _ in 0..n_random {
        let x = random::white_state::<f64>(&mut rng, op.dofs());
        let ax = op.apply_a(&x)?;
        let r = op.x_inner(&x, &ax)?.abs() / op.x_inner(&x, &x)?;
        worst = worst.max(r);
    }
    Ok(CheckReport::at_most(
        "dissipativity",
        worst,
        1e-12,
        format!("t = {}, dofs = {}, states = {n_random}, seed = {seed}", op.time(), op.dofs()),
    ))
}

/// For a complex state, returns `(x_inner(X, A_h X), 2 i Im (w, u)_V)`.
pub fn complex_dissipation_pairing(op: &DiscreteOperator, x: &StateVector<Complex64>) -> Result<(Complex64, Complex64)> {
    let ax = op.apply_a(x)?;
    let lhs = op.x_inner(x, &ax)?;
    let v = op.v_inner(&x.w, &x.u);
    Ok((lhs, Complex64::new(0.0, 2.0 * v.im)))
}

/// Dense generator `[[0, I], [-Mass^{-1} Stiff, 0]]`.
pub fn dense_generator(op: &DiscreteOperator) -> Result<DMatrix<f64>> {
    let n = op.dofs();
    if n > DENSE_CAP {
        return Err(Error::CapExceeded { dofs: n, cap: DENSE_CAP });
    }
    let minv_k = op
        .mass()
        .to_dense()
        .cholesky()
        .ok_or_else(|| Error::Solver("mass matrix is not positive definite".into()))?
        .solve(&op.stiff().to_dense());
    let mut g = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        g[(i, n + i)] = 1.0;
    }
    g.view_mut((n, 0), (n, n)).copy_from(&(-minv_k));
    Ok(g)
}

/// `exp(t G) X0` by scaling and squaring.
pub fn dense_expm_oracle(op: &DiscreteOperator, x0: &StateVector<f64>, t: f64) -> Result<StateVector<f64>> {
    let g = dense_generator(op)? * t;
    let y = g.exp() * DVector::from_vec(x0.to_flat());
    Ok(StateVector::from_flat(y.as_slice()))
}

/// Manufactured-solution problem: metric, masses, sources and the exact
/// field with its time derivative.
#[derive(Clone)]
pub struct MmsProblem {
    pub name: String,
    pub kind: MeshKind,
    pub metric: MetricSpec,
    pub source: SourceSpec,
    pub exact_u: Arc<dyn Fn(f64, Point) -> f64 + Send + Sync>,
    pub exact_w: Arc<dyn Fn(f64, Point) -> f64 + Send + Sync>,
    pub horizon: f64,
}

impl fmt::Debug for MmsProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MmsProblem").field("name", &self.name).field("kind", &self.kind).finish()
    }
}

impl MmsProblem {
    /// Non-autonomous cylinder problem with `u* = cos t (cos pi x + x^2)(1 + cos(theta)/2)`,
    /// `a = 1 + eps sin(omega t) x (1 - x)`, `b = 1 + eps_b sin(omega t)`,
    /// `m = -(1 + x/2)`, `m_b = -1`.
    pub fn cylinder(eps: f64, eps_b: f64, omega: f64, horizon: f64) -> Self {
        let a = move |t: f64, x: f64| 1.0 + eps * (omega * t).sin() * x * (1.0 - x);
        let a_x = move |t: f64, x: f64| eps * (omega * t).sin() * (1.0 - 2.0 * x);
        let b = move |t: f64| 1.0 + eps_b * (omega * t).sin();
        let px = |x: f64| (PI * x).cos() + x * x;
        let px_x = |x: f64| -PI * (PI * x).sin() + 2.0 * x;
        let px_xx = |x: f64| -PI * PI * (PI * x).cos() + 2.0;
        let q = |th: f64| 1.0 + 0.5 * th.cos();
        let q_tt = |th: f64| -0.5 * th.cos();
        let mass = |x: f64| -(1.0 + 0.5 * x);
        let m_b = -1.0;

        let u = move |t: f64, p: Point| t.cos() * px(p.x) * q(p.theta);
        let lap = move |t: f64, p: Point| {
            let (av, axv, bv) = (a(t, p.x), a_x(t, p.x), b(t));
            t.cos() * (q(p.theta) * (px_xx(p.x) / (av * av) - axv * px_x(p.x) / (av * av * av)) + px(p.x) * q_tt(p.theta) / (bv * bv))
        };
        let f = move |t: f64, p: Point| -u(t, p) - lap(t, p) - mass(p.x) * u(t, p);
        let g = move |t: f64, p: Point| {
            let on_right = p.x > 0.5;
            let bv = b(t);
            let lap_b = t.cos() * px(p.x) * q_tt(p.theta) / (bv * bv);
            let sign = if on_right { 1.0 } else { -1.0 };
            let flux = sign * t.cos() * px_x(p.x) * q(p.theta) / a(t, p.x);
            -u(t, p) - lap_b - m_b * u(t, p) + flux
        };
        let metric = MetricSpec {
            a: Field::func(move |t, p| a(t, p.x)),
            b: Field::func(move |t, _| b(t)),
            mass: Field::static_func(move |p| mass(p.x)),
            boundary_mass: Field::constant(m_b),
            horizon,
            name: "mms-cylinder".into(),
        };
        Self {
            name: "cylinder-nonautonomous".into(),
            kind: MeshKind::Cylinder,
            metric,
            source: SourceSpec::new(Field::func(f), Field::func(g)),
            exact_u: Arc::new(u),
            exact_w: Arc::new(move |t, p| -t.sin() * px(p.x) * q(p.theta)),
            horizon,
        }
    }

    /// Autonomous interval problem `u* = cos t cos(pi x)` with `m = m_b = -1`;
    /// the boundary source vanishes.
    pub fn interval(horizon: f64) -> Self {
        let u = |t: f64, p: Point| t.cos() * (PI * p.x).cos();
        Self {
            name: "interval-autonomous".into(),
            kind: MeshKind::Interval,
            metric: MetricSpec::flat(horizon).with_constant_masses(-1.0, -1.0),
            source: SourceSpec::new(Field::func(move |t, p| PI * PI * u(t, p)), Field::zero()),
            exact_u: Arc::new(u),
            exact_w: Arc::new(|t, p| -t.sin() * (PI * p.x).cos()),
            horizon,
        }
    }

    /// Static profile `u* = x` on the flat cylinder without masses; it lies in
    /// the discrete space.
    pub fn static_linear(horizon: f64) -> Self {
        Self {
            name: "cylinder-static-linear".into(),
            kind: MeshKind::Cylinder,
            metric: MetricSpec::flat(horizon),
            source: SourceSpec::new(Field::zero(), Field::static_func(|p| if p.x > 0.5 { 1.0 } else { -1.0 })),
            exact_u: Arc::new(|_, p| p.x),
            exact_w: Arc::new(|_, _| 0.0),
            horizon,
        }
    }

    pub fn mesh(&self, n: usize) -> Result<Mesh> {
        match self.kind {
            MeshKind::Interval => Mesh::interval(1.0, n),
            MeshKind::Cylinder => Mesh::cylinder(n, n),
        }
    }

    pub fn exact_state(&self, mesh: &Mesh, t: f64) -> StateVector<f64> {
        StateVector { u: mesh.interpolate(|p| (self.exact_u)(t, p)), w: mesh.interpolate(|p| (self.exact_w)(t, p)) }
    }

    /// Control-norm error of the discrete solution at the horizon.
    pub fn error(&self, n: usize, dt: f64) -> Result<f64> {
        let mesh = self.mesh(n)?;
        let sys = System::new(mesh.clone(), self.metric.clone());
        let grid = TimeGrid::new(0.0, self.horizon, dt)?;
        let traj = evolve_linear(&sys, &self.exact_state(&mesh, 0.0), &self.source, &grid)?;
        let exact = self.exact_state(&mesh, grid.end());
        sys.operator(grid.end())?.control_norm(&traj.last().sub(&exact))
    }
}

/// Errors over a refinement sequence and the fitted log-log slope.
#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    /// `(n, h, dt, error)` per level.
    pub levels: Vec<(usize, f64, f64, f64)>,
    pub slope: f64,
    pub monotone: bool,
}

impl ConvergenceStudy {
    /// Writes `n,h,dt,error`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["n", "h", "dt", "error"])?;
        for &(n, h, dt, e) in &self.levels {
            w.write_record([n.to_string(), format!("{h:.17e}"), format!("{dt:.17e}"), format!("{e:.17e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Spatial study: `dt = courant * h_x` at each resolution.
pub fn convergence_order(problem: &MmsProblem, resolutions: &[usize], courant: f64) -> Result<ConvergenceStudy> {
    if resolutions.len() < 3 {
        return Err(Error::InvalidArgument("convergence study needs at least 3 resolutions".into()));
    }
    let levels: Vec<(usize, f64, f64, f64)> = resolutions
        .iter()
        .map(|&n| -> Result<_> {
            let h = 1.0 / n as f64;
            let steps = (problem.horizon / (courant * h)).ceil() as usize;
            let dt = problem.horizon / steps as f64;
            Ok((n, h, dt, problem.error(n, dt)?))
        })
        .collect::<Result<_>>()?;
    let hs: Vec<f64> = levels.iter().map(|l| l.1).collect();
    let es: Vec<f64> = levels.iter().map(|l| l.3).collect();
    let monotone = es.windows(2).all(|w| w[1] < w[0]);
    Ok(ConvergenceStudy { slope: loglog_slope(&hs, &es), levels, monotone })
}

/// Temporal study against the dense exponential for an autonomous system:
/// errors at `t_end` for each `dt`, and successive error ratios.
pub fn temporal_order(sys: &System, x0: &StateVector<f64>, t_end: f64, dts: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let op = sys.operator(0.0)?;
    let exact = dense_expm_oracle(&op, x0, t_end)?;
    let errors: Vec<f64> = dts
        .iter()
        .map(|&dt| -> Result<f64> {
            let grid = TimeGrid::new(0.0, t_end, dt)?;
            let traj = evolve_linear(sys, x0, &NoForcing, &grid)?;
            op.control_norm(&traj.last().sub(&exact))
        })
        .collect::<Result<_>>()?;
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    Ok((errors.clone(), ratios, loglog_slope(dts, &errors)))
}

/// Discrete outward normal derivative on the boundary nodes (in boundary
/// slot order): `BoundaryMass^{-1} (BulkGradient u + BulkMass z)` restricted
/// to the boundary, where `z` is a lumped interior Laplacian copied to the
/// boundary from the inward neighbours. On the interval this is the pair of
/// endpoint fluxes.
pub fn neumann_trace_reconstruct(op: &DiscreteOperator, mesh: &Mesh, u: &[f64]) -> Result<Vec<f64>> {
    let n = mesh.dof_count();
    if u.len() != n {
        return Err(Error::Dimension { expected: n, got: u.len() });
    }
    let ku = op.bulk_gradient().matvec(u);
    let lumped = op.bulk_mass().row_sums();
    let mut z: Vec<f64> = (0..n).map(|i| -ku[i] / lumped[i]).collect();
    for &b in mesh.boundary_node_ids() {
        let inner = mesh.inward_neighbour(b).expect("boundary nodes have inward neighbours");
        z[b] = z[inner];
    }
    let mz = op.bulk_mass().matvec(&z);
    let ids = mesh.boundary_node_ids();
    let rhs: Vec<f64> = ids.iter().map(|&b| ku[b] + mz[b]).collect();
    let nb = ids.len();
    let mb = DMatrix::from_fn(nb, nb, |i, j| op.boundary_mass().get(ids[i], ids[j]));
    let sol = mb
        .cholesky()
        .ok_or_else(|| Error::Solver("boundary mass is not positive definite".into()))?
        .solve(&DVector::from_vec(rhs));
    Ok(sol.as_slice().to_vec())
}

/// Support radius of `|u| > threshold * max |u|` around `centre`, per time.
#[derive(Debug, Clone)]
pub struct FiniteSpeedReport {
    /// `(t, radius, growth)`.
    pub rows: Vec<(f64, f64, f64)>,
    /// Largest `growth - speed_factor * t`.
    pub worst_excess: f64,
    pub pass: bool,
}

/// Compactly supported initial displacement, as a function of `s` in `(-1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bump {
    /// `exp(1 - 1/(1 - s^2))`.
    Smooth,
    /// `(1 - s^2)^p`.
    Polynomial(i32),
}

impl Bump {
    pub fn eval(self, s: f64) -> f64 {
        if s.abs() >= 1.0 {
            return 0.0;
        }
        match self {
            Bump::Smooth => (1.0 - 1.0 / (1.0 - s * s)).exp(),
            Bump::Polynomial(p) => (1.0 - s * s).powi(p),
        }
    }
}

/// Evolves `bump((x - 1/2) / width)` on the flat interval `[0, 1]` and tracks
/// the thresholded support.
pub fn finite_speed_check(
    n_x: usize,
    bump: Bump,
    width: f64,
    dt: f64,
    t_end: f64,
    threshold: f64,
    speed_factor: f64,
) -> Result<FiniteSpeedReport> {
    let centre = 0.5;
    if !(width > 0.0) || width + t_end >= centre {
        return Err(Error::InvalidArgument(format!("bump of width {width} reaches the boundary before t = {t_end}")));
    }
    let mesh = Mesh::interval(1.0, n_x)?;
    let sys = System::new(mesh.clone(), MetricSpec::flat(t_end));
    let x0 = StateVector { u: mesh.interpolate(|p| bump.eval((p.x - centre) / width)), w: vec![0.0; mesh.dof_count()] };
    let traj = evolve_linear(&sys, &x0, &NoForcing, &TimeGrid::new(0.0, t_end, dt)?)?;
    let h = mesh.hx();
    // threshold contour located by log-linear interpolation towards the outer neighbour
    let radius = |u: &[f64]| {
        let level = threshold * u.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let above: Vec<usize> = (0..u.len()).filter(|&i| u[i].abs() > level).collect();
        let (Some(&lo), Some(&hi)) = (above.first(), above.last()) else { return 0.0 };
        let offset = |inner: usize, outer: Option<usize>| match outer {
            Some(o) if u[o] != 0.0 => h * (u[inner].abs() / level).ln() / (u[inner].abs() / u[o].abs()).ln(),
            _ => 0.0,
        };
        let right = mesh.coords()[hi].x + offset(hi, (hi + 1 < u.len()).then_some(hi + 1)) - centre;
        let left = centre - mesh.coords()[lo].x + offset(lo, lo.checked_sub(1));
        right.max(left)
    };
    let r0 = radius(&x0.u);
    let mut worst_excess = f64::NEG_INFINITY;
    let rows: Vec<(f64, f64, f64)> = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(&t, x)| {
            let r = radius(&x.u);
            worst_excess = worst_excess.max(r - r0 - speed_factor * t);
            (t, r, r - r0)
        })
        .collect();
    Ok(FiniteSpeedReport { rows, pass: worst_excess <= 0.0, worst_excess })
}

/// Adaptive Dormand-Prince 5(4) integration of `y' = f(t, y)`.
#[derive(Debug, Clone, Copy)]
pub struct Dopri5 {
    pub rtol: f64,
    pub atol: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for Dopri5 {
    fn default() -> Self {
        Self { rtol: 1e-12, atol: 1e-14, h_min: 1e-16, max_steps: 10_000_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OdeStop {
    Reached,
    /// The stop predicate fired.
    Event,
    StepUnderflow,
}

impl Dopri5 {
    const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] =
        [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

    /// Integrates from `t0` to `t1` or until `stop(t, y)`; returns the final
    /// time, state and stop reason.
    pub fn integrate<const D: usize>(
        &self,
        f: impl Fn(f64, &[f64; D]) -> [f64; D],
        t0: f64,
        y0: [f64; D],
        t1: f64,
        stop: impl Fn(f64, &[f64; D]) -> bool,
    ) -> (f64, [f64; D], OdeStop) {
        let (mut t, mut y) = (t0, y0);
        let mut h = ((t1 - t0) * 1e-3).max(self.h_min);
        for _ in 0..self.max_steps {
            if t >= t1 {
                return (t, y, OdeStop::Reached);
            }
            if stop(t, &y) {
                return (t, y, OdeStop::Event);
            }
            h = h.min(t1 - t);
            let mut k = [[0.0; D]; 7];
            k[0] = f(t, &y);
            for s in 1..7 {
                let mut ys = y;
                for (j, kj) in k.iter().enumerate().take(s) {
                    for d in 0..D {
                        ys[d] += h * Self::A[s][j] * kj[d];
                    }
                }
                k[s] = f(t + Self::C[s] * h, &ys);
            }
            let mut y5 = y;
            let mut err: f64 = 0.0;
            for d in 0..D {
                let (mut s5, mut s4) = (0.0, 0.0);
                for s in 0..7 {
                    s5 += Self::B5[s] * k[s][d];
                    s4 += Self::B4[s] * k[s][d];
                }
                y5[d] += h * s5;
                let sc = self.atol + self.rtol * y[d].abs().max(y5[d].abs());
                err = err.max((h * (s5 - s4) / sc).abs());
            }
            if err <= 1.0 && y5.iter().all(|v| v.is_finite()) {
                t += h;
                y = y5;
            }
            let fac = if err.is_finite() && err > 0.0 { 0.9 * err.powf(-0.2) } else if err == 0.0 { 5.0 } else { 0.1 };
            h *= fac.clamp(0.1, 5.0);
            if h < self.h_min {
                return (t, y, OdeStop::StepUnderflow);
            }
        }
        (t, y, OdeStop::StepUnderflow)
    }
}

/// Blow-up time of `u'' = u^3`, `u(0) = u0 > 0`, `u'(0) = w0 >= 0` by adaptive
/// integration to `u = u_stop` followed by the asymptotic tail
/// `u ~ sqrt(2) / (t+ - t)`.
pub fn cubic_blowup_time_reference(u0: f64, w0: f64) -> Result<f64> {
    if !(u0 > 0.0) || !(w0 >= 0.0) {
        return Err(Error::InvalidArgument("reference blow-up needs u0 > 0 and w0 >= 0".into()));
    }
    let u_stop = 1e6 * u0.max(1.0);
    let (t, y, why) = Dopri5::default().integrate(|_, y: &[f64; 2]| [y[1], y[0] * y[0] * y[0]], 0.0, [u0, w0], 1e6, |_, y| y[0] >= u_stop);
    if why != OdeStop::Event {
        return Err(Error::Solver(format!("reference integration stopped early: {why:?}")));
    }
    // tail: t+ - t = int_u^inf ds / sqrt(s^4/2 + c) with c = w^2 - u^4/2 negligible
    Ok(t + 2f64.sqrt() / y[0])
}

/// Closed form for `w0 = 0`: `t+ = (sqrt 2 / u0) Gamma(1/4)^2 / (4 sqrt(2 pi))`.
pub fn cubic_blowup_time_closed_form(u0: f64) -> f64 {
    const GAMMA_QUARTER: f64 = 3.625_609_908_221_908_3;
    2f64.sqrt() / u0 * GAMMA_QUARTER * GAMMA_QUARTER / (4.0 * (2.0 * PI).sqrt())
}

/// `u(t)` of `u'' = u^3` from `(u0, w0)` by adaptive integration.
pub fn cubic_ode_solution(u0: f64, w0: f64, t: f64) -> [f64; 2] {
    Dopri5::default().integrate(|_, y: &[f64; 2]| [y[1], y[0] * y[0] * y[0]], 0.0, [u0, w0], t, |_, _| false).1
}

/// Inputs of the verification battery.
#[derive(Clone, Copy)]
pub struct Battery<'a> {
    pub sys: &'a System,
    pub spec: &'a NonlinearitySpec,
    pub source: &'a SourceSpec,
    pub x0: &'a StateVector<f64>,
    pub dt: f64,
    pub lambdas: &'a [f64],
    pub seed: u64,
    pub dissipativity_states: usize,
    pub resolvent_rhs: usize,
    pub kato_points: usize,
    pub m0: M0Options,
    pub lipschitz: LipschitzOptions,
    pub lipschitz_mode: LipschitzMode,
    pub picard: PicardOptions,
    /// When set, the Kato scan and Picard history are also written here.
    pub artifacts: Option<&'a Path>,
}

type CheckGroup<'a> = (&'static str, Box<dyn Fn() -> Result<Vec<CheckReport>> + Send + Sync + 'a>);

/// Runs every check group concurrently; a group that errors is reported as
/// a single failed check carrying the error.
pub fn run_battery(b: &Battery<'_>) -> Result<Vec<CheckReport>> {
    let horizon = b.sys.horizon();
    let full = TimeGrid::new(0.0, horizon, b.dt)?;
    let m0 = estimate_m0(b.sys, &probe_grid(&full), &b.m0)?;
    let ctx = format!("dofs = {}, dt = {}, seed = {}", b.sys.mesh().dof_count(), b.dt, b.seed);
    let groups: Vec<CheckGroup<'_>> = vec![
        ("dissipativity", Box::new(|| battery_dissipativity(b))),
        ("resolvent", Box::new(|| battery_resolvent(b))),
        ("energy_drift", Box::new(|| battery_energy(b, &full))),
        ("semigroup_law", Box::new(|| battery_semigroup(b, &full))),
        ("time_symmetry", Box::new(|| battery_time_symmetry(b, &full))),
        ("apriori_bound", Box::new(|| battery_apriori(b, &full, m0.value))),
        ("kato_scan", Box::new(|| battery_kato(b))),
        ("restart_linear", Box::new(|| battery_restart_linear(b, &full))),
        ("nonlinear", Box::new(|| battery_nonlinear(b, &full))),
    ];
    let reports: Vec<Vec<CheckReport>> = groups
        .par_iter()
        .map(|(name, f)| {
            f().unwrap_or_else(|e| vec![CheckReport::at_most(*name, f64::NAN, 0.0, format!("error: {e}"))])
        })
        .collect();
    Ok(reports
        .into_iter()
        .flatten()
        .map(|mut r| {
            r.context = format!("{}; {ctx}", r.context);
            r
        })
        .collect())
}

fn battery_dissipativity(b: &Battery<'_>) -> Result<Vec<CheckReport>> {
    let mut worst = CheckReport::at_most("dissipativity", 0.0, 1e-12, "");
    for k in 0..5 {
        let r = dissipativity_check(&*b.sys.operator(b.sys.horizon() * k as f64 / 4.0)?, b.dissipativity_states, b.seed + k)?;
        if r.value >= worst.value {
            worst = r;
        }
    }
    Ok(vec![worst])
}

fn battery_resolvent(b: &Battery<'_>) -> Result<Vec<CheckReport>> {
    let op = b.sys.operator(0.5 * b.sys.horizon())?;
    let mut rng = random::stream(b.seed, streams::RESOLVENT);
    let (mut res, mut contr) = (0.0_f64, 0.0_f64);
    for &lambda in b.lambdas {
        for _ in 0..b.resolvent_rhs {
            let f = random::white_state::<f64>(&mut rng, op.dofs());
            let sol = resolvent_solve(&op, lambda, &f)?;
            res = res.max(sol.residual);
            contr = contr.max(lambda * op.x_norm(&sol.state)? / op.x_norm(&f)?);
        }
    }
    let ctx = format!("lambdas = {:?}, rhs = {}", b.lambdas, b.resolvent_rhs);
    Ok(vec![
        CheckReport::at_most("resolvent_residual", res, 1e-9, ctx.clone()),
        CheckReport::at_most("resolvent_contraction", contr, 1.0 + 1e-8, ctx),
    ])
}

fn battery_energy(b: &Battery<'_>, full: &TimeGrid) -> Result<Vec<CheckReport>> {
    let frozen = System::new(b.sys.mesh().clone(), b.sys.metric().clone()).with_quadrature(b.sys.quadrature()).frozen_at(0.0);
    let grid = TimeGrid::with_steps(0.0, b.dt, full.steps.min(1000));
    let op = frozen.operator(0.0)?;
    let traj = evolve_linear(&frozen, b.x0, &NoForcing, &grid)?;
    let e0 = energy(&op, b.x0)?;
    let mut drift: f64 = 0.0;
    for x in &traj.states {
        let e = energy(&op, x)?;
        drift = drift.max(if e0 > 0.0 { (e - e0).abs() / e0 } else { e });
    }
    Ok(vec![CheckReport::at_most("energy_drift", drift, 1e-8, format!("frozen at t = 0, {} steps", grid.steps))])
}

fn battery_semigroup(b: &Battery<'_>, full: &TimeGrid) -> Result<Vec<CheckReport>> {
    let scale = b.sys.operator(0.0)?.control_norm(b.x0)?.max(f64::MIN_POSITIVE);
    if b.sys.mesh().dof_count() <= DENSE_CAP {
        let op = b.sys.operator(0.0)?;
        let (s, t) = (0.3 * b.sys.horizon(), 0.5 * b.sys.horizon());
        let a = dense_expm_oracle(&op, &dense_expm_oracle(&op, b.x0, t)?, s)?;
        let c = dense_expm_oracle(&op, b.x0, s + t)?;
        let err = op.control_norm(&a.sub(&c))? / scale;
        return Ok(vec![CheckReport::at_most("semigroup_law", err, 1e-9, format!("dense exponential at t = 0, s = {s}, t = {t}"))]);
    }
    // discrete evolution family: U(t2, t0) = U(t2, t1) U(t1, t0)
    let steps = full.steps.min(200);
    let k1 = steps / 2;
    let direct = evolve_linear(b.sys, b.x0, &NoForcing, &TimeGrid::with_steps(0.0, b.dt, steps))?;
    let first = evolve_linear(b.sys, b.x0, &NoForcing, &TimeGrid::with_steps(0.0, b.dt, k1))?;
    let second = evolve_linear(b.sys, first.last(), &NoForcing, &TimeGrid::with_steps(full.time(k1), b.dt, steps - k1))?;
    let err = b.sys.operator(full.time(steps))?.control_norm(&direct.last().sub(second.last()))? / scale;
    Ok(vec![CheckReport::at_most("semigroup_law", err, 1e-9, format!("evolution family composition over {steps} steps"))])
}

fn battery_time_symmetry(b: &Battery<'_>, full: &TimeGrid) -> Result<Vec<CheckReport>> {
    let steps = full.steps.min(200);
    let ops: Vec<_> = (0..steps).map(|k| b.sys.operator(full.time(k) + 0.5 * b.dt)).collect::<Result<_>>()?;
    let mut x = b.x0.clone();
    for op in &ops {
        x = midpoint_step_with(op, &x, b.dt, None)?.state;
    }
    let mut y = x.reversed();
    for op in ops.iter().rev() {
        y = midpoint_step_with(op, &y, b.dt, None)?.state;
    }
    let op0 = b.sys.operator(0.0)?;
    let scale = op0.control_norm(b.x0)?.max(f64::MIN_POSITIVE);
    let err = op0.control_norm(&y.reversed().sub(b.x0))? / scale;
    Ok(vec![CheckReport::at_most("time_symmetry", err, 1e-10, format!("{steps} steps forward and back"))])
}

fn battery_apriori(b: &Battery<'_>, full: &TimeGrid, m0: f64) -> Result<Vec<CheckReport>> {
    let traj = evolve_linear(b.sys, b.x0, b.source, full)?;
    let c = apriori_bound_check(b.sys, &traj, m0, 1e-3)?;
    Ok(vec![CheckReport::at_most(
        "apriori_bound",
        c.worst_ratio,
        1.0 + 1e-3,
        format!("M0 = {m0:.6}, max source norm = {:.6}, worst at t = {}", c.max_source, c.worst_time),
    )])
}

/// Kato scans need dense matrices; larger meshes are scanned on a coarse
/// mesh of the same geometry and metric.
fn battery_kato(b: &Battery<'_>) -> Result<Vec<CheckReport>> {
    let mesh = b.sys.mesh();
    let (sys, note) = if mesh.dof_count() <= DENSE_CAP {
        (None, "run mesh".to_string())
    } else {
        let coarse = match mesh.kind() {
            MeshKind::Interval => Mesh::interval(mesh.length(), 10)?,
            MeshKind::Cylinder => Mesh::cylinder(6, 6)?,
        };
        let note = format!("coarse mesh with {} dofs", coarse.dof_count());
        (Some(System::new(coarse, b.sys.metric().clone()).with_quadrature(b.sys.quadrature())), note)
    };
    let sys = sys.as_ref().unwrap_or(b.sys);
    let coarse = kato_scan(sys, b.kato_points)?;
    let fine = kato_scan(sys, 2 * b.kato_points)?;
    let rel = (fine.max_norm - coarse.max_norm).abs() / coarse.max_norm;
    let ctx = format!("{note}, {} and {} points", b.kato_points, 2 * b.kato_points);
    if let Some(dir) = b.artifacts {
        fine.write_csv(&dir.join("kato.csv"))?;
    }
    Ok(vec![
        CheckReport::at_most("kato_norm_stability", rel, 0.05, format!("max norm {:.6} vs {:.6}; {ctx}", coarse.max_norm, fine.max_norm)),
        CheckReport::at_most("kato_bounded_variation", fine.bv_sum.max(coarse.bv_sum), f64::MAX, ctx),
    ])
}

fn battery_restart_linear(b: &Battery<'_>, full: &TimeGrid) -> Result<Vec<CheckReport>> {
    let steps = full.steps.min(40);
    if steps < 2 {
        return Ok(vec![CheckReport::at_most("restart_linear", 0.0, 1e-9, "skipped: fewer than 2 steps")]);
    }
    let grid = TimeGrid::with_steps(0.0, b.dt, steps);
    let d = restart_check(b.sys, &NonlinearitySpec::zero(), b.x0, &grid, grid.time(steps / 2), &b.picard)?;
    Ok(vec![CheckReport::at_most("restart_linear", d, 1e-9, format!("restart at t = {}", grid.time(steps / 2)))])
}

fn battery_nonlinear(b: &Battery<'_>, full: &TimeGrid) -> Result<Vec<CheckReport>> {
    if b.spec.is_zero() {
        let (_, report) = picard_solve(b.sys, b.spec, b.x0, full, &NoForcing, &b.picard)?;
        if let Some(dir) = b.artifacts {
            report.write_csv(&dir.join("picard.csv"))?;
        }
        return Ok(vec![CheckReport::at_most(
            "picard_contraction",
            report.max_ratio(0.0).max(0.0),
            0.05,
            format!("zero nonlinearity, {} iteration(s)", report.iterations.len()),
        )]);
    }
    let rho = b.sys.operator(0.0)?.control_norm(b.x0)?;
    let m0 = estimate_m0(b.sys, &probe_grid(full), &b.m0)?.value;
    let l = lipschitz_estimate(b.sys, b.spec, rho * (1.0 + m0), (0.0, full.end()), b.lipschitz_mode, &b.lipschitz)?;
    let cert = existence_time(rho, m0, l, full.end())?;
    let steps = (((cert.tau / b.dt) * (1.0 + 1e-12)).floor() as usize).min(full.steps);
    if steps == 0 {
        return Ok(vec![CheckReport::at_most("picard_window", cert.tau, 0.0, format!("certified window {} below dt", cert.tau))]);
    }
    let grid = TimeGrid::with_steps(0.0, b.dt, steps);
    let (traj, report) = picard_solve(b.sys, b.spec, b.x0, &grid, &NoForcing, &b.picard)?;
    if let Some(dir) = b.artifacts {
        report.write_csv(&dir.join("picard.csv"))?;
    }
    let kind = b.sys.control_norm_kind()?;
    let mut sup: f64 = 0.0;
    for (&t, x) in traj.times.iter().zip(&traj.states) {
        sup = sup.max(b.sys.operator(t)?.norm(kind, x)?);
    }
    let ctx = format!("tau = {:.6}, M0 = {:.6}, L = {:.6}, {} steps", cert.tau, cert.m0, cert.lipschitz, steps);
    let mut out = vec![
        CheckReport::at_most(
            "picard_contraction",
            report.max_ratio(1e3 * f64::EPSILON * rho.max(1.0)).max(0.0),
            cert.contraction_factor + 0.05,
            ctx.clone(),
        ),
        CheckReport::at_most("conditional_bound", sup / cert.solution_bound, 1.0 + 1e-2, ctx.clone()),
    ];
    if steps >= 2 {
        let d = restart_check(b.sys, b.spec, b.x0, &grid, grid.time(steps / 2), &b.picard)?;
        out.push(CheckReport::at_most("restart_nonlinear", d, 10.0 * b.picard.tol, ctx.clone()));
    }
    // data perturbed inside the ball: sup ||X - Y|| <= 2 M0 ||X0 - Y0|| on a certified window
    let mut rng = random::stream(b.seed, streams::SEMIGROUP);
    let dir = random::smooth_state(&mut rng, b.sys.mesh(), 3);
    let op0 = b.sys.operator(0.0)?;
    let dir = dir.scaled(0.005 * rho / op0.control_norm(&dir)?);
    let y0 = b.x0.scaled(0.99).axpy(1.0, &dir);
    let (ytraj, _) = picard_solve(b.sys, b.spec, &y0, &grid, &NoForcing, &b.picard)?;
    let d0 = op0.control_norm(&b.x0.sub(&y0))?;
    let ratio = sup_diff(b.sys, &traj, &ytraj)? / (2.0 * m0 * d0);
    out.push(CheckReport::at_most("lipschitz_dependence", ratio, 1.0, ctx));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::Quadrature;
    use crate::sparse::SparseMatrix;

    #[test]
    fn energy_of_unit_constant_on_flat_cylinder() {
        let mesh = Mesh::cylinder(8, 12).unwrap();
        let sys = System::new(mesh, MetricSpec::flat(1.0).with_constant_masses(-1.0, -1.0));
        let op = sys.operator(0.0).unwrap();
        let x = StateVector::new(vec![1.0; op.dofs()], vec![0.0; op.dofs()]).unwrap();
        assert!((energy(&op, &x).unwrap() - 6.0 * PI).abs() < 1e-10);
        assert_eq!(energy(&op, &StateVector::<f64>::zeros(op.dofs())).unwrap(), 0.0);
        let y = random::white_state::<f64>(&mut random::stream(1, 1), op.dofs());
        assert_eq!(energy(&op, &y).unwrap().sqrt(), op.x_norm(&y).unwrap());
    }

    #[test]
    fn dissipativity_passes_and_negative_control_fails() {
        let sys = System::new(Mesh::cylinder(6, 6).unwrap(), MetricSpec::conformal_pulse(1.0, 0.2, 1.0, 1.0));
        let op = sys.operator(0.4).unwrap();
        assert!(dissipativity_check(&op, 20, 3).unwrap().pass);
        // perturb one off-diagonal entry of Stiff on one side only
        let mut k = op.stiff().to_dense();
        k[(0, 1)] += 0.3;
        let bad = DiscreteOperator::from_matrices(0.0, op.mass().clone(), SparseMatrix::from_dense(&k), false).unwrap();
        assert!(!dissipativity_check(&bad, 20, 3).unwrap().pass);
    }

    #[test]
    fn complex_pairing_is_twice_imaginary_v_product() {
        let sys = System::new(Mesh::cylinder(4, 5).unwrap(), MetricSpec::flat(1.0).with_constant_masses(-1.0, 0.0));
        let op = sys.operator(0.0).unwrap();
        let x = random::white_state::<Complex64>(&mut random::stream(9, 0), op.dofs());
        let (lhs, rhs) = complex_dissipation_pairing(&op, &x).unwrap();
        assert!(lhs.re.abs() < 1e-10 * lhs.norm());
        assert!(lhs.im.abs() > 1e-3);
        assert!((lhs - rhs).norm() < 1e-10 * lhs.norm());
    }

    #[test]
    fn expm_oracle_basic_properties() {
        let sys = System::new(Mesh::interval(1.0, 10).unwrap(), MetricSpec::flat(1.0).with_constant_masses(-1.0, -1.0));
        let op = sys.operator(0.0).unwrap();
        let x0 = random::white_state::<f64>(&mut random::stream(4, 0), 11);
        assert_eq!(dense_expm_oracle(&op, &x0, 0.0).unwrap(), x0);
        let x1 = dense_expm_oracle(&op, &x0, 0.7).unwrap();
        assert!((op.x_norm(&x1).unwrap() / op.x_norm(&x0).unwrap() - 1.0).abs() < 1e-9);
        let a = dense_expm_oracle(&op, &dense_expm_oracle(&op, &x0, 0.3).unwrap(), 0.4).unwrap();
        let b = dense_expm_oracle(&op, &x0, 0.7).unwrap();
        assert!(op.x_norm(&a.sub(&b)).unwrap() < 1e-9 * op.x_norm(&x0).unwrap());
    }

    #[test]
    fn neumann_trace_of_constant_and_linear_profiles() {
        let mesh = Mesh::cylinder(16, 12).unwrap();
        let sys = System::new(mesh.clone(), MetricSpec::flat(1.0));
        let op = sys.operator(0.0).unwrap();
        let g = neumann_trace_reconstruct(&op, &mesh, &vec![3.0; mesh.dof_count()]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10));
        let lin = mesh.interpolate(|p| p.x);
        let g = neumann_trace_reconstruct(&op, &mesh, &lin).unwrap();
        for (slot, &b) in mesh.boundary_node_ids().iter().enumerate() {
            let expect = if mesh.coords()[b].x > 0.5 { 1.0 } else { -1.0 };
            assert!((g[slot] - expect).abs() < 2.0 * mesh.hx(), "{} vs {expect}", g[slot]);
        }
    }

    #[test]
    fn neumann_trace_weak_identity() {
        for q in [Quadrature::Nodal, Quadrature::Consistent] {
            let mesh = Mesh::cylinder(6, 8).unwrap();
            let sys = System::new(mesh.clone(), MetricSpec::conformal_pulse(1.0, 0.3, 1.0, 1.0)).with_quadrature(q);
            let op = sys.operator(0.5).unwrap();
            let mut rng = random::stream(8, 0);
            let u = random::white_state::<f64>(&mut rng, mesh.dof_count()).u;
            let zeta = random::white_state::<f64>(&mut rng, mesh.dof_count()).u;
            let g = neumann_trace_reconstruct(&op, &mesh, &u).unwrap();
            // <gamma u, zeta>_boundary vs zeta^T (K u + M z) on the boundary rows
            let ids = mesh.boundary_node_ids();
            let mut gfull = vec![0.0; mesh.dof_count()];
            let mut zb = vec![0.0; mesh.dof_count()];
            for (s, &b) in ids.iter().enumerate() {
                gfull[b] = g[s];
                zb[b] = zeta[b];
            }
            let lhs: f64 = op.boundary_mass().bilinear(&gfull, &zb);
            let ku = op.bulk_gradient().matvec(&u);
            let lumped = op.bulk_mass().row_sums();
            let mut z: Vec<f64> = (0..u.len()).map(|i| -ku[i] / lumped[i]).collect();
            for &b in ids {
                z[b] = z[mesh.inward_neighbour(b).unwrap()];
            }
            let mz = op.bulk_mass().matvec(&z);
            let rhs: f64 = ids.iter().map(|&b| zeta[b] * (ku[b] + mz[b])).sum();
            assert!((lhs - rhs).abs() < 1e-10 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn interval_endpoint_fluxes() {
        let mesh = Mesh::interval(1.0, 64).unwrap();
        let sys = System::new(mesh.clone(), MetricSpec::flat(1.0));
        let op = sys.operator(0.0).unwrap();
        let u = mesh.interpolate(|p| p.x * p.x);
        let g = neumann_trace_reconstruct(&op, &mesh, &u).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g[0].abs() < 1e-10);
        assert!((g[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn dopri_matches_closed_form_blowup() {
        for u0 in [0.5, 1.0, 2.0] {
            let r = cubic_blowup_time_reference(u0, 0.0).unwrap();
            let c = cubic_blowup_time_closed_form(u0);
            assert!((r - c).abs() < 1e-8 * c, "{r} vs {c}");
        }
        assert!((cubic_blowup_time_closed_form(1.0) - 1.854_07).abs() < 1e-5);
    }

    #[test]
    fn dopri_harmonic_oscillator() {
        let y = Dopri5::default().integrate(|_, y: &[f64; 2]| [y[1], -y[0]], 0.0, [1.0, 0.0], 2.0, |_, _| false).1;
        assert!((y[0] - 2f64.cos()).abs() < 1e-10);
    }

    #[test]
    fn static_linear_profile_is_reproduced() {
        let p = MmsProblem::static_linear(0.5);
        for n in [4, 8] {
            let e = p.error(n, 0.05).unwrap();
            assert!(e < 1e-11, "{e}");
        }
    }

    #[test]
    fn slope_of_exact_power_law() {
        let x = [0.1, 0.05, 0.025];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
        assert!((loglog_slope(&x, &y) - 2.0).abs() < 1e-12);
    }
}
