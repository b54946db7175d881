//! Model manifolds with boundary and their time-dependent diagonal metrics.
//!
//! Two geometries are supported:
//!
//! * the interval `[0, L]` with metric `a(t,x)^2 dx^2`, whose boundary is the
//!   two endpoints (a zero-dimensional manifold with counting measure);
//! * the finite cylinder `[0,1] x S^1` with metric
//!   `a(t,x,theta)^2 dx^2 + b(t,x,theta)^2 dtheta^2`, whose boundary is the pair
//!   of circles `x = 0` and `x = 1` carrying the induced metric `b^2 dtheta^2`.
//!
//! Boundary degrees of freedom are bulk nodes: the trace of a nodal field is
//! its restriction to [`Mesh::boundary_node_ids`].

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::expr::{Field, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshKind {
    Interval,
    Cylinder,
}

impl MeshKind {
    /// Topological dimension of the bulk.
    pub fn dimension(self) -> usize {
        match self {
            MeshKind::Interval => 1,
            MeshKind::Cylinder => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    kind: MeshKind,
    length: f64,
    n_x: usize,
    n_theta: usize,
    coords: Vec<Point>,
    /// Interval: segments `[i, i+1]`. Cylinder: quads
    /// `(i,j), (i+1,j), (i+1,j+1), (i,j+1)` with `j` periodic.
    cells: Vec<Vec<usize>>,
    boundary_node_ids: Vec<usize>,
    /// Edges of the boundary circles (empty for the interval).
    boundary_edges: Vec<[usize; 2]>,
    trace_slot: Vec<Option<usize>>,
}

impl Mesh {
    /// Uniform mesh of `[0, length]` with `n_x` cells.
    pub fn interval(length: f64, n_x: usize) -> Result<Self> {
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::Mesh(format!("interval length must be positive, got {length}")));
        }
        if n_x < 2 {
            return Err(Error::Mesh(format!("need at least 2 cells, got n_x = {n_x}")));
        }
        let h = length / n_x as f64;
        let coords = (0..=n_x).map(|i| Point::new(i as f64 * h, 0.0)).collect();
        let cells = (0..n_x).map(|i| vec![i, i + 1]).collect();
        Ok(Self::finish(MeshKind::Interval, length, n_x, 1, coords, cells, vec![0, n_x], Vec::new()))
    }

    /// Tensor mesh of `[0,1] x S^1` with `n_x` axial cells and `n_theta`
    /// angular nodes (periodic).
    pub fn cylinder(n_x: usize, n_theta: usize) -> Result<Self> {
        if n_x < 2 {
            return Err(Error::Mesh(format!("need at least 2 axial cells, got n_x = {n_x}")));
        }
        if n_theta < 3 {
            return Err(Error::Mesh(format!(
                "need at least 3 angular nodes, got n_theta = {n_theta}"
            )));
        }
        let hx = 1.0 / n_x as f64;
        let ht = 2.0 * PI / n_theta as f64;
        let id = |i: usize, j: usize| i * n_theta + (j % n_theta);
        let mut coords = Vec::with_capacity((n_x + 1) * n_theta);
        for i in 0..=n_x {
            for j in 0..n_theta {
                coords.push(Point::new(i as f64 * hx, j as f64 * ht));
            }
        }
        let mut cells = Vec::with_capacity(n_x * n_theta);
        for i in 0..n_x {
            for j in 0..n_theta {
                cells.push(vec![id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        let mut boundary = Vec::with_capacity(2 * n_theta);
        let mut edges = Vec::with_capacity(2 * n_theta);
        for i in [0, n_x] {
            for j in 0..n_theta {
                boundary.push(id(i, j));
                edges.push([id(i, j), id(i, j + 1)]);
            }
        }
        Ok(Self::finish(MeshKind::Cylinder, 1.0, n_x, n_theta, coords, cells, boundary, edges))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        kind: MeshKind,
        length: f64,
        n_x: usize,
        n_theta: usize,
        coords: Vec<Point>,
        cells: Vec<Vec<usize>>,
        boundary_node_ids: Vec<usize>,
        boundary_edges: Vec<[usize; 2]>,
    ) -> Self {
        let mut trace_slot = vec![None; coords.len()];
        for (k, &n) in boundary_node_ids.iter().enumerate() {
            trace_slot[n] = Some(k);
        }
        Self {
            kind,
            length,
            n_x,
            n_theta,
            coords,
            cells,
            boundary_node_ids,
            boundary_edges,
            trace_slot,
        }
    }

    pub fn kind(&self) -> MeshKind {
        self.kind
    }
    pub fn length(&self) -> f64 {
        self.length
    }
    pub fn n_x(&self) -> usize {
        self.n_x
    }
    pub fn n_theta(&self) -> usize {
        self.n_theta
    }
    pub fn dof_count(&self) -> usize {
        self.coords.len()
    }
    pub fn coords(&self) -> &[Point] {
        &self.coords
    }
    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }
    pub fn boundary_node_ids(&self) -> &[usize] {
        &self.boundary_node_ids
    }
    pub fn boundary_edges(&self) -> &[[usize; 2]] {
        &self.boundary_edges
    }

    /// Position of `node` in the boundary list, if it lies on the boundary.
    pub fn trace_slot(&self, node: usize) -> Option<usize> {
        self.trace_slot.get(node).copied().flatten()
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.trace_slot(node).is_some()
    }

    /// Axial cell width.
    pub fn hx(&self) -> f64 {
        self.length / self.n_x as f64
    }

    /// Angular spacing (cylinder only; `0` on the interval).
    pub fn htheta(&self) -> f64 {
        match self.kind {
            MeshKind::Interval => 0.0,
            MeshKind::Cylinder => 2.0 * PI / self.n_theta as f64,
        }
    }

    /// Node index of grid position `(i, j)`; `j` wraps around on the cylinder.
    pub fn node(&self, i: usize, j: usize) -> usize {
        match self.kind {
            MeshKind::Interval => i,
            MeshKind::Cylinder => i * self.n_theta + (j % self.n_theta),
        }
    }

    /// Restriction of a nodal field to the boundary (the Dirichlet trace).
    pub fn trace<T: Copy>(&self, field: &[T]) -> Vec<T> {
        self.boundary_node_ids.iter().map(|&n| field[n]).collect()
    }

    /// Nodal interpolant of a function of the point.
    pub fn interpolate(&self, f: impl Fn(Point) -> f64) -> Vec<f64> {
        self.coords.iter().map(|&p| f(p)).collect()
    }

    /// Interior neighbour of a boundary node (one cell inward along `x`).
    pub fn inward_neighbour(&self, node: usize) -> Option<usize> {
        self.trace_slot(node)?;
        let (i, j) = match self.kind {
            MeshKind::Interval => (node, 0),
            MeshKind::Cylinder => (node / self.n_theta, node % self.n_theta),
        };
        let inner = if i == 0 { 1 } else { i - 1 };
        Some(self.node(inner, j))
    }
}

/// Time-dependent diagonal metric together with the bulk and boundary mass
/// functions on a horizon `[0, T]`.
#[derive(Debug, Clone)]
pub struct MetricSpec {
    /// Axial coefficient `a`, `g = a^2 dx^2 (+ ...)`.
    pub a: Field,
    /// Angular coefficient `b` (cylinder only).
    pub b: Field,
    /// Bulk mass function `m <= 0`.
    pub mass: Field,
    /// Boundary mass function `m_b <= 0`.
    pub boundary_mass: Field,
    pub horizon: f64,
    pub name: String,
}

impl MetricSpec {
    pub fn flat(horizon: f64) -> Self {
        Self {
            a: Field::constant(1.0),
            b: Field::constant(1.0),
            mass: Field::zero(),
            boundary_mass: Field::zero(),
            horizon,
            name: "flat".into(),
        }
    }

    /// Uniform breathing: on the interval `a = 1 + eps sin(omega t)`, on the
    /// cylinder the circle radius `b = 1 + eps sin(omega t)` and `a = 1`.
    pub fn pulsating(kind: MeshKind, eps: f64, omega: f64, horizon: f64) -> Self {
        let pulse = Field::func(move |t, _| 1.0 + eps * (omega * t).sin());
        let (a, b) = match kind {
            MeshKind::Interval => (pulse, Field::constant(1.0)),
            MeshKind::Cylinder => (Field::constant(1.0), pulse),
        };
        Self {
            a,
            b,
            mass: Field::zero(),
            boundary_mass: Field::zero(),
            horizon,
            name: format!("pulsating(eps={eps}, omega={omega})"),
        }
    }

    /// Conformal pulse `a = b = 1 + eps sin(omega t) sin^2(pi x / L)`.
    pub fn conformal_pulse(length: f64, eps: f64, omega: f64, horizon: f64) -> Self {
        let f = Field::func(move |t, p| {
            let s = (PI * p.x / length).sin();
            1.0 + eps * (omega * t).sin() * s * s
        });
        Self {
            a: f.clone(),
            b: f,
            mass: Field::zero(),
            boundary_mass: Field::zero(),
            horizon,
            name: format!("conformal-pulse(eps={eps}, omega={omega})"),
        }
    }

    pub fn with_masses(mut self, mass: Field, boundary_mass: Field) -> Self {
        self.mass = mass;
        self.boundary_mass = boundary_mass;
        self
    }

    pub fn with_constant_masses(self, m: f64, m_b: f64) -> Self {
        self.with_masses(Field::constant(m), Field::constant(m_b))
    }

    /// True when neither metric nor masses depend on time.
    pub fn is_autonomous(&self) -> bool {
        !(self.a.is_time_dependent()
            || self.b.is_time_dependent()
            || self.mass.is_time_dependent()
            || self.boundary_mass.is_time_dependent())
    }

    /// Checks positivity of the metric coefficients and the sign of the
    /// masses at `n_times` equispaced times on every mesh node.
    pub fn validate(&self, mesh: &Mesh, n_times: usize) -> Result<()> {
        let n = n_times.max(2);
        for k in 0..n {
            let t = self.horizon * k as f64 / (n - 1) as f64;
            let sample = sample_metric(self, mesh, t)?;
            let bulk = sample.mass.iter().enumerate().map(|(i, &m)| ("bulk mass m", m, i));
            let boundary = sample.boundary_mass.iter().zip(mesh.boundary_node_ids()).map(|(&m, &i)| ("boundary mass m_b", m, i));
            if let Some((name, m, i)) = bulk.chain(boundary).find(|&(_, m, _)| m > 0.0) {
                let p = mesh.coords()[i];
                return Err(Error::Hypothesis(vec![crate::error::Violation {
                    hypothesis: crate::error::Hypothesis::NonPositiveMass,
                    message: format!("{name} = {m} > 0 at t = {t}, x = {}, theta = {}", p.x, p.theta),
                }]));
            }
        }
        Ok(())
    }
}

/// Metric data evaluated at every node at a fixed time. Quadrature is the
/// nodal (trapezoidal / tensor-trapezoidal) rule, so quadrature points are
/// the mesh nodes.
#[derive(Debug, Clone)]
pub struct MetricSample {
    pub t: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `sqrt|g|` at each node.
    pub volume_density: Vec<f64>,
    /// Density of the induced boundary measure at each boundary node, in
    /// boundary order (`1` for the point boundary of the interval).
    pub boundary_density: Vec<f64>,
    /// `g^{xx} = 1/a^2` at each node.
    pub inv_metric_xx: Vec<f64>,
    /// `g^{theta theta} = 1/b^2` at each node (cylinder only, else 0).
    pub inv_metric_tt: Vec<f64>,
    /// Bulk mass function `m` at each node.
    pub mass: Vec<f64>,
    /// Boundary mass function `m_b` at each boundary node, in boundary order.
    pub boundary_mass: Vec<f64>,
}

/// Evaluates metric coefficients, densities and masses at time `t`.
pub fn sample_metric(spec: &MetricSpec, mesh: &Mesh, t: f64) -> Result<MetricSample> {
    let slack = 1e-9 * spec.horizon.max(1.0);
    if !(t >= -slack && t <= spec.horizon + slack) {
        return Err(Error::InvalidArgument(format!(
            "sample time {t} outside [0, {}]",
            spec.horizon
        )));
    }
    let n = mesh.dof_count();
    let cyl = mesh.kind() == MeshKind::Cylinder;
    let mut s = MetricSample {
        t,
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        volume_density: Vec::with_capacity(n),
        boundary_density: Vec::with_capacity(mesh.boundary_node_ids().len()),
        inv_metric_xx: Vec::with_capacity(n),
        inv_metric_tt: Vec::with_capacity(n),
        mass: Vec::with_capacity(n),
        boundary_mass: Vec::with_capacity(mesh.boundary_node_ids().len()),
    };
    let positive = |name: &'static str, v: f64, p: Point| -> Result<f64> {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonPositiveMetric { name, value: v, t, x: p.x, theta: p.theta })
        }
    };
    for &p in mesh.coords() {
        let a = positive("a", spec.a.eval(t, p), p)?;
        let b = if cyl { positive("b", spec.b.eval(t, p), p)? } else { 1.0 };
        let m = spec.mass.eval(t, p);
        if !m.is_finite() {
            return Err(Error::InvalidArgument(format!("bulk mass is not finite at t = {t}, x = {}, theta = {}", p.x, p.theta)));
        }
        s.a.push(a);
        s.b.push(b);
        s.volume_density.push(a * b);
        s.inv_metric_xx.push(1.0 / (a * a));
        s.inv_metric_tt.push(if cyl { 1.0 / (b * b) } else { 0.0 });
        s.mass.push(m);
    }
    for &node in mesh.boundary_node_ids() {
        let p = mesh.coords()[node];
        s.boundary_density.push(if cyl { s.b[node] } else { 1.0 });
        let mb = spec.boundary_mass.eval(t, p);
        if !mb.is_finite() {
            return Err(Error::InvalidArgument(format!("boundary mass is not finite at t = {t}, x = {}, theta = {}", p.x, p.theta)));
        }
        s.boundary_mass.push(mb);
    }
    Ok(s)
}

impl MetricSample {
    /// Volume of the bulk by the tensor trapezoidal rule.
    pub fn bulk_volume(&self, mesh: &Mesh) -> f64 {
        mesh.cells()
            .iter()
            .map(|c| {
                let avg = c.iter().map(|&n| self.volume_density[n]).sum::<f64>() / c.len() as f64;
                avg * cell_measure(mesh)
            })
            .sum()
    }

    /// Measure of the boundary (number of points for the interval).
    pub fn boundary_volume(&self, mesh: &Mesh) -> f64 {
        match mesh.kind() {
            MeshKind::Interval => self.boundary_density.iter().sum(),
            MeshKind::Cylinder => mesh
                .boundary_edges()
                .iter()
                .map(|&[i, j]| {
                    let si = mesh.trace_slot(i).unwrap();
                    let sj = mesh.trace_slot(j).unwrap();
                    0.5 * (self.boundary_density[si] + self.boundary_density[sj]) * mesh.htheta()
                })
                .sum(),
        }
    }
}

pub(crate) fn cell_measure(mesh: &Mesh) -> f64 {
    match mesh.kind() {
        MeshKind::Interval => mesh.hx(),
        MeshKind::Cylinder => mesh.hx() * mesh.htheta(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn interval_counts() {
        let m = Mesh::interval(1.0, 4).unwrap();
        assert_eq!(m.dof_count(), 5);
        assert_eq!(m.boundary_node_ids(), &[0, 4]);
        assert!(m.boundary_edges().is_empty());
        assert!(Mesh::interval(1.0, 1).is_err());
        assert!(Mesh::interval(0.0, 4).is_err());
        assert!(Mesh::interval(-1.0, 4).is_err());
    }

    #[test]
    fn cylinder_counts_and_periodicity() {
        let m = Mesh::cylinder(4, 8).unwrap();
        assert_eq!(m.dof_count(), 40);
        assert_eq!(m.boundary_node_ids().len(), 16);
        assert_eq!(m.boundary_edges().len(), 16);
        assert!(m.boundary_node_ids().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(m.node(2, 8), m.node(2, 0));
        assert!(Mesh::cylinder(1, 8).is_err());
        assert!(Mesh::cylinder(4, 2).is_err());
    }

    #[test]
    fn trace_map_is_injective_and_covers_boundary() {
        for mesh in [Mesh::interval(2.0, 7).unwrap(), Mesh::cylinder(5, 6).unwrap()] {
            let ids = mesh.boundary_node_ids();
            let set: HashSet<_> = ids.iter().copied().collect();
            assert_eq!(set.len(), ids.len());
            assert!(ids.iter().all(|&n| n < mesh.dof_count()));
            for (k, &n) in ids.iter().enumerate() {
                assert_eq!(mesh.trace_slot(n), Some(k));
            }
            let on_boundary = (0..mesh.dof_count()).filter(|&n| mesh.is_boundary(n)).count();
            assert_eq!(on_boundary, ids.len());
        }
    }

    #[test]
    fn flat_samples_have_unit_densities() {
        let spec = MetricSpec::flat(1.0);
        for mesh in [Mesh::interval(1.0, 6).unwrap(), Mesh::cylinder(3, 5).unwrap()] {
            let s = sample_metric(&spec, &mesh, 0.3).unwrap();
            assert!(s.volume_density.iter().all(|&d| d == 1.0));
            assert!(s.boundary_density.iter().all(|&d| d == 1.0));
        }
    }

    #[test]
    fn flat_cylinder_volume() {
        let mesh = Mesh::cylinder(7, 9).unwrap();
        let s = sample_metric(&MetricSpec::flat(1.0), &mesh, 0.0).unwrap();
        assert!((s.bulk_volume(&mesh) - 2.0 * PI).abs() < 1e-12);
        assert!((s.boundary_volume(&mesh) - 4.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn pulsating_boundary_density() {
        let mesh = Mesh::cylinder(4, 8).unwrap();
        let spec = MetricSpec::pulsating(MeshKind::Cylinder, 0.1, 1.0, 2.0 * PI);
        let s = sample_metric(&spec, &mesh, PI / 2.0).unwrap();
        assert!(s.boundary_density.iter().all(|&d| (d - 1.1).abs() < 1e-15));
    }

    #[test]
    fn negative_coefficient_is_rejected_with_location() {
        let mesh = Mesh::interval(1.0, 4).unwrap();
        let mut spec = MetricSpec::flat(1.0);
        spec.a = Field::expr("1 - 2*x").unwrap();
        match sample_metric(&spec, &mesh, 0.0) {
            Err(Error::NonPositiveMetric { name, x, .. }) => {
                assert_eq!(name, "a");
                assert_eq!(x, 0.5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn positive_mass_is_a_hypothesis_violation() {
        let mesh = Mesh::interval(1.0, 4).unwrap();
        let spec = MetricSpec::flat(1.0).with_constant_masses(1.0, 0.0);
        assert!(sample_metric(&spec, &mesh, 0.0).is_ok());
        assert!(matches!(spec.validate(&mesh, 3), Err(Error::Hypothesis(_))));
        let spec = MetricSpec::flat(1.0).with_constant_masses(0.0, 0.5);
        match spec.validate(&mesh, 3) {
            Err(Error::Hypothesis(v)) => assert!(v[0].message.starts_with("boundary mass")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn time_outside_horizon_rejected() {
        let mesh = Mesh::interval(1.0, 4).unwrap();
        assert!(sample_metric(&MetricSpec::flat(1.0), &mesh, 1.5).is_err());
    }
}
