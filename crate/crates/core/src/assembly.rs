//! Galerkin assembly of the mass and generalized-stiffness operators.
//!
//! With conforming piecewise-(bi)linear elements the boundary unknowns are the
//! bulk unknowns on the boundary, so testing the bulk and boundary equations
//! with one test function merges the Neumann trace into the weak form. The
//! whole discrete generator is then described by two symmetric matrices:
//!
//! * `Mass`  : `int_M u phi dg + int_dM u phi dh`
//! * `Stiff` : `int_M g(grad u, grad phi) dg + int_dM h(grad_b u, grad_b phi) dh
//!              - int_M m u phi dg - int_dM m_b u phi dh`
//!
//! and the first-order system reads `u' = w`, `Mass w' = -Stiff u + load`.

use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::geometry::{Mesh, MeshKind, MetricSample};
use crate::scalar::Scalar;
use crate::sparse::{SparseMatrix, SpdSolver};

/// Discrete state `(u, w)`: nodal values of the field and of its velocity.
/// Boundary values are the restrictions to the boundary nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector<S = f64> {
    pub u: Vec<S>,
    pub w: Vec<S>,
}

impl<S: Scalar> StateVector<S> {
    pub fn new(u: Vec<S>, w: Vec<S>) -> Result<Self> {
        if u.len() != w.len() {
            return Err(Error::Dimension { expected: u.len(), got: w.len() });
        }
        Ok(Self { u, w })
    }

    pub fn zeros(n: usize) -> Self {
        Self { u: vec![S::zero(); n], w: vec![S::zero(); n] }
    }

    pub fn dofs(&self) -> usize {
        self.u.len()
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &Self) -> Self {
        let f = |a: &[S], b: &[S]| a.iter().zip(b).map(|(&x, &y)| x + y.scale(alpha)).collect();
        Self { u: f(&self.u, &other.u), w: f(&self.w, &other.w) }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.axpy(-1.0, other)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            u: self.u.iter().map(|v| v.scale(s)).collect(),
            w: self.w.iter().map(|v| v.scale(s)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.w).all(|v| v.is_finite())
    }

    /// Flattened `[u; w]`.
    pub fn to_flat(&self) -> Vec<S> {
        self.u.iter().chain(&self.w).copied().collect()
    }

    pub fn from_flat(v: &[S]) -> Self {
        let n = v.len() / 2;
        Self { u: v[..n].to_vec(), w: v[n..].to_vec() }
    }

    /// Time reversal `(u, w) -> (u, -w)`.
    pub fn reversed(&self) -> Self {
        Self { u: self.u.clone(), w: self.w.iter().map(|&v| -v).collect() }
    }
}

/// Which norm of the state space to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// The energy norm `||u||_V^2 + ||w||_U^2` built from `Stiff` and `Mass`.
    Energy,
    /// Energy plus `||u||_U^2`; a true norm even when both masses vanish and
    /// the energy form is only a seminorm.
    Graph,
}

/// Assembled operators at a fixed time.
#[derive(Debug)]
pub struct DiscreteOperator {
    t: f64,
    bulk_mass: SparseMatrix,
    boundary_mass: SparseMatrix,
    bulk_gradient: SparseMatrix,
    boundary_gradient: SparseMatrix,
    mass: SparseMatrix,
    stiff: SparseMatrix,
    stiff_definite: bool,
    /// `1 / diag(Mass)` when `Mass` is diagonal.
    mass_inv_diag: Option<Vec<f64>>,
    mass_solver: OnceLock<Result<Arc<SpdSolver>>>,
    shifted: Mutex<Vec<((u64, u64), Arc<SpdSolver>)>>,
}

/// Quadrature for the zeroth-order (mass and potential) integrands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quadrature {
    /// Trapezoidal nodal rule: diagonal mass, five-point gradient stencil on
    /// the cylinder.
    #[default]
    Nodal,
    /// Exact integration of the piecewise-(bi)linear products with
    /// cell-averaged coefficients.
    Consistent,
}

/// Assembles `Mass` and `Stiff` from a metric sample with nodal quadrature.
pub fn assemble(mesh: &Mesh, sample: &MetricSample) -> Result<DiscreteOperator> {
    assemble_with(mesh, sample, Quadrature::Nodal)
}

pub fn assemble_with(mesh: &Mesh, sample: &MetricSample, quadrature: Quadrature) -> Result<DiscreteOperator> {
    let n = mesh.dof_count();
    if sample.volume_density.len() != n {
        return Err(Error::Dimension { expected: n, got: sample.volume_density.len() });
    }
    if sample.boundary_density.len() != mesh.boundary_node_ids().len() {
        return Err(Error::Dimension {
            expected: mesh.boundary_node_ids().len(),
            got: sample.boundary_density.len(),
        });
    }
    // The sign of the masses is a hypothesis gated by the caller; only finiteness is structural.
    if let Some(m) = sample.mass.iter().chain(&sample.boundary_mass).find(|m| !m.is_finite()) {
        return Err(Error::InvalidArgument(format!("mass value {m} passed to assembly is not finite")));
    }


    let pattern = SparseMatrix::symmetric_pattern(
        n,
        mesh.cells().iter().flat_map(|c| {
            c.iter().flat_map(move |&i| c.iter().map(move |&j| (i, j)))
        }),
    );
    let mut bulk_mass = pattern.zeros_like();
    let mut boundary_mass = pattern.zeros_like();
    let mut bulk_gradient = pattern.zeros_like();
    let mut boundary_gradient = pattern.zeros_like();
    let mut bulk_potential = pattern.zeros_like();
    let mut boundary_potential = pattern.zeros_like();

    let hx = mesh.hx();
    let k1 = |h: f64| [[1.0 / h, -1.0 / h], [-1.0 / h, 1.0 / h]];
    let m1 = |h: f64| match quadrature {
        Quadrature::Nodal => [[h / 2.0, 0.0], [0.0, h / 2.0]],
        Quadrature::Consistent => [[h / 3.0, h / 6.0], [h / 6.0, h / 3.0]],
    };
    let (kx1, mx1) = (k1(hx), m1(hx));

    // per-node integrand coefficients
    let rho = &sample.volume_density;
    let kx: Vec<f64> = (0..n).map(|i| sample.inv_metric_xx[i] * rho[i]).collect();
    let kt: Vec<f64> = (0..n).map(|i| sample.inv_metric_tt[i] * rho[i]).collect();
    let pot: Vec<f64> = (0..n).map(|i| -sample.mass[i] * rho[i]).collect();
    let avg = |nodes: &[usize], f: &[f64]| nodes.iter().map(|&i| f[i]).sum::<f64>() / nodes.len() as f64;
    // Nodal quadrature evaluates zeroth-order integrands at the nodes; the
    // consistent rule integrates the cell-averaged coefficient exactly.
    let zeroth = |nodes: &[usize], f: &[f64], a: usize| match quadrature {
        Quadrature::Nodal => f[nodes[a]],
        Quadrature::Consistent => avg(nodes, f),
    };

    match mesh.kind() {
        MeshKind::Interval => {
            for c in mesh.cells() {
                let k = avg(c, &kx);
                for a in 0..2 {
                    for b in 0..2 {
                        let (gi, gj) = (c[a], c[b]);
                        if gi <= gj {
                            bulk_mass.add(gi, gj, zeroth(c, rho, a) * mx1[a][b]);
                            bulk_gradient.add(gi, gj, k * kx1[a][b]);
                            bulk_potential.add(gi, gj, zeroth(c, &pot, a) * mx1[a][b]);
                        }
                    }
                }
            }
            for (slot, &node) in mesh.boundary_node_ids().iter().enumerate() {
                let d = sample.boundary_density[slot];
                boundary_mass.add(node, node, d);
                boundary_potential.add(node, node, -sample.boundary_mass[slot] * d);
            }
        }
        MeshKind::Cylinder => {
            let ht = mesh.htheta();
            let (kt1, mt1) = (k1(ht), m1(ht));
            const LOCAL: [(usize, usize); 4] = [(0, 0), (1, 0), (1, 1), (0, 1)];
            for c in mesh.cells() {
                let at = |ix: usize, jt: usize| c[LOCAL.iter().position(|&l| l == (ix, jt)).unwrap()];
                for (a, &(ia, ja)) in LOCAL.iter().enumerate() {
                    for (b, &(ib, jb)) in LOCAL.iter().enumerate() {
                        let (gi, gj) = (c[a], c[b]);
                        if gi > gj {
                            continue;
                        }
                        let mm = mx1[ia][ib] * mt1[ja][jb];
                        if mm != 0.0 {
                            bulk_mass.add(gi, gj, zeroth(c, rho, a) * mm);
                            bulk_potential.add(gi, gj, zeroth(c, &pot, a) * mm);
                        }
                        let (kxa, kta) = match quadrature {
                            Quadrature::Consistent => (avg(c, &kx), avg(c, &kt)),
                            // edge-averaged coefficients along the edge that carries the pair
                            Quadrature::Nodal => (
                                avg(&[at(0, ja), at(1, ja)], &kx),
                                avg(&[at(ia, 0), at(ia, 1)], &kt),
                            ),
                        };
                        let g = kxa * kx1[ia][ib] * mt1[ja][jb] + kta * mx1[ia][ib] * kt1[ja][jb];
                        if g != 0.0 {
                            bulk_gradient.add(gi, gj, g);
                        }
                    }
                }
            }
            let dens = &sample.boundary_density;
            let bpot: Vec<f64> =
                dens.iter().zip(&sample.boundary_mass).map(|(d, m)| -m * d).collect();
            let binv: Vec<f64> = dens.iter().map(|d| 1.0 / d).collect();
            for &[i, j] in mesh.boundary_edges() {
                let slots = [mesh.trace_slot(i).unwrap(), mesh.trace_slot(j).unwrap()];
                let k = avg(&slots, &binv);
                let nodes = [i, j];
                for a in 0..2 {
                    for b in 0..2 {
                        let (gi, gj) = (nodes[a], nodes[b]);
                        if gi <= gj {
                            boundary_mass.add(gi, gj, zeroth(&slots, dens, a) * mt1[a][b]);
                            boundary_gradient.add(gi, gj, k * kt1[a][b]);
                            boundary_potential.add(gi, gj, zeroth(&slots, &bpot, a) * mt1[a][b]);
                        }
                    }
                }
            }
        }
    }

    for m in [
        &mut bulk_mass,
        &mut boundary_mass,
        &mut bulk_gradient,
        &mut boundary_gradient,
        &mut bulk_potential,
        &mut boundary_potential,
    ] {
        m.mirror_upper();
    }
    let mass = bulk_mass.combine(1.0, &boundary_mass, 1.0);
    let stiff = bulk_gradient
        .combine(1.0, &boundary_gradient, 1.0)
        .combine(1.0, &bulk_potential, 1.0)
        .combine(1.0, &boundary_potential, 1.0);
    let masses = || sample.mass.iter().chain(&sample.boundary_mass);
    let stiff_definite = masses().all(|&m| m <= 0.0) && masses().any(|&m| m < 0.0);

    Ok(DiscreteOperator {
        t: sample.t,
        bulk_mass,
        boundary_mass,
        bulk_gradient,
        boundary_gradient,
        mass_inv_diag: inverse_diagonal(&mass),
        mass,
        stiff,
        stiff_definite,
        mass_solver: OnceLock::new(),
        shifted: Mutex::new(Vec::new()),
    })
}

fn inverse_diagonal(m: &SparseMatrix) -> Option<Vec<f64>> {
    m.triplets()
        .all(|(i, j, v)| i == j || v == 0.0)
        .then(|| m.diagonal().iter().map(|d| 1.0 / d).collect())
}

impl DiscreteOperator {
    /// Builds an operator directly from `Mass` and `Stiff` (no bulk/boundary
    /// split; loads then treat everything as bulk). Intended for fixtures.
    pub fn from_matrices(t: f64, mass: SparseMatrix, stiff: SparseMatrix, stiff_definite: bool) -> Result<Self> {
        if mass.dim() != stiff.dim() {
            return Err(Error::Dimension { expected: mass.dim(), got: stiff.dim() });
        }
        let zero = mass.zeros_like();
        Ok(Self {
            t,
            bulk_mass: mass.clone(),
            boundary_mass: zero.clone(),
            bulk_gradient: stiff.clone(),
            boundary_gradient: zero,
            mass_inv_diag: inverse_diagonal(&mass),
            mass,
            stiff,
            stiff_definite,
            mass_solver: OnceLock::new(),
            shifted: Mutex::new(Vec::new()),
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }
    pub fn dofs(&self) -> usize {
        self.mass.dim()
    }
    pub fn mass(&self) -> &SparseMatrix {
        &self.mass
    }
    pub fn stiff(&self) -> &SparseMatrix {
        &self.stiff
    }
    pub fn bulk_mass(&self) -> &SparseMatrix {
        &self.bulk_mass
    }
    pub fn boundary_mass(&self) -> &SparseMatrix {
        &self.boundary_mass
    }
    /// Gradient part of the bulk stiffness, `int_M g(grad u, grad phi) dg`.
    pub fn bulk_gradient(&self) -> &SparseMatrix {
        &self.bulk_gradient
    }
    pub fn boundary_gradient(&self) -> &SparseMatrix {
        &self.boundary_gradient
    }

    /// Whether `Stiff` is positive definite (some mass strictly negative).
    pub fn stiff_is_definite(&self) -> bool {
        self.stiff_definite
    }

    /// Norm used for a priori bounds: energy when it is a norm, graph otherwise.
    pub fn control_norm_kind(&self) -> NormKind {
        if self.stiff_definite {
            NormKind::Energy
        } else {
            NormKind::Graph
        }
    }

    pub fn mass_solver(&self) -> Result<Arc<SpdSolver>> {
        match self.mass_solver.get_or_init(|| SpdSolver::new(&self.mass).map(Arc::new)) {
            Ok(s) => Ok(s.clone()),
            Err(e) => Err(Error::Solver(format!("mass factorization: {e}"))),
        }
    }

    /// Cached solver for `alpha * Mass + beta * Stiff`.
    pub fn shifted_solver(&self, alpha: f64, beta: f64) -> Result<Arc<SpdSolver>> {
        let key = (alpha.to_bits(), beta.to_bits());
        {
            let cache = self.shifted.lock().expect("solver cache poisoned");
            if let Some((_, s)) = cache.iter().find(|(k, _)| *k == key) {
                return Ok(s.clone());
            }
        }
        let solver = Arc::new(SpdSolver::new(&self.mass.combine(alpha, &self.stiff, beta))?);
        let mut cache = self.shifted.lock().expect("solver cache poisoned");
        if cache.len() >= 8 {
            cache.remove(0);
        }
        cache.push((key, solver.clone()));
        Ok(solver)
    }

    pub fn solve_mass<S: Scalar>(&self, rhs: &[S]) -> Result<Vec<S>> {
        if let Some(d) = &self.mass_inv_diag {
            if rhs.len() != d.len() {
                return Err(Error::Dimension { expected: d.len(), got: rhs.len() });
            }
            return Ok(rhs.iter().zip(d).map(|(&r, &di)| r.scale(di)).collect());
        }
        self.mass_solver()?.solve(rhs)
    }

    fn check<S: Scalar>(&self, x: &StateVector<S>) -> Result<()> {
        let n = self.dofs();
        if x.u.len() != n || x.w.len() != n {
            return Err(Error::Dimension { expected: n, got: x.u.len().max(x.w.len()) });
        }
        Ok(())
    }

    /// Inner product of the state space, `u_X^T Stiff conj(u_Y) + w_X^T Mass conj(w_Y)`.
    pub fn x_inner<S: Scalar>(&self, x: &StateVector<S>, y: &StateVector<S>) -> Result<S> {
        self.check(x)?;
        self.check(y)?;
        Ok(self.stiff.bilinear(&x.u, &y.u) + self.mass.bilinear(&x.w, &y.w))
    }

    pub fn x_norm<S: Scalar>(&self, x: &StateVector<S>) -> Result<f64> {
        Ok(self.x_inner(x, x)?.re().max(0.0).sqrt())
    }

    /// `V` inner product of two nodal fields.
    pub fn v_inner<S: Scalar>(&self, a: &[S], b: &[S]) -> S {
        self.stiff.bilinear(a, b)
    }

    /// `U` inner product of two nodal fields.
    pub fn u_inner<S: Scalar>(&self, a: &[S], b: &[S]) -> S {
        self.mass.bilinear(a, b)
    }

    pub fn norm<S: Scalar>(&self, kind: NormKind, x: &StateVector<S>) -> Result<f64> {
        let e = self.x_inner(x, x)?.re();
        let sq = match kind {
            NormKind::Energy => e,
            NormKind::Graph => e + self.mass.bilinear(&x.u, &x.u).re(),
        };
        Ok(sq.max(0.0).sqrt())
    }

    pub fn control_norm<S: Scalar>(&self, x: &StateVector<S>) -> Result<f64> {
        self.norm(self.control_norm_kind(), x)
    }

    /// Gram matrix of a norm as a sparse block pair `(G_u, G_w)`.
    pub fn gram_blocks(&self, kind: NormKind) -> (SparseMatrix, &SparseMatrix) {
        match kind {
            NormKind::Energy => (self.stiff.clone(), &self.mass),
            NormKind::Graph => (self.stiff.combine(1.0, &self.mass, 1.0), &self.mass),
        }
    }

    /// Action of the discrete generator: `(u, w) -> (w, -Mass^{-1} Stiff u)`.
    pub fn apply_generator<S: Scalar>(&self, x: &StateVector<S>) -> Result<StateVector<S>> {
        self.check(x)?;
        let ku = self.stiff.matvec(&x.u);
        let acc = self.solve_mass(&ku)?;
        Ok(StateVector { u: x.w.clone(), w: acc.into_iter().map(|v| -v).collect() })
    }

    /// `A_h X = -apply_generator(X) = (-w, Mass^{-1} Stiff u)`.
    pub fn apply_a<S: Scalar>(&self, x: &StateVector<S>) -> Result<StateVector<S>> {
        let g = self.apply_generator(x)?;
        Ok(g.scaled(-1.0))
    }

    /// Load vector of a pair of nodal fields `(f on M, g on dM)`: the
    /// interpolate-then-integrate rule `BulkMass f + BoundaryMass g`.
    /// `g` is given on all nodes; only its boundary values matter.
    pub fn load(&self, bulk: &[f64], boundary: &[f64]) -> Vec<f64> {
        let mut l = self.bulk_mass.matvec(bulk);
        let b = self.boundary_mass.matvec(boundary);
        for (a, b) in l.iter_mut().zip(b) {
            *a += b;
        }
        l
    }

    /// State-space representative `(0, Mass^{-1} load)` of a load vector.
    pub fn load_to_state(&self, load: &[f64]) -> Result<StateVector<f64>> {
        Ok(StateVector { u: vec![0.0; load.len()], w: self.solve_mass(load)? })
    }

    /// `||(0, Mass^{-1} load)||_X = sqrt(load^T Mass^{-1} load)`.
    pub fn load_norm(&self, load: &[f64]) -> Result<f64> {
        let w = self.solve_mass(load)?;
        Ok(load.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt())
    }
}

pub fn apply_generator<S: Scalar>(op: &DiscreteOperator, x: &StateVector<S>) -> Result<StateVector<S>> {
    op.apply_generator(x)
}

pub fn x_inner<S: Scalar>(op: &DiscreteOperator, x: &StateVector<S>, y: &StateVector<S>) -> Result<S> {
    op.x_inner(x, y)
}

pub fn x_norm<S: Scalar>(op: &DiscreteOperator, x: &StateVector<S>) -> Result<f64> {
    op.x_norm(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_metric, MetricSpec};
    use num_complex::Complex64;
    use std::f64::consts::PI;

    fn op_for(mesh: &Mesh, spec: &MetricSpec, t: f64) -> DiscreteOperator {
        assemble(mesh, &sample_metric(spec, mesh, t).unwrap()).unwrap()
    }

    #[test]
    fn flat_interval_two_cells_textbook_matrices() {
        let mesh = Mesh::interval(1.0, 2).unwrap();
        let sample = sample_metric(&MetricSpec::flat(1.0), &mesh, 0.0).unwrap();
        let op = assemble_with(&mesh, &sample, Quadrature::Consistent).unwrap();
        let h: f64 = 0.5;
        let k = op.stiff().to_dense();
        let expect_k = [[2.0, -2.0, 0.0], [-2.0, 4.0, -2.0], [0.0, -2.0, 2.0]];
        let m = op.mass().to_dense();
        let expect_m = [
            [h / 3.0 + 1.0, h / 6.0, 0.0],
            [h / 6.0, 2.0 * h / 3.0, h / 6.0],
            [0.0, h / 6.0, h / 3.0 + 1.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((k[(i, j)] - expect_k[i][j]).abs() < 1e-15, "K[{i},{j}]");
                assert!((m[(i, j)] - expect_m[i][j]).abs() < 1e-15, "M[{i},{j}]");
            }
        }
    }

    #[test]
    fn nodal_rule_gives_diagonal_mass_and_five_point_stencil() {
        let mesh = Mesh::cylinder(4, 6).unwrap();
        let op = op_for(&mesh, &MetricSpec::flat(1.0), 0.0);
        let (hx, ht) = (mesh.hx(), mesh.htheta());
        let m = op.mass().to_dense();
        let k = op.stiff().to_dense();
        let centre = mesh.node(2, 3);
        assert!((m[(centre, centre)] - hx * ht).abs() < 1e-15);
        assert_eq!(m[(centre, mesh.node(2, 4))], 0.0);
        assert_eq!(k[(centre, mesh.node(3, 4))], 0.0);
        assert!((k[(centre, mesh.node(3, 3))] + ht / hx).abs() < 1e-14);
        assert!((k[(centre, mesh.node(2, 4))] + hx / ht).abs() < 1e-14);
        let rim = mesh.node(0, 1);
        assert!((m[(rim, rim)] - (hx * ht / 2.0 + ht)).abs() < 1e-15);
    }

    #[test]
    fn constants_are_annihilated_without_masses() {
        for (mesh, q) in [Mesh::interval(1.3, 9).unwrap(), Mesh::cylinder(5, 7).unwrap()]
            .into_iter()
            .flat_map(|m| [(m.clone(), Quadrature::Nodal), (m, Quadrature::Consistent)])
        {
            let spec = MetricSpec::conformal_pulse(mesh.length(), 0.2, 1.0, 2.0);
            let op = assemble_with(&mesh, &sample_metric(&spec, &mesh, 1.1).unwrap(), q).unwrap();
            let ones = vec![1.0; mesh.dof_count()];
            let k1 = op.stiff().matvec(&ones);
            assert!(k1.iter().all(|v| v.abs() < 1e-12));
            assert!(op.stiff().quad_form(&ones).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_cylinder_unit_masses_give_6pi() {
        let mesh = Mesh::cylinder(6, 10).unwrap();
        let spec = MetricSpec::flat(1.0).with_constant_masses(-1.0, -1.0);
        let op = op_for(&mesh, &spec, 0.0);
        let ones = vec![1.0; mesh.dof_count()];
        assert!((op.stiff().quad_form(&ones) - 6.0 * PI).abs() < 1e-10);
        let x = StateVector::new(ones.clone(), vec![0.0; ones.len()]).unwrap();
        assert!((op.x_inner(&x, &x).unwrap() - 6.0 * PI).abs() < 1e-10);
    }

    #[test]
    fn stiff_of_constants_equals_minus_integrated_masses() {
        let mesh = Mesh::interval(2.0, 8).unwrap();
        let spec = MetricSpec::flat(1.0).with_constant_masses(-0.5, -2.0);
        let op = op_for(&mesh, &spec, 0.0);
        let ones = vec![1.0; mesh.dof_count()];
        // -int m dx - sum_{endpoints} m_b = 0.5*2 + 2*2
        assert!((op.stiff().quad_form(&ones) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn matrices_are_bitwise_symmetric() {
        let mesh = Mesh::cylinder(5, 6).unwrap();
        let spec = MetricSpec::conformal_pulse(1.0, 0.3, 2.0, 3.0)
            .with_masses(crate::expr::Field::expr("-1 - x*cos(theta)^2").unwrap(), crate::expr::Field::constant(-0.3));
        let op = op_for(&mesh, &spec, 0.7);
        assert!(op.mass().is_exactly_symmetric());
        assert!(op.stiff().is_exactly_symmetric());
    }

    #[test]
    fn generator_kills_zero_and_constants() {
        let mesh = Mesh::cylinder(4, 5).unwrap();
        let op = op_for(&mesh, &MetricSpec::flat(1.0), 0.0);
        let n = mesh.dof_count();
        let z = op.apply_generator(&StateVector::<f64>::zeros(n)).unwrap();
        assert!(z.u.iter().chain(&z.w).all(|&v| v == 0.0));
        let c = StateVector::new(vec![3.0; n], vec![0.0; n]).unwrap();
        let g = op.apply_generator(&c).unwrap();
        assert!(g.u.iter().chain(&g.w).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn generator_matches_dense_oracle() {
        let mesh = Mesh::interval(1.0, 20).unwrap();
        let op = op_for(&mesh, &MetricSpec::flat(1.0), 0.0);
        let u = mesh.interpolate(|p| (PI * p.x).sin());
        let x = StateVector::new(u.clone(), vec![0.0; u.len()]).unwrap();
        let g = op.apply_generator(&x).unwrap();
        let md = op.mass().to_dense();
        let kd = op.stiff().to_dense();
        let ku = &kd * nalgebra::DVector::from_vec(u);
        let dense = md.lu().solve(&ku).unwrap();
        for i in 0..g.w.len() {
            assert!((g.w[i] + dense[i]).abs() < 1e-9 * (1.0 + dense[i].abs()));
        }
    }

    #[test]
    fn inner_product_is_hermitian() {
        let mesh = Mesh::cylinder(3, 4).unwrap();
        let spec = MetricSpec::flat(1.0).with_constant_masses(-1.0, 0.0);
        let op = op_for(&mesh, &spec, 0.0);
        let n = mesh.dof_count();
        let mk = |s: f64| {
            StateVector::new(
                (0..n).map(|i| Complex64::new((i as f64 * s).sin(), (i as f64 * 0.3 * s).cos())).collect(),
                (0..n).map(|i| Complex64::new((i as f64 + s).cos(), -(i as f64 * s).sin())).collect(),
            )
            .unwrap()
        };
        let (x, y) = (mk(0.7), mk(1.9));
        let xy = op.x_inner(&x, &y).unwrap();
        let yx = op.x_inner(&y, &x).unwrap();
        assert!((xy - yx.conj()).norm() < 1e-12 * xy.norm().max(1.0));
        assert!(op.x_inner(&x, &x).unwrap().re >= 0.0);
    }

    #[test]
    fn total_mass_is_resolution_independent() {
        let spec = MetricSpec::flat(1.0);
        let vols: Vec<f64> = [4, 8, 16]
            .iter()
            .map(|&n| {
                let mesh = Mesh::cylinder(n, n).unwrap();
                let op = op_for(&mesh, &spec, 0.0);
                op.mass().quad_form(&vec![1.0; mesh.dof_count()])
            })
            .collect();
        for v in vols {
            assert!((v - 6.0 * PI).abs() < 1e-10);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mesh = Mesh::interval(1.0, 4).unwrap();
        let op = op_for(&mesh, &MetricSpec::flat(1.0), 0.0);
        let bad = StateVector::<f64>::zeros(3);
        assert!(matches!(op.apply_generator(&bad), Err(Error::Dimension { .. })));
        assert!(StateVector::new(vec![0.0; 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn mixed_sign_masses_lose_definiteness_and_nan_is_rejected() {
        let mesh = Mesh::interval(1.0, 4).unwrap();
        let mut s = sample_metric(&MetricSpec::flat(1.0).with_constant_masses(-1.0, -1.0), &mesh, 0.0).unwrap();
        assert!(assemble(&mesh, &s).unwrap().stiff_is_definite());
        s.mass[2] = 0.1;
        let op = assemble(&mesh, &s).unwrap();
        assert!(!op.stiff_is_definite());
        assert_eq!(op.control_norm_kind(), NormKind::Graph);
        s.mass[2] = f64::NAN;
        assert!(matches!(assemble(&mesh, &s), Err(Error::InvalidArgument(_))));
    }
}
