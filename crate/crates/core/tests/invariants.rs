//! Structural invariants checked over random metrics, masses and states.

use proptest::prelude::*;

use wentzell::config::{config_from_value, load_config_str, set_path};
use wentzell::diagnostics::{dissipativity_check, energy, neumann_trace_reconstruct};
use wentzell::evolution::{midpoint_step_with, resolvent_solve};
use wentzell::random::{self, streams};
use wentzell::{DiscreteOperator, Expr, Field, Mesh, MeshKind, MetricSpec, NormKind, Point, StateVector, System};

fn mesh_for(kind: MeshKind, n: usize) -> Mesh {
    match kind {
        MeshKind::Interval => Mesh::interval(1.0, n).unwrap(),
        MeshKind::Cylinder => Mesh::cylinder(n, n).unwrap(),
    }
}

fn kind_strategy() -> impl Strategy<Value = MeshKind> {
    prop_oneof![Just(MeshKind::Interval), Just(MeshKind::Cylinder)]
}

/// Operator of a pulsating metric with strictly negative masses at time `t`.
fn operator(kind: MeshKind, n: usize, eps: f64, omega: f64, m: f64, m_b: f64, t: f64) -> (Mesh, std::sync::Arc<DiscreteOperator>) {
    let mesh = mesh_for(kind, n);
    let metric = MetricSpec::pulsating(kind, eps, omega, 1.0)
        .with_masses(Field::static_func(move |p: Point| m * (1.0 + 0.5 * p.x)), Field::constant(m_b));
    let op = System::new(mesh.clone(), metric).operator(t).unwrap();
    (mesh, op)
}

fn random_state(n: usize, seed: u64) -> StateVector<f64> {
    random::white_state(&mut random::stream(seed, streams::DATA), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generator_is_skew_in_the_energy_product(
        kind in kind_strategy(), n in 3usize..10, eps in 0.0..0.4f64, omega in 0.5..4.0f64,
        m in -3.0..-0.1f64, m_b in -3.0..-0.1f64, t in 0.0..1.0f64, seed in any::<u64>(),
    ) {
        let (_, op) = operator(kind, n, eps, omega, m, m_b, t);
        let report = dissipativity_check(&op, 4, seed).unwrap();
        prop_assert!(report.pass, "{report}");
    }

    #[test]
    fn mass_is_definite_and_stiffness_nonnegative(
        kind in kind_strategy(), n in 3usize..10, eps in 0.0..0.4f64, m in -3.0..0.0f64, t in 0.0..1.0f64, seed in any::<u64>(),
    ) {
        let (mesh, op) = operator(kind, n, eps, 2.0, m, m, t);
        let x = random_state(mesh.dof_count(), seed);
        prop_assert!(op.mass().quad_form(&x.u) > 0.0);
        let k = op.stiff().quad_form(&x.u);
        let scale = op.stiff().matvec(&x.u).iter().map(|v| v.abs()).sum::<f64>() + 1.0;
        prop_assert!(k >= -1e-12 * scale, "negative stiffness form {k}");
    }

    #[test]
    fn frozen_midpoint_step_conserves_energy(
        kind in kind_strategy(), n in 3usize..10, eps in 0.0..0.4f64, dt in 1e-3..0.5f64,
        m in -3.0..-0.1f64, m_b in -3.0..-0.1f64, seed in any::<u64>(),
    ) {
        let (mesh, op) = operator(kind, n, eps, 2.0, m, m_b, 0.3);
        let x = random_state(mesh.dof_count(), seed);
        let y = midpoint_step_with(&op, &x, dt, None).unwrap().state;
        let (e0, e1) = (energy(&op, &x).unwrap(), energy(&op, &y).unwrap());
        prop_assert!(((e1 - e0) / e0).abs() < 1e-11, "{e0} -> {e1}");
    }

    #[test]
    fn midpoint_step_is_reversible(
        kind in kind_strategy(), n in 3usize..10, dt in 1e-3..0.5f64, m in -3.0..-0.1f64, seed in any::<u64>(),
    ) {
        let (mesh, op) = operator(kind, n, 0.2, 2.0, m, -1.0, 0.5);
        let x = random_state(mesh.dof_count(), seed);
        let y = midpoint_step_with(&op, &x, dt, None).unwrap().state;
        let back = midpoint_step_with(&op, &y, -dt, None).unwrap().state;
        let err = op.norm(NormKind::Energy, &back.sub(&x)).unwrap() / op.norm(NormKind::Energy, &x).unwrap();
        prop_assert!(err < 1e-10, "round trip error {err}");
    }

    #[test]
    fn resolvent_is_a_contraction_scaled_by_lambda(
        kind in kind_strategy(), n in 3usize..10, eps in 0.0..0.4f64, lambda in 0.05..50.0f64,
        m in -3.0..-0.1f64, m_b in -3.0..-0.1f64, seed in any::<u64>(),
    ) {
        let (mesh, op) = operator(kind, n, eps, 2.0, m, m_b, 0.7);
        let f = random_state(mesh.dof_count(), seed);
        let sol = resolvent_solve(&op, lambda, &f).unwrap();
        prop_assert!(sol.residual < 1e-9);
        let ratio = lambda * op.norm(NormKind::Energy, &sol.state).unwrap() / op.norm(NormKind::Energy, &f).unwrap();
        prop_assert!(ratio <= 1.0 + 1e-10, "lambda ||R f|| / ||f|| = {ratio}");
    }

    #[test]
    fn neumann_trace_of_affine_data_is_its_slope(n in 4usize..40, a in -5.0..5.0f64, b in -5.0..5.0f64) {
        let mesh = Mesh::interval(1.0, n).unwrap();
        let op = System::new(mesh.clone(), MetricSpec::flat(1.0)).operator(0.0).unwrap();
        let u = mesh.interpolate(|p| a + b * p.x);
        let flux = neumann_trace_reconstruct(&op, &mesh, &u).unwrap();
        prop_assert_eq!(flux.len(), 2);
        prop_assert!((flux[0] + b).abs() < 1e-9 * (1.0 + b.abs()), "left flux {}", flux[0]);
        prop_assert!((flux[1] - b).abs() < 1e-9 * (1.0 + b.abs()), "right flux {}", flux[1]);
    }

    #[test]
    fn expressions_match_direct_evaluation(a in -10.0..10.0f64, b in -10.0..10.0f64, c in -3.0..3.0f64, t in 0.0..2.0f64, x in 0.0..1.0f64, theta in 0.0..6.28f64) {
        let e = Expr::parse(&format!("({a})*x^2 + ({b})*sin(({c})*t) - cos(theta)/2")).unwrap();
        let direct = a * x * x + b * (c * t).sin() - theta.cos() / 2.0;
        let got = e.eval(t, Point { x, theta });
        prop_assert!((got - direct).abs() <= 1e-12 * (1.0 + direct.abs()), "{got} vs {direct}");
    }

    #[test]
    fn sweep_paths_overwrite_config_values(eps in 0.0..0.45f64, n_x in 2i64..64) {
        let src = "[geometry]\nkind = \"interval\"\nn_x = 8\n\n[metric]\nfamily = \"pulsating\"\neps = 0.1\nhorizon = 1.0\n";
        let mut raw = load_config_str(src, false).unwrap().raw;
        set_path(&mut raw, "metric.eps", toml::Value::Float(eps)).unwrap();
        set_path(&mut raw, "geometry.n_x", toml::Value::Integer(n_x)).unwrap();
        let cfg = config_from_value(raw).unwrap();
        prop_assert_eq!(cfg.metric.eps, eps);
        prop_assert_eq!(cfg.geometry.n_x, n_x as usize);
    }
}
