mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpcoil::coil_fields::{CoilFieldSet, CoilGeometry};
use vpcoil::control_opt::*;
use vpcoil::target::TargetSpec;
use vpcoil::transport::random_admissible;

fn random_direction(template: &ControlGrid, rng: &mut ChaCha8Rng) -> ControlGrid {
    let vals = (0..template.n_coils()).map(|_| (0..template.n_cells()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    template.with_values(vals)
}

#[test]
fn zero_target_cost_and_gradient() {
    let pb = bump_problem(0.5, 2, 8, 0.1, 1.0, TargetSpec::Zero);
    let u = pb.template.map_values(|i, m, _| 0.3 - 0.2 * (i + m) as f64);
    let g = pb.gradient(&u).unwrap();
    assert_eq!(g.cost.tracking, 0.5 * pb.initial_norm_sq());
    assert!(g.moment.p.iter().flatten().all(|p| *p == 0.0));
    for i in 0..2 {
        for m in 0..2 {
            assert_eq!(g.grad.u[i][m], 0.1 * u.u[i][m]);
        }
    }
    let err = pb.evaluate_cost(&u.map_values(|_, _, _| 2.0)).unwrap_err();
    assert!(err.to_string().contains("outside"));
}

#[test]
fn matching_target_over_a_short_horizon_costs_little() {
    let pb = bump_problem(1e-3, 1, 4, 1.0, 1.0, TargetSpec::Bump(unit_bump()));
    let c = pb.evaluate_cost(&pb.template).unwrap();
    // the residual is the gap between the particle quadrature of ‖f̊‖² and its closed form
    let gap = (pb.initial_norm_sq() - unit_bump().l2_norm().powi(2)).abs();
    assert!(c.j.abs() <= 0.5 * gap + 1e-6, "{} vs {gap}", c.j);
}

#[test]
fn gradient_matches_directional_differences() {
    let pb = bump_problem(0.5, 2, 8, 0.05, 2.0, shifted_bump());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..3 {
        let u = random_admissible(&pb.template, &mut rng).scaled(0.5);
        let h = random_direction(&pb.template, &mut rng);
        let g = pb.gradient(&u).unwrap();
        let alpha = 1e-3;
        let jp = pb.evaluate_cost(&u.axpy(alpha, &h)).unwrap().j;
        let jm = pb.evaluate_cost(&u.axpy(-alpha, &h)).unwrap().j;
        let fd = (jp - jm) / (2.0 * alpha);
        let adj = g.grad.inner(&h);
        assert!((fd - adj).abs() <= 1e-3 * fd.abs().max(1e-12), "fd {fd} adjoint {adj}");
    }
}

#[test]
fn second_derivative_is_symmetric_bilinear_and_matches_differences() {
    let pb = bump_problem(0.5, 2, 8, 0.05, 2.0, shifted_bump());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = random_admissible(&pb.template, &mut rng).scaled(0.5);
    let h = random_direction(&pb.template, &mut rng);
    let k = random_direction(&pb.template, &mut rng);
    let hk = pb.second_derivative(&u, &h, &k).unwrap();
    let kh = pb.second_derivative(&u, &k, &h).unwrap();
    assert!((hk - kh).abs() <= 1e-6 * hk.abs().max(kh.abs()), "{hk} {kh}");
    assert_eq!(pb.second_derivative(&u, &h, &pb.template.zeros_like()).unwrap(), 0.0);
    let sum = pb.second_derivative(&u, &h, &k.axpy(1.0, &h)).unwrap();
    let hh = pb.second_derivative(&u, &h, &h).unwrap();
    assert!((sum - hk - hh).abs() <= 1e-9 * (hk.abs() + hh.abs()));
    let j0 = pb.evaluate_cost(&u).unwrap().j;
    let diff = |a: f64| {
        let jp = pb.evaluate_cost(&u.axpy(a, &h)).unwrap().j;
        let jm = pb.evaluate_cost(&u.axpy(-a, &h)).unwrap().j;
        ((jp - 2.0 * j0 + jm) / (a * a) - hh).abs()
    };
    let (e1, e2) = (diff(1e-1), diff(5e-2));
    assert!(e2 < e1 && e2 < 1e-2 * hh.abs(), "{e1} {e2} {hh}");
}

#[test]
fn pure_regularization_curvature_is_lambda() {
    let pb = bump_problem(0.5, 2, 8, 0.3, 1.0, TargetSpec::Zero);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = ssc_sample_check(&pb, &pb.template, 4, None, &mut rng).unwrap();
    assert!((r.min_quotient.unwrap() - 0.3).abs() < 1e-12);
    let none = ssc_sample_check(&pb, &pb.template, 0, None, &mut rng).unwrap();
    assert!(none.degenerate && none.min_quotient.is_none());
}

#[test]
fn solvers_stop_at_stationary_points_and_reject_zero_weights() {
    let pb = bump_problem(0.5, 2, 8, 0.3, 1.0, TargetSpec::Zero);
    let r = projected_gradient_descent(&pb, &pb.template, &PgdOptions::default()).unwrap();
    assert!(r.converged && r.history.len() == 1 && r.history[0].iter == 0);
    let s = fixed_point_sweep(&pb, &pb.template, 1.0, &SweepOptions::default()).unwrap();
    assert!(s.converged && s.history.len() == 1 && s.history[0].grad_norm == 0.0);
    let mut zero = pb.clone();
    zero.params.lambda = vec![0.0, 0.3];
    let err = fixed_point_sweep(&zero, &pb.template, 1.0, &SweepOptions::default()).unwrap_err();
    assert!(err.to_string().contains("projected gradient descent"));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let one = uniqueness_probe(&pb, 1, 1.0, &SweepOptions::default(), &mut rng).unwrap();
    assert_eq!(one.max_distance, 0.0);
}

#[test]
fn descent_decreases_cost_and_meets_first_order_conditions() {
    let pb = bump_problem(0.5, 2, 8, 0.05, 0.2, shifted_bump());
    let r = projected_gradient_descent(&pb, &pb.template, &PgdOptions { tol: 1e-9, ..Default::default() }).unwrap();
    assert!(r.converged);
    for w in r.history.windows(2) {
        assert!(w[1].j < w[0].j);
    }
    let kkt = kkt_extract(&r.u, &r.last.grad);
    assert!(kkt.stationarity <= 1e-8 && kkt.dual_feasibility == 0.0 && kkt.complementarity <= 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert!(variational_inequality_check(&r.u, &r.last.grad, 50, &mut rng) >= -1e-8);
    let res = projection_residual(&pb, &r.u, &r.last.moment.p);
    assert!(res.iter().all(|v| v.unwrap() <= 1e-7), "{res:?}");
    let bound = existence_bound(&pb).unwrap();
    assert!((0..2).all(|i| r.u.coil_norm(i) <= bound[i]));
    let log = format_history(&r.history);
    assert!(log.lines().all(|l| l.split_whitespace().count() == 5));
}

#[test]
fn fixed_point_and_descent_agree_for_small_horizon_over_weight() {
    let pb = bump_problem(0.5, 2, 8, 5.0, 1.0, shifted_bump());
    let d = projected_gradient_descent(&pb, &pb.template, &PgdOptions { tol: 1e-11, ..Default::default() }).unwrap();
    let s = fixed_point_sweep(&pb, &pb.template, 1.0, &SweepOptions { tol: 1e-11, max_iter: 50 }).unwrap();
    assert!(d.converged && s.converged);
    assert!(d.u.axpy(-1.0, &s.u).norm() <= 1e-8);
}

#[test]
fn kkt_and_cone_bookkeeping() {
    let g = ControlGrid::zeros(1, 3, 3.0, &[-1.0], &[1.0]).unwrap();
    let u = g.with_values(vec![vec![-1.0, 0.2, 1.0]]);
    let grad = g.with_values(vec![vec![0.4, 0.0, -0.3]]);
    let k = kkt_extract(&u, &grad);
    assert_eq!(k.mu_a[0], vec![0.4, 0.0, 0.0]);
    assert_eq!(k.mu_b[0], vec![0.0, 0.0, 0.3]);
    assert_eq!(k.stationarity, 0.0);
    let h = g.with_values(vec![vec![-0.5, 0.7, 0.5]]);
    let weak = g.with_values(vec![vec![0.0, 0.0, 0.0]]);
    let p = critical_cone_project(&h, &u, &weak, 1e-9);
    assert_eq!(p.u[0], vec![0.0, 0.7, 0.0]);
    assert_eq!(critical_cone_project(&p, &u, &weak, 1e-9), p);
    let strong = critical_cone_project(&h, &u, &grad, 1e-9);
    assert_eq!(strong.u[0], vec![0.0, 0.7, 0.0]);
    let interior = g.with_values(vec![vec![0.1, 0.2, 0.3]]);
    assert_eq!(critical_cone_project(&h, &interior, &weak, 1e-9), h);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert_eq!(variational_inequality_check(&interior, &weak, 10, &mut rng), 0.0);
}

/// The integrated-by-parts moment `−Σ w (v×m)·∂_v g` against the defining form
/// `∫ (v×m)·∂_v f g` on a velocity lattice around 50 spatial points.
#[test]
fn moment_quadrature_matches_defining_integral() {
    let fields = CoilFieldSet::with_default_reg(vec![CoilGeometry::circle("c", 1.5, 0.4, 48, 1.0).unwrap()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sigma = 0.4;
    let n_v = 30;
    let hv = 12.0 * sigma / n_v as f64;
    let g = |x: &[f64; 3], v: &[f64; 3]| (0.5 * x[0] + v[0] * v[1] + 0.3 * v[2] * v[2] * x[1], [v[1], v[0], 0.6 * v[2] * x[1]]);
    let (mut z, mut w, mut gv) = (Vec::new(), Vec::new(), Vec::new());
    let mut direct = 0.0;
    for _ in 0..50 {
        let x = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
        let vc = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
        let wk = rng.gen_range(0.5..1.5);
        let (m, _) = fields.eval(0, &x).unwrap();
        for a in 0..n_v {
            for b in 0..n_v {
                for c in 0..n_v {
                    let v: [f64; 3] = std::array::from_fn(|d| vc[d] - 6.0 * sigma + ([a, b, c][d] as f64 + 0.5) * hv);
                    let r2: f64 = (0..3).map(|d| (v[d] - vc[d]).powi(2)).sum();
                    let f = wk * (-r2 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).powf(1.5);
                    let df: [f64; 3] = std::array::from_fn(|d| -f * (v[d] - vc[d]) / (sigma * sigma));
                    let vxm = [v[1] * m[2] - v[2] * m[1], v[2] * m[0] - v[0] * m[2], v[0] * m[1] - v[1] * m[0]];
                    let (gval, dg) = g(&x, &v);
                    direct += hv.powi(3) * (vxm[0] * df[0] + vxm[1] * df[1] + vxm[2] * df[2]) * gval;
                    z.push([x[0], x[1], x[2], v[0], v[1], v[2]]);
                    w.push(f * hv.powi(3));
                    gv.push(dg);
                }
            }
        }
    }
    let p = moment_quadrature(&fields, &z, &w, &gv).unwrap();
    assert!((p[0] - direct).abs() <= 1e-6 * direct.abs(), "{} vs {direct}", p[0]);
}

#[test]
fn reference_control_reproduces_its_own_target() {
    let (pb, u_star) = inverse_problem(0.05);
    let c = pb.evaluate_cost(&u_star).unwrap();
    assert!((c.regularization - pb.regularization(&u_star)).abs() == 0.0);
    assert!(c.tracking.abs() <= 1e-4 * pb.initial_norm_sq(), "{} vs {}", c.tracking, pb.initial_norm_sq());
    let away = pb.evaluate_cost(&u_star.scaled(-1.0)).unwrap();
    assert!(away.tracking > 10.0 * c.tracking.abs());
}
