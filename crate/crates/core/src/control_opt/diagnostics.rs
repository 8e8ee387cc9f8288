//! First- and second-order optimality diagnostics.

use rand::Rng;

use crate::adjoint::solve_costate;
use crate::error::{Error, Result};
use crate::kernels::{CutoffChi, SourceCutoff};
use crate::transport::{kde_norm_check, lp_norm_estimate, random_admissible};

use super::grid::ControlGrid;
use super::problem::Problem;
use super::solvers::{fixed_point_sweep, projection_residual, SweepOptions};

/// Bound multipliers with the residuals of the KKT system.
#[derive(Debug, Clone)]
pub struct KktMultipliers {
    pub mu_a: Vec<Vec<f64>>,
    pub mu_b: Vec<Vec<f64>>,
    /// `‖λu − p − μ^a + μ^b‖_{L²}`.
    pub stationarity: f64,
    /// Largest negative part of a multiplier.
    pub dual_feasibility: f64,
    /// `Σ |μ^a (u − a)| + |μ^b (b − u)|` weighted by the cell width.
    pub complementarity: f64,
}

/// Multipliers from the gradient representative `grad = λu − p`.
pub fn kkt_extract(u: &ControlGrid, grad: &ControlGrid) -> KktMultipliers {
    let (n, m_cells) = (u.n_coils(), u.n_cells());
    let mut mu_a = vec![vec![0.0; m_cells]; n];
    let mut mu_b = vec![vec![0.0; m_cells]; n];
    let (mut stat, mut dual, mut comp) = (0.0, 0.0f64, 0.0);
    for i in 0..n {
        for m in 0..m_cells {
            let (v, g) = (u.u[i][m], grad.u[i][m]);
            if v == u.a[i][m] {
                mu_a[i][m] = g.max(0.0);
            }
            if v == u.b[i][m] {
                mu_b[i][m] = (-g).max(0.0);
            }
            let r = g - mu_a[i][m] + mu_b[i][m];
            stat += r * r;
            dual = dual.max((-mu_a[i][m]).max(-mu_b[i][m]).max(0.0));
            comp += (mu_a[i][m] * (v - u.a[i][m])).abs() + (mu_b[i][m] * (u.b[i][m] - v)).abs();
        }
    }
    KktMultipliers { mu_a, mu_b, stationarity: (stat * u.dt()).sqrt(), dual_feasibility: dual, complementarity: comp * u.dt() }
}

/// `min` over sampled admissible `u` of `⟨λū − p, u − ū⟩_{L²}`; `u = ū`
/// itself is always part of the sample.
pub fn variational_inequality_check(u_bar: &ControlGrid, grad: &ControlGrid, n_dirs: usize, rng: &mut impl Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..n_dirs {
        let u = random_admissible(u_bar, rng);
        worst = worst.min(grad.inner(&u.axpy(-1.0, u_bar)));
    }
    worst
}

/// Residual proxies of the optimality system.
#[derive(Debug, Clone)]
pub struct OptimalityResidual {
    /// `max |det J − 1|` over the forward run.
    pub liouville: f64,
    /// Relative deviation of the reconstructed `‖f(T)‖₂` from `‖f̊‖₂`.
    pub norm_drift: f64,
    /// `max |g(T) − (f(T) − f_d)|` on particles.
    pub terminal: f64,
    /// `max |g − g̃|` between costates with plateaus `1.01 R_Z` and `2 R_Z`.
    pub chi_gap: f64,
    /// `‖u_i − Π(p_i/λ_i)‖` per coil; `None` where `λ_i = 0`.
    pub control: Vec<Option<f64>>,
}

pub fn optimality_residual(u: &ControlGrid, problem: &Problem) -> Result<OptimalityResidual> {
    let eval = problem.gradient(u)?;
    let state = &eval.cost.state;
    let norm_drift = kde_norm_check(state, lp_norm_estimate(&problem.ensemble, 2.0)?)?.rel_error;
    let rz = state.radius_z();
    let a = solve_costate(state, &problem.params.target, SourceCutoff::Chi(CutoffChi::new(1.01 * rz)?))?;
    let b = solve_costate(state, &problem.params.target, SourceCutoff::Chi(CutoffChi::new(2.0 * rz)?))?;
    let chi_gap = a.g.iter().flatten().zip(b.g.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(OptimalityResidual {
        liouville: state.max_det_deviation(),
        norm_drift,
        terminal: eval.costate.terminal_residual(state),
        chi_gap,
        control: projection_residual(problem, u, &eval.moment.p),
    })
}

/// Default activity band: `1e−6` times the size of the terms `λu` and `p`.
pub fn default_tol_active(problem: &Problem, u: &ControlGrid, p: &[Vec<f64>]) -> f64 {
    let mut scale = 0.0f64;
    for i in 0..u.n_coils() {
        for m in 0..u.n_cells() {
            scale = scale.max((problem.params.lambda[i] * u.u[i][m]).abs()).max(p[i][m].abs());
        }
    }
    1e-6 * scale
}

/// Project `h` into the critical cone at `ū`: zero where the gradient is
/// clearly nonzero, sign-restricted at active bounds.
pub fn critical_cone_project(h: &ControlGrid, u_bar: &ControlGrid, grad: &ControlGrid, tol_active: f64) -> ControlGrid {
    h.map_values(|i, m, v| {
        if grad.u[i][m].abs() > tol_active {
            0.0
        } else if (u_bar.u[i][m] - u_bar.a[i][m]).abs() <= tol_active {
            v.max(0.0)
        } else if (u_bar.b[i][m] - u_bar.u[i][m]).abs() <= tol_active {
            v.min(0.0)
        } else {
            v
        }
    })
}

/// Sampled second-order check on the critical cone.
#[derive(Debug, Clone)]
pub struct SscReport {
    /// `min J″(ū)[h,h]/‖h‖²` over the nonzero projected samples.
    pub min_quotient: Option<f64>,
    pub samples_used: usize,
    /// Set when no sample survived the projection.
    pub degenerate: bool,
}

pub fn ssc_sample_check(problem: &Problem, u_bar: &ControlGrid, n_dirs: usize, tol_active: Option<f64>, rng: &mut impl Rng) -> Result<SscReport> {
    let eval = problem.gradient(u_bar)?;
    let tol = tol_active.unwrap_or_else(|| default_tol_active(problem, u_bar, &eval.moment.p));
    let mut min_q: Option<f64> = None;
    let mut used = 0;
    for _ in 0..n_dirs {
        let vals = (0..u_bar.n_coils()).map(|_| (0..u_bar.n_cells()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let raw = u_bar.with_values(vals);
        let h = critical_cone_project(&raw, u_bar, &eval.grad, tol);
        let nh = h.inner(&h);
        if nh == 0.0 {
            continue;
        }
        used += 1;
        let q = problem.second_derivative(u_bar, &h, &h)? / nh;
        min_q = Some(min_q.map_or(q, |m: f64| m.min(q)));
    }
    Ok(SscReport { min_quotient: min_q, samples_used: used, degenerate: used == 0 })
}

/// Outcome of the multi-start uniqueness experiment.
#[derive(Debug, Clone)]
pub struct UniquenessReport {
    pub controls: Vec<ControlGrid>,
    /// Per start: converged flag or the solver error.
    pub outcomes: Vec<std::result::Result<bool, String>>,
    pub max_distance: f64,
}

pub fn uniqueness_probe(
    problem: &Problem,
    n_starts: usize,
    theta: f64,
    opts: &SweepOptions,
    rng: &mut impl Rng,
) -> Result<UniquenessReport> {
    if !(problem.lambda_min() > 0.0) {
        return Err(Error::Precondition("the uniqueness probe needs min λ_i > 0".into()));
    }
    let mut controls = Vec::new();
    let mut outcomes = Vec::new();
    for _ in 0..n_starts {
        let u0 = random_admissible(&problem.template, rng);
        match fixed_point_sweep(problem, &u0, theta, opts) {
            Ok(r) => {
                outcomes.push(Ok(r.converged));
                controls.push(r.u);
            }
            Err(e) => outcomes.push(Err(e.to_string())),
        }
    }
    let mut max_distance = 0.0f64;
    for a in 0..controls.len() {
        for b in a + 1..controls.len() {
            max_distance = max_distance.max(controls[a].axpy(-1.0, &controls[b]).norm());
        }
    }
    Ok(UniquenessReport { controls, outcomes, max_distance })
}

/// Existence bound `(2/√λ_i)‖f̊‖_{L²}` per coil (infinite where `λ_i = 0`).
pub fn existence_bound(problem: &Problem) -> Result<Vec<f64>> {
    let norm = lp_norm_estimate(&problem.ensemble, 2.0)?;
    Ok(problem.params.lambda.iter().map(|l| if *l > 0.0 { 2.0 / l.sqrt() * norm } else { f64::INFINITY }).collect())
}

/// Control file rows `i m t_mid u a b p mu_a mu_b`.
pub fn format_control(u: &ControlGrid, p: &[Vec<f64>], kkt: &KktMultipliers) -> String {
    let mut s = String::from("i m t_mid u a b p mu_a mu_b\n");
    for i in 0..u.n_coils() {
        for m in 0..u.n_cells() {
            s.push_str(&format!(
                "{i} {m} {:e} {:e} {:e} {:e} {:e} {:e} {:e}\n",
                u.t_mid(m),
                u.u[i][m],
                u.a[i][m],
                u.b[i][m],
                p[i][m],
                kkt.mu_a[i][m],
                kkt.mu_b[i][m]
            ));
        }
    }
    s
}
