//! Projected gradient descent and the projection-formula fixed-point sweep.

use crate::error::{Error, Result};

use super::grid::{clamp, ControlGrid};
use super::problem::{GradientEval, Problem};

/// One row of an optimization log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub j: f64,
    /// Projected-gradient residual for descent, update norm for the sweep.
    pub grad_norm: f64,
    pub step: f64,
    pub n_backtracks: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PgdOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Initial trial step of every line search (or of the first one with `bb_steps`).
    pub s0: f64,
    pub shrink: f64,
    pub armijo_c: f64,
    pub max_backtracks: usize,
    /// Start each line search from the Barzilai-Borwein step of the last two iterates.
    pub bb_steps: bool,
}

impl Default for PgdOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-8, s0: 1.0, shrink: 0.5, armijo_c: 1e-4, max_backtracks: 40, bb_steps: true }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-10 }
    }
}

/// Solver result with the evaluation at the returned control.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub u: ControlGrid,
    pub history: Vec<IterRecord>,
    pub converged: bool,
    pub last: GradientEval,
}

/// `‖u − Π(u − G)‖_{L²}`.
pub fn projected_gradient_residual(u: &ControlGrid, grad: &ControlGrid) -> f64 {
    let pg = u.map_values(|i, m, v| v - clamp(v - grad.u[i][m], u.a[i][m], u.b[i][m]));
    pg.norm()
}

/// `u⁺ = Π(u − s G)` with projected Armijo backtracking
/// `J(u⁺) ≤ J(u) − (c/s)‖u⁺ − u‖²`.
pub fn projected_gradient_descent(problem: &Problem, u0: &ControlGrid, opts: &PgdOptions) -> Result<SolveResult> {
    u0.require_admissible()?;
    let mut eval = problem.gradient(u0)?;
    let mut history = Vec::new();
    let mut prev: Option<(ControlGrid, ControlGrid)> = None;
    for iter in 0..=opts.max_iter {
        let u = eval.cost.state.control.clone();
        let res = projected_gradient_residual(&u, &eval.grad);
        let j = eval.cost.j;
        if res <= opts.tol || iter == opts.max_iter {
            history.push(IterRecord { iter, j, grad_norm: res, step: 0.0, n_backtracks: 0 });
            return Ok(SolveResult { u, history, converged: res <= opts.tol, last: eval });
        }
        let mut s = opts.s0;
        if opts.bb_steps {
            if let Some((pu, pg)) = &prev {
                let du = u.axpy(-1.0, pu);
                let dg = eval.grad.axpy(-1.0, pg);
                let sy = du.inner(&dg);
                if sy > 0.0 {
                    s = (du.inner(&du) / sy).clamp(1e-6 * opts.s0, 1e6 * opts.s0);
                }
            }
        }
        let mut backtracks = 0;
        let accepted = loop {
            let trial = u.map_values(|i, m, v| clamp(v - s * eval.grad.u[i][m], u.a[i][m], u.b[i][m]));
            let dist2 = trial.axpy(-1.0, &u).inner(&trial.axpy(-1.0, &u));
            let cost = problem.evaluate_cost(&trial)?;
            if cost.j <= j - opts.armijo_c / s * dist2 && cost.j <= j {
                break cost;
            }
            backtracks += 1;
            if backtracks > opts.max_backtracks {
                return Err(Error::Solver(format!(
                    "line search failed at iteration {iter}: J = {j:.6e}, projected-gradient residual {res:.3e}, last step {s:.3e}"
                )));
            }
            s *= opts.shrink;
        };
        history.push(IterRecord { iter, j, grad_norm: res, step: s, n_backtracks: backtracks });
        prev = Some((u, eval.grad.clone()));
        eval = problem.gradient_at(accepted)?;
    }
    unreachable!("loop returns at max_iter")
}

/// Damped iteration `u⁺ = (1−θ)u + θ Π(p(u)/λ)`.
pub fn fixed_point_sweep(problem: &Problem, u0: &ControlGrid, theta: f64, opts: &SweepOptions) -> Result<SolveResult> {
    if let Some(i) = problem.params.lambda.iter().position(|l| *l == 0.0) {
        return Err(Error::Precondition(format!(
            "the fixed-point sweep needs λ_i > 0 but λ_{i} = 0; use projected gradient descent instead"
        )));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Precondition(format!("damping must lie in (0, 1], got {theta}")));
    }
    u0.require_admissible()?;
    let mut eval = problem.gradient(u0)?;
    let mut history = Vec::new();
    for iter in 0..=opts.max_iter {
        let u = eval.cost.state.control.clone();
        let next = u.map_values(|i, m, v| {
            let target = clamp(eval.moment.p[i][m] / problem.params.lambda[i], u.a[i][m], u.b[i][m]);
            (1.0 - theta) * v + theta * target
        });
        let change = next.axpy(-1.0, &u).norm();
        history.push(IterRecord { iter, j: eval.cost.j, grad_norm: change, step: theta, n_backtracks: 0 });
        if change <= opts.tol || iter == opts.max_iter {
            return Ok(SolveResult { u, history, converged: change <= opts.tol, last: eval });
        }
        // the convex combination of two admissible controls stays admissible
        eval = problem.gradient(&next.projected())?;
    }
    unreachable!("loop returns at max_iter")
}

/// `‖u − Π(p/λ)‖_{L²}` per coil, `None` for coils with `λ_i = 0`.
pub fn projection_residual(problem: &Problem, u: &ControlGrid, p: &[Vec<f64>]) -> Vec<Option<f64>> {
    (0..u.n_coils())
        .map(|i| {
            let l = problem.params.lambda[i];
            (l > 0.0).then(|| {
                let s: f64 = (0..u.n_cells())
                    .map(|m| (u.u[i][m] - clamp(p[i][m] / l, u.a[i][m], u.b[i][m])).powi(2))
                    .sum();
                (s * u.dt()).sqrt()
            })
        })
        .collect()
}

/// Optimization log: `iter J grad_norm step n_backtracks`.
pub fn format_history(history: &[IterRecord]) -> String {
    let mut s = String::from("iter J grad_norm step n_backtracks\n");
    for r in history {
        s.push_str(&format!("{} {:e} {:e} {:e} {}\n", r.iter, r.j, r.grad_norm, r.step, r.n_backtracks));
    }
    s
}
