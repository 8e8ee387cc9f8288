//! Reduced cost `J(u)`, its gradient and second derivative.

use std::sync::Arc;

use crate::adjoint::{reverse_sweep, solve_costate, CostateTrajectory};
use crate::coil_fields::CoilFieldSet;
use crate::error::{Error, Result};
use crate::kernels::SourceCutoff;
use crate::num::*;
use crate::target::TargetSpec;
use crate::transport::{cells_of, forward_sweep, integrate_forward, Dynamics, ParticleEnsemble, StateTrajectory};

use super::grid::ControlGrid;

/// Regularization weights, target and horizon of the cost functional.
#[derive(Debug, Clone)]
pub struct CostParams {
    pub lambda: Vec<f64>,
    pub target: TargetSpec,
    pub t_final: f64,
}

/// Everything needed to evaluate `J`, its gradient and its second derivative.
#[derive(Debug, Clone)]
pub struct Problem {
    pub ensemble: Arc<ParticleEnsemble>,
    pub fields: Arc<CoilFieldSet>,
    pub params: CostParams,
    /// Runge-Kutta steps on `[0, T]`.
    pub steps: usize,
    pub eps: f64,
    pub cutoff: SourceCutoff,
    /// Control grid and bounds; its values are ignored.
    pub template: ControlGrid,
}

/// Cell samples `p[i][m]` of the control moment.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSeries {
    pub p: Vec<Vec<f64>>,
}

/// Cost value with the forward run it came from.
#[derive(Debug, Clone)]
pub struct CostEval {
    pub j: f64,
    pub tracking: f64,
    pub regularization: f64,
    pub state: StateTrajectory,
}

/// Cost, gradient representative `λu − p` and the trajectories behind them.
#[derive(Debug, Clone)]
pub struct GradientEval {
    pub cost: CostEval,
    pub costate: CostateTrajectory,
    pub moment: MomentSeries,
    pub grad: ControlGrid,
}

impl Problem {
    pub fn new(
        ensemble: Arc<ParticleEnsemble>,
        fields: Arc<CoilFieldSet>,
        params: CostParams,
        steps: usize,
        eps: f64,
        cutoff: SourceCutoff,
        template: ControlGrid,
    ) -> Result<Self> {
        if params.lambda.len() != fields.len() || template.n_coils() != fields.len() {
            return Err(Error::Config(format!(
                "{} coils but {} regularization weights and {} control rows",
                fields.len(),
                params.lambda.len(),
                template.n_coils()
            )));
        }
        if params.lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Validation("regularization weights must be finite and nonnegative".into()));
        }
        if (params.t_final - template.t_final).abs() > 1e-14 * params.t_final {
            return Err(Error::Config("cost horizon and control grid horizon differ".into()));
        }
        template.check_steps(steps)?;
        Ok(Self { ensemble, fields, params, steps, eps, cutoff, template })
    }

    pub fn lambda_min(&self) -> f64 {
        self.params.lambda.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Particle quadrature of `‖f̊‖²`, which is also `‖f(T)‖²` by volume preservation.
    pub fn initial_norm_sq(&self) -> f64 {
        self.ensemble.f0.iter().map(|f| self.ensemble.cell_volume * f * f).sum()
    }

    fn check_grid(&self, u: &ControlGrid) -> Result<()> {
        if u.n_coils() != self.template.n_coils() || u.n_cells() != self.template.n_cells() {
            return Err(Error::Config("control does not match the problem's control grid".into()));
        }
        Ok(())
    }

    pub fn regularization(&self, u: &ControlGrid) -> f64 {
        (0..u.n_coils()).map(|i| 0.5 * self.params.lambda[i] * u.coil_norm(i).powi(2)).sum()
    }

    pub fn evaluate_cost(&self, u: &ControlGrid) -> Result<CostEval> {
        self.check_grid(u)?;
        u.require_admissible()?;
        let state = integrate_forward(&self.ensemble, u, &self.fields, self.steps, self.eps)?;
        self.cost_of_state(state)
    }

    fn cost_of_state(&self, state: StateTrajectory) -> Result<CostEval> {
        let mut cross = 0.0;
        for (z, w) in state.z[self.steps].iter().zip(&self.ensemble.w) {
            cross += w * self.params.target.value(z)?;
        }
        let tracking = 0.5 * (self.initial_norm_sq() - 2.0 * cross + self.params.target.norm_sq());
        let regularization = self.regularization(&state.control);
        Ok(CostEval { j: tracking + regularization, tracking, regularization, state })
    }

    pub fn gradient(&self, u: &ControlGrid) -> Result<GradientEval> {
        let cost = self.evaluate_cost(u)?;
        self.gradient_at(cost)
    }

    /// Gradient at the control of an existing forward run.
    pub fn gradient_at(&self, cost: CostEval) -> Result<GradientEval> {
        let costate = solve_costate(&cost.state, &self.params.target, self.cutoff)?;
        let moment = moment_p(&cost.state, &costate)?;
        let u = &cost.state.control;
        let grad = u.map_values(|i, m, v| self.params.lambda[i] * v - moment.p[i][m]);
        Ok(GradientEval { cost, costate, moment, grad })
    }

    /// `∇²J(u) h` as a grid function: `λh − p'[h]`, with `p'` from a
    /// forward-over-reverse sweep in dual arithmetic.
    pub fn hessian_vec(&self, u: &ControlGrid, h: &ControlGrid) -> Result<ControlGrid> {
        self.check_grid(u)?;
        self.check_grid(h)?;
        let dynamics = Dynamics { fields: &self.fields, weights: &self.ensemble.w, eps: self.eps };
        let cells = cells_of::<Dual64>(u, Some(h));
        let steps = self.steps;
        let out = forward_sweep(
            &dynamics,
            self.ensemble.z0.iter().map(lift6).collect(),
            &cells,
            u.t_final / steps as f64,
            steps,
            |n| u.cell_of_step(n, steps),
            false,
            true,
        )?;
        let rev = reverse_sweep(
            &self.fields,
            &self.ensemble.w,
            self.eps,
            self.cutoff,
            u,
            &cells,
            &out.levels,
            &out.stages,
            &self.params.target,
        )?;
        let du = u.dt();
        Ok(h.map_values(|i, m, hv| self.params.lambda[i] * hv + rev.cell_grad[i][m].eps / du))
    }

    /// `J″(u)[h, h̃]`.
    pub fn second_derivative(&self, u: &ControlGrid, h: &ControlGrid, h_tilde: &ControlGrid) -> Result<f64> {
        Ok(h.inner(&self.hessian_vec(u, h_tilde)?))
    }
}

/// Control moment on the control cells from an aligned state/costate pair.
pub fn moment_p(state: &StateTrajectory, costate: &CostateTrajectory) -> Result<MomentSeries> {
    if state.times.len() != costate.times.len() || costate.moment_cells.len() != state.control.n_coils() {
        return Err(Error::State("state and costate are not aligned".into()));
    }
    Ok(MomentSeries { p: costate.moment_cells.clone() })
}

/// `p_i = −Σ_k w_k (v_k × m_i(x_k))·(∂_v g)_k` from velocity gradients of `g`.
pub fn moment_quadrature(fields: &CoilFieldSet, z: &[Vec6<f64>], w: &[f64], grad_v_g: &[Vec3<f64>]) -> Result<Vec<f64>> {
    if z.len() != w.len() || z.len() != grad_v_g.len() {
        return Err(Error::State("moment quadrature needs one gradient per particle".into()));
    }
    let mut p = vec![0.0; fields.len()];
    for k in 0..z.len() {
        let (x, v) = split6(&z[k]);
        for (i, pi) in p.iter_mut().enumerate() {
            let (m, _) = fields.eval(i, &x)?;
            *pi -= w[k] * dot3(&cross3(&v, &m), &grad_v_g[k]);
        }
    }
    Ok(p)
}
