//! Costate and linearized state/costate solvers.
//!
//! The costate is carried on the particle characteristics as the weighted
//! gradient `Λ_k = w_k ∇g̃(t, z_k(t))` of the tracking part `g̃ = g − f`, which
//! is obtained as the exact transpose of the Runge-Kutta state sweep. The
//! values `g̃_k` follow from `d/dt g̃ = Φ χ` along each characteristic. The
//! linearized solvers run the same sweeps in dual arithmetic, seeded with the
//! control direction.

use crate::coil_fields::{biot_savart_eval, CoilFieldSet};
use crate::control_opt::ControlGrid;
use crate::error::{Error, Result};
use crate::kernels::SourceCutoff;
use crate::num::*;
use crate::target::TargetSpec;
use crate::transport::{cells_of, forward_sweep, Dynamics, StateTrajectory};

/// Backward costate run on the time levels of a state trajectory.
#[derive(Debug, Clone)]
pub struct CostateTrajectory {
    pub times: Vec<f64>,
    /// `g_k(t_n) = g(t_n, z_k(t_n))`, indexed `[n][k]`.
    pub g: Vec<Vec<f64>>,
    /// `∂_{z0}[g(t, Z(t, 0, z0))]` at every particle, indexed `[n][k]`.
    pub gz0: Vec<Vec<Vec6<f64>>>,
    /// Weighted costate gradients `w_k ∇g̃`, indexed `[n][k]`.
    pub lambda: Vec<Vec<Vec6<f64>>>,
    /// Target values `f_d(z_k(T))`.
    pub fd_terminal: Vec<f64>,
    /// Cell-averaged control moment `p̄[i][m]`; the discrete gradient of the
    /// tracking term is `−p̄`.
    pub moment_cells: Vec<Vec<f64>>,
    /// `p_i(t_n) = −Σ_k (v_k × m_i(x_k))·Λ_k^v`, indexed `[n][i]`.
    pub moment_levels: Vec<Vec<f64>>,
    pub cutoff: SourceCutoff,
    /// Smallest cutoff value met by a particle at a stage of the sweep.
    pub chi_min: f64,
}

impl CostateTrajectory {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// `max_k |g_k(T) − (f0_k − f_d(z_k(T)))|`.
    pub fn terminal_residual(&self, state: &StateTrajectory) -> f64 {
        let last = self.g.last().unwrap();
        last.iter()
            .zip(&state.ensemble.f0)
            .zip(&self.fd_terminal)
            .map(|((g, f), fd)| (g - (f - fd)).abs())
            .fold(0.0, f64::max)
    }
}

/// Velocity gradient `∂_v g` at particle `k` and level `n`, reconstructed as
/// the velocity block of `J^{−T} Gz0`.
#[derive(Debug, Clone, Copy)]
pub struct VelocityGradient {
    pub value: Vec3<f64>,
    pub condition: f64,
}

pub fn grad_v_g(costate: &CostateTrajectory, state: &StateTrajectory, k: usize, level: usize) -> Result<VelocityGradient> {
    if costate.times.len() != state.times.len() {
        return Err(Error::State("costate and state time grids differ".into()));
    }
    let gz0 = costate
        .gz0
        .get(level)
        .and_then(|l| l.get(k))
        .ok_or_else(|| Error::State(format!("no costate gradient at particle {k}, level {level}")))?;
    let j = &state.jac[level][k];
    let inv = inverse6(j).ok_or_else(|| Error::State(format!("singular flow Jacobian at particle {k}")))?;
    let full = matvec6_t(&inv, gz0);
    Ok(VelocityGradient { value: [full[3], full[4], full[5]], condition: cond_inf6(j) })
}

/// Raw output of one reverse sweep.
pub(crate) struct ReverseOut<S> {
    pub lambda: Vec<Vec<Vec6<S>>>,
    pub g_tilde: Vec<Vec<S>>,
    /// `∂J_track/∂u[i][m]` of the discrete cost (not divided by the cell width).
    pub cell_grad: Vec<Vec<S>>,
    pub fd_terminal: Vec<S>,
    pub chi_min: f64,
}

struct Sweep<'a> {
    fields: &'a CoilFieldSet,
    weights: &'a [f64],
    eps: f64,
    cutoff: SourceCutoff,
}

impl<'a> Sweep<'a> {
    /// `DF(y)ᵀ a` for the particle system, with the source coupling weighted by
    /// `χ`. Adds `Σ_k a_k^v·(v_k × m_i(x_k))` to `sens[i]`.
    fn transpose<S: Real>(&self, y: &[Vec6<S>], a: &[Vec6<S>], u: &[S], sens: &mut [S], chi_min: &mut f64) -> Result<Vec<Vec6<S>>> {
        let n = y.len();
        let nonlocal = !matches!(self.cutoff, SourceCutoff::Off);
        let eps2 = self.eps * self.eps;
        let x: Vec<Vec3<S>> = y.iter().map(|z| [z[0], z[1], z[2]]).collect();
        let av: Vec<Vec3<S>> = a.iter().map(|z| [z[3], z[4], z[5]]).collect();
        // GE: Σ w_j ∇K (symmetric, six entries); GS: Σ ∇K a_j^v; S: Σ K·a_j^v
        let mut ge = vec![[zero::<S>(); 6]; n];
        let mut gs = vec![zero3::<S>(); n];
        let mut s = vec![zero::<S>(); n];
        for k in 0..n {
            let wk = self.weights[k];
            let mut gek = [zero::<S>(); 6];
            let mut gsk = zero3::<S>();
            let mut sk = zero::<S>();
            for j in 0..k {
                let d = sub3(&x[k], &x[j]);
                let q2 = dot3(&d, &d) + eps2;
                if q2.re() == 0.0 {
                    return Err(Error::Singularity(format!("particles {j} and {k} coincide and softening is zero")));
                }
                let inv_q = q2.sqrt().recip();
                let inv_q2 = inv_q * inv_q;
                let inv_q3 = inv_q2 * inv_q;
                let c = inv_q3 * inv_q2 * (-3.0);
                let g = [
                    d[0] * d[0] * c + inv_q3,
                    d[0] * d[1] * c,
                    d[0] * d[2] * c,
                    d[1] * d[1] * c + inv_q3,
                    d[1] * d[2] * c,
                    d[2] * d[2] * c + inv_q3,
                ];
                let wj = self.weights[j];
                for e in 0..6 {
                    gek[e] += g[e] * wj;
                    ge[j][e] += g[e] * wk;
                }
                if nonlocal {
                    let gm = crate::transport::sym_to_mat(&g);
                    let gaj = matvec3(&gm, &av[j]);
                    let gak = matvec3(&gm, &av[k]);
                    let kk = scale3(&d, inv_q3);
                    for c in 0..3 {
                        gsk[c] += gaj[c];
                        gs[j][c] += gak[c];
                    }
                    sk += dot3(&kk, &av[j]);
                    s[j] -= dot3(&kk, &av[k]);
                }
            }
            for e in 0..6 {
                ge[k][e] += gek[e];
            }
            for c in 0..3 {
                gs[k][c] += gsk[c];
            }
            s[k] += sk;
        }
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let (xk, vk) = split6(&y[k]);
            let mut b = zero3::<S>();
            let mut gb = zero33::<S>();
            for (i, &ui) in u.iter().enumerate() {
                let (m, gm) = biot_savart_eval(&self.fields.coils[i], &xk, self.fields.reg)?;
                sens[i] += dot3(&av[k], &cross3(&vk, &m));
                b = add3(&b, &scale3(&m, ui));
                gb = add33(&gb, &scale33(&gm, ui));
            }
            let ge_k = crate::transport::sym_to_mat(&ge[k]);
            let mut rx = add3(&matvec3(&ge_k, &av[k]), &matvec3_t(&gb, &cross3(&av[k], &vk)));
            let mut rv = add3(&[a[k][0], a[k][1], a[k][2]], &cross3(&b, &av[k]));
            if nonlocal {
                let (chi, dchi) = self.cutoff.eval(&y[k]);
                *chi_min = chi_min.min(chi.re());
                let wk = self.weights[k];
                for c in 0..3 {
                    rx[c] -= (chi * gs[k][c] + s[k] * dchi[c]) * wk;
                    rv[c] -= s[k] * dchi[3 + c] * wk;
                }
            }
            out.push(join6(&rx, &rv));
        }
        Ok(out)
    }

    /// `Φ_k χ_k` with `Φ_k = Σ_{j≠k} K(x_k − x_j)·Λ_j^v`.
    fn source<S: Real>(&self, z: &[Vec6<S>], lambda: &[Vec6<S>]) -> Vec<S> {
        let n = z.len();
        let mut phi = vec![zero::<S>(); n];
        if matches!(self.cutoff, SourceCutoff::Off) {
            return phi;
        }
        let eps2 = self.eps * self.eps;
        for k in 0..n {
            let lk = [lambda[k][3], lambda[k][4], lambda[k][5]];
            for j in 0..k {
                let d: Vec3<S> = std::array::from_fn(|c| z[k][c] - z[j][c]);
                let q2 = dot3(&d, &d) + eps2;
                let inv_q3 = q2.sqrt().recip().powi(3);
                let lj = [lambda[j][3], lambda[j][4], lambda[j][5]];
                phi[k] += dot3(&d, &lj) * inv_q3;
                phi[j] -= dot3(&d, &lk) * inv_q3;
            }
        }
        for k in 0..n {
            phi[k] *= self.cutoff.eval(&z[k]).0;
        }
        phi
    }
}

/// Reverse sweep over a stored forward run with terminal data from `target`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn reverse_sweep<S: Real>(
    fields: &CoilFieldSet,
    weights: &[f64],
    eps: f64,
    cutoff: SourceCutoff,
    control: &ControlGrid,
    u_cells: &[Vec<S>],
    levels: &[Vec<Vec6<S>>],
    stages: &[[Vec<Vec6<S>>; 4]],
    target: &TargetSpec,
) -> Result<ReverseOut<S>> {
    let steps = stages.len();
    if levels.len() != steps + 1 || steps == 0 {
        return Err(Error::State("state trajectory has no stored stages".into()));
    }
    let dt = control.t_final / steps as f64;
    let n_p = weights.len();
    let sweep = Sweep { fields, weights, eps, cutoff };
    let mut fd_terminal = Vec::with_capacity(n_p);
    let mut lam: Vec<Vec6<S>> = Vec::with_capacity(n_p);
    let mut gt_last = Vec::with_capacity(n_p);
    for (k, z) in levels[steps].iter().enumerate() {
        let (fd, grad) = target.eval(z)?;
        fd_terminal.push(fd);
        gt_last.push(-fd);
        lam.push(std::array::from_fn(|c| grad[c] * (-weights[k])));
    }
    let mut lambda = vec![Vec::new(); steps + 1];
    let mut g_tilde = vec![Vec::new(); steps + 1];
    let mut cell_grad = vec![vec![zero::<S>(); control.n_cells()]; control.n_coils()];
    let mut chi_min = f64::INFINITY;
    let mut phi_next = sweep.source(&levels[steps], &lam);
    lambda[steps] = lam;
    g_tilde[steps] = gt_last;
    for n in (0..steps).rev() {
        let m = control.cell_of_step(n, steps);
        let u = &u_cells[m];
        let lam = &lambda[n + 1];
        let st = &stages[n];
        let mut sens = vec![zero::<S>(); u.len()];
        let comb = |c1: f64, l: &[Vec6<S>], c2: f64, yb: &[Vec6<S>]| -> Vec<Vec6<S>> {
            l.iter().zip(yb).map(|(a, b)| std::array::from_fn(|c| a[c] * c1 + b[c] * c2)).collect()
        };
        let kb4: Vec<Vec6<S>> = lam.iter().map(|a| std::array::from_fn(|c| a[c] * (dt / 6.0))).collect();
        let yb4 = sweep.transpose(&st[3], &kb4, u, &mut sens, &mut chi_min)?;
        let kb3 = comb(dt / 3.0, lam, dt, &yb4);
        let yb3 = sweep.transpose(&st[2], &kb3, u, &mut sens, &mut chi_min)?;
        let kb2 = comb(dt / 3.0, lam, 0.5 * dt, &yb3);
        let yb2 = sweep.transpose(&st[1], &kb2, u, &mut sens, &mut chi_min)?;
        let kb1 = comb(dt / 6.0, lam, 0.5 * dt, &yb2);
        let yb1 = sweep.transpose(&st[0], &kb1, u, &mut sens, &mut chi_min)?;
        let prev: Vec<Vec6<S>> = (0..n_p)
            .map(|k| std::array::from_fn(|c| lam[k][c] + yb1[k][c] + yb2[k][c] + yb3[k][c] + yb4[k][c]))
            .collect();
        if prev.iter().flatten().any(|c| !c.re().is_finite()) {
            return Err(Error::Integration { time: n as f64 * dt, detail: "non-finite costate".into() });
        }
        for (i, s) in sens.into_iter().enumerate() {
            cell_grad[i][m] += s;
        }
        let phi = sweep.source(&levels[n], &prev);
        g_tilde[n] = (0..n_p).map(|k| g_tilde[n + 1][k] - (phi_next[k] + phi[k]) * (0.5 * dt)).collect();
        phi_next = phi;
        lambda[n] = prev;
    }
    Ok(ReverseOut { lambda, g_tilde, cell_grad, fd_terminal, chi_min })
}

/// Backward costate sweep along the characteristics of `state`.
pub fn solve_costate(state: &StateTrajectory, target: &TargetSpec, cutoff: SourceCutoff) -> Result<CostateTrajectory> {
    let cells = cells_of::<f64>(&state.control, None);
    let out = reverse_sweep(
        &state.fields,
        &state.ensemble.w,
        state.eps,
        cutoff,
        &state.control,
        &cells,
        &state.z,
        &state.stages,
        target,
    )?;
    let ens = &state.ensemble;
    let g = out
        .g_tilde
        .iter()
        .map(|lvl| lvl.iter().zip(&ens.f0).map(|(gt, f)| f + gt).collect())
        .collect();
    let gz0 = out
        .lambda
        .iter()
        .zip(&state.jac)
        .map(|(lvl, jl)| {
            (0..ens.len())
                .map(|k| {
                    let pulled = matvec6_t(&jl[k], &lvl[k]);
                    std::array::from_fn(|c| ens.gradf0[k][c] + pulled[c] / ens.w[k])
                })
                .collect()
        })
        .collect();
    let du = state.control.dt();
    let moment_cells = out.cell_grad.iter().map(|row| row.iter().map(|s| -s / du).collect()).collect();
    let moment_levels = out
        .lambda
        .iter()
        .zip(&state.z)
        .map(|(lvl, zl)| snapshot_moment(&state.fields, zl, lvl))
        .collect::<Result<Vec<_>>>()?;
    Ok(CostateTrajectory {
        times: state.times.clone(),
        g,
        gz0,
        lambda: out.lambda,
        fd_terminal: out.fd_terminal,
        moment_cells,
        moment_levels,
        cutoff,
        chi_min: out.chi_min,
    })
}

/// `p_i = −Σ_k (v_k × m_i(x_k))·Λ_k^v` for every coil.
fn snapshot_moment(fields: &CoilFieldSet, z: &[Vec6<f64>], lambda: &[Vec6<f64>]) -> Result<Vec<f64>> {
    let mut p = vec![0.0; fields.len()];
    for (zk, lk) in z.iter().zip(lambda) {
        let (x, v) = split6(zk);
        for (i, pi) in p.iter_mut().enumerate() {
            let (m, _) = fields.eval(i, &x)?;
            *pi -= dot3(&cross3(&v, &m), &[lk[3], lk[4], lk[5]]);
        }
    }
    Ok(p)
}

/// Directional derivative of the state in direction `h`.
#[derive(Debug, Clone)]
pub struct LinearizedState {
    pub direction: ControlGrid,
    /// `f'_u[h](t_n, z_k(t_n))`, indexed `[n][k]`.
    pub fprime: Vec<Vec<f64>>,
    /// Particle displacements `∂_α z_k(t_n)`.
    pub delta_z: Vec<Vec<Vec6<f64>>>,
    pub(crate) levels: Vec<Vec<Vec6<Dual64>>>,
    pub(crate) stages: Vec<[Vec<Vec6<Dual64>>; 4]>,
}

/// Directional derivative of the costate in direction `h`.
#[derive(Debug, Clone)]
pub struct LinearizedCostate {
    pub direction: ControlGrid,
    /// `g'_u[h](t_n, z_k(t_n))`, indexed `[n][k]`.
    pub gprime: Vec<Vec<f64>>,
    /// Derivative of the weighted costate gradients.
    pub delta_lambda: Vec<Vec<Vec6<f64>>>,
    /// Derivative of the cell moments `p̄`.
    pub delta_moment_cells: Vec<Vec<f64>>,
}

fn check_direction(state: &StateTrajectory, h: &ControlGrid) -> Result<()> {
    if h.n_coils() != state.control.n_coils() || h.n_cells() != state.control.n_cells() || h.t_final != state.control.t_final {
        return Err(Error::State("direction grid does not match the control grid".into()));
    }
    Ok(())
}

/// Forward sweep in dual arithmetic seeded with the control direction `h`.
pub fn solve_linearized_state(state: &StateTrajectory, h: &ControlGrid) -> Result<LinearizedState> {
    check_direction(state, h)?;
    let steps = state.steps();
    let dynamics = Dynamics { fields: &state.fields, weights: &state.ensemble.w, eps: state.eps };
    let cells = cells_of::<Dual64>(&state.control, Some(h));
    let z0 = state.ensemble.z0.iter().map(lift6).collect();
    let out = forward_sweep(
        &dynamics,
        z0,
        &cells,
        state.dt(),
        steps,
        |n| state.control.cell_of_step(n, steps),
        false,
        true,
    )?;
    let delta_z: Vec<Vec<Vec6<f64>>> = out
        .levels
        .iter()
        .map(|l| l.iter().map(|z| std::array::from_fn(|c| z[c].eps)).collect())
        .collect();
    let mut fprime = Vec::with_capacity(steps + 1);
    for (n, dz) in delta_z.iter().enumerate() {
        let row = (0..dz.len())
            .map(|k| Ok(-dot6(&state.grad_f(k, n)?.value, &dz[k])))
            .collect::<Result<Vec<f64>>>()?;
        fprime.push(row);
    }
    Ok(LinearizedState { direction: h.clone(), fprime, delta_z, levels: out.levels, stages: out.stages })
}

/// Reverse sweep in dual arithmetic over the linearized state.
pub fn solve_linearized_costate(
    state: &StateTrajectory,
    costate: &CostateTrajectory,
    linstate: &LinearizedState,
    target: &TargetSpec,
) -> Result<LinearizedCostate> {
    let h = &linstate.direction;
    check_direction(state, h)?;
    if costate.times.len() != state.times.len() || linstate.levels.len() != state.times.len() {
        return Err(Error::State("state, costate and linearized state use different time grids".into()));
    }
    let cells = cells_of::<Dual64>(&state.control, Some(h));
    let out = reverse_sweep(
        &state.fields,
        &state.ensemble.w,
        state.eps,
        costate.cutoff,
        &state.control,
        &cells,
        &linstate.levels,
        &linstate.stages,
        target,
    )?;
    let ens = &state.ensemble;
    let mut gprime = Vec::with_capacity(out.g_tilde.len());
    for (n, lvl) in out.g_tilde.iter().enumerate() {
        let mut row = Vec::with_capacity(ens.len());
        for k in 0..ens.len() {
            let gradf = state.grad_f(k, n)?.value;
            let lam = &costate.lambda[n][k];
            let grad_g: Vec6<f64> = std::array::from_fn(|c| gradf[c] + lam[c] / ens.w[k]);
            row.push(lvl[k].eps - dot6(&grad_g, &linstate.delta_z[n][k]));
        }
        gprime.push(row);
    }
    let du = state.control.dt();
    Ok(LinearizedCostate {
        direction: h.clone(),
        gprime,
        delta_lambda: out
            .lambda
            .iter()
            .map(|l| l.iter().map(|z| std::array::from_fn(|c| z[c].eps)).collect())
            .collect(),
        delta_moment_cells: out.cell_grad.iter().map(|row| row.iter().map(|s| -s.eps / du).collect()).collect(),
    })
}

/// Costate dump: `t k g Gz0_1..Gz0_6`, one row per level and particle.
pub fn format_costate(costate: &CostateTrajectory) -> String {
    let mut s = String::from("t k g Gz0_1 Gz0_2 Gz0_3 Gz0_4 Gz0_5 Gz0_6\n");
    for (n, t) in costate.times.iter().enumerate() {
        for (k, g) in costate.g[n].iter().enumerate() {
            let q = &costate.gz0[n][k];
            s.push_str(&format!(
                "{t:e} {k} {g:e} {:e} {:e} {:e} {:e} {:e} {:e}\n",
                q[0], q[1], q[2], q[3], q[4], q[5]
            ));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coil_fields::CoilGeometry;
    use crate::kernels::CutoffChi;
    use crate::transport::{integrate_forward, sample_initial, InitialDatumSpec, ParticleEnsemble};
    use std::sync::Arc;

    struct Setup {
        ens: Arc<ParticleEnsemble>,
        fields: Arc<CoilFieldSet>,
        u: ControlGrid,
        target: TargetSpec,
        steps: usize,
    }

    fn setup() -> Setup {
        let spec = InitialDatumSpec::new(1.0, [0.0; 3], 1.0, [0.0; 3], 1.0).unwrap();
        let ens = Arc::new(sample_initial(&spec, 3, 10_000).unwrap());
        let fields = Arc::new(
            CoilFieldSet::with_default_reg(vec![
                CoilGeometry::circle("a", 2.0, 1.0, 24, 1.0).unwrap(),
                CoilGeometry::circle("b", 2.0, -1.0, 24, 1.0).unwrap(),
            ])
            .unwrap(),
        );
        let u = ControlGrid::zeros(2, 2, 0.5, &[-2.0, -2.0], &[2.0, 2.0])
            .unwrap()
            .map_values(|i, m, _| 0.8 - 0.6 * i as f64 + 0.3 * m as f64);
        let target = TargetSpec::Bump(InitialDatumSpec::new(1.0, [0.2, 0.0, 0.0], 1.0, [0.0, 0.3, 0.0], 1.0).unwrap());
        Setup { ens, fields, u, target, steps: 8 }
    }

    fn tracking(s: &Setup, u: &ControlGrid) -> f64 {
        let st = integrate_forward(&s.ens, u, &s.fields, s.steps, s.ens.spacing()).unwrap();
        let cross: f64 = st.z[s.steps].iter().zip(&s.ens.w).map(|(z, w)| w * s.target.value(z).unwrap()).sum();
        -cross
    }

    fn wide_chi(state: &StateTrajectory) -> SourceCutoff {
        SourceCutoff::Chi(CutoffChi::new(1.5 * state.radius_z()).unwrap())
    }

    #[test]
    fn terminal_identity_and_velocity_gradient() {
        let s = setup();
        let st = integrate_forward(&s.ens, &s.u, &s.fields, s.steps, s.ens.spacing()).unwrap();
        let co = solve_costate(&st, &s.target, wide_chi(&st)).unwrap();
        assert_eq!(co.terminal_residual(&st), 0.0);
        assert_eq!(co.chi_min, 1.0);
        let zero = solve_costate(&st, &TargetSpec::Zero, wide_chi(&st)).unwrap();
        for k in (0..st.n_particles()).step_by(23) {
            let gv = grad_v_g(&zero, &st, k, s.steps).unwrap().value;
            let gf = st.grad_f(k, s.steps).unwrap().value;
            for c in 0..3 {
                assert!((gv[c] - gf[3 + c]).abs() < 1e-9 * (1.0 + gf[3 + c].abs()));
            }
            assert!(zero.g.iter().all(|l| l[k] == s.ens.f0[k]));
        }
    }

    #[test]
    fn switched_off_source_keeps_costate_constant() {
        let s = setup();
        let st = integrate_forward(&s.ens, &s.u, &s.fields, s.steps, s.ens.spacing()).unwrap();
        let co = solve_costate(&st, &s.target, SourceCutoff::Off).unwrap();
        for k in 0..st.n_particles() {
            let gt = co.g[s.steps][k];
            let qt = co.gz0[s.steps][k];
            for n in 0..s.steps {
                assert_eq!(co.g[n][k], gt);
                for c in 0..6 {
                    assert!((co.gz0[n][k][c] - qt[c]).abs() < 1e-10 * (1.0 + qt[c].abs()));
                }
            }
        }
    }

    #[test]
    fn cutoffs_covering_the_support_agree() {
        let s = setup();
        let st = integrate_forward(&s.ens, &s.u, &s.fields, s.steps, s.ens.spacing()).unwrap();
        let a = solve_costate(&st, &s.target, SourceCutoff::Chi(CutoffChi::new(st.radius_z() * 1.01).unwrap())).unwrap();
        let b = solve_costate(&st, &s.target, SourceCutoff::Chi(CutoffChi::new(st.radius_z() * 3.0).unwrap())).unwrap();
        let worst = a.g.iter().flatten().zip(b.g.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "{worst}");
        assert_eq!(a.moment_cells, b.moment_cells);
    }

    #[test]
    fn adjoint_gradient_matches_central_differences() {
        let s = setup();
        let st = integrate_forward(&s.ens, &s.u, &s.fields, s.steps, s.ens.spacing()).unwrap();
        let co = solve_costate(&st, &s.target, wide_chi(&st)).unwrap();
        let du = s.u.dt();
        for i in 0..2 {
            for m in 0..2 {
                let step = 1e-4;
                let e = s.u.zeros_like().map_values(|a, b, _| if (a, b) == (i, m) { 1.0 } else { 0.0 });
                let fd = (tracking(&s, &s.u.axpy(step, &e)) - tracking(&s, &s.u.axpy(-step, &e))) / (2.0 * step);
                let adj = -co.moment_cells[i][m] * du;
                assert!((fd - adj).abs() <= 1e-6 * fd.abs().max(1e-8), "coil {i} cell {m}: fd {fd} adjoint {adj}");
            }
        }
    }

    #[test]
    fn snapshot_moment_averages_converge_to_cell_moment() {
        let s = setup();
        let gap = |steps: usize| {
            let st = integrate_forward(&s.ens, &s.u, &s.fields, steps, s.ens.spacing()).unwrap();
            let co = solve_costate(&st, &s.target, wide_chi(&st)).unwrap();
            let per = steps / 2;
            let mut worst: f64 = 0.0;
            for i in 0..2 {
                for m in 0..2 {
                    let lv = &co.moment_levels;
                    let avg: f64 = (per * m..per * (m + 1)).map(|n| 0.5 * (lv[n][i] + lv[n + 1][i]) / per as f64).sum();
                    worst = worst.max((avg - co.moment_cells[i][m]).abs() / co.moment_cells[i][m].abs());
                }
            }
            worst
        };
        let (coarse, fine) = (gap(16), gap(32));
        assert!(fine < 1e-2 && fine < 0.5 * coarse, "{coarse} {fine}");
    }

    #[test]
    fn linearized_state_vanishes_is_linear_and_matches_resimulation() {
        let s = setup();
        let st = integrate_forward(&s.ens, &s.u, &s.fields, s.steps, s.ens.spacing()).unwrap();
        let zero = solve_linearized_state(&st, &s.u.zeros_like()).unwrap();
        assert!(zero.fprime.iter().flatten().all(|v| *v == 0.0));
        assert!(zero.fprime[0].iter().all(|v| *v == 0.0));
        let h = s.u.zeros_like().map_values(|i, m, _| 1.0 - 0.5 * (i + 2 * m) as f64);
        let one = solve_linearized_state(&st, &h).unwrap();
        let two = solve_linearized_state(&st, &h.scaled(2.0)).unwrap();
        for (a, b) in one.fprime.iter().flatten().zip(two.fprime.iter().flatten()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        // particle displacement against re-simulation: error is O(α²)
        let err = |alpha: f64| {
            let p = integrate_forward(&s.ens, &s.u.axpy(alpha, &h), &s.fields, s.steps, s.ens.spacing()).unwrap();
            let mut worst: f64 = 0.0;
            for k in 0..st.n_particles() {
                for c in 0..6 {
                    let d = p.z[s.steps][k][c] - st.z[s.steps][k][c] - alpha * one.delta_z[s.steps][k][c];
                    worst = worst.max(d.abs());
                }
            }
            worst
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e1 / e2 > 3.5, "{e1} {e2}");
        // f' against the pushforward density at the base particle positions
        let alpha = 1e-3;
        let p = integrate_forward(&s.ens, &s.u.axpy(alpha, &h), &s.fields, s.steps, s.ens.spacing()).unwrap();
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for k in (0..st.n_particles()).step_by(7) {
            // f_{u+αh}(T, z_k) ≈ f0_k − ∇f·(p.z − st.z) to first order
            let grad = p.grad_f(k, s.steps).unwrap().value;
            let shift: Vec6<f64> = std::array::from_fn(|c| st.z[s.steps][k][c] - p.z[s.steps][k][c]);
            let df = dot6(&grad, &shift) / alpha;
            worst = worst.max((df - one.fprime[s.steps][k]).abs());
            scale = scale.max(df.abs());
        }
        assert!(worst < 1e-2 * scale, "{worst} vs {scale}");
    }

    #[test]
    fn linearized_costate_matches_gradient_differences() {
        let s = setup();
        let st = integrate_forward(&s.ens, &s.u, &s.fields, s.steps, s.ens.spacing()).unwrap();
        let chi = wide_chi(&st);
        let co = solve_costate(&st, &s.target, chi).unwrap();
        let zero_ls = solve_linearized_state(&st, &s.u.zeros_like()).unwrap();
        let zero = solve_linearized_costate(&st, &co, &zero_ls, &s.target).unwrap();
        assert!(zero.gprime.iter().flatten().all(|v| *v == 0.0));
        assert!(zero.delta_moment_cells.iter().flatten().all(|v| *v == 0.0));

        let h = s.u.zeros_like().map_values(|i, m, _| 0.7 - 0.4 * (i + m) as f64);
        let ls = solve_linearized_state(&st, &h).unwrap();
        let lc = solve_linearized_costate(&st, &co, &ls, &s.target).unwrap();
        let terminal = lc.gprime[s.steps].iter().zip(&ls.fprime[s.steps]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(terminal < 1e-12, "{terminal}");
        let moment_err = |alpha: f64| {
            let p = integrate_forward(&s.ens, &s.u.axpy(alpha, &h), &s.fields, s.steps, s.ens.spacing()).unwrap();
            let cp = solve_costate(&p, &s.target, chi).unwrap();
            let mut worst: f64 = 0.0;
            let mut g_worst: f64 = 0.0;
            for i in 0..2 {
                for m in 0..2 {
                    let fd = (cp.moment_cells[i][m] - co.moment_cells[i][m]) / alpha;
                    worst = worst.max((fd - lc.delta_moment_cells[i][m]).abs());
                }
            }
            for k in 0..st.n_particles() {
                // values along perturbed characteristics move by g' + ∇g·δz
                let gradf = st.grad_f(k, 0).unwrap().value;
                let grad_g: Vec6<f64> = std::array::from_fn(|c| gradf[c] + co.lambda[0][k][c] / s.ens.w[k]);
                let along = lc.gprime[0][k] + dot6(&grad_g, &ls.delta_z[0][k]);
                g_worst = g_worst.max(((cp.g[0][k] - co.g[0][k]) / alpha - along).abs());
            }
            (worst, g_worst)
        };
        let (m1, g1) = moment_err(1e-3);
        let (m2, g2) = moment_err(5e-4);
        assert!(m2 < m1 && m1 / m2 > 1.8, "moment {m1} {m2}");
        assert!(g2 < g1, "values {g1} {g2}");
        let scale = lc.delta_moment_cells.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(m2 < 1e-3 * scale, "{m2} vs {scale}");
    }
}
