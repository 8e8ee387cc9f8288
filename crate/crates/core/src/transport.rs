//! Particle discretization of the initial datum and forward integration of the
//! characteristic system `ẋ = v, v̇ = −∂_xψ + v × B` together with the flow
//! Jacobians of the individual characteristics.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coil_fields::{superpose, superpose_value, CoilFieldSet};
use crate::control_opt::ControlGrid;
use crate::error::{Error, Result};
use crate::num::*;

/// `∫_{|y|<r} (1 − |y|²/r²)^n dy` in three dimensions.
pub fn ball_bump_integral(n: u32, r: f64) -> f64 {
    // ∫₀¹ (1 − s²)^n s² ds = ½ · n! / Π_{j=0}^{n} (3/2 + j)
    let mut ratio = 0.5;
    for j in 0..=n {
        if j > 0 {
            ratio *= j as f64;
        }
        ratio /= 1.5 + j as f64;
    }
    4.0 * std::f64::consts::PI * r.powi(3) * ratio
}

/// Product bump `A·(1 − |x−x₀|²/r²)³₊·(1 − |v−v₀|²/s²)³₊`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialDatumSpec {
    pub amplitude: f64,
    pub x_center: Vec3<f64>,
    pub x_radius: f64,
    pub v_center: Vec3<f64>,
    pub v_radius: f64,
}

impl InitialDatumSpec {
    pub fn new(amplitude: f64, x_center: Vec3<f64>, x_radius: f64, v_center: Vec3<f64>, v_radius: f64) -> Result<Self> {
        if !(amplitude >= 0.0) || !amplitude.is_finite() {
            return Err(Error::Config("bump amplitude must be finite and nonnegative".into()));
        }
        if !(x_radius > 0.0 && v_radius > 0.0) {
            return Err(Error::Config("bump radii must be positive".into()));
        }
        Ok(Self { amplitude, x_center, x_radius, v_center, v_radius })
    }

    /// Value and phase-space gradient.
    pub fn eval<S: Real>(&self, z: &Vec6<S>) -> (S, Vec6<S>) {
        let (x, v) = split6(z);
        let (bx, dbx) = bump3(&x, &self.x_center, self.x_radius);
        let (bv, dbv) = bump3(&v, &self.v_center, self.v_radius);
        let a = S::from(self.amplitude);
        let val = a * bx * bv;
        let gx = scale3(&dbx, a * bv);
        let gv = scale3(&dbv, a * bx);
        (val, join6(&gx, &gv))
    }

    pub fn value(&self, z: &Vec6<f64>) -> f64 {
        self.eval(z).0
    }

    pub fn mass(&self) -> f64 {
        self.amplitude * ball_bump_integral(3, self.x_radius) * ball_bump_integral(3, self.v_radius)
    }

    /// `‖f̊‖_{L²}`.
    pub fn l2_norm(&self) -> f64 {
        (self.amplitude.powi(2) * ball_bump_integral(6, self.x_radius) * ball_bump_integral(6, self.v_radius)).sqrt()
    }

    /// Radius of a phase-space ball around the origin containing the support.
    pub fn support_radius(&self) -> f64 {
        let rx = norm3(&self.x_center) + self.x_radius;
        let rv = norm3(&self.v_center) + self.v_radius;
        (rx * rx + rv * rv).sqrt()
    }
}

#[inline]
fn bump3<S: Real>(y: &Vec3<S>, c: &Vec3<f64>, r: f64) -> (S, Vec3<S>) {
    let d = sub3(y, &lift3(c));
    let p = -(dot3(&d, &d) / (r * r)) + 1.0;
    if p.re() <= 0.0 {
        return (zero(), zero3());
    }
    let p2 = p * p;
    (p2 * p, scale3(&d, p2 * (-6.0 / (r * r))))
}

/// Phase-space quadrature points of the initial datum.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub z0: Vec<Vec6<f64>>,
    pub f0: Vec<f64>,
    /// Quadrature weights `f0_k · cell_volume`.
    pub w: Vec<f64>,
    pub gradf0: Vec<Vec6<f64>>,
    pub h_x: f64,
    pub h_v: f64,
    pub cell_volume: f64,
}

impl ParticleEnsemble {
    /// Arbitrary ensemble; weights are `f0 · cell_volume`.
    pub fn from_parts(z0: Vec<Vec6<f64>>, f0: Vec<f64>, gradf0: Vec<Vec6<f64>>, h_x: f64, h_v: f64) -> Result<Self> {
        if z0.len() != f0.len() || z0.len() != gradf0.len() {
            return Err(Error::Config("ensemble arrays differ in length".into()));
        }
        if f0.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("distribution values must be finite and nonnegative".into()));
        }
        let cell_volume = h_x.powi(3) * h_v.powi(3);
        let w = f0.iter().map(|v| v * cell_volume).collect();
        Ok(Self { z0, f0, w, gradf0, h_x, h_v, cell_volume })
    }

    pub fn len(&self) -> usize {
        self.z0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z0.is_empty()
    }

    /// Smallest grid spacing, the default softening length.
    pub fn spacing(&self) -> f64 {
        self.h_x.min(self.h_v)
    }
}

/// Midpoint-rule sampling of the bump on a uniform grid with `resolution`
/// cells per axis across the support diameter. Grid points where the datum vanishes
/// are dropped.
pub fn sample_initial(spec: &InitialDatumSpec, resolution: usize, cap: usize) -> Result<ParticleEnsemble> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be at least 1".into()));
    }
    let h_x = 2.0 * spec.x_radius / resolution as f64;
    let h_v = 2.0 * spec.v_radius / resolution as f64;
    let axis_points = |c: &Vec3<f64>, r: f64, h: f64| {
        let n = resolution;
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let p = [
                        c[0] - r + (i as f64 + 0.5) * h,
                        c[1] - r + (j as f64 + 0.5) * h,
                        c[2] - r + (k as f64 + 0.5) * h,
                    ];
                    if bump3::<f64>(&p, c, r).0 > 0.0 {
                        pts.push(p);
                    }
                }
            }
        }
        pts
    };
    let xs = axis_points(&spec.x_center, spec.x_radius, h_x);
    let vs = axis_points(&spec.v_center, spec.v_radius, h_v);
    let n_p = xs.len() * vs.len();
    if n_p > cap {
        return Err(Error::Config(format!("resolution {resolution} gives {n_p} particles, above the cap {cap}")));
    }
    let mut z0 = Vec::with_capacity(n_p);
    let mut f0 = Vec::with_capacity(n_p);
    let mut gradf0 = Vec::with_capacity(n_p);
    for x in &xs {
        for v in &vs {
            let z = join6(x, v);
            let (val, grad) = spec.eval(&z);
            if val > 0.0 {
                z0.push(z);
                f0.push(val);
                gradf0.push(grad);
            }
        }
    }
    if z0.is_empty() {
        return Err(Error::Config("initial datum vanishes on every grid point".into()));
    }
    ParticleEnsemble::from_parts(z0, f0, gradf0, h_x, h_v)
}

/// Right-hand side of the particle system with the external field.
pub(crate) struct Dynamics<'a> {
    pub fields: &'a CoilFieldSet,
    pub weights: &'a [f64],
    pub eps: f64,
}

/// Accumulate `Σ_{j≠k} w_j K(x_k − x_j)` and optionally `Σ_{j≠k} w_j ∇K(x_k − x_j)`.
/// The loop visits each unordered pair once; every target still receives its
/// contributions in ascending source index.
pub(crate) fn pair_force<S: Real>(
    x: &[Vec3<S>],
    weights: &[f64],
    eps: f64,
    want_grad: bool,
) -> Result<(Vec<Vec3<S>>, Vec<Mat3<S>>)> {
    let n = x.len();
    let mut force = vec![zero3::<S>(); n];
    // symmetric Jacobians stored as (00, 01, 02, 11, 12, 22)
    let mut grad6 = if want_grad { vec![[zero::<S>(); 6]; n] } else { Vec::new() };
    let eps2 = eps * eps;
    for k in 0..n {
        let xk = x[k];
        let wk = weights[k];
        let mut fk = zero3::<S>();
        let mut gk = [zero::<S>(); 6];
        for j in 0..k {
            let d = sub3(&xk, &x[j]);
            let q2 = dot3(&d, &d) + eps2;
            if q2.re() == 0.0 {
                return Err(Error::Singularity(format!("particles {j} and {k} coincide and softening is zero")));
            }
            let inv_q = q2.sqrt().recip();
            let inv_q2 = inv_q * inv_q;
            let inv_q3 = inv_q2 * inv_q;
            let kk = scale3(&d, inv_q3);
            let wj = weights[j];
            let fj = &mut force[j];
            for a in 0..3 {
                fk[a] += kk[a] * wj;
                fj[a] -= kk[a] * wk;
            }
            if want_grad {
                let c = inv_q3 * inv_q2 * (-3.0);
                let g = [
                    d[0] * d[0] * c + inv_q3,
                    d[0] * d[1] * c,
                    d[0] * d[2] * c,
                    d[1] * d[1] * c + inv_q3,
                    d[1] * d[2] * c,
                    d[2] * d[2] * c + inv_q3,
                ];
                let gj = &mut grad6[j];
                for e in 0..6 {
                    gk[e] += g[e] * wj;
                    gj[e] += g[e] * wk;
                }
            }
        }
        for a in 0..3 {
            force[k][a] += fk[a];
        }
        if want_grad {
            for e in 0..6 {
                grad6[k][e] += gk[e];
            }
        }
    }
    let grad = grad6.iter().map(sym_to_mat).collect();
    Ok((force, grad))
}

#[inline]
pub(crate) fn sym_to_mat<S: Real>(g: &[S; 6]) -> Mat3<S> {
    [[g[0], g[1], g[2]], [g[1], g[3], g[4]], [g[2], g[4], g[5]]]
}

/// `A = ∂F/∂z` for one particle with every other particle frozen.
#[inline]
pub(crate) fn assemble_jacobian<S: Real>(v: &Vec3<S>, b: &Vec3<S>, gb: &Mat3<S>, gforce: &Mat3<S>) -> Mat6<S> {
    let mut a = [[zero::<S>(); 6]; 6];
    let sv = skew(v);
    let vgb = matmul3(&sv, gb);
    let sb = skew(b);
    for r in 0..3 {
        a[r][3 + r] = S::from(1.0);
        for c in 0..3 {
            a[3 + r][c] = gforce[r][c] + vgb[r][c];
            a[3 + r][3 + c] = -sb[r][c];
        }
    }
    a
}

impl<'a> Dynamics<'a> {
    pub fn rhs<S: Real>(&self, z: &[Vec6<S>], u: &[S], want_jac: bool) -> Result<(Vec<Vec6<S>>, Vec<Mat6<S>>)> {
        let x: Vec<Vec3<S>> = z.iter().map(|zk| [zk[0], zk[1], zk[2]]).collect();
        let (force, gforce) = pair_force(&x, self.weights, self.eps, want_jac)?;
        let mut dz = Vec::with_capacity(z.len());
        let mut jac = Vec::with_capacity(if want_jac { z.len() } else { 0 });
        for k in 0..z.len() {
            let (xk, vk) = split6(&z[k]);
            if want_jac {
                let (b, gb) = superpose(u, self.fields, &xk)?;
                dz.push(join6(&vk, &add3(&force[k], &cross3(&vk, &b))));
                jac.push(assemble_jacobian(&vk, &b, &gb, &gforce[k]));
            } else {
                let b = superpose_value(u, self.fields, &xk)?;
                dz.push(join6(&vk, &add3(&force[k], &cross3(&vk, &b))));
            }
        }
        Ok((dz, jac))
    }
}

/// Output of a Runge-Kutta sweep over the full ensemble.
pub(crate) struct SweepOut<S> {
    /// Ensemble states at the time levels.
    pub levels: Vec<Vec<Vec6<S>>>,
    /// Stage states `Y_1..Y_4` of every step.
    pub stages: Vec<[Vec<Vec6<S>>; 4]>,
    /// Flow Jacobians at the time levels (only when requested).
    pub jac: Vec<Vec<Mat6<f64>>>,
}

/// Classical RK4 over `steps` uniform steps of size `dt` (negative for a
/// backward sweep). `u_cells[m]` is the control vector of cell `m`; step `n`
/// uses the cell returned by `cell_of`.
pub(crate) fn forward_sweep<S: Real>(
    dynamics: &Dynamics<'_>,
    z0: Vec<Vec6<S>>,
    u_cells: &[Vec<S>],
    dt: f64,
    steps: usize,
    cell_of: impl Fn(usize) -> usize,
    carry_jac: bool,
    keep_stages: bool,
) -> Result<SweepOut<S>> {
    let n_p = z0.len();
    let mut levels = Vec::with_capacity(steps + 1);
    let mut stages = Vec::with_capacity(if keep_stages { steps } else { 0 });
    let mut jac_levels = Vec::new();
    let mut jac: Vec<Mat6<f64>> = vec![identity6(); n_p];
    if carry_jac {
        jac_levels.reserve(steps + 1);
        jac_levels.push(jac.clone());
    }
    levels.push(z0);
    let h2 = S::from(0.5 * dt);
    let h1 = S::from(dt);
    let h6 = S::from(dt / 6.0);
    for n in 0..steps {
        let u = &u_cells[cell_of(n)];
        let z = levels.last().unwrap();
        let y1 = z.clone();
        let (k1, a1) = dynamics.rhs(&y1, u, carry_jac)?;
        let y2: Vec<Vec6<S>> = (0..n_p).map(|k| axpy6(&z[k], h2, &k1[k])).collect();
        let (k2, a2) = dynamics.rhs(&y2, u, carry_jac)?;
        let y3: Vec<Vec6<S>> = (0..n_p).map(|k| axpy6(&z[k], h2, &k2[k])).collect();
        let (k3, a3) = dynamics.rhs(&y3, u, carry_jac)?;
        let y4: Vec<Vec6<S>> = (0..n_p).map(|k| axpy6(&z[k], h1, &k3[k])).collect();
        let (k4, a4) = dynamics.rhs(&y4, u, carry_jac)?;
        let next: Vec<Vec6<S>> = (0..n_p)
            .map(|k| std::array::from_fn(|c| z[k][c] + h6 * (k1[k][c] + (k2[k][c] + k3[k][c]) * 2.0 + k4[k][c])))
            .collect();
        if next.iter().flatten().any(|c| !c.re().is_finite()) {
            return Err(Error::Integration {
                time: (n + 1) as f64 * dt,
                detail: "non-finite particle state".into(),
            });
        }
        if carry_jac {
            for k in 0..n_p {
                let re = |m: &Mat6<S>| -> Mat6<f64> { std::array::from_fn(|r| std::array::from_fn(|c| m[r][c].re())) };
                let j0 = jac[k];
                let q1 = matmul6(&re(&a1[k]), &j0);
                let j2: Mat6<f64> = std::array::from_fn(|r| std::array::from_fn(|c| j0[r][c] + 0.5 * dt * q1[r][c]));
                let q2 = matmul6(&re(&a2[k]), &j2);
                let j3: Mat6<f64> = std::array::from_fn(|r| std::array::from_fn(|c| j0[r][c] + 0.5 * dt * q2[r][c]));
                let q3 = matmul6(&re(&a3[k]), &j3);
                let j4: Mat6<f64> = std::array::from_fn(|r| std::array::from_fn(|c| j0[r][c] + dt * q3[r][c]));
                let q4 = matmul6(&re(&a4[k]), &j4);
                jac[k] = std::array::from_fn(|r| {
                    std::array::from_fn(|c| j0[r][c] + dt / 6.0 * (q1[r][c] + 2.0 * q2[r][c] + 2.0 * q3[r][c] + q4[r][c]))
                });
            }
            jac_levels.push(jac.clone());
        }
        if keep_stages {
            stages.push([y1, y2, y3, y4]);
        }
        levels.push(next);
    }
    Ok(SweepOut { levels, stages, jac: jac_levels })
}

/// Control values per cell as `u_cells[m][i]`, with the derivative part set to
/// the direction `dir` when given.
pub(crate) fn cells_of<S: Real>(control: &ControlGrid, dir: Option<&ControlGrid>) -> Vec<Vec<S>> {
    (0..control.n_cells())
        .map(|m| {
            (0..control.n_coils())
                .map(|i| S::seeded(control.u[i][m], dir.map_or(0.0, |h| h.u[i][m])))
                .collect()
        })
        .collect()
}

/// Time-indexed snapshots of a forward run.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    pub ensemble: Arc<ParticleEnsemble>,
    pub fields: Arc<CoilFieldSet>,
    pub control: ControlGrid,
    pub eps: f64,
    pub times: Vec<f64>,
    pub z: Vec<Vec<Vec6<f64>>>,
    pub jac: Vec<Vec<Mat6<f64>>>,
    /// `max_k |x_k(t)|` per time level.
    pub support_x: Vec<f64>,
    /// `max_k |z_k(t)|` per time level.
    pub support_z: Vec<f64>,
    pub(crate) stages: Vec<[Vec<Vec6<f64>>; 4]>,
}

/// Phase-space gradient reconstructed through the flow Jacobian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reconstructed {
    pub value: Vec6<f64>,
    /// Infinity-norm condition number of the flow Jacobian.
    pub condition: f64,
}

impl Reconstructed {
    pub const ILL_CONDITIONED: f64 = 1e8;

    pub fn ill_conditioned(&self) -> bool {
        self.condition > Self::ILL_CONDITIONED
    }
}

impl StateTrajectory {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.control.t_final / self.steps() as f64
    }

    pub fn t_final(&self) -> f64 {
        self.control.t_final
    }

    pub fn n_particles(&self) -> usize {
        self.ensemble.len()
    }

    /// Support radius in space, `R`.
    pub fn radius_x(&self) -> f64 {
        self.support_x.iter().cloned().fold(0.0, f64::max)
    }

    /// Phase-space support radius over the run, `R_Z`.
    pub fn radius_z(&self) -> f64 {
        self.support_z.iter().cloned().fold(0.0, f64::max)
    }

    pub fn det_j(&self, level: usize, k: usize) -> f64 {
        det6(&self.jac[level][k])
    }

    /// `max_{t,k} |det J_k(t) − 1|`.
    pub fn max_det_deviation(&self) -> f64 {
        self.jac
            .iter()
            .flatten()
            .map(|j| (det6(j) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Distribution values along the characteristics (constant in time).
    pub fn f_values(&self) -> &[f64] {
        &self.ensemble.f0
    }

    /// `∇f(t_n, z_k(t_n)) = J_k^{-T} ∇f̊(z0_k)`.
    pub fn grad_f(&self, k: usize, level: usize) -> Result<Reconstructed> {
        let j = &self.jac[level][k];
        let inv = inverse6(j).ok_or_else(|| Error::State(format!("singular flow Jacobian for particle {k}")))?;
        Ok(Reconstructed { value: matvec6_t(&inv, &self.ensemble.gradf0[k]), condition: cond_inf6(j) })
    }

    /// Integrate back from `z(T)` to `t = 0` with the same control and step count.
    pub fn integrate_backward(&self) -> Result<Vec<Vec6<f64>>> {
        let dynamics = Dynamics { fields: &self.fields, weights: &self.ensemble.w, eps: self.eps };
        let steps = self.steps();
        let cells = cells_of::<f64>(&self.control, None);
        let out = forward_sweep(
            &dynamics,
            self.z[steps].clone(),
            &cells,
            -self.dt(),
            steps,
            |n| self.control.cell_of_step(steps - 1 - n, steps),
            false,
            false,
        )?;
        Ok(out.levels.into_iter().last().unwrap())
    }
}

/// Forward run of the particle system under `control` with `steps` RK4 steps on `[0, T]`.
pub fn integrate_forward(
    ensemble: &Arc<ParticleEnsemble>,
    control: &ControlGrid,
    fields: &Arc<CoilFieldSet>,
    steps: usize,
    eps: f64,
) -> Result<StateTrajectory> {
    control.check_steps(steps)?;
    if control.n_coils() != fields.len() {
        return Err(Error::Config(format!(
            "control has {} coils, field set has {}",
            control.n_coils(),
            fields.len()
        )));
    }
    let dynamics = Dynamics { fields, weights: &ensemble.w, eps };
    let dt = control.t_final / steps as f64;
    let cells = cells_of::<f64>(control, None);
    let out = forward_sweep(
        &dynamics,
        ensemble.z0.clone(),
        &cells,
        dt,
        steps,
        |n| control.cell_of_step(n, steps),
        true,
        true,
    )?;
    let support = |level: &Vec<Vec6<f64>>, dims: usize| {
        level
            .iter()
            .map(|z| z[..dims].iter().map(|c| c * c).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    };
    let support_x = out.levels.iter().map(|l| support(l, 3)).collect();
    let support_z = out.levels.iter().map(|l| support(l, 6)).collect();
    Ok(StateTrajectory {
        ensemble: ensemble.clone(),
        fields: fields.clone(),
        control: control.clone(),
        eps,
        times: (0..=steps).map(|n| n as f64 * dt).collect(),
        z: out.levels,
        jac: out.jac,
        support_x,
        support_z,
        stages: out.stages,
    })
}

/// Right-hand side and Jacobian for one phase point driven by the softened
/// field of `sources` (skipping index `exclude`) and the coil field `Σ u_i m_i`.
pub fn characteristic_rhs(
    z: &Vec6<f64>,
    sources: &[Vec3<f64>],
    weights: &[f64],
    exclude: Option<usize>,
    u_now: &[f64],
    fields: &CoilFieldSet,
    eps: f64,
) -> Result<(Vec6<f64>, Mat6<f64>)> {
    let (x, v) = split6(z);
    let mut force = [0.0; 3];
    let mut gforce = [[0.0; 3]; 3];
    for (j, xj) in sources.iter().enumerate() {
        if Some(j) == exclude {
            continue;
        }
        let (kk, gk) = crate::kernels::coulomb_force_kernel(&sub3(&x, xj), eps)?;
        for a in 0..3 {
            force[a] += weights[j] * kk[a];
            for b in 0..3 {
                gforce[a][b] += weights[j] * gk[a][b];
            }
        }
    }
    let (b, gb) = superpose(u_now, fields, &x)?;
    let acc = add3(&force, &cross3(&v, &b));
    Ok((join6(&v, &acc), assemble_jacobian(&v, &b, &gb, &gforce)))
}

/// `(Σ_k cell_volume · f0_k^p)^{1/p}`, or `max_k f0_k` for `p = ∞`. The value is
/// the same at every time because the flow preserves volume and transports `f`.
pub fn lp_norm_estimate(ensemble: &ParticleEnsemble, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::Precondition(format!("p must lie in [1, ∞], got {p}")));
    }
    if p.is_infinite() {
        return Ok(ensemble.f0.iter().cloned().fold(0.0, f64::max));
    }
    let s: f64 = ensemble.f0.iter().map(|f| ensemble.cell_volume * f.powf(p)).sum();
    Ok(s.powf(1.0 / p))
}

/// Exact `L²` norm of the Gaussian kernel density estimate whose kernel for
/// particle `k` is the pushforward of `N(0, diag(σ²))` under `J_k`.
pub fn kde_l2_norm(z: &[Vec6<f64>], w: &[f64], jac: &[Mat6<f64>], sigma: &Vec6<f64>) -> Result<f64> {
    let n = z.len();
    let cov: Vec<Mat6<f64>> = jac
        .iter()
        .map(|j| std::array::from_fn(|r| std::array::from_fn(|c| (0..6).map(|m| j[r][m] * sigma[m] * sigma[m] * j[c][m]).sum())))
        .collect();
    let norm_const = (2.0 * std::f64::consts::PI).powi(6);
    let mut acc = 0.0;
    for a in 0..n {
        for b in 0..=a {
            let c: Mat6<f64> = std::array::from_fn(|r| std::array::from_fn(|s| cov[a][r][s] + cov[b][r][s]));
            let det = det6(&c);
            let inv = inverse6(&c).ok_or_else(|| Error::State("degenerate kernel covariance".into()))?;
            let d: Vec6<f64> = std::array::from_fn(|i| z[a][i] - z[b][i]);
            let q = dot6(&d, &matvec6(&inv, &d));
            let val = w[a] * w[b] * (-0.5 * q).exp() / (norm_const * det).sqrt();
            acc += if a == b { val } else { 2.0 * val };
        }
    }
    Ok(acc.sqrt())
}

/// [`kde_l2_norm`] with identity Jacobians.
fn kde_l2_norm_axis(z: &[Vec6<f64>], w: &[f64], sigma: &Vec6<f64>) -> f64 {
    let inv: Vec6<f64> = std::array::from_fn(|i| 1.0 / (4.0 * sigma[i] * sigma[i]));
    let det: f64 = sigma.iter().map(|s| 2.0 * s * s).product();
    let c = 1.0 / ((2.0 * std::f64::consts::PI).powi(6) * det).sqrt();
    let mut acc = 0.0;
    for a in 0..z.len() {
        acc += w[a] * w[a];
        for b in 0..a {
            let q: f64 = (0..6).map(|i| (z[a][i] - z[b][i]).powi(2) * inv[i]).sum();
            acc += 2.0 * w[a] * w[b] * (-q).exp();
        }
    }
    (c * acc).sqrt()
}

/// Result of the density-reconstruction check of norm conservation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeReport {
    /// Kernel width in units of the grid spacings.
    pub scale: f64,
    pub norm_initial: f64,
    pub norm_final: f64,
    pub reference: f64,
    pub rel_error: f64,
}

/// Calibrate the kernel width on the initial ensemble so that the density
/// estimate reproduces `reference`, then evaluate the estimate at `t = T`.
pub fn kde_norm_check(state: &StateTrajectory, reference: f64) -> Result<KdeReport> {
    let ens = &state.ensemble;
    let sig = |c: f64| -> Vec6<f64> { [c * ens.h_x, c * ens.h_x, c * ens.h_x, c * ens.h_v, c * ens.h_v, c * ens.h_v] };
    let at0 = |c: f64| kde_l2_norm_axis(&ens.z0, &ens.w, &sig(c));
    // the estimate decreases monotonically with the kernel width
    let (mut lo, mut hi) = (0.05f64, 20.0f64);
    if at0(lo) < reference || at0(hi) > reference {
        return Err(Error::Validation("kernel width calibration bracket failed".into()));
    }
    for _ in 0..40 {
        let mid = (lo * hi).sqrt();
        if at0(mid) > reference {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let scale = (lo * hi).sqrt();
    let norm_initial = at0(scale);
    let last = state.steps();
    let norm_final = kde_l2_norm(&state.z[last], &ens.w, &state.jac[last], &sig(scale))?;
    Ok(KdeReport { scale, norm_initial, norm_final, reference, rel_error: (norm_final - reference).abs() / reference })
}

/// Uniform random control in the admissible box of `template`.
pub fn random_admissible(template: &ControlGrid, rng: &mut impl Rng) -> ControlGrid {
    let mut u = template.clone();
    for i in 0..u.n_coils() {
        for m in 0..u.n_cells() {
            let (lo, hi) = (u.a[i][m], u.b[i][m]);
            u.u[i][m] = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        }
    }
    u
}

/// Largest observed `max_k |z_k^1(T) − z_k^2(T)| / ‖u¹ − u²‖` over random
/// admissible control pairs.
pub fn lipschitz_probe(
    ensemble: &Arc<ParticleEnsemble>,
    fields: &Arc<CoilFieldSet>,
    template: &ControlGrid,
    steps: usize,
    eps: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_pairs {
        let u1 = random_admissible(template, &mut rng);
        let u2 = random_admissible(template, &mut rng);
        let dist = u1.axpy(-1.0, &u2).norm();
        if dist == 0.0 {
            continue;
        }
        let s1 = integrate_forward(ensemble, &u1, fields, steps, eps)?;
        let s2 = integrate_forward(ensemble, &u2, fields, steps, eps)?;
        let dz = s1.z[steps]
            .iter()
            .zip(&s2.z[steps])
            .map(|(a, b)| (0..6).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        worst = worst.max(dz / dist);
    }
    Ok(worst)
}
