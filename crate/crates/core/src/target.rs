//! Desired distributions `f_d` for the tracking term.

use std::sync::Arc;

use crate::coil_fields::{superpose, superpose_value, CoilFieldSet};
use crate::control_opt::ControlGrid;
use crate::error::{Error, Result};
use crate::num::*;
use crate::transport::{assemble_jacobian, integrate_forward, InitialDatumSpec, ParticleEnsemble};

/// The target distribution of the tracking term.
#[derive(Debug, Clone)]
pub enum TargetSpec {
    Zero,
    /// Analytic product bump.
    Bump(InitialDatumSpec),
    /// Pushforward of the initial datum under a stored reference control.
    Reference(Arc<ReferenceTarget>),
}

impl TargetSpec {
    /// Value and phase-space gradient of `f_d`.
    pub fn eval<S: Real>(&self, z: &Vec6<S>) -> Result<(S, Vec6<S>)> {
        match self {
            TargetSpec::Zero => Ok((zero(), [zero(); 6])),
            TargetSpec::Bump(b) => Ok(b.eval(z)),
            TargetSpec::Reference(r) => r.eval(z, true),
        }
    }

    pub fn value<S: Real>(&self, z: &Vec6<S>) -> Result<S> {
        match self {
            TargetSpec::Zero => Ok(zero()),
            TargetSpec::Bump(b) => Ok(b.eval(z).0),
            TargetSpec::Reference(r) => Ok(r.eval(z, false)?.0),
        }
    }

    /// `‖f_d‖²_{L²}`. For the reference target the flow preserves volume, so the
    /// norm equals the particle quadrature of `‖f̊‖²` used for the state term.
    pub fn norm_sq(&self) -> f64 {
        match self {
            TargetSpec::Zero => 0.0,
            TargetSpec::Bump(b) => b.l2_norm().powi(2),
            TargetSpec::Reference(r) => r.norm_sq,
        }
    }
}

/// `f_d(z) = f̊(Z*(0, T, z))` where `Z*` is the characteristic flow of a
/// reference run. The reference self-field is rebuilt from the stored particle
/// positions, interpolated in time by cubic Hermite polynomials that use the
/// stored velocities as slopes.
#[derive(Debug, Clone)]
pub struct ReferenceTarget {
    pub initial: InitialDatumSpec,
    pub control: ControlGrid,
    pub steps: usize,
    pub eps: f64,
    pub norm_sq: f64,
    fields: Arc<CoilFieldSet>,
    weights: Vec<f64>,
    /// Source positions per level and at the step midpoints.
    levels: Vec<Vec<Vec3<f64>>>,
    mids: Vec<Vec<Vec3<f64>>>,
}

impl ReferenceTarget {
    pub fn build(
        ensemble: &Arc<ParticleEnsemble>,
        initial: &InitialDatumSpec,
        fields: &Arc<CoilFieldSet>,
        u_star: &ControlGrid,
        steps: usize,
        eps: f64,
    ) -> Result<Self> {
        u_star.require_admissible()?;
        let run = integrate_forward(ensemble, u_star, fields, steps, eps)?;
        let dt = run.dt();
        let pos = |lvl: &Vec<Vec6<f64>>| lvl.iter().map(|z| [z[0], z[1], z[2]]).collect::<Vec<_>>();
        let levels: Vec<Vec<Vec3<f64>>> = run.z.iter().map(pos).collect();
        let mids = (0..steps)
            .map(|n| {
                run.z[n]
                    .iter()
                    .zip(&run.z[n + 1])
                    .map(|(a, b)| std::array::from_fn(|d| 0.5 * (a[d] + b[d]) + dt * (a[3 + d] - b[3 + d]) / 8.0))
                    .collect()
            })
            .collect();
        let norm_sq = ensemble.f0.iter().map(|f| ensemble.cell_volume * f * f).sum();
        Ok(Self {
            initial: initial.clone(),
            control: u_star.clone(),
            steps,
            eps,
            norm_sq,
            fields: fields.clone(),
            weights: ensemble.w.clone(),
            levels,
            mids,
        })
    }

    /// Characteristic right-hand side of a test point in the reference field.
    fn rhs<S: Real>(&self, z: &Vec6<S>, sources: &[Vec3<f64>], u: &[S], jac: bool) -> Result<(Vec6<S>, Mat6<S>)> {
        let (x, v) = split6(z);
        let eps2 = self.eps * self.eps;
        let mut force = zero3::<S>();
        let mut g = zero33::<S>();
        for (xj, &wj) in sources.iter().zip(&self.weights) {
            let d = sub3(&x, &lift3(xj));
            let q2 = dot3(&d, &d) + eps2;
            if q2.re() == 0.0 {
                return Err(Error::Singularity("target trace hits a reference particle without softening".into()));
            }
            let inv_q = q2.sqrt().recip();
            let inv_q2 = inv_q * inv_q;
            let inv_q3 = inv_q2 * inv_q;
            for a in 0..3 {
                force[a] += d[a] * inv_q3 * wj;
            }
            if jac {
                let c = inv_q3 * inv_q2 * (-3.0 * wj);
                for a in 0..3 {
                    for b in 0..3 {
                        g[a][b] += d[a] * d[b] * c;
                    }
                    g[a][a] += inv_q3 * wj;
                }
            }
        }
        if jac {
            let (b, gb) = superpose(u, &self.fields, &x)?;
            let acc = add3(&force, &cross3(&v, &b));
            Ok((join6(&v, &acc), assemble_jacobian(&v, &b, &gb, &g)))
        } else {
            let b = superpose_value(u, &self.fields, &x)?;
            let acc = add3(&force, &cross3(&v, &b));
            Ok((join6(&v, &acc), [[zero(); 6]; 6]))
        }
    }

    /// Trace `z` back to `t = 0` and evaluate `f̊` there; with `want_grad` the
    /// gradient `Jbᵀ ∇f̊` uses the Jacobian of the backward map.
    pub fn eval<S: Real>(&self, z: &Vec6<S>, want_grad: bool) -> Result<(S, Vec6<S>)> {
        let dt = -self.control.t_final / self.steps as f64;
        let mut y = *z;
        let mut jb: Mat6<S> = std::array::from_fn(|r| std::array::from_fn(|c| S::from(if r == c { 1.0 } else { 0.0 })));
        let h2 = S::from(0.5 * dt);
        for n in (0..self.steps).rev() {
            let cell = self.control.cell_of_step(n, self.steps);
            let u: Vec<S> = (0..self.control.n_coils()).map(|i| S::from(self.control.u[i][cell])).collect();
            let (k1, a1) = self.rhs(&y, &self.levels[n + 1], &u, want_grad)?;
            let y2 = axpy6(&y, h2, &k1);
            let (k2, a2) = self.rhs(&y2, &self.mids[n], &u, want_grad)?;
            let y3 = axpy6(&y, h2, &k2);
            let (k3, a3) = self.rhs(&y3, &self.mids[n], &u, want_grad)?;
            let y4 = axpy6(&y, S::from(dt), &k3);
            let (k4, a4) = self.rhs(&y4, &self.levels[n], &u, want_grad)?;
            if want_grad {
                let mm = |a: &Mat6<S>, b: &Mat6<S>| -> Mat6<S> {
                    std::array::from_fn(|r| {
                        std::array::from_fn(|c| {
                            let mut s = zero::<S>();
                            for k in 0..6 {
                                s += a[r][k] * b[k][c];
                            }
                            s
                        })
                    })
                };
                let lin = |m: &Mat6<S>, s: f64, q: &Mat6<S>| -> Mat6<S> {
                    std::array::from_fn(|r| std::array::from_fn(|c| m[r][c] + q[r][c] * s))
                };
                let q1 = mm(&a1, &jb);
                let q2 = mm(&a2, &lin(&jb, 0.5 * dt, &q1));
                let q3 = mm(&a3, &lin(&jb, 0.5 * dt, &q2));
                let q4 = mm(&a4, &lin(&jb, dt, &q3));
                jb = std::array::from_fn(|r| {
                    std::array::from_fn(|c| jb[r][c] + (q1[r][c] + (q2[r][c] + q3[r][c]) * 2.0 + q4[r][c]) * (dt / 6.0))
                });
            }
            y = std::array::from_fn(|c| y[c] + (k1[c] + (k2[c] + k3[c]) * 2.0 + k4[c]) * (dt / 6.0));
        }
        let (val, grad0) = self.initial.eval(&y);
        if !want_grad {
            return Ok((val, [zero(); 6]));
        }
        let grad = std::array::from_fn(|c| {
            let mut s = zero::<S>();
            for r in 0..6 {
                s += jb[r][c] * grad0[r];
            }
            s
        });
        Ok((val, grad))
    }
}
