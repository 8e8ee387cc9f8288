//! Softened Coulomb kernels, the self-consistent potential, the costate
//! source and the smooth phase-space cutoff.

use crate::error::{Error, Result};
use crate::num::*;

/// Plummer softening length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingParam {
    pub epsilon: f64,
}

impl SmoothingParam {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(format!("softening must be finite and nonnegative, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }

    /// Ensembles with more than one particle need a positive softening.
    pub fn validate_for(&self, n_particles: usize) -> Result<()> {
        if n_particles >= 2 && self.epsilon <= 0.0 {
            return Err(Error::Config("softening must be positive for ensembles with two or more particles".into()));
        }
        Ok(())
    }
}

/// `K(d) = d / (|d|² + eps²)^{3/2}` and its Jacobian `∂K_a/∂d_b`.
#[inline]
pub fn coulomb_force_kernel<S: Real>(d: &Vec3<S>, eps: f64) -> Result<(Vec3<S>, Mat3<S>)> {
    let q2 = dot3(d, d) + eps * eps;
    if q2.re() == 0.0 {
        return Err(Error::Singularity("Coulomb kernel at zero separation without softening".into()));
    }
    Ok(kernel_unchecked(d, q2))
}

#[inline]
pub(crate) fn kernel_unchecked<S: Real>(d: &Vec3<S>, q2: S) -> (Vec3<S>, Mat3<S>) {
    let inv_q = q2.sqrt().recip();
    let inv_q3 = inv_q * inv_q * inv_q;
    let inv_q5 = inv_q3 * inv_q * inv_q;
    let k = scale3(d, inv_q3);
    let mut g = [[zero::<S>(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            g[a][b] = d[a] * d[b] * inv_q5 * (-3.0);
        }
        g[a][a] += inv_q3;
    }
    (k, g)
}

/// Potential `ψ(x) = Σ w_k / √(|x − x_k|² + eps²)`, its gradient `∂_xψ = −Σ w_k K(x − x_k)`
/// and Hessian `−Σ w_k ∇K(x − x_k)`. Summation runs in ascending particle index.
pub fn self_field(positions: &[Vec3<f64>], weights: &[f64], x: &Vec3<f64>, eps: f64) -> Result<(f64, Vec3<f64>, Mat3<f64>)> {
    if positions.len() != weights.len() {
        return Err(Error::Precondition("positions and weights differ in length".into()));
    }
    let mut psi = 0.0;
    let mut e = [0.0; 3];
    let mut h = [[0.0; 3]; 3];
    for (xk, &wk) in positions.iter().zip(weights) {
        if !wk.is_finite() {
            return Err(Error::Precondition("non-finite particle weight".into()));
        }
        let d = sub3(x, xk);
        let (k, gk) = coulomb_force_kernel(&d, eps)?;
        psi += wk / (dot3(&d, &d) + eps * eps).sqrt();
        for a in 0..3 {
            e[a] -= wk * k[a];
            for b in 0..3 {
                h[a][b] -= wk * gk[a][b];
            }
        }
    }
    Ok((psi, e, h))
}

/// Costate source `Φ(x) = Σ w_k K(x − x_k)·(∂_v g)_k`.
pub fn phi_field(positions: &[Vec3<f64>], weights: &[f64], grad_v_g: &[Vec3<f64>], x: &Vec3<f64>, eps: f64) -> Result<f64> {
    if grad_v_g.len() != positions.len() {
        return Err(Error::State(format!(
            "velocity gradients available for {} of {} particles",
            grad_v_g.len(),
            positions.len()
        )));
    }
    if weights.len() != positions.len() {
        return Err(Error::Precondition("positions and weights differ in length".into()));
    }
    let mut phi = 0.0;
    for k in 0..positions.len() {
        let (kk, _) = coulomb_force_kernel(&sub3(x, &positions[k]), eps)?;
        phi += weights[k] * dot3(&kk, &grad_v_g[k]);
    }
    Ok(phi)
}

/// Radial cutoff equal to one on `|z| ≤ R` and vanishing for `|z| ≥ 2R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffChi {
    pub plateau_radius: f64,
}

impl CutoffChi {
    pub fn new(plateau_radius: f64) -> Result<Self> {
        if !(plateau_radius > 0.0) || !plateau_radius.is_finite() {
            return Err(Error::Config(format!("cutoff plateau radius must be positive, got {plateau_radius}")));
        }
        Ok(Self { plateau_radius })
    }

    pub fn outer_radius(&self) -> f64 {
        2.0 * self.plateau_radius
    }
}

/// Quintic transition `q(s) = 1 − s³(10 − 15s + 6s²)` and `q'(s)` on `s ∈ [0, 1]`.
#[inline]
fn quintic<S: Real>(s: S) -> (S, S) {
    let s2 = s * s;
    let q = -(s2 * s) * (s * s * 6.0 - s * 15.0 + 10.0) + 1.0;
    let one_minus = -s + 1.0;
    let dq = s2 * one_minus * one_minus * (-30.0);
    (q, dq)
}

/// Value and phase-space gradient of the cutoff.
pub fn chi_eval<S: Real>(z: &Vec6<S>, chi: &CutoffChi) -> (S, Vec6<S>) {
    let r = chi.plateau_radius;
    let n2 = dot6(z, z);
    let n2r = n2.re();
    if n2r <= r * r {
        return (S::from(1.0), [zero(); 6]);
    }
    if n2r >= 4.0 * r * r {
        return (zero(), [zero(); 6]);
    }
    let n = n2.sqrt();
    let s = (n - r) / r;
    let (q, dq) = quintic(s);
    let coef = dq / (n * r);
    (q, std::array::from_fn(|i| z[i] * coef))
}

/// How the costate source is localized in phase space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceCutoff {
    Chi(CutoffChi),
    /// The source term is switched off entirely (diagnostic variant).
    Off,
}

impl SourceCutoff {
    #[inline]
    pub fn eval<S: Real>(&self, z: &Vec6<S>) -> (S, Vec6<S>) {
        match self {
            SourceCutoff::Chi(c) => chi_eval(z, c),
            SourceCutoff::Off => (zero(), [zero(); 6]),
        }
    }
}
