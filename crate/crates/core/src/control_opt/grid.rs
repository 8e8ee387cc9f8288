//! Piecewise-constant coil currents on a uniform time grid with box bounds.

use crate::error::{Error, Result};

/// `ℙ_{[lo,hi]}(xi) = min{max{xi, lo}, hi}`. A degenerate interval returns `lo`.
pub fn project_box(xi: f64, lo: f64, hi: f64) -> Result<f64> {
    if lo > hi {
        return Err(Error::Precondition(format!("projection interval [{lo}, {hi}] is empty")));
    }
    Ok(clamp(xi, lo, hi))
}

#[inline]
pub(crate) fn clamp(xi: f64, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        xi.max(lo).min(hi)
    }
}

/// Values `u[i][m]` for coil `i` on cell `m` of the uniform partition of `[0, T]`,
/// together with per-cell bounds `a ≤ 0 ≤ b`. The same type represents
/// perturbation directions, for which the bounds are carried along but unused.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    pub t_final: f64,
    pub u: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl ControlGrid {
    /// Zero control with constant bounds per coil.
    pub fn zeros(n_coils: usize, n_cells: usize, t_final: f64, lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != n_coils || upper.len() != n_coils {
            return Err(Error::Config("one lower and one upper bound per coil expected".into()));
        }
        let a = lower.iter().map(|&v| vec![v; n_cells]).collect();
        let b = upper.iter().map(|&v| vec![v; n_cells]).collect();
        Self::with_bounds(vec![vec![0.0; n_cells]; n_coils], a, b, t_final)
    }

    pub fn with_bounds(u: Vec<Vec<f64>>, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, t_final: f64) -> Result<Self> {
        if !(t_final > 0.0) || !t_final.is_finite() {
            return Err(Error::Config(format!("final time must be positive, got {t_final}")));
        }
        if u.is_empty() || u[0].is_empty() {
            return Err(Error::Config("control grid needs at least one coil and one cell".into()));
        }
        let m = u[0].len();
        for arr in [&u, &a, &b] {
            if arr.len() != u.len() || arr.iter().any(|row| row.len() != m) {
                return Err(Error::Config("control values and bounds must share one N×M shape".into()));
            }
        }
        for i in 0..u.len() {
            for c in 0..m {
                let (lo, hi) = (a[i][c], b[i][c]);
                if !(lo <= 0.0 && 0.0 <= hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::Validation(format!(
                        "bounds violate a_i ≤ 0 ≤ b_i at coil {i}, cell {c}: a = {lo}, b = {hi}"
                    )));
                }
            }
        }
        Ok(Self { t_final, u, a, b })
    }

    pub fn n_coils(&self) -> usize {
        self.u.len()
    }

    pub fn n_cells(&self) -> usize {
        self.u[0].len()
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.n_cells() as f64
    }

    pub fn t_mid(&self, m: usize) -> f64 {
        (m as f64 + 0.5) * self.dt()
    }

    /// Cell containing time step `n` of a uniform `steps`-step integration.
    pub fn cell_of_step(&self, n: usize, steps: usize) -> usize {
        n * self.n_cells() / steps
    }

    pub fn check_steps(&self, steps: usize) -> Result<()> {
        if steps == 0 || !steps.is_multiple_of(self.n_cells()) {
            return Err(Error::Config(format!(
                "time steps ({steps}) must be a positive multiple of the control intervals ({})",
                self.n_cells()
            )));
        }
        Ok(())
    }

    /// Same grid and bounds with new values.
    pub fn with_values(&self, u: Vec<Vec<f64>>) -> Self {
        assert!(u.len() == self.n_coils() && u.iter().all(|r| r.len() == self.n_cells()));
        Self { t_final: self.t_final, u, a: self.a.clone(), b: self.b.clone() }
    }

    pub fn zeros_like(&self) -> Self {
        self.with_values(vec![vec![0.0; self.n_cells()]; self.n_coils()])
    }

    pub fn map_values(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let u = (0..self.n_coils())
            .map(|i| (0..self.n_cells()).map(|m| f(i, m, self.u[i][m])).collect())
            .collect();
        self.with_values(u)
    }

    /// `self + s·other`.
    pub fn axpy(&self, s: f64, other: &ControlGrid) -> Self {
        self.map_values(|i, m, v| v + s * other.u[i][m])
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map_values(|_, _, v| s * v)
    }

    /// Rectangle-rule `L²([0,T]; ℝ^N)` inner product.
    pub fn inner(&self, other: &ControlGrid) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n_coils() {
            for m in 0..self.n_cells() {
                acc += self.u[i][m] * other.u[i][m];
            }
        }
        acc * self.dt()
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn coil_norm(&self, i: usize) -> f64 {
        (self.u[i].iter().map(|v| v * v).sum::<f64>() * self.dt()).sqrt()
    }

    pub fn lower_norm(&self, i: usize) -> f64 {
        (self.a[i].iter().map(|v| v * v).sum::<f64>() * self.dt()).sqrt()
    }

    pub fn upper_norm(&self, i: usize) -> f64 {
        (self.b[i].iter().map(|v| v * v).sum::<f64>() * self.dt()).sqrt()
    }

    pub fn is_admissible(&self) -> bool {
        (0..self.n_coils()).all(|i| (0..self.n_cells()).all(|m| self.a[i][m] <= self.u[i][m] && self.u[i][m] <= self.b[i][m]))
    }

    pub fn require_admissible(&self) -> Result<()> {
        for i in 0..self.n_coils() {
            for m in 0..self.n_cells() {
                let v = self.u[i][m];
                if !(self.a[i][m] <= v && v <= self.b[i][m]) {
                    return Err(Error::Precondition(format!(
                        "control u[{i}][{m}] = {v} outside [{}, {}]",
                        self.a[i][m], self.b[i][m]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Cellwise projection onto the admissible box.
    pub fn projected(&self) -> Self {
        self.map_values(|i, m, v| clamp(v, self.a[i][m], self.b[i][m]))
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().flatten().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}
