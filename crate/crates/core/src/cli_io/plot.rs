//! Columnar text for plotting. Every file has one header line of column
//! names; floats are written in shortest round-trip form.

use std::fmt::Write;

use crate::control_opt::ControlGrid;
use crate::transport::StateTrajectory;

/// One row per `(t, k)`: phase-space position, `det J` and `f̊`.
pub fn format_trajectory(state: &StateTrajectory) -> String {
    let mut s = String::from("t k x1 x2 x3 v1 v2 v3 detJ f0\n");
    for (n, level) in state.z.iter().enumerate() {
        for (k, z) in level.iter().enumerate() {
            let _ = write!(s, "{:e} {k}", state.times[n]);
            for c in z {
                let _ = write!(s, " {c:e}");
            }
            let _ = writeln!(s, " {:e} {:e}", state.det_j(n, k), state.ensemble.f0[k]);
        }
    }
    s
}

/// Spatial and phase-space support radii per time level.
pub fn format_support(state: &StateTrajectory) -> String {
    let mut s = String::from("t radius_x radius_z\n");
    for n in 0..state.times.len() {
        let _ = writeln!(s, "{:e} {:e} {:e}", state.times[n], state.support_x[n], state.support_z[n]);
    }
    s
}

/// Particle scatter at the chosen time levels.
pub fn format_slices(state: &StateTrajectory, levels: &[usize]) -> String {
    let mut s = String::from("t k x1 x2 x3 v1 v2 v3 f0\n");
    for &n in levels.iter().filter(|n| **n < state.times.len()) {
        for (k, z) in state.z[n].iter().enumerate() {
            let _ = write!(s, "{:e} {k}", state.times[n]);
            for c in z {
                let _ = write!(s, " {c:e}");
            }
            let _ = writeln!(s, " {:e}", state.ensemble.f0[k]);
        }
    }
    s
}

/// Piecewise-constant schedule `u_i(t)` with its bounds, one row per cell.
pub fn format_schedule(u: &ControlGrid) -> String {
    let mut s = String::from("i t_start t_end u a b\n");
    for i in 0..u.n_coils() {
        for m in 0..u.n_cells() {
            let t0 = m as f64 * u.dt();
            let _ = writeln!(s, "{i} {:e} {:e} {:e} {:e} {:e}", t0, t0 + u.dt(), u.u[i][m], u.a[i][m], u.b[i][m]);
        }
    }
    s
}

/// Start, middle and end levels of a run.
pub fn default_slice_levels(steps: usize) -> Vec<usize> {
    let mut v = vec![0, steps / 2, steps];
    v.dedup();
    v
}
