#![allow(dead_code)]

use std::sync::Arc;

use vpcoil::coil_fields::{CoilFieldSet, CoilGeometry};
use vpcoil::control_opt::{ControlGrid, CostParams, Problem};
use vpcoil::kernels::{CutoffChi, SourceCutoff};
use vpcoil::target::{ReferenceTarget, TargetSpec};
use vpcoil::transport::{integrate_forward, sample_initial, InitialDatumSpec, ParticleEnsemble};

pub fn unit_bump() -> InitialDatumSpec {
    InitialDatumSpec::new(1.0, [0.0; 3], 1.0, [0.0; 3], 1.0).unwrap()
}

pub fn coil_pair(segments: usize) -> Arc<CoilFieldSet> {
    Arc::new(
        CoilFieldSet::with_default_reg(vec![
            CoilGeometry::circle("top", 2.0, 1.0, segments, 1.0).unwrap(),
            CoilGeometry::circle("bottom", 2.0, -1.0, segments, 1.0).unwrap(),
        ])
        .unwrap(),
    )
}

pub fn small_ensemble() -> Arc<ParticleEnsemble> {
    Arc::new(sample_initial(&unit_bump(), 3, 10_000).unwrap())
}

/// Cutoff whose plateau covers the phase-space support of a run under `u`.
pub fn covering_cutoff(ens: &Arc<ParticleEnsemble>, fields: &Arc<CoilFieldSet>, u: &ControlGrid, steps: usize) -> SourceCutoff {
    let st = integrate_forward(ens, u, fields, steps, ens.spacing()).unwrap();
    SourceCutoff::Chi(CutoffChi::new(2.0 * st.radius_z()).unwrap())
}

/// Two coils, `cells` control cells, bounds ±`bound`, analytic bump target.
pub fn bump_problem(t_final: f64, cells: usize, steps: usize, lambda: f64, bound: f64, target: TargetSpec) -> Problem {
    let ens = small_ensemble();
    let fields = coil_pair(24);
    let template = ControlGrid::zeros(2, cells, t_final, &[-bound, -bound], &[bound, bound]).unwrap();
    let probe = template.map_values(|_, _, _| bound);
    let cutoff = covering_cutoff(&ens, &fields, &probe, steps);
    let eps = ens.spacing();
    Problem::new(ens, fields, CostParams { lambda: vec![lambda; 2], target, t_final }, steps, eps, cutoff, template).unwrap()
}

pub fn shifted_bump() -> TargetSpec {
    TargetSpec::Bump(InitialDatumSpec::new(1.0, [0.2, 0.0, 0.0], 1.0, [0.0, 0.3, 0.0], 1.0).unwrap())
}

/// Synthetic inverse problem: the target is the pushforward under `u*`.
pub fn inverse_problem(lambda: f64) -> (Problem, ControlGrid) {
    let ens = small_ensemble();
    let fields = coil_pair(32);
    let steps = 16;
    let template = ControlGrid::zeros(2, 4, 1.0, &[-0.5, -0.5], &[0.5, 0.5]).unwrap();
    let u_star = template.map_values(|i, m, _| 0.3 * ((m as f64 + 1.0) * (1.0 + i as f64) * 0.9).sin());
    let eps = ens.spacing();
    let reference = ReferenceTarget::build(&ens, &unit_bump(), &fields, &u_star, steps, eps).unwrap();
    let cutoff = covering_cutoff(&ens, &fields, &template.map_values(|_, _, _| 0.5), steps);
    let params = CostParams { lambda: vec![lambda; 2], target: TargetSpec::Reference(Arc::new(reference)), t_final: 1.0 };
    (Problem::new(ens, fields, params, steps, eps, cutoff, template).unwrap(), u_star)
}
