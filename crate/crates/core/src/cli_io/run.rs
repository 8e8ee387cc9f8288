//! Subcommand orchestration. Each command writes its artifacts into an
//! output directory and reports the checks it ran.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::format_costate;
use crate::coil_fields::{read_coil_file, CoilFieldSet, divergence_residual, divergence_residual_fd, format_table, tabulate_fields, SampleBox};
use crate::control_opt::*;
use crate::error::Result;
use crate::transport::{kde_norm_check, lp_norm_estimate, random_admissible};

use super::plot::{default_slice_levels, format_schedule, format_slices, format_support, format_trajectory};
use super::scenario::{Scenario, SolverKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fields,
    Simulate,
    Optimize,
    Verify,
    ProbeUniqueness,
    Ssc,
}

/// A named check with its measured value and threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, passed: value <= threshold }
    }

    fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, passed: value >= threshold }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub checks: Vec<Check>,
    /// Human-readable lines for the terminal.
    pub summary: Vec<String>,
}

impl RunReport {
    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    fn write(&mut self, dir: &Path, name: &str, text: &str) -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text)?;
        self.files.push(path);
        Ok(())
    }

    fn note(&mut self, line: String) {
        self.summary.push(line);
    }
}

/// Rows `check value threshold status`.
pub fn format_checks(checks: &[Check]) -> String {
    let mut s = String::from("check value threshold status\n");
    for c in checks {
        let _ = writeln!(s, "{} {:e} {:e} {}", c.name, c.value, c.threshold, if c.passed { "PASS" } else { "FAIL" });
    }
    s
}

fn quantities(rows: &[(&str, f64)]) -> String {
    let mut s = String::from("quantity value\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k} {v:e}");
    }
    s
}

/// Run `command` on `scenario`, writing into `out_dir`. `seed` overrides the
/// scenario seed for every randomized step.
pub fn run(command: Command, scenario: &Scenario, out_dir: &Path, seed: Option<u64>) -> Result<RunReport> {
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(scenario.seed));
    let mut rep = RunReport::default();
    match command {
        Command::Fields => fields(&scenario.coil_file, scenario.table_half_width, scenario.table_spacing, out_dir, &mut rep)?,
        Command::Simulate => simulate(scenario, out_dir, &mut rep)?,
        Command::Optimize => {
            optimize(scenario, out_dir, &mut rep)?;
        }
        Command::Verify => verify(scenario, out_dir, &mut rep, &mut rng)?,
        Command::ProbeUniqueness => probe_uniqueness(scenario, out_dir, &mut rep, &mut rng)?,
        Command::Ssc => ssc(scenario, out_dir, &mut rep, &mut rng)?,
    }
    Ok(rep)
}

/// Field table over the cube `[−half_width, half_width]³` and the divergence
/// report for a coil file.
pub fn run_fields(coil_file: &Path, half_width: f64, spacing: f64, out_dir: &Path) -> Result<RunReport> {
    std::fs::create_dir_all(out_dir)?;
    let mut rep = RunReport::default();
    fields(coil_file, half_width, spacing, out_dir, &mut rep)?;
    Ok(rep)
}

fn fields(coil_file: &Path, half_width: f64, spacing: f64, out: &Path, rep: &mut RunReport) -> Result<()> {
    let fields = CoilFieldSet::with_default_reg(read_coil_file(coil_file)?)?;
    let bx = SampleBox::cube(half_width);
    let table = tabulate_fields(&fields, bx, spacing, None)?;
    rep.write(out, "fields_table.txt", &format_table(&table)?)?;
    let analytic = divergence_residual(&fields, &bx, 200)?;
    let fd = divergence_residual_fd(&fields, &bx, 200, 1e-4)?;
    let mut s = String::from("coil name analytic_div fd_div\n");
    for (i, coil) in fields.coils.iter().enumerate() {
        let _ = writeln!(s, "{i} {} {:e} {:e}", coil.name, analytic[i], fd[i]);
        rep.note(format!("coil {i} ({}): max |div m| = {:e}", coil.name, analytic[i]));
    }
    rep.write(out, "divergence.txt", &s)
}

fn simulate(scenario: &Scenario, out: &Path, rep: &mut RunReport) -> Result<()> {
    let setup = scenario.build()?;
    let pb = &setup.problem;
    let cost = pb.evaluate_cost(&setup.u0)?;
    let state = &cost.state;
    let lp2 = lp_norm_estimate(&pb.ensemble, 2.0)?;
    let kde = kde_norm_check(state, lp2)?;
    rep.write(out, "trajectory.txt", &format_trajectory(state))?;
    rep.write(out, "support.txt", &format_support(state))?;
    rep.write(out, "slices.txt", &format_slices(state, &default_slice_levels(pb.steps)))?;
    rep.write(out, "schedule.txt", &format_schedule(&setup.u0))?;
    let diag = [
        ("particles", pb.ensemble.len() as f64),
        ("J", cost.j),
        ("max_detJ_deviation", state.max_det_deviation()),
        ("lp2_norm", lp2),
        ("kde_norm_T", kde.norm_final),
        ("kde_rel_error", kde.rel_error),
        ("radius_z", state.radius_z()),
    ];
    rep.write(out, "diagnostics.txt", &quantities(&diag))?;
    rep.note(format!("J = {:e}, max |det J - 1| = {:e}, KDE error = {:e}", cost.j, state.max_det_deviation(), kde.rel_error));
    Ok(())
}

fn solve(scenario: &Scenario, problem: &Problem, u0: &ControlGrid) -> Result<SolveResult> {
    let t = &scenario.tolerances;
    match scenario.solver {
        SolverKind::Pgd => projected_gradient_descent(
            problem,
            u0,
            &PgdOptions { max_iter: t.max_iter, tol: t.solver_tol, ..Default::default() },
        ),
        SolverKind::FixedPoint => {
            fixed_point_sweep(problem, u0, t.theta, &SweepOptions { max_iter: t.max_iter, tol: t.solver_tol })
        }
    }
}

fn optimize(scenario: &Scenario, out: &Path, rep: &mut RunReport) -> Result<(Problem, SolveResult)> {
    let setup = scenario.build()?;
    let res = solve(scenario, &setup.problem, &setup.u0)?;
    let last = &res.last;
    let kkt = kkt_extract(&res.u, &last.grad);
    rep.write(out, "control.txt", &format_control(&res.u, &last.moment.p, &kkt))?;
    rep.write(out, "history.txt", &format_history(&res.history))?;
    rep.write(out, "schedule.txt", &format_schedule(&res.u))?;
    rep.write(out, "costate.txt", &format_costate(&last.costate))?;
    rep.write(out, "support.txt", &format_support(&last.cost.state))?;
    rep.write(out, "slices.txt", &format_slices(&last.cost.state, &default_slice_levels(setup.problem.steps)))?;
    rep.note(format!(
        "{} after {} iterations: J = {:e}, residual = {:e}",
        if res.converged { "converged" } else { "stopped without convergence" },
        res.history.len() - 1,
        last.cost.j,
        res.history.last().map_or(0.0, |r| r.grad_norm)
    ));
    Ok((setup.problem, res))
}

/// Direction in `[−1, 1]` per cell, zero on cells whose box is degenerate.
fn random_direction(template: &ControlGrid, rng: &mut impl Rng) -> ControlGrid {
    let vals = (0..template.n_coils())
        .map(|i| {
            (0..template.n_cells())
                .map(|m| if template.a[i][m] < template.b[i][m] { rng.gen_range(-1.0..1.0) } else { 0.0 })
                .collect()
        })
        .collect();
    template.with_values(vals)
}

fn verify(scenario: &Scenario, out: &Path, rep: &mut RunReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let tol = &scenario.tolerances;
    let setup = scenario.build()?;
    let pb = &setup.problem;

    // adjoint gradient against central differences of J
    let mut worst = 0.0f64;
    for _ in 0..tol.fd_pairs {
        let u = random_admissible(&pb.template, rng).scaled(0.5);
        let h = random_direction(&pb.template, rng);
        let margin = (0..u.n_coils())
            .flat_map(|i| (0..u.n_cells()).map(move |m| (i, m)))
            .filter(|&(i, m)| h.u[i][m] != 0.0)
            .map(|(i, m)| (u.u[i][m] - u.a[i][m]).min(u.b[i][m] - u.u[i][m]))
            .fold(f64::INFINITY, f64::min);
        let alpha = tol.fd_alpha.min(0.5 * margin);
        let jp = pb.evaluate_cost(&u.axpy(alpha, &h))?.j;
        let jm = pb.evaluate_cost(&u.axpy(-alpha, &h))?.j;
        let fd = (jp - jm) / (2.0 * alpha);
        let adj = pb.gradient(&u)?.grad.inner(&h);
        worst = worst.max((fd - adj).abs() / fd.abs().max(f64::MIN_POSITIVE));
    }
    rep.checks.push(Check::at_most("gradient_vs_fd", worst, tol.fd_rel));

    let res = optimality_residual(&setup.u0, pb)?;
    rep.checks.push(Check::at_most("liouville", res.liouville, tol.liouville));
    rep.checks.push(Check::at_most("kde_norm_conservation", res.norm_drift, tol.kde_rel));
    rep.checks.push(Check::at_most("chi_independence", res.chi_gap, tol.chi_agreement));

    let sol = solve(scenario, pb, &setup.u0)?;
    rep.checks.push(Check::at_least("solver_converged", if sol.converged { 1.0 } else { 0.0 }, 1.0));
    let kkt = kkt_extract(&sol.u, &sol.last.grad);
    rep.checks.push(Check::at_most("kkt_stationarity", kkt.stationarity, tol.kkt));
    rep.checks.push(Check::at_most("kkt_dual_feasibility", kkt.dual_feasibility, tol.kkt));
    rep.checks.push(Check::at_most("kkt_complementarity", kkt.complementarity, tol.kkt));
    let proj = projection_residual(pb, &sol.u, &sol.last.moment.p).into_iter().flatten().fold(0.0, f64::max);
    rep.checks.push(Check::at_most("projection_formula", proj, tol.kkt));
    let vi = variational_inequality_check(&sol.u, &sol.last.grad, 4 * tol.n_dirs, rng);
    rep.checks.push(Check::at_least("variational_inequality", vi, -tol.kkt));

    rep.write(out, "verify_report.txt", &format_checks(&rep.checks))?;
    for c in rep.checks.clone() {
        rep.note(format!("{:<24} {:>12.4e} (threshold {:.1e}) {}", c.name, c.value, c.threshold, if c.passed { "PASS" } else { "FAIL" }));
    }
    Ok(())
}

fn probe_uniqueness(scenario: &Scenario, out: &Path, rep: &mut RunReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let t = &scenario.tolerances;
    let setup = scenario.build()?;
    let report = uniqueness_probe(
        &setup.problem,
        t.n_starts,
        t.theta,
        &SweepOptions { max_iter: t.max_iter, tol: t.solver_tol },
        rng,
    )?;
    let mut s = String::from("start status u_norm distance_to_first\n");
    let mut controls = report.controls.iter();
    let first = report.controls.first();
    for (k, outcome) in report.outcomes.iter().enumerate() {
        match outcome {
            Ok(conv) => {
                let u = controls.next().expect("one control per successful start");
                let d = first.map_or(0.0, |f| u.axpy(-1.0, f).norm());
                let status = if *conv { "converged" } else { "not_converged" };
                let _ = writeln!(s, "{k} {status} {:e} {:e}", u.norm(), d);
            }
            Err(e) => {
                rep.note(format!("start {k} failed: {e}"));
                let _ = writeln!(s, "{k} failed NaN NaN");
            }
        }
    }
    rep.write(out, "uniqueness.txt", &s)?;
    rep.note(format!("{} starts, largest pairwise distance {:e}", t.n_starts, report.max_distance));
    Ok(())
}

fn ssc(scenario: &Scenario, out: &Path, rep: &mut RunReport, rng: &mut ChaCha8Rng) -> Result<()> {
    let (problem, sol) = optimize(scenario, out, rep)?;
    let r = ssc_sample_check(&problem, &sol.u, scenario.tolerances.n_dirs, None, rng)?;
    let q = r.min_quotient.unwrap_or(f64::NAN);
    let rows = [("min_quotient", q), ("samples_used", r.samples_used as f64), ("degenerate", if r.degenerate { 1.0 } else { 0.0 })];
    rep.write(out, "ssc.txt", &quantities(&rows))?;
    rep.note(if r.degenerate {
        "every sampled direction left the critical cone; no quotient available".to_string()
    } else {
        format!("smallest curvature quotient {q:e} over {} directions", r.samples_used)
    });
    Ok(())
}
