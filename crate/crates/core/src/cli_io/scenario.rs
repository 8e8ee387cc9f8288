//! Scenario files: flat `key = value` text split into fixed sections.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::coil_fields::{read_coil_file, CoilFieldSet};
use crate::control_opt::{ControlGrid, CostParams, Problem};
use crate::error::{Error, Result};
use crate::kernels::{CutoffChi, SmoothingParam, SourceCutoff};
use crate::num::Vec3;
use crate::target::{ReferenceTarget, TargetSpec};
use crate::transport::{integrate_forward, sample_initial, InitialDatumSpec, ParticleEnsemble};

const SECTIONS: [&str; 6] = ["coils", "initial", "target", "control", "discretization", "tolerances"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Pgd,
    FixedPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetChoice {
    Zero,
    Bump(InitialDatumSpec),
    /// Pushforward of the initial datum under the stored control `u*`.
    Reference { u_star: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tolerances {
    pub solver_tol: f64,
    pub max_iter: usize,
    pub theta: f64,
    pub fd_alpha: f64,
    pub fd_pairs: usize,
    pub fd_rel: f64,
    pub liouville: f64,
    pub kde_rel: f64,
    pub chi_agreement: f64,
    pub kkt: f64,
    pub n_dirs: usize,
    pub n_starts: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            solver_tol: 1e-9,
            max_iter: 200,
            theta: 1.0,
            fd_alpha: 1e-3,
            fd_pairs: 5,
            fd_rel: 1e-3,
            liouville: 1e-6,
            kde_rel: 0.05,
            chi_agreement: 1e-6,
            kkt: 1e-5,
            n_dirs: 8,
            n_starts: 4,
        }
    }
}

/// A fully validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Coil geometry file, resolved against the scenario file's directory.
    pub coil_file: PathBuf,
    /// Half-width and spacing of the field table written by `fields`.
    pub table_half_width: f64,
    pub table_spacing: f64,
    pub initial: InitialDatumSpec,
    pub resolution: usize,
    pub particle_cap: usize,
    pub target: TargetChoice,
    pub t_final: f64,
    pub cells: usize,
    pub lambda: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Starting control; zero when omitted.
    pub u0: Vec<Vec<f64>>,
    pub solver: SolverKind,
    pub steps: usize,
    /// Softening length; the particle spacing when omitted.
    pub eps: Option<f64>,
    /// Cutoff plateau as a multiple of the support radius of a run at the upper bounds.
    pub cutoff_factor: f64,
    pub seed: u64,
    pub tolerances: Tolerances,
}

/// Everything a subcommand needs, built from a scenario.
#[derive(Debug, Clone)]
pub struct Setup {
    pub problem: Problem,
    pub u0: ControlGrid,
}

type Section = BTreeMap<String, (String, usize)>;

const BUMP_KEYS: [&str; 5] = ["amplitude", "x_center", "x_radius", "v_center", "v_radius"];

fn known_key(section: &str, key: &str) -> bool {
    let indexed = |prefix: &str| key.strip_prefix(prefix).is_some_and(|i| i.parse::<usize>().is_ok());
    match section {
        "coils" => ["file", "table_half_width", "table_spacing"].contains(&key),
        "initial" => BUMP_KEYS.contains(&key) || ["resolution", "cap"].contains(&key),
        "target" => key == "kind" || BUMP_KEYS.contains(&key) || indexed("u_star."),
        "control" => ["t_final", "cells", "lambda", "lower", "upper", "solver"].contains(&key) || indexed("u0."),
        "discretization" => ["steps", "eps", "cutoff_factor", "seed"].contains(&key),
        "tolerances" => [
            "solver_tol",
            "max_iter",
            "theta",
            "fd_alpha",
            "fd_pairs",
            "fd_rel",
            "liouville",
            "kde_rel",
            "chi_agreement",
            "kkt",
            "n_dirs",
            "n_starts",
        ]
        .contains(&key),
        _ => false,
    }
}

struct Reader<'a> {
    path: &'a str,
    sections: BTreeMap<String, Section>,
}

impl Reader<'_> {
    fn raw(&mut self, sec: &str, key: &str) -> Option<(String, usize)> {
        self.sections.get_mut(sec).and_then(|s| s.remove(key))
    }

    fn parse<T: std::str::FromStr>(&self, sec: &str, key: &str, raw: (String, usize)) -> Result<T> {
        raw.0.parse().map_err(|_| Error::Parse {
            path: self.path.to_string(),
            line: raw.1,
            msg: format!("[{sec}] {key}: cannot parse {:?}", raw.0),
        })
    }

    fn opt<T: std::str::FromStr>(&mut self, sec: &str, key: &str) -> Result<Option<T>> {
        match self.raw(sec, key) {
            Some(r) => self.parse(sec, key, r).map(Some),
            None => Ok(None),
        }
    }

    fn req<T: std::str::FromStr>(&mut self, sec: &str, key: &str) -> Result<T> {
        self.opt(sec, key)?
            .ok_or_else(|| Error::Validation(format!("missing required key [{sec}] {key}")))
    }

    fn list(&mut self, sec: &str, key: &str) -> Result<Option<Vec<f64>>> {
        match self.raw(sec, key) {
            None => Ok(None),
            Some((text, line)) => text
                .split_whitespace()
                .map(|t| self.parse(sec, key, (t.to_string(), line)))
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    fn req_list(&mut self, sec: &str, key: &str) -> Result<Vec<f64>> {
        self.list(sec, key)?
            .ok_or_else(|| Error::Validation(format!("missing required key [{sec}] {key}")))
    }

    fn vec3(&mut self, sec: &str, key: &str) -> Result<Vec3<f64>> {
        let v = self.req_list(sec, key)?;
        <[f64; 3]>::try_from(v).map_err(|_| Error::Validation(format!("[{sec}] {key} needs three components")))
    }

    fn bump(&mut self, sec: &str) -> Result<InitialDatumSpec> {
        InitialDatumSpec::new(
            self.req(sec, "amplitude")?,
            self.vec3(sec, "x_center")?,
            self.req(sec, "x_radius")?,
            self.vec3(sec, "v_center")?,
            self.req(sec, "v_radius")?,
        )
    }

    /// Rows `prefix.0 … prefix.{n−1}`, each with `cells` values.
    fn rows(&mut self, sec: &str, prefix: &str, n: usize, cells: usize) -> Result<Option<Vec<Vec<f64>>>> {
        let mut rows = Vec::new();
        for i in 0..n {
            let key = format!("{prefix}.{i}");
            match self.list(sec, &key)? {
                Some(r) if r.len() == cells => rows.push(r),
                Some(r) => {
                    return Err(Error::Validation(format!("[{sec}] {key} has {} values, expected {cells}", r.len())))
                }
                None if i == 0 => return Ok(None),
                None => return Err(Error::Validation(format!("missing required key [{sec}] {key}"))),
            }
        }
        Ok(Some(rows))
    }

    /// Anything left over was not recognized.
    fn finish(self) -> Result<()> {
        for (sec, keys) in &self.sections {
            if let Some((key, (_, line))) = keys.iter().min_by_key(|(_, (_, l))| *l) {
                return Err(Error::Parse { path: self.path.to_string(), line: *line, msg: format!("unknown key [{sec}] {key}") });
            }
        }
        Ok(())
    }
}

fn tokenize(text: &str, path: &str) -> Result<BTreeMap<String, Section>> {
    let perr = |line: usize, msg: String| Error::Parse { path: path.to_string(), line, msg };
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            if !SECTIONS.contains(&name) {
                return Err(perr(line, format!("unknown section [{name}]")));
            }
            if sections.contains_key(name) {
                return Err(perr(line, format!("section [{name}] appears twice")));
            }
            sections.insert(name.to_string(), Section::new());
            current = Some(name.to_string());
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| perr(line, format!("expected `key = value`, got {body:?}")))?;
        let sec = current.as_ref().ok_or_else(|| perr(line, "key outside of any section".into()))?;
        let key = key.trim().to_string();
        if !known_key(sec, &key) {
            return Err(perr(line, format!("unknown key [{sec}] {key}")));
        }
        let entry = sections.get_mut(sec).expect("section was inserted");
        if entry.contains_key(&key) {
            return Err(perr(line, format!("duplicate key [{sec}] {key}")));
        }
        entry.insert(key, (value.trim().to_string(), line));
    }
    Ok(sections)
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    /// Parse scenario text; relative coil paths are resolved against `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let mut r = Reader { path: origin, sections: tokenize(text, origin)? };
        let coil_file: String = r.req("coils", "file")?;
        let coil_file = base.join(coil_file);
        let n_coils = read_coil_file(&coil_file)?.len();
        let table_half_width = r.opt("coils", "table_half_width")?.unwrap_or(1.5);
        let table_spacing = r.opt("coils", "table_spacing")?.unwrap_or(0.25);
        let initial = r.bump("initial")?;
        let resolution = r.req("initial", "resolution")?;
        let particle_cap = r.opt("initial", "cap")?.unwrap_or(4096);

        let t_final: f64 = r.req("control", "t_final")?;
        let cells: usize = r.req("control", "cells")?;
        let lambda = r.req_list("control", "lambda")?;
        let lower = r.req_list("control", "lower")?;
        let upper = r.req_list("control", "upper")?;
        let solver = match r.opt::<String>("control", "solver")?.as_deref() {
            None | Some("pgd") => SolverKind::Pgd,
            Some("fixed-point") => SolverKind::FixedPoint,
            Some(other) => return Err(Error::Validation(format!("[control] solver must be pgd or fixed-point, got {other}"))),
        };
        let u0 = r.rows("control", "u0", n_coils, cells)?.unwrap_or_else(|| vec![vec![0.0; cells]; n_coils]);

        let kind: String = r.req("target", "kind")?;
        let target = match kind.as_str() {
            "zero" => TargetChoice::Zero,
            "bump" => TargetChoice::Bump(r.bump("target")?),
            "reference" => TargetChoice::Reference {
                u_star: r
                    .rows("target", "u_star", n_coils, cells)?
                    .ok_or_else(|| Error::Validation("missing required key [target] u_star.0".into()))?,
            },
            other => return Err(Error::Validation(format!("[target] kind must be zero, bump or reference, got {other}"))),
        };

        let steps = r.req("discretization", "steps")?;
        let eps = r.opt("discretization", "eps")?;
        let cutoff_factor = r.opt("discretization", "cutoff_factor")?.unwrap_or(2.0);
        let seed = r.opt("discretization", "seed")?.unwrap_or(0);

        let d = Tolerances::default();
        let t = "tolerances";
        let tolerances = Tolerances {
            solver_tol: r.opt(t, "solver_tol")?.unwrap_or(d.solver_tol),
            max_iter: r.opt(t, "max_iter")?.unwrap_or(d.max_iter),
            theta: r.opt(t, "theta")?.unwrap_or(d.theta),
            fd_alpha: r.opt(t, "fd_alpha")?.unwrap_or(d.fd_alpha),
            fd_pairs: r.opt(t, "fd_pairs")?.unwrap_or(d.fd_pairs),
            fd_rel: r.opt(t, "fd_rel")?.unwrap_or(d.fd_rel),
            liouville: r.opt(t, "liouville")?.unwrap_or(d.liouville),
            kde_rel: r.opt(t, "kde_rel")?.unwrap_or(d.kde_rel),
            chi_agreement: r.opt(t, "chi_agreement")?.unwrap_or(d.chi_agreement),
            kkt: r.opt(t, "kkt")?.unwrap_or(d.kkt),
            n_dirs: r.opt(t, "n_dirs")?.unwrap_or(d.n_dirs),
            n_starts: r.opt(t, "n_starts")?.unwrap_or(d.n_starts),
        };
        r.finish()?;

        let s = Scenario {
            coil_file,
            table_half_width,
            table_spacing,
            initial,
            resolution,
            particle_cap,
            target,
            t_final,
            cells,
            lambda,
            lower,
            upper,
            u0,
            solver,
            steps,
            eps,
            cutoff_factor,
            seed,
            tolerances,
        };
        s.validate(n_coils)?;
        Ok(s)
    }

    fn validate(&self, n_coils: usize) -> Result<()> {
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(Error::Validation(format!("T must be positive, got {}", self.t_final)));
        }
        for (name, v) in [("lambda", &self.lambda), ("lower", &self.lower), ("upper", &self.upper)] {
            if v.len() != n_coils {
                return Err(Error::Validation(format!("[control] {name} needs {n_coils} values, one per coil")));
            }
        }
        if self.lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Validation("regularization weights must satisfy λ_i ≥ 0".into()));
        }
        let template = self.template()?;
        template.check_steps(self.steps)?;
        template.with_values(self.u0.clone()).require_admissible()?;
        if let TargetChoice::Reference { u_star } = &self.target {
            template.with_values(u_star.clone()).require_admissible()?;
        }
        if let Some(e) = self.eps {
            SmoothingParam::new(e)?.validate_for(2)?;
        }
        if !(self.cutoff_factor > 1.0) {
            return Err(Error::Validation("[discretization] cutoff_factor must exceed 1".into()));
        }
        if !(self.table_half_width > 0.0 && self.table_spacing > 0.0) {
            return Err(Error::Validation("field table extent and spacing must be positive".into()));
        }
        if !(self.tolerances.theta > 0.0 && self.tolerances.theta <= 1.0) {
            return Err(Error::Validation("[tolerances] theta must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn template(&self) -> Result<ControlGrid> {
        ControlGrid::zeros(self.lambda.len(), self.cells, self.t_final, &self.lower, &self.upper)
    }

    pub fn fields(&self) -> Result<Arc<CoilFieldSet>> {
        Ok(Arc::new(CoilFieldSet::with_default_reg(read_coil_file(&self.coil_file)?)?))
    }

    pub fn ensemble(&self) -> Result<Arc<ParticleEnsemble>> {
        Ok(Arc::new(sample_initial(&self.initial, self.resolution, self.particle_cap)?))
    }

    /// Assemble the optimal control problem.
    pub fn build(&self) -> Result<Setup> {
        let fields = self.fields()?;
        let ensemble = self.ensemble()?;
        let eps = self.eps.unwrap_or_else(|| ensemble.spacing());
        SmoothingParam::new(eps)?.validate_for(ensemble.len())?;
        let template = self.template()?;
        let target = match &self.target {
            TargetChoice::Zero => TargetSpec::Zero,
            TargetChoice::Bump(b) => TargetSpec::Bump(b.clone()),
            TargetChoice::Reference { u_star } => TargetSpec::Reference(Arc::new(ReferenceTarget::build(
                &ensemble,
                &self.initial,
                &fields,
                &template.with_values(u_star.clone()),
                self.steps,
                eps,
            )?)),
        };
        // the support under the strongest admissible currents sets the cutoff plateau
        let probe = template.map_values(|i, m, _| template.b[i][m]);
        let run = integrate_forward(&ensemble, &probe, &fields, self.steps, eps)?;
        let cutoff = SourceCutoff::Chi(CutoffChi::new(self.cutoff_factor * run.radius_z())?);
        let params = CostParams { lambda: self.lambda.clone(), target, t_final: self.t_final };
        let u0 = template.with_values(self.u0.clone());
        let problem = Problem::new(ensemble, fields, params, self.steps, eps, cutoff, template)?;
        Ok(Setup { problem, u0 })
    }

    /// Scenario text that loads back to an identical scenario.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let bump = |s: &mut String, b: &InitialDatumSpec| {
            let _ = writeln!(s, "amplitude = {:?}", b.amplitude);
            let _ = writeln!(s, "x_center = {}", list(&b.x_center));
            let _ = writeln!(s, "x_radius = {:?}", b.x_radius);
            let _ = writeln!(s, "v_center = {}", list(&b.v_center));
            let _ = writeln!(s, "v_radius = {:?}", b.v_radius);
        };
        let _ = writeln!(s, "[coils]\nfile = {}", self.coil_file.display());
        let _ = writeln!(s, "table_half_width = {:?}\ntable_spacing = {:?}", self.table_half_width, self.table_spacing);
        s.push_str("\n[initial]\n");
        bump(&mut s, &self.initial);
        let _ = writeln!(s, "resolution = {}\ncap = {}", self.resolution, self.particle_cap);
        s.push_str("\n[target]\n");
        match &self.target {
            TargetChoice::Zero => s.push_str("kind = zero\n"),
            TargetChoice::Bump(b) => {
                s.push_str("kind = bump\n");
                bump(&mut s, b);
            }
            TargetChoice::Reference { u_star } => {
                s.push_str("kind = reference\n");
                for (i, row) in u_star.iter().enumerate() {
                    let _ = writeln!(s, "u_star.{i} = {}", list(row));
                }
            }
        }
        let _ = writeln!(s, "\n[control]\nt_final = {:?}\ncells = {}", self.t_final, self.cells);
        let _ = writeln!(s, "lambda = {}\nlower = {}\nupper = {}", list(&self.lambda), list(&self.lower), list(&self.upper));
        for (i, row) in self.u0.iter().enumerate() {
            let _ = writeln!(s, "u0.{i} = {}", list(row));
        }
        let solver = match self.solver {
            SolverKind::Pgd => "pgd",
            SolverKind::FixedPoint => "fixed-point",
        };
        let _ = writeln!(s, "solver = {solver}");
        let _ = writeln!(s, "\n[discretization]\nsteps = {}", self.steps);
        if let Some(e) = self.eps {
            let _ = writeln!(s, "eps = {e:?}");
        }
        let _ = writeln!(s, "cutoff_factor = {:?}\nseed = {}", self.cutoff_factor, self.seed);
        let t = &self.tolerances;
        let _ = writeln!(
            s,
            "\n[tolerances]\nsolver_tol = {:?}\nmax_iter = {}\ntheta = {:?}\nfd_alpha = {:?}\nfd_pairs = {}\nfd_rel = {:?}\n\
             liouville = {:?}\nkde_rel = {:?}\nchi_agreement = {:?}\nkkt = {:?}\nn_dirs = {}\nn_starts = {}",
            t.solver_tol,
            t.max_iter,
            t.theta,
            t.fd_alpha,
            t.fd_pairs,
            t.fd_rel,
            t.liouville,
            t.kde_rel,
            t.chi_agreement,
            t.kkt,
            t.n_dirs,
            t.n_starts
        );
        s
    }
}
