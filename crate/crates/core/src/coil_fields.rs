//! Field shapes of fixed current loops and their superposition.
//!
//! Coils are closed polylines carrying a line current density of constant
//! magnitude (`amplitude`) along the curve. The shape field of a coil is
//!
//! ```text
//! m(x) = ∫ c(y) × (x − y) / (|x − y|² + reg²)^{3/2} dy
//! ```
//!
//! in units where `∇ × B = 4π J`. Each straight segment is integrated in closed
//! form and the Jacobian is the exact derivative of that closed form, so the
//! divergence of every evaluated field vanishes up to rounding.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::num::*;

#[derive(Debug, Clone, PartialEq)]
pub struct CoilGeometry {
    pub name: String,
    /// Polyline vertices; the closing segment last → first is implicit.
    vertices: Vec<Vec3<f64>>,
    pub amplitude: f64,
    /// Unit tangent and length of each segment.
    tangents: Vec<Vec3<f64>>,
    lengths: Vec<f64>,
}

impl CoilGeometry {
    pub fn new(name: impl Into<String>, mut vertices: Vec<Vec3<f64>>, amplitude: f64) -> Result<Self> {
        let name = name.into();
        if vertices.len() >= 2 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(Error::Config(format!("coil '{name}' needs at least 3 distinct vertices")));
        }
        if !amplitude.is_finite() || vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Config(format!("coil '{name}' has non-finite data")));
        }
        let n = vertices.len();
        for i in 0..n {
            if vertices[i] == vertices[(i + 1) % n] {
                return Err(Error::Config(format!(
                    "coil '{name}': consecutive vertices {i} and {} coincide",
                    (i + 1) % n
                )));
            }
        }
        let mut tangents = Vec::with_capacity(n);
        let mut lengths = Vec::with_capacity(n);
        for i in 0..n {
            let ab = sub3(&vertices[(i + 1) % n], &vertices[i]);
            let len = norm3(&ab);
            tangents.push(scale3(&ab, 1.0 / len));
            lengths.push(len);
        }
        Ok(Self { name, vertices, amplitude, tangents, lengths })
    }

    pub fn vertices(&self) -> &[Vec3<f64>] {
        &self.vertices
    }

    /// Regular `segments`-gon inscribed in the circle of `radius` around
    /// `(0, 0, z_center)` in the plane `z = z_center`, oriented counter-clockwise
    /// seen from `+z`.
    pub fn circle(name: impl Into<String>, radius: f64, z_center: f64, segments: usize, amplitude: f64) -> Result<Self> {
        if radius <= 0.0 || segments < 3 {
            return Err(Error::Config("circle coil needs radius > 0 and at least 3 segments".into()));
        }
        let vertices = (0..segments)
            .map(|k| {
                let phi = std::f64::consts::TAU * k as f64 / segments as f64;
                [radius * phi.cos(), radius * phi.sin(), z_center]
            })
            .collect();
        Self::new(name, vertices, amplitude)
    }

    pub fn segments(&self) -> impl Iterator<Item = (Vec3<f64>, Vec3<f64>)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for a in &self.vertices {
            for b in &self.vertices {
                d = d.max(norm3(&sub3(a, b)));
            }
        }
        d
    }

    /// Euclidean distance from `x` to the polyline.
    pub fn distance_to(&self, x: &Vec3<f64>) -> f64 {
        self.segments()
            .map(|(a, b)| {
                let ab = sub3(&b, &a);
                let ax = sub3(x, &a);
                let t = (dot3(&ax, &ab) / dot3(&ab, &ab)).clamp(0.0, 1.0);
                norm3(&sub3(&ax, &scale3(&ab, t)))
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Shape field `m` and Jacobian `∂m_a/∂x_d` of one coil at `x`.
pub fn biot_savart_eval<S: Real>(coil: &CoilGeometry, x: &Vec3<S>, reg: f64) -> Result<(Vec3<S>, Mat3<S>)> {
    segment_sum::<S, true>(coil, x, reg)
}

/// Shape field `m` alone.
pub fn biot_savart_value<S: Real>(coil: &CoilGeometry, x: &Vec3<S>, reg: f64) -> Result<Vec3<S>> {
    Ok(segment_sum::<S, false>(coil, x, reg)?.0)
}

/// Sum of the closed-form segment contributions. For the segment `a → b`
/// with unit tangent `t` and length `L`, with `r₁ = x − a`, `r₂ = x − b`,
/// `s = r₁·t`, `ρ = r₁ − s t`, `q² = |ρ|² + reg²` and `n_j = √(|r_j|² + reg²)`,
/// the contribution is `(t × r₁) P / q²` with `P = (L − s)/n₂ + s/n₁`.
fn segment_sum<S: Real, const GRAD: bool>(coil: &CoilGeometry, x: &Vec3<S>, reg: f64) -> Result<(Vec3<S>, Mat3<S>)> {
    if reg < 0.0 {
        return Err(Error::Precondition("reg must be nonnegative".into()));
    }
    let mut m = zero3::<S>();
    let mut gm = zero33::<S>();
    if coil.amplitude == 0.0 {
        return Ok((m, gm));
    }
    let reg2 = reg * reg;
    let nv = coil.vertices.len();
    let mut r = Vec::with_capacity(nv);
    let mut inv_n = Vec::with_capacity(nv);
    for v in &coil.vertices {
        let rv = sub3(x, &lift3(v));
        inv_n.push((dot3(&rv, &rv) + reg2).sqrt().recip());
        r.push(rv);
    }
    for i in 0..nv {
        let j = if i + 1 == nv { 0 } else { i + 1 };
        let len = coil.lengths[i];
        let ts: Vec3<S> = lift3(&coil.tangents[i]);
        let r1 = &r[i];
        let s1 = dot3(r1, &ts);
        let rho = sub3(r1, &scale3(&ts, s1));
        let q2 = dot3(&rho, &rho) + reg2;
        if q2.re() <= (1e-14 * len).powi(2) {
            // on the carrier line of the segment
            let s = s1.re();
            if (-1e-14 * len..=len * (1.0 + 1e-14)).contains(&s) {
                return Err(Error::Singularity(format!("point lies on coil '{}' and reg = 0", coil.name)));
            }
            continue;
        }
        let (in1, in2) = (inv_n[i], inv_n[j]);
        let l_s = -s1 + len;
        let p = l_s * in2 + s1 * in1;
        let c = cross3(&ts, r1);
        let inv_q2 = q2.recip();
        let coef = p * inv_q2;
        for a in 0..3 {
            m[a] += c[a] * coef;
        }
        if GRAD {
            let r2 = &r[j];
            let in1_3 = in1 * in1 * in1;
            let in2_3 = in2 * in2 * in2;
            let dn = in1 - in2;
            // ∂(P/q²)/∂x = (∂P − 2 P ρ / q²) / q²
            let dcoef: Vec3<S> = std::array::from_fn(|d| {
                let dp = ts[d] * dn - l_s * r2[d] * in2_3 - s1 * r1[d] * in1_3;
                (dp - rho[d] * coef * 2.0) * inv_q2
            });
            let tk = skew(&ts);
            for a in 0..3 {
                for d in 0..3 {
                    gm[a][d] += tk[a][d] * coef + c[a] * dcoef[d];
                }
            }
        }
    }
    let amp = S::from(coil.amplitude);
    Ok((scale3(&m, amp), scale33(&gm, amp)))
}

/// Axis-aligned sampling region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleBox {
    pub lo: Vec3<f64>,
    pub hi: Vec3<f64>,
}

impl SampleBox {
    pub fn cube(half_width: f64) -> Self {
        Self { lo: [-half_width; 3], hi: [half_width; 3] }
    }

    pub fn contains(&self, x: &Vec3<f64>) -> bool {
        (0..3).all(|d| x[d] >= self.lo[d] && x[d] <= self.hi[d])
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec3<f64> {
        std::array::from_fn(|d| rng.gen_range(self.lo[d]..=self.hi[d]))
    }
}

/// Optional cached tabulation attached to a field set.
#[derive(Debug, Clone)]
pub struct FieldTable {
    pub bounds: SampleBox,
    pub spacing: f64,
    pub nodes: [usize; 3],
    /// `values[coil][node] = (m, ∇m)` with `node = (i*ny + j)*nz + k`.
    values: Vec<Vec<(Vec3<f64>, Mat3<f64>)>>,
    /// Maximum |direct − cached| over cell centres, per coil (field, Jacobian).
    pub discrepancy: Vec<(f64, f64)>,
}

impl FieldTable {
    pub fn node_position(&self, idx: [usize; 3]) -> Vec3<f64> {
        std::array::from_fn(|d| self.bounds.lo[d] + idx[d] as f64 * self.spacing)
    }

    /// Trilinear interpolation of `(m_i, ∇m_i)`.
    pub fn eval(&self, coil: usize, x: &Vec3<f64>) -> Result<(Vec3<f64>, Mat3<f64>)> {
        if !self.bounds.contains(x) {
            return Err(Error::Config(format!("query point {x:?} outside tabulated box")));
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for d in 0..3 {
            let s = (x[d] - self.bounds.lo[d]) / self.spacing;
            let i = (s.floor() as usize).min(self.nodes[d] - 2);
            base[d] = i;
            frac[d] = s - i as f64;
        }
        let table = &self.values[coil];
        let mut m = [0.0; 3];
        let mut gm = [[0.0; 3]; 3];
        for corner in 0..8 {
            let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
            let mut wgt = 1.0;
            for d in 0..3 {
                wgt *= if off[d] == 1 { frac[d] } else { 1.0 - frac[d] };
            }
            let i = base[0] + off[0];
            let j = base[1] + off[1];
            let k = base[2] + off[2];
            let (mv, gv) = &table[(i * self.nodes[1] + j) * self.nodes[2] + k];
            for r in 0..3 {
                m[r] += wgt * mv[r];
                for c in 0..3 {
                    gm[r][c] += wgt * gv[r][c];
                }
            }
        }
        Ok((m, gm))
    }
}

#[derive(Debug, Clone)]
pub struct CoilFieldSet {
    pub coils: Vec<CoilGeometry>,
    pub reg: f64,
    pub table: Option<FieldTable>,
}

impl CoilFieldSet {
    pub fn new(coils: Vec<CoilGeometry>, reg: f64) -> Result<Self> {
        if coils.is_empty() {
            return Err(Error::Config("at least one coil is required".into()));
        }
        if !(reg >= 0.0) {
            return Err(Error::Config("coil softening must be nonnegative".into()));
        }
        Ok(Self { coils, reg, table: None })
    }

    /// Default softening: `1e-6` times the largest coil diameter.
    pub fn with_default_reg(coils: Vec<CoilGeometry>) -> Result<Self> {
        let d = coils.iter().map(|c| c.diameter()).fold(0.0, f64::max);
        Self::new(coils, 1e-6 * d)
    }

    pub fn len(&self) -> usize {
        self.coils.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coils.is_empty()
    }

    pub fn eval<S: Real>(&self, i: usize, x: &Vec3<S>) -> Result<(Vec3<S>, Mat3<S>)> {
        biot_savart_eval(&self.coils[i], x, self.reg)
    }

    pub fn eval_cached(&self, i: usize, x: &Vec3<f64>) -> Result<(Vec3<f64>, Mat3<f64>)> {
        match &self.table {
            Some(t) => t.eval(i, x),
            None => self.eval(i, x),
        }
    }

    /// Minimum distance from `x` to any coil curve.
    pub fn distance_to_coils(&self, x: &Vec3<f64>) -> f64 {
        self.coils.iter().map(|c| c.distance_to(x)).fold(f64::INFINITY, f64::min)
    }
}

/// `B = Σ u_i m_i(x)`.
pub fn superpose_value<S: Real>(u_now: &[S], fields: &CoilFieldSet, x: &Vec3<S>) -> Result<Vec3<S>> {
    let mut b = zero3::<S>();
    for (i, &ui) in u_now.iter().enumerate() {
        b = add3(&b, &scale3(&biot_savart_value(&fields.coils[i], x, fields.reg)?, ui));
    }
    Ok(b)
}

/// `B = Σ u_i m_i(x)` and `∇B = Σ u_i ∇m_i(x)`.
pub fn superpose<S: Real>(u_now: &[S], fields: &CoilFieldSet, x: &Vec3<S>) -> Result<(Vec3<S>, Mat3<S>)> {
    if u_now.len() != fields.len() {
        return Err(Error::Precondition(format!(
            "control has {} entries but there are {} coils",
            u_now.len(),
            fields.len()
        )));
    }
    let mut b = zero3::<S>();
    let mut gb = zero33::<S>();
    for (i, &ui) in u_now.iter().enumerate() {
        let (m, gm) = fields.eval(i, x)?;
        b = add3(&b, &scale3(&m, ui));
        gb = add33(&gb, &scale33(&gm, ui));
    }
    Ok((b, gb))
}

fn samples_away_from_coils(fields: &CoilFieldSet, sample_box: &SampleBox, n_samples: usize, seed: u64) -> Vec<Vec3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 10.0 * fields.reg;
    let mut out = Vec::with_capacity(n_samples);
    let mut attempts = 0;
    while out.len() < n_samples && attempts < 100 * n_samples.max(1) {
        attempts += 1;
        let x = sample_box.sample(&mut rng);
        if fields.distance_to_coils(&x) >= margin.max(1e-9) {
            out.push(x);
        }
    }
    out
}

/// Per-coil `max |div m_i|` over random samples, using the analytic Jacobian.
pub fn divergence_residual(fields: &CoilFieldSet, sample_box: &SampleBox, n_samples: usize) -> Result<Vec<f64>> {
    let pts = samples_away_from_coils(fields, sample_box, n_samples, 0x5eed);
    (0..fields.len())
        .map(|i| {
            pts.iter().try_fold(0.0f64, |acc, x| {
                let (_, gm) = fields.eval(i, x)?;
                Ok(acc.max((gm[0][0] + gm[1][1] + gm[2][2]).abs()))
            })
        })
        .collect()
}

/// Same as [`divergence_residual`] with a central-difference Jacobian of step `h_fd`.
pub fn divergence_residual_fd(fields: &CoilFieldSet, sample_box: &SampleBox, n_samples: usize, h_fd: f64) -> Result<Vec<f64>> {
    let pts = samples_away_from_coils(fields, sample_box, n_samples, 0x5eed);
    (0..fields.len())
        .map(|i| {
            pts.iter().try_fold(0.0f64, |acc, x| {
                let mut div = 0.0;
                for d in 0..3 {
                    let mut xp = *x;
                    let mut xm = *x;
                    xp[d] += h_fd;
                    xm[d] -= h_fd;
                    let (mp, _) = fields.eval(i, &xp)?;
                    let (mm, _) = fields.eval(i, &xm)?;
                    div += (mp[d] - mm[d]) / (2.0 * h_fd);
                }
                Ok(acc.max(div.abs()))
            })
        })
        .collect()
}

/// Sampled sup-norm surrogates for the coil shapes and the resulting
/// admissibility radius.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldNormEstimate {
    pub sup_m: Vec<f64>,
    pub sup_grad_m: Vec<f64>,
    pub sup_hess_m: Vec<f64>,
    /// `K = 2·M·√N·(‖a‖ + ‖b‖)` with `M` the largest per-coil sup-norm.
    pub k_radius: f64,
}

/// `bound_norms = (‖a‖_{L²}, ‖b‖_{L²})` of the control bounds.
pub fn field_norm_estimate(
    fields: &CoilFieldSet,
    sample_box: &SampleBox,
    n_samples: usize,
    bound_norms: (f64, f64),
) -> Result<FieldNormEstimate> {
    let mut pts = samples_away_from_coils(fields, sample_box, n_samples, 0xb0b);
    // always include the box centre, where loop fields typically peak
    pts.push(std::array::from_fn(|d| 0.5 * (sample_box.lo[d] + sample_box.hi[d])));
    let n = fields.len();
    let mut est = FieldNormEstimate {
        sup_m: vec![0.0; n],
        sup_grad_m: vec![0.0; n],
        sup_hess_m: vec![0.0; n],
        k_radius: 0.0,
    };
    let frob = |g: &Mat3<f64>| g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    for i in 0..n {
        for x in &pts {
            if fields.distance_to_coils(x) < 10.0 * fields.reg {
                continue;
            }
            let (m, gm) = fields.eval(i, x)?;
            est.sup_m[i] = est.sup_m[i].max(norm3(&m));
            est.sup_grad_m[i] = est.sup_grad_m[i].max(frob(&gm));
            let mut h2 = 0.0;
            for d in 0..3 {
                let mut xd: Vec3<Dual64> = lift3(x);
                xd[d] = Dual64::new(x[d], 1.0);
                let (_, gd) = fields.eval(i, &xd)?;
                h2 += gd.iter().flatten().map(|v| v.eps * v.eps).sum::<f64>();
            }
            est.sup_hess_m[i] = est.sup_hess_m[i].max(h2.sqrt());
        }
    }
    let big_m = (0..n)
        .map(|i| est.sup_m[i].max(est.sup_grad_m[i]).max(est.sup_hess_m[i]))
        .fold(0.0, f64::max);
    est.k_radius = 2.0 * big_m * (n as f64).sqrt() * (bound_norms.0 + bound_norms.1);
    Ok(est)
}

/// Tabulate all coil fields on a uniform grid over `bounds`. When
/// `required_radius` is given, the box must contain the ball of that radius.
pub fn tabulate_fields(
    fields: &CoilFieldSet,
    bounds: SampleBox,
    spacing: f64,
    required_radius: Option<f64>,
) -> Result<CoilFieldSet> {
    if !(spacing > 0.0) {
        return Err(Error::Config("tabulation spacing must be positive".into()));
    }
    if let Some(r) = required_radius {
        if (0..3).any(|d| bounds.lo[d] > -r || bounds.hi[d] < r) {
            return Err(Error::Config(format!(
                "tabulation box does not cover the support ball of radius {r}"
            )));
        }
    }
    let nodes: [usize; 3] =
        std::array::from_fn(|d| (((bounds.hi[d] - bounds.lo[d]) / spacing).round() as usize).max(1) + 1);
    let hi: Vec3<f64> = std::array::from_fn(|d| bounds.lo[d] + (nodes[d] - 1) as f64 * spacing);
    let bounds = SampleBox { lo: bounds.lo, hi };
    let mut table = FieldTable {
        bounds,
        spacing,
        nodes,
        values: Vec::with_capacity(fields.len()),
        discrepancy: Vec::with_capacity(fields.len()),
    };
    for i in 0..fields.len() {
        let mut vals = Vec::with_capacity(nodes.iter().product());
        for a in 0..nodes[0] {
            for b in 0..nodes[1] {
                for c in 0..nodes[2] {
                    vals.push(fields.eval(i, &table.node_position([a, b, c]))?);
                }
            }
        }
        table.values.push(vals);
    }
    for i in 0..fields.len() {
        let (mut dm, mut dg) = (0.0f64, 0.0f64);
        for a in 0..nodes[0] - 1 {
            for b in 0..nodes[1] - 1 {
                for c in 0..nodes[2] - 1 {
                    let x = add3(&table.node_position([a, b, c]), &[0.5 * spacing; 3]);
                    if fields.distance_to_coils(&x) < 10.0 * fields.reg {
                        continue;
                    }
                    let (m, gm) = fields.eval(i, &x)?;
                    let (mc, gc) = table.eval(i, &x)?;
                    dm = dm.max(norm3(&sub3(&m, &mc)));
                    for r in 0..3 {
                        for k in 0..3 {
                            dg = dg.max((gm[r][k] - gc[r][k]).abs());
                        }
                    }
                }
            }
        }
        table.discrepancy.push((dm, dg));
    }
    Ok(CoilFieldSet { coils: fields.coils.clone(), reg: fields.reg, table: Some(table) })
}

/// Parse the coil geometry format: `coil <name> amplitude <real>` headers, each
/// followed by `v x y z` vertex lines. `#` starts a comment.
pub fn parse_coil_text(text: &str, origin: &str) -> Result<Vec<CoilGeometry>> {
    let perr = |line: usize, msg: String| Error::Parse { path: origin.to_string(), line, msg };
    let mut out = Vec::new();
    let mut current: Option<(String, f64, Vec<Vec3<f64>>, usize)> = None;
    let finish = |cur: (String, f64, Vec<Vec3<f64>>, usize)| {
        CoilGeometry::new(cur.0, cur.2, cur.1).map_err(|e| perr(cur.3, e.to_string()))
    };
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok[0] {
            "coil" => {
                if tok.len() != 4 || tok[2] != "amplitude" {
                    return Err(perr(lineno, "expected `coil <name> amplitude <real>`".into()));
                }
                let amp: f64 = tok[3].parse().map_err(|_| perr(lineno, format!("bad amplitude '{}'", tok[3])))?;
                if let Some(c) = current.take() {
                    out.push(finish(c)?);
                }
                current = Some((tok[1].to_string(), amp, Vec::new(), lineno));
            }
            "v" => {
                if tok.len() != 4 {
                    return Err(perr(lineno, "expected `v x y z`".into()));
                }
                let mut p = [0.0; 3];
                for d in 0..3 {
                    p[d] = tok[d + 1].parse().map_err(|_| perr(lineno, format!("bad coordinate '{}'", tok[d + 1])))?;
                }
                match current.as_mut() {
                    Some(c) => c.2.push(p),
                    None => return Err(perr(lineno, "vertex before any `coil` header".into())),
                }
            }
            other => return Err(perr(lineno, format!("unknown record '{other}'"))),
        }
    }
    if let Some(c) = current.take() {
        out.push(finish(c)?);
    }
    if out.is_empty() {
        return Err(perr(0, "no coils defined".into()));
    }
    Ok(out)
}

pub fn read_coil_file(path: &Path) -> Result<Vec<CoilGeometry>> {
    let text = std::fs::read_to_string(path)?;
    parse_coil_text(&text, &path.display().to_string())
}

pub fn format_coils(coils: &[CoilGeometry]) -> String {
    let mut s = String::new();
    for c in coils {
        let _ = writeln!(s, "coil {} amplitude {:?}", c.name, c.amplitude);
        for v in c.vertices() {
            let _ = writeln!(s, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
        }
    }
    s
}

/// Table file: one row per (node, coil) with the field and its Jacobian.
pub fn format_table(fields: &CoilFieldSet) -> Result<String> {
    let table = fields
        .table
        .as_ref()
        .ok_or_else(|| Error::State("field set has no cached table".into()))?;
    let mut s = String::from("x y z coil m1 m2 m3 dm11 dm12 dm13 dm21 dm22 dm23 dm31 dm32 dm33\n");
    for a in 0..table.nodes[0] {
        for b in 0..table.nodes[1] {
            for c in 0..table.nodes[2] {
                let x = table.node_position([a, b, c]);
                let node = (a * table.nodes[1] + b) * table.nodes[2] + c;
                for (i, vals) in table.values.iter().enumerate() {
                    let (m, gm) = &vals[node];
                    let _ = write!(s, "{:?} {:?} {:?} {}", x[0], x[1], x[2], i);
                    for v in m.iter().chain(gm.iter().flatten()) {
                        let _ = write!(s, " {v:?}");
                    }
                    s.push('\n');
                }
            }
        }
    }
    Ok(s)
}
