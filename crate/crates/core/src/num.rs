//! Scalar abstraction and fixed-size vector helpers.
//!
//! Every numerical sweep is written once over [`Real`], so the same code runs
//! with plain `f64` and with forward-mode dual numbers. Running a sweep with
//! [`Dual64`] inputs yields exact directional derivatives of the discrete
//! computation, which is how the linearized state/costate and the second
//! derivative of the cost are obtained.

pub use num_dual::{Dual64, DualNum, DualStruct};

/// Scalar type accepted by the generic sweeps: `f64` or a forward dual number over `f64`.
pub trait Real: DualNum<Primitive = f64> + Copy + Send + Sync {
    /// `re + d·ε`; plain reals ignore `d`.
    fn seeded(re: f64, d: f64) -> Self;
    /// First-derivative part; zero for plain reals.
    fn deriv(&self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn seeded(re: f64, _d: f64) -> Self {
        re
    }
    #[inline]
    fn deriv(&self) -> f64 {
        0.0
    }
}

impl Real for Dual64 {
    #[inline]
    fn seeded(re: f64, d: f64) -> Self {
        Dual64::new(re, d)
    }
    #[inline]
    fn deriv(&self) -> f64 {
        self.eps
    }
}

pub type Vec3<S> = [S; 3];
pub type Mat3<S> = [[S; 3]; 3];
pub type Vec6<S> = [S; 6];
pub type Mat6<S> = [[S; 6]; 6];

#[inline]
pub fn zero<S: Real>() -> S {
    S::from(0.0)
}

#[inline]
pub fn lift3<S: Real>(a: &Vec3<f64>) -> Vec3<S> {
    [S::from(a[0]), S::from(a[1]), S::from(a[2])]
}

#[inline]
pub fn lift6<S: Real>(a: &Vec6<f64>) -> Vec6<S> {
    std::array::from_fn(|i| S::from(a[i]))
}

#[inline]
pub fn re3<S: Real>(a: &Vec3<S>) -> Vec3<f64> {
    [a[0].re(), a[1].re(), a[2].re()]
}

#[inline]
pub fn re6<S: Real>(a: &Vec6<S>) -> Vec6<f64> {
    std::array::from_fn(|i| a[i].re())
}

#[inline]
pub fn add3<S: Real>(a: &Vec3<S>, b: &Vec3<S>) -> Vec3<S> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3<S: Real>(a: &Vec3<S>, b: &Vec3<S>) -> Vec3<S> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3<S: Real>(a: &Vec3<S>, s: S) -> Vec3<S> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3<S: Real>(a: &Vec3<S>, b: &Vec3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3<S: Real>(a: &Vec3<S>, b: &Vec3<S>) -> Vec3<S> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3<S: Real>(a: &Vec3<S>) -> S {
    dot3(a, a).sqrt()
}

#[inline]
pub fn zero3<S: Real>() -> Vec3<S> {
    [zero(); 3]
}

#[inline]
pub fn zero33<S: Real>() -> Mat3<S> {
    [[zero(); 3]; 3]
}

#[inline]
pub fn add33<S: Real>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    std::array::from_fn(|r| std::array::from_fn(|c| a[r][c] + b[r][c]))
}

#[inline]
pub fn scale33<S: Real>(a: &Mat3<S>, s: S) -> Mat3<S> {
    std::array::from_fn(|r| std::array::from_fn(|c| a[r][c] * s))
}

#[inline]
pub fn matvec3<S: Real>(a: &Mat3<S>, x: &Vec3<S>) -> Vec3<S> {
    std::array::from_fn(|r| a[r][0] * x[0] + a[r][1] * x[1] + a[r][2] * x[2])
}

/// `aᵀ x`
#[inline]
pub fn matvec3_t<S: Real>(a: &Mat3<S>, x: &Vec3<S>) -> Vec3<S> {
    std::array::from_fn(|c| a[0][c] * x[0] + a[1][c] * x[1] + a[2][c] * x[2])
}

#[inline]
pub fn matmul3<S: Real>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    std::array::from_fn(|r| {
        std::array::from_fn(|c| a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c])
    })
}

/// Matrix of `y ↦ a × y`.
#[inline]
pub fn skew<S: Real>(a: &Vec3<S>) -> Mat3<S> {
    let z = zero::<S>();
    [[z, -a[2], a[1]], [a[2], z, -a[0]], [-a[1], a[0], z]]
}

#[inline]
pub fn split6<S: Real>(z: &Vec6<S>) -> (Vec3<S>, Vec3<S>) {
    ([z[0], z[1], z[2]], [z[3], z[4], z[5]])
}

#[inline]
pub fn join6<S: Real>(x: &Vec3<S>, v: &Vec3<S>) -> Vec6<S> {
    [x[0], x[1], x[2], v[0], v[1], v[2]]
}

#[inline]
pub fn axpy6<S: Real>(a: &Vec6<S>, s: S, b: &Vec6<S>) -> Vec6<S> {
    std::array::from_fn(|i| a[i] + s * b[i])
}

#[inline]
pub fn dot6<S: Real>(a: &Vec6<S>, b: &Vec6<S>) -> S {
    let mut acc = zero::<S>();
    for i in 0..6 {
        acc += a[i] * b[i];
    }
    acc
}

pub fn identity6() -> Mat6<f64> {
    std::array::from_fn(|r| std::array::from_fn(|c| if r == c { 1.0 } else { 0.0 }))
}

pub fn matmul6(a: &Mat6<f64>, b: &Mat6<f64>) -> Mat6<f64> {
    std::array::from_fn(|r| {
        std::array::from_fn(|c| (0..6).map(|k| a[r][k] * b[k][c]).sum())
    })
}

pub fn matvec6(a: &Mat6<f64>, x: &Vec6<f64>) -> Vec6<f64> {
    std::array::from_fn(|r| (0..6).map(|k| a[r][k] * x[k]).sum())
}

pub fn matvec6_t(a: &Mat6<f64>, x: &Vec6<f64>) -> Vec6<f64> {
    std::array::from_fn(|c| (0..6).map(|k| a[k][c] * x[k]).sum())
}

/// LU with partial pivoting. Returns `None` for an exactly singular matrix.
struct Lu6 {
    lu: Mat6<f64>,
    perm: [usize; 6],
    sign: f64,
}

fn lu6(a: &Mat6<f64>) -> Option<Lu6> {
    let mut lu = *a;
    let mut perm = [0, 1, 2, 3, 4, 5];
    let mut sign = 1.0;
    for col in 0..6 {
        let pivot = (col..6)
            .max_by(|&i, &j| lu[i][col].abs().total_cmp(&lu[j][col].abs()))
            .unwrap();
        if lu[pivot][col] == 0.0 {
            return None;
        }
        if pivot != col {
            lu.swap(pivot, col);
            perm.swap(pivot, col);
            sign = -sign;
        }
        for row in col + 1..6 {
            let f = lu[row][col] / lu[col][col];
            lu[row][col] = f;
            for k in col + 1..6 {
                lu[row][k] -= f * lu[col][k];
            }
        }
    }
    Some(Lu6 { lu, perm, sign })
}

pub fn det6(a: &Mat6<f64>) -> f64 {
    match lu6(a) {
        Some(f) => f.sign * (0..6).map(|i| f.lu[i][i]).product::<f64>(),
        None => 0.0,
    }
}

pub fn inverse6(a: &Mat6<f64>) -> Option<Mat6<f64>> {
    let f = lu6(a)?;
    let mut inv = [[0.0; 6]; 6];
    for c in 0..6 {
        // solve A x = e_c
        let mut y = [0.0; 6];
        for i in 0..6 {
            let mut s = if f.perm[i] == c { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= f.lu[i][k] * y[k];
            }
            y[i] = s;
        }
        for i in (0..6).rev() {
            let mut s = y[i];
            for k in i + 1..6 {
                s -= f.lu[i][k] * y[k];
            }
            y[i] = s / f.lu[i][i];
        }
        for r in 0..6 {
            inv[r][c] = y[r];
        }
    }
    Some(inv)
}

/// Infinity-norm condition number estimate `‖A‖∞ ‖A⁻¹‖∞`.
pub fn cond_inf6(a: &Mat6<f64>) -> f64 {
    let norm = |m: &Mat6<f64>| {
        m.iter()
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    match inverse6(a) {
        Some(inv) => norm(a) * norm(&inv),
        None => f64::INFINITY,
    }
}
