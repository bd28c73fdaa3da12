//! The group SO(n,1)° of the form q = x₁² + … + x_n² − x_{n+1}², its standard
//! subgroups and one-parameter families, the boundary matrices a(±∞), the
//! isogeny Φ: SL(2,R) → SO(2,1)°, and the matrix representations used to
//! describe the A, AU and H actions on pairs of lattices.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

const FORM_TOL: f64 = 1e-10;

/// The Lorentzian form on R^{n+1}.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuadForm {
    dim: usize,
}

impl QuadForm {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return invalid(format!("need n >= 2, got {n}"));
        }
        Ok(QuadForm { dim: n + 1 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.dim - 1
    }

    pub fn gram(&self) -> Mat {
        gram(self.dim - 1)
    }

    pub fn eval(&self, v: &Vector) -> f64 {
        q_bilinear(v, v)
    }
}

/// diag(1, …, 1, −1) of size n+1.
pub fn gram(n: usize) -> Mat {
    let mut j = Mat::identity(n + 1, n + 1);
    j[(n, n)] = -1.0;
    j
}

pub fn q_bilinear(u: &Vector, v: &Vector) -> f64 {
    let d = u.len();
    let mut acc = 0.0;
    for i in 0..d - 1 {
        acc += u[i] * v[i];
    }
    acc - u[d - 1] * v[d - 1]
}

/// Gram matrix of the columns of `b` under q.
pub fn q_gram(b: &Mat) -> Mat {
    let n = b.nrows() - 1;
    b.transpose() * gram(n) * b
}

/// Integer matrix with a common positive denominator: entries are `num / den`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExactMatrix {
    dim: usize,
    den: i64,
    num: Vec<i64>,
}

impl ExactMatrix {
    pub fn new(dim: usize, den: i64, num: Vec<i64>) -> Result<Self> {
        if num.len() != dim * dim {
            return Err(LabError::Dimension(format!(
                "expected {} entries, got {}",
                dim * dim,
                num.len()
            )));
        }
        if den <= 0 {
            return invalid("denominator must be positive");
        }
        Ok(ExactMatrix { dim, den, num })
    }

    pub fn identity(dim: usize, den: i64) -> Self {
        let mut num = vec![0; dim * dim];
        for i in 0..dim {
            num[i * dim + i] = den;
        }
        ExactMatrix { dim, den, num }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn den(&self) -> i64 {
        self.den
    }

    pub fn numerators(&self) -> &[i64] {
        &self.num
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.num[i * self.dim + j]
    }

    /// Product, keeping the denominator. Fails if the result is not
    /// representable with the same denominator or overflows.
    pub fn mul(&self, other: &ExactMatrix) -> Option<ExactMatrix> {
        if self.dim != other.dim || self.den != other.den {
            return None;
        }
        let d = self.dim;
        let mut num = vec![0i64; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc: i128 = 0;
                for k in 0..d {
                    acc += self.num[i * d + k] as i128 * other.num[k * d + j] as i128;
                }
                if acc % self.den as i128 != 0 {
                    return None;
                }
                num[i * d + j] = i64::try_from(acc / self.den as i128).ok()?;
            }
        }
        Some(ExactMatrix { dim: d, den: self.den, num })
    }

    pub fn transpose(&self) -> ExactMatrix {
        let d = self.dim;
        let mut num = vec![0; d * d];
        for i in 0..d {
            for j in 0..d {
                num[j * d + i] = self.num[i * d + j];
            }
        }
        ExactMatrix { dim: d, den: self.den, num }
    }

    /// J·X·J with J = diag(1,…,1,−1).
    pub fn conj_gram(&self) -> ExactMatrix {
        let d = self.dim;
        let mut out = self.clone();
        for i in 0..d {
            for j in 0..d {
                if (i == d - 1) != (j == d - 1) {
                    out.num[i * d + j] = -out.num[i * d + j];
                }
            }
        }
        out
    }

    pub fn neg(&self) -> ExactMatrix {
        ExactMatrix {
            dim: self.dim,
            den: self.den,
            num: self.num.iter().map(|x| -x).collect(),
        }
    }

    pub fn to_mat(&self) -> Mat {
        let d = self.dim;
        let den = self.den as f64;
        Mat::from_fn(d, d, |i, j| self.num[i * d + j] as f64 / den)
    }

    /// True when XᵀJX = J holds exactly.
    pub fn preserves_gram(&self) -> bool {
        let d = self.dim;
        let den2 = self.den as i128 * self.den as i128;
        for i in 0..d {
            for j in 0..d {
                let mut acc: i128 = 0;
                for k in 0..d {
                    let s = if k == d - 1 { -1 } else { 1 };
                    acc += s * self.num[k * d + i] as i128 * self.num[k * d + j] as i128;
                }
                let want = if i != j {
                    0
                } else if i == d - 1 {
                    -den2
                } else {
                    den2
                };
                if acc != want {
                    return false;
                }
            }
        }
        true
    }

    /// Determinant of the numerator matrix (fraction-free elimination).
    pub fn det_num(&self) -> i128 {
        let d = self.dim;
        let mut a: Vec<i128> = self.num.iter().map(|&x| x as i128).collect();
        let mut sign = 1i128;
        let mut prev = 1i128;
        for k in 0..d {
            if a[k * d + k] == 0 {
                let Some(p) = (k + 1..d).find(|&r| a[r * d + k] != 0) else {
                    return 0;
                };
                for c in 0..d {
                    a.swap(k * d + c, p * d + c);
                }
                sign = -sign;
            }
            for i in k + 1..d {
                for j in k + 1..d {
                    a[i * d + j] = (a[i * d + j] * a[k * d + k] - a[i * d + k] * a[k * d + j]) / prev;
                }
            }
            prev = a[k * d + k];
        }
        sign * a[d * d - 1]
    }

    /// Sum of squared numerators (exact squared Frobenius norm times den²).
    pub fn frobenius_sq_num(&self) -> i128 {
        self.num.iter().map(|&x| x as i128 * x as i128).sum()
    }
}

/// An element of SO(n,1)°, optionally carrying an exact rational form.
#[derive(Clone, Debug)]
pub struct GroupElement {
    mat: Mat,
    exact: Option<ExactMatrix>,
}

impl PartialEq for GroupElement {
    fn eq(&self, other: &Self) -> bool {
        match (&self.exact, &other.exact) {
            (Some(a), Some(b)) => a.to_mat() == b.to_mat(),
            _ => self.mat == other.mat,
        }
    }
}

impl GroupElement {
    /// Validates form preservation, determinant and the identity-component
    /// certificate (bottom-right entry ≥ 1). Tolerances scale with the size
    /// of the entries.
    pub fn new(mat: Mat) -> Result<Self> {
        check_in_group(&mat)?;
        Ok(GroupElement { mat, exact: None })
    }

    pub fn from_exact(exact: ExactMatrix) -> Result<Self> {
        if !exact.preserves_gram() {
            return invalid("exact matrix does not preserve q");
        }
        let mat = exact.to_mat();
        let d = exact.dim();
        if mat[(d - 1, d - 1)] < 1.0 {
            return invalid("exact matrix is not in the identity component");
        }
        if exact.det_num() <= 0 {
            return invalid("exact matrix has determinant -1");
        }
        Ok(GroupElement { mat, exact: Some(exact) })
    }

    pub(crate) fn from_parts_unchecked(mat: Mat, exact: Option<ExactMatrix>) -> Self {
        GroupElement { mat, exact }
    }

    pub fn identity(n: usize) -> Self {
        GroupElement {
            mat: Mat::identity(n + 1, n + 1),
            exact: Some(ExactMatrix::identity(n + 1, 1)),
        }
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }

    pub fn exact(&self) -> Option<&ExactMatrix> {
        self.exact.as_ref()
    }

    pub fn n(&self) -> usize {
        self.mat.nrows() - 1
    }

    pub fn mul(&self, other: &GroupElement) -> GroupElement {
        let exact = match (&self.exact, &other.exact) {
            (Some(a), Some(b)) => a.mul(b),
            _ => None,
        };
        let mat = match &exact {
            Some(e) => e.to_mat(),
            None => &self.mat * &other.mat,
        };
        GroupElement { mat, exact }
    }

    /// g⁻¹ = J gᵀ J.
    pub fn inverse(&self) -> GroupElement {
        let n = self.n();
        let j = gram(n);
        GroupElement {
            mat: &j * self.mat.transpose() * &j,
            exact: self.exact.as_ref().map(|e| e.transpose().conj_gram()),
        }
    }
}

fn check_in_group(mat: &Mat) -> Result<()> {
    let d = mat.nrows();
    if d != mat.ncols() || d < 3 {
        return Err(LabError::Dimension(format!(
            "group elements are square of size >= 3, got {}x{}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    let scale = mat.abs().max().max(1.0);
    let j = gram(d - 1);
    let defect = (mat.transpose() * &j * mat - &j).abs().max();
    if defect > FORM_TOL * scale * scale {
        return invalid(format!("matrix does not preserve q (defect {defect:.3e})"));
    }
    if mat[(d - 1, d - 1)] < 1.0 - FORM_TOL * scale {
        return invalid("matrix is outside the identity component");
    }
    let det = mat.determinant();
    if (det - 1.0).abs() > FORM_TOL * scale.powi(d as i32) {
        return invalid(format!("determinant {det} != 1"));
    }
    Ok(())
}

/// g* = (gᵀ)⁻¹, computed as J g J.
pub fn star(g: &GroupElement) -> GroupElement {
    let j = gram(g.n());
    GroupElement {
        mat: &j * g.mat() * &j,
        exact: g.exact().map(|e| e.conj_gram()),
    }
}

/// (mᵀ)⁻¹ for an arbitrary invertible matrix.
pub fn star_mat(m: &Mat) -> Result<Mat> {
    m.transpose()
        .try_inverse()
        .ok_or_else(|| LabError::Invalid("singular matrix".into()))
}

pub fn make_a(n: usize, s: f64) -> GroupElement {
    let mut m = Mat::identity(n + 1, n + 1);
    let (sh, ch) = (s.sinh(), s.cosh());
    m[(0, 0)] = ch;
    m[(n, n)] = ch;
    m[(0, n)] = sh;
    m[(n, 0)] = sh;
    GroupElement::from_parts_unchecked(m, None)
}

pub fn make_u(x: &[f64]) -> GroupElement {
    let n = x.len() + 1;
    let x2: f64 = x.iter().map(|v| v * v).sum();
    let mut m = Mat::identity(n + 1, n + 1);
    m[(0, 0)] = 1.0 - x2 / 2.0;
    m[(0, n)] = x2 / 2.0;
    m[(n, 0)] = -x2 / 2.0;
    m[(n, n)] = 1.0 + x2 / 2.0;
    for (q, &xq) in x.iter().enumerate() {
        m[(0, q + 1)] = xq;
        m[(n, q + 1)] = xq;
        m[(q + 1, 0)] = -xq;
        m[(q + 1, n)] = xq;
    }
    GroupElement::from_parts_unchecked(m, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InfSign {
    Plus,
    Minus,
}

/// a(∞) = lim e^{−s} a(s), and a(−∞) = J′ a(∞) J′ with J′ = diag(−1, 1, …, 1).
#[derive(Clone, Debug)]
pub struct BoundaryMatrix {
    pub mat: Mat,
    pub sign: InfSign,
}

pub fn make_a_infty(n: usize, sign: InfSign) -> BoundaryMatrix {
    let mut m = Mat::zeros(n + 1, n + 1);
    let off = match sign {
        InfSign::Plus => 0.5,
        InfSign::Minus => -0.5,
    };
    m[(0, 0)] = 0.5;
    m[(n, n)] = 0.5;
    m[(0, n)] = off;
    m[(n, 0)] = off;
    BoundaryMatrix { mat: m, sign }
}

/// diag(R, 1) for R ∈ SO(n).
pub fn embed_k(r: &Mat) -> Result<GroupElement> {
    let n = r.nrows();
    if r.ncols() != n || n < 2 {
        return Err(LabError::Dimension("rotation must be square, size >= 2".into()));
    }
    let defect = (r.transpose() * r - Mat::identity(n, n)).abs().max();
    if defect > FORM_TOL {
        return invalid("matrix is not orthogonal");
    }
    if (r.determinant() - 1.0).abs() > FORM_TOL {
        return invalid("rotation has determinant -1");
    }
    let mut m = Mat::identity(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(r);
    Ok(GroupElement::from_parts_unchecked(m, None))
}

/// Rotation by θ in the (e₁, e₂) plane, n = 2.
pub fn make_k_theta(theta: f64) -> GroupElement {
    let (s, c) = theta.sin_cos();
    let m = Mat::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
    GroupElement::from_parts_unchecked(m, None)
}

pub fn is_in_k(g: &Mat, tol: f64) -> bool {
    let d = g.nrows();
    for i in 0..d - 1 {
        if g[(i, d - 1)].abs() > tol || g[(d - 1, i)].abs() > tol {
            return false;
        }
    }
    (g[(d - 1, d - 1)] - 1.0).abs() <= tol
        && (g.transpose() * g - Mat::identity(d, d)).abs().max() <= tol
}

/// Householder-based completion of a unit vector to an SO(m) matrix whose
/// first column is `u`.
pub fn complete_to_rotation(u: &Vector) -> Mat {
    let m = u.len();
    let mut e1 = Vector::zeros(m);
    e1[0] = 1.0;
    let w = &e1 - u;
    let wn = w.norm();
    if wn < 1e-14 {
        return Mat::identity(m, m);
    }
    let w = w / wn;
    let mut h = Mat::identity(m, m) - 2.0 * &w * w.transpose();
    // H is a reflection; flip a non-leading column to land in SO(m).
    if m >= 2 {
        let mut c = h.column_mut(1);
        c.neg_mut();
    } else {
        h.neg_mut();
    }
    h
}

/// g = k₁ a(t) k₂ with k₁, k₂ ∈ K and t ≥ 0.
pub fn cartan_decompose(g: &GroupElement) -> (GroupElement, f64, GroupElement) {
    let n = g.n();
    let m = g.mat();
    let ch = m[(n, n)].max(1.0);
    let t = ch.acosh();
    let col: Vector = m.view((0, n), (n, 1)).column(0).into_owned();
    let sh = col.norm();
    if sh < 1e-12 {
        return (GroupElement::identity(n), 0.0, g.clone());
    }
    let r1 = complete_to_rotation(&(col / sh));
    let mut k1 = Mat::identity(n + 1, n + 1);
    k1.view_mut((0, 0), (n, n)).copy_from(&r1);
    let k2 = make_a(n, -t).mat() * k1.transpose() * m;
    (
        GroupElement::from_parts_unchecked(k1, None),
        t,
        GroupElement::from_parts_unchecked(k2, None),
    )
}

/// A 2×2 real matrix of determinant one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SL2Element {
    pub mat: Matrix2<f64>,
}

impl SL2Element {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let det = a * d - b * c;
        let scale = a.abs().max(b.abs()).max(c.abs()).max(d.abs()).max(1.0);
        if (det - 1.0).abs() > 1e-12 * scale * scale {
            return invalid(format!("determinant {det} != 1"));
        }
        Ok(SL2Element { mat: Matrix2::new(a, b, c, d) })
    }

    pub fn identity() -> Self {
        SL2Element { mat: Matrix2::identity() }
    }

    pub fn mul(&self, o: &SL2Element) -> SL2Element {
        SL2Element { mat: self.mat * o.mat }
    }

    pub fn inverse(&self) -> SL2Element {
        let m = self.mat;
        SL2Element { mat: Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) }
    }

    pub fn neg(&self) -> SL2Element {
        SL2Element { mat: -self.mat }
    }

    pub fn entries(&self) -> [f64; 4] {
        [self.mat[(0, 0)], self.mat[(0, 1)], self.mat[(1, 0)], self.mat[(1, 1)]]
    }
}

/// δ(s) = diag(e^{s/2}, e^{−s/2}).
pub fn sl2_delta(s: f64) -> SL2Element {
    SL2Element { mat: Matrix2::new((s / 2.0).exp(), 0.0, 0.0, (-s / 2.0).exp()) }
}

/// υ(t) = [[1, t], [0, 1]].
pub fn sl2_upsilon(t: f64) -> SL2Element {
    SL2Element { mat: Matrix2::new(1.0, t, 0.0, 1.0) }
}

/// κ_θ, the rotation by θ.
pub fn sl2_kappa(theta: f64) -> SL2Element {
    let (s, c) = theta.sin_cos();
    SL2Element { mat: Matrix2::new(c, -s, s, c) }
}

/// Matrix of X ↦ gXg⁻¹ on sl(2) in the ordered basis (E, H, F).
fn adjoint(g: &SL2Element) -> Mat {
    let gi = g.inverse().mat;
    let basis = [
        Matrix2::new(0.0, 1.0, 0.0, 0.0),
        Matrix2::new(1.0, 0.0, 0.0, -1.0),
        Matrix2::new(0.0, 0.0, 1.0, 0.0),
    ];
    let mut out = Mat::zeros(3, 3);
    for (col, x) in basis.iter().enumerate() {
        let y = g.mat * x * gi;
        out[(0, col)] = y[(0, 1)];
        out[(1, col)] = y[(0, 0)];
        out[(2, col)] = y[(1, 0)];
    }
    out
}

/// The intertwiner C with C·Ad(δ(1)) = a(1)·C and C·Ad(υ(1)) = u(1)·C,
/// found as the null vector of the stacked linear system.
fn phi_intertwiner() -> &'static (Mat, Mat) {
    static C: OnceLock<(Mat, Mat)> = OnceLock::new();
    C.get_or_init(|| {
        let pairs = [
            (adjoint(&sl2_delta(1.0)), make_a(2, 1.0).mat().clone()),
            (adjoint(&sl2_upsilon(1.0)), make_u(&[1.0]).mat().clone()),
        ];
        // Unknown C (row-major, 9 entries); equations (C·X − Y·C)_{ij} = 0.
        let mut sys = Mat::zeros(18, 9);
        for (p, (x, y)) in pairs.iter().enumerate() {
            for i in 0..3 {
                for j in 0..3 {
                    let row = p * 9 + i * 3 + j;
                    for k in 0..3 {
                        sys[(row, i * 3 + k)] += x[(k, j)];
                        sys[(row, k * 3 + j)] -= y[(i, k)];
                    }
                }
            }
        }
        let svd = (sys.transpose() * &sys).symmetric_eigen();
        let mut best = 0;
        for i in 1..9 {
            if svd.eigenvalues[i].abs() < svd.eigenvalues[best].abs() {
                best = i;
            }
        }
        let v = svd.eigenvectors.column(best);
        let c = Mat::from_row_slice(3, 3, v.as_slice());
        let ci = c.clone().try_inverse().expect("intertwiner is invertible");
        (c, ci)
    })
}

/// Φ(g) through the adjoint representation conjugated by the fixed intertwiner.
pub fn build_isogeny_phi(g: &SL2Element) -> GroupElement {
    let (c, ci) = phi_intertwiner();
    let m = c * adjoint(g) * ci;
    GroupElement::from_parts_unchecked(m, None)
}

/// Numerators of 2·Φ([[a,b],[c,d]]): integer quadratic expressions in the entries.
pub fn phi_twice(a: i64, b: i64, c: i64, d: i64) -> [i64; 9] {
    let (a2, b2, c2, d2) = (a * a, b * b, c * c, d * d);
    [
        a2 - b2 - c2 + d2,
        2 * (a * b - c * d),
        a2 + b2 - c2 - d2,
        2 * (a * c - b * d),
        2 * (a * d + b * c),
        2 * (a * c + b * d),
        a2 - b2 + c2 - d2,
        2 * (a * b + c * d),
        a2 + b2 + c2 + d2,
    ]
}

/// Exact Φ of an integer SL(2) matrix, with denominator 2.
pub fn phi_exact(a: i64, b: i64, c: i64, d: i64) -> Result<ExactMatrix> {
    if a * d - b * c != 1 {
        return invalid("integer matrix must have determinant 1");
    }
    ExactMatrix::new(3, 2, phi_twice(a, b, c, d).to_vec())
}

/// One of the two preimages ±g of an element of SO(2,1)°.
pub fn phi_inverse(g: &GroupElement) -> Result<SL2Element> {
    if g.n() != 2 {
        return Err(LabError::Dimension("Φ is defined for n = 2".into()));
    }
    let m = g.mat();
    let e = |i: usize, j: usize| m[(i, j)];
    let sq = [
        (e(0, 0) + e(0, 2) + e(2, 0) + e(2, 2)) / 2.0,
        (-e(0, 0) + e(0, 2) - e(2, 0) + e(2, 2)) / 2.0,
        (-e(0, 0) - e(0, 2) + e(2, 0) + e(2, 2)) / 2.0,
        (e(0, 0) - e(0, 2) - e(2, 0) + e(2, 2)) / 2.0,
    ];
    let ab = (e(0, 1) + e(2, 1)) / 2.0;
    let cd = (e(2, 1) - e(0, 1)) / 2.0;
    let ac = (e(1, 0) + e(1, 2)) / 2.0;
    let bd = (e(1, 2) - e(1, 0)) / 2.0;
    let ad = (e(1, 1) + 1.0) / 2.0;
    let bc = (e(1, 1) - 1.0) / 2.0;
    let mut lead = 0;
    for i in 1..4 {
        if sq[i] > sq[lead] {
            lead = i;
        }
    }
    let p = sq[lead].max(0.0).sqrt();
    // products of the lead entry with the others, indexed (a, b, c, d)
    let prods = match lead {
        0 => [p * p, ab, ac, ad],
        1 => [ab, p * p, bc, bd],
        2 => [ac, bc, p * p, cd],
        _ => [ad, bd, cd, p * p],
    };
    let v: Vec<f64> = prods.iter().map(|x| x / p).collect();
    SL2Element::new(v[0], v[1], v[2], v[3])
        .or_else(|_| Ok(SL2Element { mat: Matrix2::new(v[0], v[1], v[2], v[3]) }))
}

/// v⁺ = e₁ + e_{n+1}.
pub fn v_plus(n: usize) -> Vector {
    let mut v = Vector::zeros(n + 1);
    v[0] = 1.0;
    v[n] = 1.0;
    v
}

/// v⁻ = e₁ − e_{n+1}.
pub fn v_minus(n: usize) -> Vector {
    let mut v = Vector::zeros(n + 1);
    v[0] = 1.0;
    v[n] = -1.0;
    v
}

pub fn unit(n: usize, i: usize) -> Vector {
    let mut v = Vector::zeros(n + 1);
    v[i] = 1.0;
    v
}

/// Columns (v⁺, e₂, …, e_r | v⁻, e_{r+1}, …, e_n): the ordered bases of
/// P₁^∞ and P₂^∞ side by side.
pub fn basis_infty(n: usize, r: usize) -> Mat {
    let mut b = Mat::zeros(n + 1, n + 1);
    b.set_column(0, &v_plus(n));
    for q in 1..r {
        b.set_column(q, &unit(n, q));
    }
    b.set_column(r, &v_minus(n));
    for q in r..n {
        b.set_column(q + 1, &unit(n, q));
    }
    b
}

/// Orthonormal-free bases of P₁^∞ (first r columns) and P₂^∞.
pub fn p_infty(n: usize, r: usize) -> (Mat, Mat) {
    let b = basis_infty(n, r);
    (b.columns(0, r).into_owned(), b.columns(r, n + 1 - r).into_owned())
}

fn block_diag(y1: &Mat, y2: &Mat) -> Mat {
    let (p, q) = (y1.nrows(), y2.nrows());
    let mut m = Mat::zeros(p + q, p + q);
    m.view_mut((0, 0), (p, p)).copy_from(y1);
    m.view_mut((p, p), (q, q)).copy_from(y2);
    m
}

fn check_pair(n: usize, y1: &Mat, y2: &Mat) -> Result<()> {
    if !y1.is_square() || !y2.is_square() || y1.nrows() + y2.nrows() != n + 1 {
        return Err(LabError::Dimension(format!(
            "blocks {}x{} and {}x{} do not split R^{}",
            y1.nrows(),
            y1.ncols(),
            y2.nrows(),
            y2.ncols(),
            n + 1
        )));
    }
    if y1.determinant().abs() < 1e-300 || y2.determinant().abs() < 1e-300 {
        return invalid("singular block");
    }
    Ok(())
}

/// Ambient matrix acting on P₁⁽⁰⁾ = span(e₁..e_{i+1}) by y₁ and on
/// P₂⁽⁰⁾ = span(e_{i+2}..e_{n+1}) by y₂, in the standard ordered bases.
pub fn rep_rho0(n: usize, y1: &Mat, y2: &Mat) -> Result<Mat> {
    check_pair(n, y1, y2)?;
    Ok(block_diag(y1, y2))
}

/// Ambient matrix acting on P₁^∞ by y₁ in the basis (v⁺, e₂, …, e_{i+1}) and
/// on P₂^∞ by y₂ in the basis (v⁻, e_{i+2}, …, e_n).
pub fn rep_rho_infty(n: usize, y1: &Mat, y2: &Mat) -> Result<Mat> {
    check_pair(n, y1, y2)?;
    let b = basis_infty(n, y1.nrows());
    let bi = b.clone().try_inverse().expect("basis of R^{n+1}");
    Ok(&b * block_diag(y1, y2) * bi)
}

/// ρ^∞ for n = 2 restricted to SL(2): acts on P₀^∞ = span(v⁺, e₂).
pub fn rho_infty_sl2(g: &SL2Element) -> Mat {
    let y1 = Mat::from_fn(2, 2, |i, j| g.mat[(i, j)]);
    rep_rho_infty(2, &y1, &Mat::identity(1, 1)).expect("valid SL(2) block")
}

/// ρ^∞_θ(g) = k_θ ρ^∞(g) k_θ⁻¹.
pub fn rep_rho_infty_theta(theta: f64, g: &SL2Element) -> Mat {
    let k = make_k_theta(theta);
    k.mat() * rho_infty_sl2(g) * k.mat().transpose()
}

/// Columns (v⁺, e₂, …, e_n, v⁻): an eigenbasis of every a(s).
pub fn lightcone_basis(n: usize) -> Mat {
    let mut b = Mat::identity(n + 1, n + 1);
    b.set_column(0, &v_plus(n));
    b.set_column(n, &v_minus(n));
    b
}

/// g₁(s), g₂(s) written in the light-cone basis. Working in this basis keeps
/// the e^{±s} scales multiplicative, so products with a(s) stay accurate for
/// large s.
pub fn make_g1_g2_lightcone(n: usize, s: f64) -> (Mat, Mat) {
    let (ep, em) = (s.exp(), (-s).exp());
    // g₁: e₁ = (v⁺ + v⁻)/2 ↦ (e^s/2)v⁺ and v⁻ ↦ e^{−s}v⁻, so v⁺ ↦ e^s v⁺ − e^{−s} v⁻
    let mut g1 = Mat::identity(n + 1, n + 1);
    g1[(0, 0)] = ep;
    g1[(n, 0)] = -em;
    g1[(n, n)] = em;
    // g₂: v⁺ ↦ e^{−s}v⁺ and e_{n+1} = (v⁺ − v⁻)/2 ↦ −(e^s/2)v⁻, so v⁻ ↦ e^{−s}v⁺ + e^s v⁻
    let mut g2 = Mat::identity(n + 1, n + 1);
    g2[(0, 0)] = em;
    g2[(0, n)] = em;
    g2[(n, n)] = ep;
    (g1, g2)
}

/// a(s) in the light-cone basis.
pub fn make_a_lightcone(n: usize, s: f64) -> Mat {
    let mut m = Mat::identity(n + 1, n + 1);
    m[(0, 0)] = s.exp();
    m[(n, n)] = (-s).exp();
    m
}

/// g₁(s) and g₂(s): e₁ ↦ (e^s/2)v⁺, e_q ↦ e_q, v⁻ ↦ e^{−s}v⁻ and
/// v⁺ ↦ e^{−s}v⁺, e_q ↦ e_q, e_{n+1} ↦ −(e^s/2)v⁻.
pub fn make_g1_g2(n: usize, s: f64) -> (Mat, Mat) {
    let b = lightcone_basis(n);
    let bi = b.clone().try_inverse().expect("basis");
    let (g1, g2) = make_g1_g2_lightcone(n, s);
    (&b * g1 * &bi, &b * g2 * &bi)
}

/// Deviations a(s)g₁(s)⁻¹ − I and a(s)*g₂(s)⁻¹ − I in standard coordinates,
/// evaluated through the light-cone basis.
pub fn g_deviation(n: usize, s: f64) -> (Mat, Mat) {
    let b = lightcone_basis(n);
    let bi = b.clone().try_inverse().expect("basis");
    let (g1, g2) = make_g1_g2_lightcone(n, s);
    let id = Mat::identity(n + 1, n + 1);
    let lower_inv = |m: Mat| m.try_inverse().expect("triangular, invertible");
    let d1 = make_a_lightcone(n, s) * lower_inv(g1) - &id;
    let d2 = make_a_lightcone(n, -s) * lower_inv(g2) - &id;
    (&b * d1 * &bi, &b * d2 * &bi)
}

/// R₁: e₁ ↦ v⁺/2, e_q ↦ e_q, e_{n+1} ↦ −v⁻.
/// R₂: e₁ ↦ v⁺, e_q ↦ e_q, e_{n+1} ↦ −v⁻/2.
/// Both have determinant one.
pub fn make_r1_r2(n: usize) -> (Mat, Mat) {
    let (vp, vm) = (v_plus(n), v_minus(n));
    let mut r1 = Mat::identity(n + 1, n + 1);
    r1.set_column(0, &(&vp * 0.5));
    r1.set_column(n, &(-&vm));
    let mut r2 = Mat::identity(n + 1, n + 1);
    r2.set_column(0, &vp);
    r2.set_column(n, &(&vm * -0.5));
    (r1, r2)
}

/// d₁(s) = diag(e^{is/(i+1)}, e^{−s/(i+1)} I_i), d₂(s) = diag(e^{−s/(j+1)} I_j, e^{js/(j+1)}).
pub fn make_d1_d2(i: usize, j: usize, s: f64) -> (Mat, Mat) {
    let (fi, fj) = (i as f64, j as f64);
    let mut d1 = Mat::identity(i + 1, i + 1) * (-s / (fi + 1.0)).exp();
    d1[(0, 0)] = (fi * s / (fi + 1.0)).exp();
    let mut d2 = Mat::identity(j + 1, j + 1) * (-s / (fj + 1.0)).exp();
    d2[(j, j)] = (fj * s / (fj + 1.0)).exp();
    (d1, d2)
}

/// δ(s) = (diag(e^{is/(i+1)}, e^{−s/(i+1)} I_i), diag(e^{js/(j+1)}, e^{−s/(j+1)} I_j)).
pub fn make_delta(i: usize, j: usize, s: f64) -> (Mat, Mat) {
    let block = |k: usize| {
        let fk = k as f64;
        let mut d = Mat::identity(k + 1, k + 1) * (-s / (fk + 1.0)).exp();
        d[(0, 0)] = (fk * s / (fk + 1.0)).exp();
        d
    };
    (block(i), block(j))
}

/// υ(a, b) = ([[1, a], [0, I_i]], [[1, b], [0, I_j]]).
pub fn make_upsilon(a: &[f64], b: &[f64]) -> (Mat, Mat) {
    let block = |x: &[f64]| {
        let mut m = Mat::identity(x.len() + 1, x.len() + 1);
        for (q, &v) in x.iter().enumerate() {
            m[(0, q + 1)] = v;
        }
        m
    };
    (block(a), block(b))
}

fn same_span(a: &Mat, b: &Mat, tol: f64) -> bool {
    let mut joined = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    joined.columns_mut(0, a.ncols()).copy_from(a);
    joined.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    numerical_rank(&joined, tol) == a.ncols()
}

pub fn numerical_rank(m: &Mat, tol: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > tol * top.max(1.0)).count()
}

/// Membership in K_{P^∞} = Stab_K(P₁^∞, P₂^∞).
pub fn in_k_pinfty(k: &GroupElement, r: usize) -> bool {
    let n = k.n();
    if r == 0 || r > n || !is_in_k(k.mat(), 1e-9) {
        return false;
    }
    let (p1, p2) = p_infty(n, r);
    same_span(&p1, &(k.mat() * &p1), 1e-9) && same_span(&p2, &(k.mat() * &p2), 1e-9)
}

/// The distinguished subgroups of G.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubgroupSpec {
    K,
    KPinfty { r: usize },
    A,
    U,
    H { i: usize, j: usize },
}

impl SubgroupSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        match *self {
            SubgroupSpec::H { i, j } if i + j != n - 1 => {
                invalid(format!("H(i,j) needs i + j = n - 1 = {}", n - 1))
            }
            SubgroupSpec::KPinfty { r } if r == 0 || r > n => invalid("need 1 <= r <= n"),
            _ => Ok(()),
        }
    }

    pub fn contains(&self, g: &GroupElement, tol: f64) -> bool {
        let n = g.n();
        let m = g.mat();
        match *self {
            SubgroupSpec::K => is_in_k(m, tol),
            SubgroupSpec::KPinfty { r } => in_k_pinfty(g, r),
            SubgroupSpec::A => {
                let s = m[(0, n)].asinh();
                (m - make_a(n, s).mat()).abs().max() <= tol
            }
            SubgroupSpec::U => {
                let x: Vec<f64> = (1..n).map(|q| m[(0, q)]).collect();
                (m - make_u(&x).mat()).abs().max() <= tol
            }
            SubgroupSpec::H { i, .. } => {
                let p = i + 1;
                let d = n + 1;
                for a in 0..d {
                    for b in 0..d {
                        if (a < p) != (b < p) && m[(a, b)].abs() > tol {
                            return false;
                        }
                    }
                }
                let c = m.view((0, 0), (p, p)).into_owned();
                let q = d - p;
                let h2 = m.view((p, p), (q, q)).into_owned();
                let jq = gram(q - 1);
                (c.transpose() * &c - Mat::identity(p, p)).abs().max() <= tol
                    && (c.determinant() - 1.0).abs() <= tol
                    && (h2.transpose() * &jq * &h2 - &jq).abs().max() <= tol * h2.abs().max().max(1.0).powi(2)
                    && h2[(q - 1, q - 1)] >= 1.0 - tol
                    && (h2.determinant() - 1.0).abs() <= tol * h2.abs().max().max(1.0).powi(q as i32)
            }
        }
    }
}

/// SO(j,1)° boost between the first and last coordinate of a (j+1)-block.
pub fn make_a_block(j: usize, t: f64) -> Mat {
    let mut m = Mat::identity(j + 1, j + 1);
    m[(0, 0)] = t.cosh();
    m[(j, j)] = t.cosh();
    m[(0, j)] = t.sinh();
    m[(j, 0)] = t.sinh();
    m
}

/// h = diag(c, c₁ a_j(t) c₂) ∈ H_{i,j}, with c ∈ SO(i+1) and c₁, c₂ ∈ SO(j)
/// acting on the first j coordinates of the second block.
pub fn make_h(c: &Mat, c1: &Mat, t: f64, c2: &Mat) -> Mat {
    let j = c1.nrows();
    let embed = |x: &Mat| {
        let mut m = Mat::identity(j + 1, j + 1);
        m.view_mut((0, 0), (j, j)).copy_from(x);
        m
    };
    let second = embed(c1) * make_a_block(j, t) * embed(c2);
    block_diag(c, &second)
}
