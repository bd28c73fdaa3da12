//! r-lattices in R^{n+1}, homothety classes with canonical representatives,
//! orthogonal pairs, degenerate subspaces, fiber coordinates and shapes.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, LabError, Result};
use crate::geometry::{q_gram, star, GroupElement, Mat, Vector};

const REL_TIE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct LatticeBasis {
    basis: Mat,
    exact: Option<Vec<i64>>,
}

#[derive(Serialize, Deserialize)]
struct LatticeRecord {
    ambient_dim: usize,
    rank: usize,
    basis: Vec<f64>,
}

impl Serialize for LatticeBasis {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (d, r) = (self.ambient_dim(), self.rank());
        let mut basis = Vec::with_capacity(d * r);
        for i in 0..d {
            for j in 0..r {
                basis.push(self.basis[(i, j)]);
            }
        }
        LatticeRecord { ambient_dim: d, rank: r, basis }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LatticeBasis {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = LatticeRecord::deserialize(d)?;
        if rec.basis.len() != rec.ambient_dim * rec.rank {
            return Err(serde::de::Error::custom("basis length does not match ambient_dim * rank"));
        }
        let m = Mat::from_row_slice(rec.ambient_dim, rec.rank, &rec.basis);
        LatticeBasis::new(m).map_err(serde::de::Error::custom)
    }
}

impl LatticeBasis {
    pub fn new(basis: Mat) -> Result<Self> {
        let r = basis.ncols();
        if r == 0 || r > basis.nrows() {
            return Err(LabError::Dimension(format!(
                "rank {r} in ambient dimension {}",
                basis.nrows()
            )));
        }
        if !basis.iter().all(|x| x.is_finite()) {
            return invalid("non-finite basis entry");
        }
        let g = basis.transpose() * &basis;
        let prod: f64 = (0..r).map(|i| g[(i, i)]).product();
        if !(g.determinant() > 1e-12 * prod) {
            return invalid("basis is not of full rank");
        }
        Ok(LatticeBasis { basis, exact: None })
    }

    /// Integer basis given row-major as a d×r array.
    pub fn from_integer(d: usize, r: usize, entries: &[i64]) -> Result<Self> {
        if entries.len() != d * r {
            return Err(LabError::Dimension("entries do not match d*r".into()));
        }
        let m = Mat::from_fn(d, r, |i, j| entries[i * r + j] as f64);
        let mut b = LatticeBasis::new(m)?;
        b.exact = Some(entries.to_vec());
        Ok(b)
    }

    pub fn from_columns(cols: &[Vector]) -> Result<Self> {
        if cols.is_empty() {
            return invalid("empty basis");
        }
        LatticeBasis::new(Mat::from_columns(cols))
    }

    pub fn basis(&self) -> &Mat {
        &self.basis
    }

    pub fn exact(&self) -> Option<&[i64]> {
        self.exact.as_deref()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn gram(&self) -> Mat {
        self.basis.transpose() * &self.basis
    }

    pub fn covolume(&self) -> f64 {
        self.gram().determinant().max(0.0).sqrt()
    }

    /// The lattice m·Λ.
    pub fn transform(&self, m: &Mat) -> Result<LatticeBasis> {
        LatticeBasis::new(m * &self.basis)
    }
}

/// LLL reduction (δ = 0.99) of the columns of `b`, returning the reduced basis
/// and the unimodular change of basis.
pub fn lll_reduce(b: &Mat) -> (Mat, Vec<Vec<i64>>) {
    let r = b.ncols();
    let mut cols: Vec<Vector> = (0..r).map(|j| b.column(j).into_owned()).collect();
    let mut u: Vec<Vec<i64>> = (0..r).map(|j| (0..r).map(|i| (i == j) as i64).collect()).collect();
    let delta = 0.99;
    let gso = |cols: &Vec<Vector>| {
        let mut bstar: Vec<Vector> = Vec::with_capacity(r);
        let mut mu = vec![vec![0.0; r]; r];
        let mut bb = vec![0.0; r];
        for i in 0..r {
            let mut v = cols[i].clone();
            for j in 0..i {
                mu[i][j] = cols[i].dot(&bstar[j]) / bb[j];
                v -= &bstar[j] * mu[i][j];
            }
            bb[i] = v.norm_squared();
            bstar.push(v);
        }
        (mu, bb)
    };
    let mut k = 1;
    let mut guard = 0;
    while k < r && guard < 100_000 {
        guard += 1;
        for j in (0..k).rev() {
            let (mu, _) = gso(&cols);
            let m = mu[k][j].round();
            if m != 0.0 {
                let cj = cols[j].clone();
                cols[k] -= cj * m;
                let mi = m as i64;
                for i in 0..r {
                    u[k][i] -= mi * u[j][i];
                }
            }
        }
        let (mu, bb) = gso(&cols);
        if bb[k] >= (delta - mu[k][k - 1] * mu[k][k - 1]) * bb[k - 1] {
            k += 1;
        } else {
            cols.swap(k, k - 1);
            u.swap(k, k - 1);
            k = k.max(2) - 1;
        }
    }
    (Mat::from_columns(&cols), u)
}

fn gcd(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn det_i128(m: &[Vec<i128>]) -> i128 {
    let k = m.len();
    if k == 0 {
        return 1;
    }
    let mut a: Vec<Vec<i128>> = m.to_vec();
    let mut sign = 1;
    let mut prev = 1i128;
    for p in 0..k {
        if a[p][p] == 0 {
            match (p + 1..k).find(|&r| a[r][p] != 0) {
                Some(r) => {
                    a.swap(p, r);
                    sign = -sign;
                }
                None => return 0,
            }
        }
        for i in p + 1..k {
            for j in p + 1..k {
                a[i][j] = (a[i][j] * a[p][p] - a[i][p] * a[p][j]) / prev;
            }
        }
        prev = a[p][p];
    }
    sign * a[k - 1][k - 1]
}

/// True if the integer vectors (as columns of an r×k matrix) extend to a basis of Z^r.
fn is_primitive_set(vecs: &[Vec<i64>], r: usize) -> bool {
    let k = vecs.len();
    let mut g: i128 = 0;
    let mut rows: Vec<usize> = (0..k).collect();
    loop {
        let m: Vec<Vec<i128>> =
            rows.iter().map(|&ri| (0..k).map(|c| vecs[c][ri] as i128).collect()).collect();
        g = gcd(g, det_i128(&m));
        if g == 1 {
            return true;
        }
        // next k-subset of 0..r
        let mut i = k;
        loop {
            if i == 0 {
                return g == 1;
            }
            i -= 1;
            if rows[i] < r - k + i {
                rows[i] += 1;
                for j in i + 1..k {
                    rows[j] = rows[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// All integer coefficient vectors c ≠ 0 with cᵀGc ≤ bound (Fincke–Pohst).
fn short_vectors(gm: &Mat, bound: f64) -> Vec<(Vec<i64>, f64)> {
    let r = gm.nrows();
    // q_{ii}, q_{ij}: Gram in the form Σ q_ii (c_i + Σ_{j>i} q_ij c_j)²
    let mut q = gm.clone();
    for i in 0..r {
        for j in i + 1..r {
            q[(j, i)] = q[(i, j)];
            q[(i, j)] /= q[(i, i)];
        }
        for k in i + 1..r {
            for l in k..r {
                q[(k, l)] -= q[(k, i)] * q[(i, l)];
            }
        }
    }
    let mut out = Vec::new();
    let mut c = vec![0i64; r];
    fn rec(
        i: usize,
        r: usize,
        q: &Mat,
        rem: f64,
        c: &mut Vec<i64>,
        out: &mut Vec<(Vec<i64>, f64)>,
        bound: f64,
    ) {
        let center: f64 = -(i + 1..r).map(|j| q[(i, j)] * c[j] as f64).sum::<f64>();
        let half = (rem.max(0.0) / q[(i, i)]).sqrt();
        let lo = (center - half - 1e-9).ceil() as i64;
        let hi = (center + half + 1e-9).floor() as i64;
        for x in lo..=hi {
            c[i] = x;
            let d = x as f64 - center;
            let used = q[(i, i)] * d * d;
            let left = rem - used;
            if left < -1e-9 * bound.max(1.0) {
                continue;
            }
            if i == 0 {
                if c.iter().any(|&v| v != 0) {
                    out.push((c.clone(), bound - left));
                }
            } else {
                rec(i - 1, r, q, left, c, out, bound);
            }
        }
        c[i] = 0;
    }
    rec(r - 1, r, &q, bound, &mut c, &mut out, bound);
    out
}

fn tie_cmp(a: &Vector, b: &Vector) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        if (x - y).abs() > REL_TIE {
            return x.partial_cmp(y).unwrap();
        }
    }
    std::cmp::Ordering::Equal
}

fn sign_normalize(v: Vector) -> Vector {
    for x in v.iter() {
        if x.abs() > REL_TIE {
            return if *x < 0.0 { -v } else { v };
        }
    }
    v
}

/// Homothety class of a lattice, stored through a canonical basis of unit
/// covolume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HomothetyClass {
    canon: LatticeBasis,
}

impl HomothetyClass {
    pub fn canon(&self) -> &LatticeBasis {
        &self.canon
    }

    pub fn rank(&self) -> usize {
        self.canon.rank()
    }

    pub fn ambient_dim(&self) -> usize {
        self.canon.ambient_dim()
    }

    pub fn basis(&self) -> &Mat {
        self.canon.basis()
    }

    /// Entrywise distance between canonical forms.
    pub fn distance(&self, other: &HomothetyClass) -> f64 {
        if self.basis().shape() != other.basis().shape() {
            return f64::INFINITY;
        }
        (self.basis() - other.basis()).abs().max()
    }

    pub fn minima(&self) -> Vec<f64> {
        self.basis().column_iter().map(|c| c.norm()).collect()
    }
}

/// Canonical representative: LLL reduction, unit covolume, then a greedy
/// successive-minima basis where ties are broken by a sign rule (first
/// significant coordinate positive) and lexicographic order on coordinates.
pub fn canonical_class(l: &LatticeBasis) -> Result<HomothetyClass> {
    let r = l.rank();
    let (red, _) = lll_reduce(l.basis());
    let g = red.transpose() * &red;
    let covol = g.determinant();
    if !(covol > 0.0) {
        return invalid("rank-deficient lattice");
    }
    let scale = covol.sqrt().powf(1.0 / r as f64);
    let red = red / scale;
    let gm = red.transpose() * &red;
    let mut radius2 = (0..r).map(|i| gm[(i, i)]).fold(0.0, f64::max) * (1.0 + 1e-6);
    let mut chosen: Vec<Vec<i64>> = Vec::with_capacity(r);
    let mut cols: Vec<Vector> = Vec::with_capacity(r);
    let mut candidates = short_vectors(&gm, radius2);
    while chosen.len() < r {
        let mut best: Option<(f64, Vector, Vec<i64>)> = None;
        for (c, _) in &candidates {
            let mut trial = chosen.clone();
            trial.push(c.clone());
            if !is_primitive_set(&trial, r) {
                continue;
            }
            let v = &red * Vector::from_iterator(r, c.iter().map(|&x| x as f64));
            let len2 = v.norm_squared();
            let v = sign_normalize(v);
            let better = match &best {
                None => true,
                Some((bl, bv, _)) => {
                    if len2 < bl * (1.0 - REL_TIE) {
                        true
                    } else if len2 <= bl * (1.0 + REL_TIE) {
                        tie_cmp(&v, bv) == std::cmp::Ordering::Greater
                    } else {
                        false
                    }
                }
            };
            if better {
                best = Some((len2, v, c.clone()));
            }
        }
        match best {
            Some((_, v, c)) => {
                chosen.push(c);
                cols.push(v);
            }
            None => {
                radius2 *= 4.0;
                candidates = short_vectors(&gm, radius2);
            }
        }
    }
    let mut m = Mat::from_columns(&cols);
    // re-normalize against rounding drift
    let cv = (m.transpose() * &m).determinant().sqrt().powf(1.0 / r as f64);
    m /= cv;
    Ok(HomothetyClass { canon: LatticeBasis { basis: m, exact: None } })
}

/// Tests whether c = α·b·U for some α ≠ 0 and U ∈ GL(r, Z).
pub fn unimodular_related(b: &Mat, c: &Mat, tol: f64) -> bool {
    if b.shape() != c.shape() {
        return false;
    }
    let r = b.ncols();
    let vb = (b.transpose() * b).determinant().sqrt();
    let vc = (c.transpose() * c).determinant().sqrt();
    if !(vb > 0.0 && vc > 0.0) {
        return false;
    }
    let alpha = (vc / vb).powf(1.0 / r as f64);
    let Some(pinv) = (b.transpose() * b).try_inverse() else {
        return false;
    };
    let u = pinv * b.transpose() * c / alpha;
    let ur = u.map(|x| x.round());
    if (&u - &ur).abs().max() > tol.sqrt().max(1e-6) {
        return false;
    }
    if (ur.determinant().abs() - 1.0).abs() > 1e-6 {
        return false;
    }
    let resid = (b * &ur * alpha - c).abs().max();
    resid <= tol * c.abs().max().max(1.0)
}

pub fn same_class(a: &HomothetyClass, b: &HomothetyClass, tol: f64) -> bool {
    if a.basis().shape() != b.basis().shape() {
        return false;
    }
    if a.distance(b) <= tol {
        return true;
    }
    let (ma, mb) = (a.minima(), b.minima());
    if ma.iter().zip(&mb).any(|(x, y)| (x - y).abs() > 1e-6 * x.max(1.0)) {
        return false;
    }
    unimodular_related(a.basis(), b.basis(), tol)
}

/// Pair of homothety classes with Euclidean-orthogonal spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoPair {
    pub first: HomothetyClass,
    pub second: HomothetyClass,
}

/// Signature type of q restricted to a subspace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanType {
    PositiveDefinite,
    Degenerate,
    Indefinite,
}

pub fn orthonormal_basis(b: &Mat) -> Mat {
    let qr = b.clone().qr();
    qr.q().columns(0, b.ncols()).into_owned()
}

pub fn span_type(b: &Mat) -> SpanType {
    let o = orthonormal_basis(b);
    let g = q_gram(&o);
    let ev = g.symmetric_eigen().eigenvalues;
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 1e-9 {
        SpanType::PositiveDefinite
    } else if min >= -1e-9 {
        SpanType::Degenerate
    } else {
        SpanType::Indefinite
    }
}

/// Exact degeneracy test for an integer basis (determinant of the q-Gram).
pub fn is_degenerate_exact(l: &LatticeBasis) -> Option<bool> {
    let e = l.exact()?;
    let (d, r) = (l.ambient_dim(), l.rank());
    let col = |j: usize| (0..d).map(|i| e[i * r + j] as i128).collect::<Vec<_>>();
    let qg: Vec<Vec<i128>> = (0..r)
        .map(|a| {
            let ca = col(a);
            (0..r)
                .map(|b| {
                    let cb = col(b);
                    (0..d).map(|i| if i == d - 1 { -ca[i] * cb[i] } else { ca[i] * cb[i] }).sum()
                })
                .collect()
        })
        .collect();
    Some(det_i128(&qg) == 0)
}

impl OrthoPair {
    /// Builds the pair in the given order after checking orthogonality.
    pub fn new(first: &LatticeBasis, second: &LatticeBasis) -> Result<Self> {
        let d = first.ambient_dim();
        if second.ambient_dim() != d || first.rank() + second.rank() != d {
            return Err(LabError::Dimension(format!(
                "ranks {} + {} do not fill R^{d}",
                first.rank(),
                second.rank()
            )));
        }
        let cross = first.basis().transpose() * second.basis();
        let scale = first.basis().abs().max() * second.basis().abs().max();
        if cross.abs().max() > 1e-9 * scale.max(1.0) {
            return invalid("the two lattices are not orthogonal");
        }
        Ok(OrthoPair { first: canonical_class(first)?, second: canonical_class(second)? })
    }

    /// Builds a pair from a lattice and the full orthogonal complement lattice
    /// generated by the given vectors.
    pub fn from_classes(first: HomothetyClass, second: HomothetyClass) -> Result<Self> {
        let cross = first.basis().transpose() * second.basis();
        if cross.abs().max() > 1e-9 {
            return invalid("the two classes are not orthogonal");
        }
        Ok(OrthoPair { first, second })
    }

    /// Builds the pair with the convention that a nondegenerate pair lists the
    /// positive-definite span first. Returns whether the inputs were swapped.
    pub fn new_ordered(a: &LatticeBasis, b: &LatticeBasis) -> Result<(Self, bool)> {
        let p = OrthoPair::new(a, b)?;
        if span_type(p.first.basis()) == SpanType::Indefinite {
            Ok((p.swapped(), true))
        } else {
            Ok((p, false))
        }
    }

    pub fn swapped(&self) -> OrthoPair {
        OrthoPair { first: self.second.clone(), second: self.first.clone() }
    }

    pub fn n(&self) -> usize {
        self.first.ambient_dim() - 1
    }

    pub fn r(&self) -> usize {
        self.first.rank()
    }
}

/// g·([Λ₁],[Λ₂]) = ([gΛ₁],[g*Λ₂]).
pub fn act(g: &GroupElement, p: &OrthoPair) -> Result<OrthoPair> {
    act_mat(g.mat(), star(g).mat(), p)
}

/// Same as [`act`] with g and g* given as matrices.
pub fn act_mat(g: &Mat, g_star: &Mat, p: &OrthoPair) -> Result<OrthoPair> {
    let first = canonical_class(&LatticeBasis::new(g * p.first.basis())?)?;
    let second = canonical_class(&LatticeBasis::new(g_star * p.second.basis())?)?;
    Ok(OrthoPair { first, second })
}

pub fn same_pair(a: &OrthoPair, b: &OrthoPair, tol: f64) -> bool {
    same_class(&a.first, &b.first, tol) && same_class(&a.second, &b.second, tol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspacePair {
    pub p1: Mat,
    pub p2: Mat,
    pub degenerate: bool,
}

/// Orthonormal bases of the two spans and the degeneracy flag.
pub fn project_pi(p: &OrthoPair) -> SubspacePair {
    let p1 = orthonormal_basis(p.first.basis());
    let p2 = orthonormal_basis(p.second.basis());
    let det = q_gram(&p1).determinant();
    SubspacePair { p1, p2, degenerate: det.abs() < 1e-9 }
}

/// Integer basis of v^⊥ ∩ Z^{n+1}.
pub fn ortho_lattice(v: &[i64]) -> Result<LatticeBasis> {
    let d = v.len();
    if v.iter().all(|&x| x == 0) {
        return invalid("v must be nonzero");
    }
    // column operations on the row vector v, mirrored on U, until v·U = (g, 0, …, 0)
    let mut row: Vec<i128> = v.iter().map(|&x| x as i128).collect();
    let mut u: Vec<Vec<i128>> = (0..d).map(|i| (0..d).map(|j| (i == j) as i128).collect()).collect();
    loop {
        let nz: Vec<usize> = (0..d).filter(|&j| row[j] != 0).collect();
        if nz.len() <= 1 {
            let p = nz[0];
            if p != 0 {
                row.swap(0, p);
                for r in u.iter_mut() {
                    r.swap(0, p);
                }
            }
            break;
        }
        let piv = *nz.iter().min_by_key(|&&j| row[j].abs()).unwrap();
        for &j in &nz {
            if j == piv {
                continue;
            }
            let q = row[j].div_euclid(row[piv]);
            row[j] -= q * row[piv];
            for r in u.iter_mut() {
                r[j] -= q * r[piv];
            }
        }
    }
    let r = d - 1;
    let mut entries = Vec::with_capacity(d * r);
    for i in 0..d {
        for j in 1..d {
            entries.push(i64::try_from(u[i][j]).map_err(|_| LabError::Invalid("overflow".into()))?);
        }
    }
    LatticeBasis::from_integer(d, r, &entries)
}

/// Point of the SL(2,Z) fundamental domain: |x| ≤ 1/2, x² + y² ≥ 1, with
/// x ≥ 0 on the boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct X2Point {
    pub x: f64,
    pub y: f64,
}

/// Point of the GL(2,Z) fundamental domain: 0 ≤ x ≤ 1/2, x² + y² ≥ 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapePoint {
    pub x: f64,
    pub y: f64,
}

/// Reduces τ = x + iy (y > 0) into the standard fundamental domain.
pub fn reduce_upper_half(mut x: f64, mut y: f64) -> X2Point {
    const EPS: f64 = 1e-12;
    for _ in 0..10_000 {
        x -= x.round();
        let r2 = x * x + y * y;
        if r2 < 1.0 - EPS {
            x = -x / r2;
            y /= r2;
        } else {
            break;
        }
    }
    if (x + 0.5).abs() < EPS {
        x = 0.5;
    }
    if (x * x + y * y - 1.0).abs() < EPS && x < 0.0 {
        x = -x;
    }
    X2Point { x, y }
}

/// τ of a 2-lattice with coordinates (columns) in an oriented plane.
fn tau_of(coords: &Mat) -> (f64, f64) {
    let (a, b) = (coords[(0, 0)], coords[(1, 0)]);
    let (c, d) = (coords[(0, 1)], coords[(1, 1)]);
    // τ = z₂ / z₁ with z = first + i·second
    let den = a * a + b * b;
    let x = (c * a + d * b) / den;
    let y = (d * a - c * b) / den;
    if y < 0.0 {
        (-x, -y)
    } else {
        (x, y)
    }
}

/// Oriented fiber coordinate of a rank-2 class in the given orthonormal frame.
pub fn x2_point(c: &HomothetyClass, frame: &Mat) -> Result<X2Point> {
    if c.rank() != 2 || frame.ncols() != 2 {
        return Err(LabError::Dimension("x2_point needs rank-2 data".into()));
    }
    let coords = frame.transpose() * c.basis();
    let back = frame * &coords;
    if (back - c.basis()).abs().max() > 1e-7 {
        return invalid("lattice does not lie in the frame's plane");
    }
    if coords.determinant().abs() < 1e-12 {
        return invalid("degenerate Gram");
    }
    let (x, y) = tau_of(&coords);
    Ok(reduce_upper_half(x, y))
}

/// Shape of a rank-2 class: the fiber coordinate up to reflection.
pub fn shape(c: &HomothetyClass) -> Result<ShapePoint> {
    if c.rank() != 2 {
        return Err(LabError::Dimension("shape needs a rank-2 class".into()));
    }
    let g = c.canon().gram();
    let (g11, g12, g22) = (g[(0, 0)], g[(0, 1)], g[(1, 1)]);
    let disc = g11 * g22 - g12 * g12;
    if disc <= 0.0 {
        return invalid("degenerate Gram");
    }
    let p = reduce_upper_half(g12 / g11, disc.sqrt() / g11);
    Ok(ShapePoint { x: p.x.abs(), y: p.y })
}

pub fn shape_of_x2(p: X2Point) -> ShapePoint {
    ShapePoint { x: p.x.abs(), y: p.y }
}

/// Fiber coordinate of one lattice in its subspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FiberCoord {
    Point,
    X2(X2Point),
    Class(HomothetyClass),
}

/// Coordinates of both lattices in the orthonormal frames of `sp`.
pub fn fiber_coordinates(p: &OrthoPair, sp: &SubspacePair) -> Result<(FiberCoord, FiberCoord)> {
    let one = |c: &HomothetyClass, frame: &Mat| -> Result<FiberCoord> {
        if frame.ncols() != c.rank() {
            return invalid("span mismatch");
        }
        let coords = frame.transpose() * c.basis();
        if (frame * &coords - c.basis()).abs().max() > 1e-7 {
            return invalid("span mismatch");
        }
        Ok(match c.rank() {
            1 => FiberCoord::Point,
            2 => FiberCoord::X2(x2_point(c, frame)?),
            _ => FiberCoord::Class(canonical_class(&LatticeBasis::new(coords)?)?),
        })
    };
    Ok((one(&p.first, &sp.p1)?, one(&p.second, &sp.p2)?))
}
