//! Predicted limiting laws of norm-ball orbit averages, Γ-special degenerate
//! 2-lattices and their packets, and samplers for the predicted laws.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enumeration::Gamma;
use crate::error::{invalid, LabError, Result};
use crate::geometry::{
    gram, make_k_theta, phi_inverse, q_gram, rep_rho_infty_theta, sl2_kappa, unit, v_plus, GroupElement, Mat,
    SL2Element, Vector,
};
use crate::lattice::{
    canonical_class, orthonormal_basis, same_class, span_type, x2_point, HomothetyClass, LatticeBasis, OrthoPair,
    ShapePoint, SpanType, X2Point,
};
use crate::norm::NormSpec;
use crate::quadrature::{
    eval_w_infty, eval_w_p0, eval_w_theta0, rng_stream, sample_k_pinfty, DensityProfile, QuadratureSpec,
};

/// Tolerance for canonical-form comparisons of orbit classes.
pub const CLASS_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "snake_case")]
pub enum LawCase {
    /// Positive-definite first span: density w_{P₀} times the fiber-invariant measure.
    NonDegenerate { profile: DensityProfile },
    /// Degenerate span, n ≥ 3: density w^∞_{P₀}.
    DegenerateHigh { profile: DensityProfile },
    /// Degenerate non-special 2-lattice in R³: density w_{θ₀}.
    DegenerateGeneric2d { profile: DensityProfile, theta0: f64 },
    /// Γ-special 2-lattice: m-extension supported on the packet curves.
    SpecialExtension { profile: DensityProfile, packet: Vec<HomothetyClass>, theta0: f64, m: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedLaw {
    pub n: usize,
    pub r: usize,
    #[serde(flatten)]
    pub case: LawCase,
}

impl PredictedLaw {
    pub fn profile(&self) -> &DensityProfile {
        match &self.case {
            LawCase::NonDegenerate { profile }
            | LawCase::DegenerateHigh { profile }
            | LawCase::DegenerateGeneric2d { profile, .. }
            | LawCase::SpecialExtension { profile, .. } => profile,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.case {
            LawCase::NonDegenerate { .. } => "non_degenerate",
            LawCase::DegenerateHigh { .. } => "degenerate_high",
            LawCase::DegenerateGeneric2d { .. } => "degenerate_generic_2d",
            LawCase::SpecialExtension { .. } => "special_extension",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SpecialVerdict {
    Special { packet: Vec<HomothetyClass>, m: usize },
    NotSpecialUpTo { n_max: usize },
}

/// Inputs for the density computation inside [`classify_start`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    pub norm: NormSpec,
    pub grid: usize,
    pub quadrature: QuadratureSpec,
    pub n_max: usize,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions { norm: NormSpec::Frobenius, grid: 64, quadrature: QuadratureSpec::default(), n_max: 1000 }
    }
}

/// A vector of the span of `basis` on which q is closest to vanishing
/// (exactly null for a degenerate span), scaled so its last coordinate is 1.
pub fn near_null_direction(basis: &Mat) -> Result<Vector> {
    let o = orthonormal_basis(basis);
    let eig = q_gram(&o).symmetric_eigen();
    let mut idx = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i].abs() < eig.eigenvalues[idx].abs() {
            idx = i;
        }
    }
    let w = &o * eig.eigenvectors.column(idx);
    let last = w[w.len() - 1];
    if last.abs() < 1e-12 {
        return invalid("span has no near-null direction with a time component");
    }
    Ok(w / last)
}

/// Spatial part of the orthogonal projection of e_{n+1} onto the span of
/// `basis`. On a degenerate span k·P₁^∞ it points along k v⁺.
pub fn time_projection(basis: &Mat) -> Result<Vector> {
    let d = basis.nrows();
    let o = orthonormal_basis(basis);
    let p = &o * o.row(d - 1).transpose();
    let spatial = p.rows(0, d - 1).into_owned();
    if spatial.norm() < 1e-12 {
        return invalid("span has no time projection off the axis");
    }
    Ok(spatial)
}

/// θ of the span, read off the time projection ≈ (cos θ, sin θ); equals
/// the angle of k_θ·P^∞ on degenerate spans (n = 2).
pub fn coset_angle(first: &Mat) -> Result<f64> {
    if first.nrows() != 3 {
        return Err(LabError::Dimension("coset angle is defined for n = 2".into()));
    }
    let w = time_projection(first)?;
    Ok(w[1].atan2(w[0]).rem_euclid(2.0 * PI))
}

/// First coordinate of the unit time projection; the 1-d marginal of the
/// subspace law used for n ≥ 3.
pub fn subspace_coordinate(first: &Mat) -> Result<f64> {
    let w = time_projection(first)?;
    Ok(w[0] / w.norm())
}

/// ϑ with span(Λ) = P^∞_ϑ = k_ϑ·span(v⁺, e₂) for a degenerate 2-lattice in R³.
pub fn degenerate_angle(lambda: &Mat) -> Result<f64> {
    if lambda.shape() != (3, 2) {
        return Err(LabError::Dimension("need a 2-lattice in R^3".into()));
    }
    if span_type(lambda) != SpanType::Degenerate {
        return invalid("span is not degenerate");
    }
    let w = near_null_direction(lambda)?;
    Ok(w[1].atan2(w[0]).rem_euclid(2.0 * PI))
}

/// Orthonormal frame (k_ϑ v⁺/√2, k_ϑ e₂) of P^∞_ϑ.
pub fn plane_frame(theta: f64) -> Mat {
    let k = make_k_theta(theta);
    let mut f = Mat::zeros(3, 2);
    f.set_column(0, &(k.mat() * v_plus(2) / 2f64.sqrt()));
    f.set_column(1, &(k.mat() * unit(2, 1)));
    f
}

/// g₀ ∈ G with P₀ = g₀·span(e₁,…,e_r) for a positive-definite P₀: a
/// q-orthonormal basis of P₀ extended by one of its q-orthogonal complement.
pub fn g0_nondegenerate(p0: &Mat) -> Result<GroupElement> {
    let d = p0.nrows();
    let n = d - 1;
    let r = p0.ncols();
    if span_type(p0) != SpanType::PositiveDefinite {
        return invalid("span is not positive definite");
    }
    let j = gram(n);
    let mut cols: Vec<Vector> = Vec::with_capacity(d);
    let qdot = |a: &Vector, b: &Vector| (a.transpose() * &j * b)[(0, 0)];
    let push = |cols: &mut Vec<Vector>, v: Vector| -> bool {
        let mut w = v;
        for c in cols.iter() {
            let qc = qdot(c, c);
            w -= c * (qdot(c, &w) / qc);
        }
        let qw = qdot(&w, &w);
        if qw.abs() < 1e-10 * w.norm_squared().max(1e-300) {
            return false;
        }
        cols.push(&w / qw.abs().sqrt());
        true
    };
    for c in p0.column_iter() {
        if !push(&mut cols, c.into_owned()) {
            return invalid("span is not positive definite");
        }
    }
    // the q-complement has signature (n − r, 1); take positive vectors first
    let mut timelike: Option<Vector> = None;
    for e in (0..d).map(|i| unit(n, i)) {
        if cols.len() + usize::from(timelike.is_some()) == d {
            break;
        }
        let mut w = e;
        for c in cols.iter().chain(timelike.iter()) {
            w -= c * (qdot(c, &w) / qdot(c, c));
        }
        let qw = qdot(&w, &w);
        if qw.abs() < 1e-10 {
            continue;
        }
        if qw > 0.0 && cols.len() < n {
            cols.push(&w / qw.sqrt());
        } else if qw < 0.0 && timelike.is_none() {
            timelike = Some(&w / (-qw).sqrt());
        }
    }
    let mut t = timelike.ok_or_else(|| LabError::Invalid("no timelike complement found".into()))?;
    if cols.len() != n {
        return invalid("could not complete a q-orthonormal frame");
    }
    if t[n] < 0.0 {
        t = -t;
    }
    cols.push(t);
    let mut g = Mat::from_columns(&cols);
    if g.determinant() < 0.0 {
        // flip a vector outside P₀ when possible
        let c = if r < n { n - 1 } else { 0 };
        let v = -g.column(c);
        g.set_column(c, &v);
    }
    GroupElement::new(g)
}

/// g₀ ∈ K with P₀ = g₀·span(v⁺, e₂, …, e_r) for a degenerate P₀.
pub fn g0_degenerate(p0: &Mat) -> Result<GroupElement> {
    let d = p0.nrows();
    let n = d - 1;
    let r = p0.ncols();
    if span_type(p0) != SpanType::Degenerate {
        return invalid("span is not degenerate");
    }
    let w = near_null_direction(p0)?;
    let u = w.rows(0, n).into_owned();
    let rot = crate::geometry::complete_to_rotation(&(u.clone() / u.norm()));
    let mut k = Mat::identity(d, d);
    k.view_mut((0, 0), (n, n)).copy_from(&rot);
    // k⁻¹P₀ = span(v⁺, W) with W ⊂ span(e₂, …, e_n)
    let moved = k.transpose() * orthonormal_basis(p0);
    let mut ws: Vec<Vector> = Vec::new();
    for c in moved.column_iter() {
        let mut x = Vector::zeros(n - 1);
        for i in 1..n {
            x[i - 1] = c[i];
        }
        for b in &ws {
            let p = b.dot(&x);
            x -= b * p;
        }
        if x.norm() > 1e-8 {
            ws.push(&x / x.norm());
        }
    }
    if ws.len() != r - 1 {
        return invalid("degenerate span of unexpected shape");
    }
    // complete W to an oriented basis of R^{n−1}
    let mut basis = ws.clone();
    for i in 0..n - 1 {
        if basis.len() == n - 1 {
            break;
        }
        let mut x = Vector::zeros(n - 1);
        x[i] = 1.0;
        for b in &basis {
            let p = b.dot(&x);
            x -= b * p;
        }
        if x.norm() > 1e-8 {
            basis.push(&x / x.norm());
        }
    }
    let mut b = if n > 1 { Mat::from_columns(&basis) } else { Mat::identity(0, 0) };
    if n > 1 && b.determinant() < 0.0 {
        let c = if r - 1 < n - 1 { n - 2 } else { 0 };
        let v = -b.column(c);
        b.set_column(c, &v);
    }
    let mut k2 = Mat::identity(d, d);
    if n > 1 {
        k2.view_mut((1, 1), (n - 1, n - 1)).copy_from(&b);
    }
    GroupElement::new(k * k2)
}

/// Preimages in SL(2,R) of the generators of k_θ⁻¹Γk_θ: a generating set
/// of Γ^Φ_θ modulo ±I.
pub fn pulled_back_generators(gamma: &Gamma, theta0: f64) -> Result<Vec<SL2Element>> {
    if gamma.n() != 2 {
        return Err(LabError::Dimension("Γ^Φ_θ needs n = 2".into()));
    }
    let k = make_k_theta(theta0);
    let ki = k.inverse();
    gamma
        .generators(&NormSpec::Frobenius)?
        .iter()
        .map(|x| {
            let g = gamma.acting(x)?;
            phi_inverse(&ki.mul(&g).mul(&k))
        })
        .collect()
}

fn rho_class(theta0: f64, g: &SL2Element, c: &HomothetyClass) -> Result<HomothetyClass> {
    let m = rep_rho_infty_theta(theta0, g);
    canonical_class(&LatticeBasis::new(m * c.basis())?)
}

fn find_class(list: &[HomothetyClass], c: &HomothetyClass, tol: f64) -> Option<usize> {
    let mc = c.minima();
    list.iter().position(|x| {
        let mx = x.minima();
        mx.iter().zip(&mc).all(|(a, b)| (a - b).abs() <= 1e-6 * a.max(1.0)) && same_class(x, c, tol)
    })
}

/// Closes [Λ] under ρ^∞_{θ₀}(Γ^Φ_{θ₀}) by breadth-first search over the
/// pulled-back generators; more than `n_max` classes gives up.
pub fn detect_special(lambda: &LatticeBasis, theta0: f64, gamma: &Gamma, n_max: usize) -> Result<SpecialVerdict> {
    if lambda.ambient_dim() != 3 || lambda.rank() != 2 {
        return Err(LabError::Dimension("need a 2-lattice in R^3".into()));
    }
    let frame = plane_frame(theta0);
    let b = lambda.basis();
    if (&frame * (frame.transpose() * b) - b).abs().max() > 1e-9 * b.abs().max().max(1.0) {
        return invalid(format!("lattice is not contained in the degenerate plane at angle {theta0}"));
    }
    let gens = pulled_back_generators(gamma, theta0)?;
    let start = canonical_class(lambda)?;
    let mut packet = vec![start];
    let mut head = 0;
    while head < packet.len() {
        let c = packet[head].clone();
        head += 1;
        for g in &gens {
            let next = rho_class(theta0, g, &c)?;
            if find_class(&packet, &next, CLASS_TOL).is_none() {
                packet.push(next);
                if packet.len() > n_max {
                    return Ok(SpecialVerdict::NotSpecialUpTo { n_max });
                }
            }
        }
    }
    let m = packet.len();
    Ok(SpecialVerdict::Special { packet, m })
}

/// k_θ·[ρ^∞_{θ₀}(κ_{−θ/2})Λᵢ] for every packet member.
pub fn m_extension_curve(packet: &[HomothetyClass], theta0: f64, theta: f64) -> Result<Vec<HomothetyClass>> {
    let m = make_k_theta(theta).mat() * rep_rho_infty_theta(theta0, &sl2_kappa(-theta / 2.0));
    packet.iter().map(|c| canonical_class(&LatticeBasis::new(&m * c.basis())?)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionWitness {
    pub theta: f64,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionFailure {
    pub theta: f64,
    pub best_distance: f64,
}

/// Locates γ·[Λ] on the multi-section: θ from γP^∞_{θ₀} = P^∞_{θ+θ₀}, then
/// the packet index whose curve value matches.
pub fn multi_section_check(
    gamma: &GroupElement,
    lambda: &HomothetyClass,
    packet: &[HomothetyClass],
    theta0: f64,
) -> Result<std::result::Result<SectionWitness, SectionFailure>> {
    if gamma.n() != 2 {
        return Err(LabError::Dimension("multi-sections live in R^3".into()));
    }
    let w = gamma.mat() * make_k_theta(theta0).mat() * v_plus(2);
    let theta = (w[1].atan2(w[0]) - theta0).rem_euclid(2.0 * PI);
    let moved = canonical_class(&LatticeBasis::new(gamma.mat() * lambda.basis())?)?;
    let curve = m_extension_curve(packet, theta0, theta)?;
    let mut best = f64::INFINITY;
    for (i, c) in curve.iter().enumerate() {
        if same_class(c, &moved, CLASS_TOL) {
            return Ok(Ok(SectionWitness { theta, index: i }));
        }
        best = best.min(c.distance(&moved));
    }
    Ok(Err(SectionFailure { theta, best_distance: best }))
}

/// Routes a starting pair to its predicted limiting law and computes the
/// matching density.
pub fn classify_start(p: &OrthoPair, gamma: &Gamma, opts: &ClassifyOptions) -> Result<PredictedLaw> {
    let n = p.n();
    let r = p.r();
    if gamma.n() != n {
        return Err(LabError::Dimension(format!("pair lives in R^{} but Γ acts on R^{}", n + 1, gamma.n() + 1)));
    }
    let first = p.first.basis();
    let spec = &opts.quadrature;
    match span_type(first) {
        SpanType::Indefinite => invalid(
            "first span is indefinite; order the pair so that the first span is positive definite or degenerate",
        ),
        SpanType::PositiveDefinite => {
            let g0 = g0_nondegenerate(first)?;
            let profile = eval_w_p0(r, n, &g0, &opts.norm, opts.grid, spec)?;
            Ok(PredictedLaw { n, r, case: LawCase::NonDegenerate { profile } })
        }
        SpanType::Degenerate if n >= 3 => {
            let g0 = g0_degenerate(first)?;
            let profile = eval_w_infty(r, n, &g0, &opts.norm, opts.grid, spec)?;
            Ok(PredictedLaw { n, r, case: LawCase::DegenerateHigh { profile } })
        }
        SpanType::Degenerate => {
            if r != 2 {
                return invalid("for n = 2 a degenerate pair must list the 2-lattice first");
            }
            let theta0 = degenerate_angle(first)?;
            let profile = eval_w_theta0(theta0, &opts.norm, opts.grid, spec)?;
            match detect_special(p.first.canon(), theta0, gamma, opts.n_max)? {
                SpecialVerdict::Special { packet, m } => {
                    Ok(PredictedLaw { n, r, case: LawCase::SpecialExtension { profile, packet, theta0, m } })
                }
                SpecialVerdict::NotSpecialUpTo { .. } => {
                    Ok(PredictedLaw { n, r, case: LawCase::DegenerateGeneric2d { profile, theta0 } })
                }
            }
        }
    }
}

/// Invariant probability on X₂ = SL(2,R)/SL(2,Z) (hyperbolic area on the
/// fundamental domain), sampled exactly: x = sin(φ) with φ uniform on
/// [−π/6, π/6], then y = √(1−x²)/(1−V) with V uniform.
pub fn sample_x2<R: Rng>(rng: &mut R) -> X2Point {
    let phi: f64 = rng.gen_range(-PI / 6.0..PI / 6.0);
    let x = phi.sin();
    let v: f64 = rng.gen();
    X2Point { x, y: (1.0 - x * x).sqrt() / (1.0 - v) }
}

/// Coordinates in [0,1]² in which the invariant measure on the shape space
/// (0 ≤ x ≤ 1/2, x² + y² ≥ 1) is uniform.
pub fn shape_unit_coords(s: ShapePoint) -> (f64, f64) {
    let x = s.x.abs().min(0.5);
    let u = x.asin() / (PI / 6.0);
    let y0 = (1.0 - x * x).sqrt();
    let v = (1.0 - y0 / s.y.max(y0)).clamp(0.0, 1.0);
    (u.clamp(0.0, 1.0), v)
}

/// Inverse-CDF sampler for a circle profile, piecewise linear between
/// grid angles.
#[derive(Clone, Debug)]
pub struct CircleSampler {
    thetas: Vec<f64>,
    values: Vec<f64>,
    cum: Vec<f64>,
}

impl CircleSampler {
    pub fn new(profile: &DensityProfile) -> Result<Self> {
        let thetas = profile.thetas().ok_or_else(|| LabError::Invalid("profile is not on a circle".into()))?;
        let m = thetas.len();
        let values: Vec<f64> = profile.values.iter().map(|v| v.max(0.0)).collect();
        let mut cum = Vec::with_capacity(m + 1);
        cum.push(0.0);
        for l in 0..m {
            let mass = 0.5 * (values[l] + values[(l + 1) % m]);
            cum.push(cum[l] + mass);
        }
        let total = cum[m];
        if !(total > 0.0) {
            return invalid("profile has no mass");
        }
        cum.iter_mut().for_each(|c| *c /= total);
        Ok(CircleSampler { thetas, values, cum })
    }

    /// CDF of the angle on [0, 2π).
    pub fn cdf(&self, theta: f64) -> f64 {
        let m = self.thetas.len();
        let h = 2.0 * PI / m as f64;
        let x = theta.rem_euclid(2.0 * PI) / h;
        let l = (x.floor() as usize).min(m - 1);
        let f = x - l as f64;
        let (a, b) = (self.values[l], self.values[(l + 1) % m]);
        let cell = self.cum[l + 1] - self.cum[l];
        let mass = a + b;
        let part = if mass > 0.0 { (a * f + 0.5 * (b - a) * f * f) / (0.5 * mass) } else { f };
        self.cum[l] + cell * part
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let m = self.thetas.len();
        let h = 2.0 * PI / m as f64;
        let u: f64 = rng.gen();
        let l = self.cum.partition_point(|c| *c <= u).saturating_sub(1).min(m - 1);
        let cell = self.cum[l + 1] - self.cum[l];
        let p = if cell > 0.0 { (u - self.cum[l]) / cell } else { 0.5 };
        let (a, b) = (self.values[l], self.values[(l + 1) % m]);
        // solve a f + (b − a) f²/2 = p (a + b)/2 for f ∈ [0, 1]
        let f = if (b - a).abs() < 1e-12 * (a + b).max(1e-300) {
            p
        } else {
            let rhs = p * 0.5 * (a + b);
            let c2 = 0.5 * (b - a);
            ((-a + (a * a + 4.0 * c2 * rhs).max(0.0).sqrt()) / (2.0 * c2)).clamp(0.0, 1.0)
        };
        (self.thetas[l] + f * h).rem_euclid(2.0 * PI)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedSample {
    /// Angle θ of the limiting subspace k_θ·P^∞ (n = 2).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta: Option<f64>,
    /// Row-major orthonormal frame of k·P₁^∞ (n ≥ 3).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frame: Option<Vec<f64>>,
    /// 1-d subspace coordinate (n ≥ 3).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coordinate: Option<f64>,
    pub fiber: Option<X2Point>,
    pub packet_index: Option<usize>,
}

impl PredictedSample {
    pub fn shape(&self) -> Option<ShapePoint> {
        self.fiber.map(crate::lattice::shape_of_x2)
    }
}

const SAMPLE_BLOCK: usize = 4096;

/// N draws from the predicted law, in parallel blocks with independent
/// streams; the output does not depend on the thread count.
pub fn sample_predicted(law: &PredictedLaw, count: usize, seed: u64) -> Result<Vec<PredictedSample>> {
    let n = law.n;
    let r = law.r;
    let profile = law.profile();
    let has_rank2 = r == 2 || n + 1 - r == 2;
    let circle = if n == 2 { Some(CircleSampler::new(profile)?) } else { None };
    // n ≥ 3: resample the Haar grid with weights ∝ values·weights
    let grid_cum: Vec<f64> = {
        let mut c = Vec::with_capacity(profile.values.len());
        let mut acc = 0.0;
        for (v, w) in profile.values.iter().zip(&profile.weights) {
            acc += v.max(0.0) * w;
            c.push(acc);
        }
        c
    };
    let ks = profile.k_mats();
    let blocks = count.div_ceil(SAMPLE_BLOCK);
    let out: Vec<Result<Vec<PredictedSample>>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_stream(seed, b as u64);
            let len = SAMPLE_BLOCK.min(count - b * SAMPLE_BLOCK);
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                v.push(draw_one(law, n, r, has_rank2, circle.as_ref(), &grid_cum, &ks, &mut rng)?);
            }
            Ok(v)
        })
        .collect();
    let mut all = Vec::with_capacity(count);
    for b in out {
        all.extend(b?);
    }
    Ok(all)
}

#[allow(clippy::too_many_arguments)]
fn draw_one<R: Rng>(
    law: &PredictedLaw,
    n: usize,
    r: usize,
    has_rank2: bool,
    circle: Option<&CircleSampler>,
    grid_cum: &[f64],
    ks: &[Mat],
    rng: &mut R,
) -> Result<PredictedSample> {
    if let Some(cs) = circle {
        let theta = cs.sample(rng);
        return Ok(match &law.case {
            LawCase::SpecialExtension { packet, theta0, .. } => {
                let i = rng.gen_range(0..packet.len());
                let rel = (theta - theta0).rem_euclid(2.0 * PI);
                let class = m_extension_curve(&packet[i..=i], *theta0, rel)?.remove(0);
                let fiber = x2_point(&class, &plane_frame(theta))?;
                PredictedSample { theta: Some(theta), frame: None, coordinate: None, fiber: Some(fiber), packet_index: Some(i) }
            }
            _ => PredictedSample {
                theta: Some(theta),
                frame: None,
                coordinate: None,
                fiber: Some(sample_x2(rng)),
                packet_index: None,
            },
        });
    }
    let total = *grid_cum.last().unwrap_or(&0.0);
    let u = rng.gen::<f64>() * total;
    let l = grid_cum.partition_point(|c| *c <= u).min(ks.len() - 1);
    let k = &ks[l] * sample_k_pinfty(n, r, rng);
    let (p1, _) = crate::geometry::p_infty(n, r);
    let frame = orthonormal_basis(&(&k * p1));
    let coordinate = k[(0, 0)];
    Ok(PredictedSample {
        theta: None,
        frame: Some(frame.transpose().as_slice().to_vec()),
        coordinate: Some(coordinate),
        fiber: if has_rank2 { Some(sample_x2(rng)) } else { None },
        packet_index: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_isogeny_phi, make_a, sl2_delta, sl2_upsilon};
    use crate::lattice::{shape, shape_of_x2};

    fn special_lattice(scale: f64) -> LatticeBasis {
        let mut b = Mat::zeros(3, 2);
        b.set_column(0, &(v_plus(2) * scale));
        b.set_column(1, &(unit(2, 1) * scale));
        LatticeBasis::new(b).unwrap()
    }

    fn generic_lattice(alpha: f64) -> LatticeBasis {
        let mut b = Mat::zeros(3, 2);
        b.set_column(0, &v_plus(2));
        b.set_column(1, &(unit(2, 1) * alpha));
        LatticeBasis::new(b).unwrap()
    }

    #[test]
    fn phi_of_kappa_is_k() {
        for th in [0.0, 0.7, 2.5, -1.1] {
            let k = build_isogeny_phi(&sl2_kappa(th / 2.0));
            assert!((k.mat() - make_k_theta(th).mat()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn standard_lattice_is_special() {
        let g = Gamma::phi_sl2z();
        for s in [1.0, 7.0] {
            match detect_special(&special_lattice(s), 0.0, &g, 1000).unwrap() {
                SpecialVerdict::Special { packet, m } => {
                    assert_eq!(m, 1);
                    assert!(same_class(&packet[0], &canonical_class(&special_lattice(1.0)).unwrap(), CLASS_TOL));
                }
                v => panic!("{v:?}"),
            }
        }
    }

    #[test]
    fn irrational_lattice_is_not_special() {
        let g = Gamma::phi_sl2z();
        let v = detect_special(&generic_lattice(2f64.sqrt()), 0.0, &g, 200).unwrap();
        assert_eq!(v, SpecialVerdict::NotSpecialUpTo { n_max: 200 });
    }

    #[test]
    fn packet_closed_under_generators() {
        let g = Gamma::phi_sl2z();
        // Λ = Z v⁺ + Z 2v⁰ has a finite orbit of index-type sublattices
        let l = generic_lattice(2.0);
        let SpecialVerdict::Special { packet, m } = detect_special(&l, 0.0, &g, 1000).unwrap() else {
            panic!("expected special")
        };
        assert_eq!(m, packet.len());
        assert!(m > 1);
        for gen in pulled_back_generators(&g, 0.0).unwrap() {
            for c in &packet {
                assert!(find_class(&packet, &rho_class(0.0, &gen, c).unwrap(), CLASS_TOL).is_some());
            }
        }
    }

    #[test]
    fn lattice_outside_plane_rejected() {
        let g = Gamma::phi_sl2z();
        assert!(detect_special(&special_lattice(1.0), 0.5, &g, 10).is_err());
    }

    #[test]
    fn curve_endpoints_and_degeneracy() {
        let packet = vec![canonical_class(&special_lattice(1.0)).unwrap()];
        let at0 = m_extension_curve(&packet, 0.0, 0.0).unwrap();
        assert!(same_class(&at0[0], &packet[0], CLASS_TOL));
        let at2pi = m_extension_curve(&packet, 0.0, 2.0 * PI).unwrap();
        assert!(same_class(&at2pi[0], &packet[0], 1e-7));
        let mut prev: Option<HomothetyClass> = None;
        for i in 0..360 {
            let th = 2.0 * PI * i as f64 / 360.0;
            let c = m_extension_curve(&packet, 0.0, th).unwrap().remove(0);
            assert_eq!(span_type(c.basis()), SpanType::Degenerate);
            let s = shape(&c).unwrap();
            if let Some(p) = prev {
                let sp = shape(&p).unwrap();
                assert!((s.x - sp.x).abs() + (s.y - sp.y).abs() < 0.2);
            }
            prev = Some(c);
        }
    }

    #[test]
    fn section_witnesses() {
        let lam = canonical_class(&special_lattice(1.0)).unwrap();
        let packet = vec![lam.clone()];
        let w = multi_section_check(&GroupElement::identity(2), &lam, &packet, 0.0).unwrap().unwrap();
        assert!(w.theta.abs() < 1e-12 && w.index == 0);
        let t = SL2Element::new(1.0, 1.0, 0.0, 1.0).unwrap();
        let s = SL2Element::new(0.0, -1.0, 1.0, 0.0).unwrap();
        for word in [t.clone(), s.clone(), t.mul(&s).mul(&t).mul(&t), s.mul(&t.inverse()).mul(&s).mul(&t).mul(&t)] {
            let g = build_isogeny_phi(&word);
            let w = multi_section_check(&g, &lam, &packet, 0.0).unwrap().unwrap();
            assert_eq!(w.index, 0);
        }
        // a non-Γ element leaves the multi-section
        let g = build_isogeny_phi(&sl2_upsilon(2f64.sqrt()).mul(&sl2_delta(0.3)));
        assert!(multi_section_check(&g, &lam, &packet, 0.0).unwrap().is_err());
    }

    #[test]
    fn classify_routes() {
        let g = Gamma::phi_sl2z();
        let opts = ClassifyOptions { quadrature: QuadratureSpec::default().with_samples(1), grid: 16, ..Default::default() };
        let plane = LatticeBasis::new(Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0])).unwrap();
        let line = LatticeBasis::new(Mat::from_row_slice(3, 1, &[0.0, 0.0, 1.0])).unwrap();
        let p = OrthoPair::new(&plane, &line).unwrap();
        assert!(matches!(classify_start(&p, &g, &opts).unwrap().case, LawCase::NonDegenerate { .. }));
        let perp = LatticeBasis::new(Mat::from_row_slice(3, 1, &[1.0, 0.0, -1.0])).unwrap();
        let p = OrthoPair::new(&special_lattice(1.0), &perp).unwrap();
        match classify_start(&p, &g, &opts).unwrap().case {
            LawCase::SpecialExtension { m, .. } => assert_eq!(m, 1),
            c => panic!("{c:?}"),
        }
        let p = OrthoPair::new(&generic_lattice(2f64.sqrt()), &perp).unwrap();
        assert!(matches!(classify_start(&p, &g, &opts).unwrap().case, LawCase::DegenerateGeneric2d { .. }));
    }

    #[test]
    fn witt_frames() {
        let p0 = Mat::from_row_slice(4, 2, &[1.0, 0.0, 0.5, 1.0, 0.0, 0.3, 0.2, 0.1]);
        let g0 = g0_nondegenerate(&p0).unwrap();
        let img = g0.mat().columns(0, 2).into_owned();
        // same span
        let proj = &p0 * (p0.transpose() * &p0).try_inverse().unwrap() * p0.transpose();
        assert!((&proj * &img - &img).abs().max() < 1e-10);
        let deg = Mat::from_row_slice(4, 2, &[0.6, 0.0, 0.8, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let gd = g0_degenerate(&deg).unwrap();
        let (p1, _) = crate::geometry::p_infty(3, 2);
        let img = gd.mat() * p1;
        let proj = &deg * (deg.transpose() * &deg).try_inverse().unwrap() * deg.transpose();
        assert!((&proj * &img - &img).abs().max() < 1e-10);
    }

    #[test]
    fn x2_sampler_matches_area_quadrature() {
        let mut rng = rng_stream(3, 0);
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| 1.0 / sample_x2(&mut rng).y).sum::<f64>() / n as f64;
        // (3/π)∫∫_F y^{−3} dx dy by nested midpoint sums
        let (mut num, mut den) = (0.0, 0.0);
        let m = 400;
        for i in 0..m {
            let x = -0.5 + (i as f64 + 0.5) / m as f64;
            let y0 = (1.0 - x * x).sqrt();
            // substitute y = y0/(1−v) on v ∈ [0, 1)
            for j in 0..m {
                let v = (j as f64 + 0.5) / m as f64;
                let y = y0 / (1.0 - v);
                let jac = y0 / (1.0 - v).powi(2);
                num += jac / y.powi(3);
                den += jac / y.powi(2);
            }
        }
        let want = num / den;
        assert!((mean / want - 1.0).abs() < 0.01, "{mean} vs {want}");
        assert!((want - 3.0 * 3f64.ln() / (2.0 * PI)).abs() < 1e-3);
    }

    #[test]
    fn unit_coords_are_uniform() {
        let mut rng = rng_stream(9, 0);
        let n = 100_000;
        let mut bins = [0usize; 4];
        for _ in 0..n {
            let (u, v) = shape_unit_coords(shape_of_x2(sample_x2(&mut rng)));
            bins[(u >= 0.5) as usize * 2 + (v >= 0.5) as usize] += 1;
        }
        for b in bins {
            assert!((b as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn circle_sampler_inverts_cdf() {
        let g = Gamma::phi_sl2z();
        let opts = ClassifyOptions { quadrature: QuadratureSpec::default().with_samples(1), grid: 32, ..Default::default() };
        let plane = LatticeBasis::new(make_a(2, 0.4).mat().columns(0, 2).into_owned()).unwrap();
        let line = LatticeBasis::new(crate::geometry::star(&make_a(2, 0.4)).mat().columns(2, 1).into_owned()).unwrap();
        let p = OrthoPair::new(&plane, &line).unwrap();
        let law = classify_start(&p, &g, &opts).unwrap();
        let s = sample_predicted(&law, 100_000, 4).unwrap();
        let cs = CircleSampler::new(law.profile()).unwrap();
        let mut u: Vec<f64> = s.iter().map(|x| cs.cdf(x.theta.unwrap())).collect();
        u.sort_by(f64::total_cmp);
        let ks = u.iter().enumerate().map(|(i, x)| (x - i as f64 / u.len() as f64).abs()).fold(0.0, f64::max);
        assert!(ks < 0.01, "{ks}");
        let again = sample_predicted(&law, 100_000, 4).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn special_samples_lie_on_curve() {
        let g = Gamma::phi_sl2z();
        let opts = ClassifyOptions { quadrature: QuadratureSpec::default().with_samples(1), grid: 16, ..Default::default() };
        let perp = LatticeBasis::new(Mat::from_row_slice(3, 1, &[1.0, 0.0, -1.0])).unwrap();
        let p = OrthoPair::new(&special_lattice(1.0), &perp).unwrap();
        let law = classify_start(&p, &g, &opts).unwrap();
        let LawCase::SpecialExtension { packet, theta0, .. } = &law.case else { panic!() };
        for s in sample_predicted(&law, 500, 1).unwrap() {
            let th = s.theta.unwrap();
            let c = m_extension_curve(packet, *theta0, th - theta0).unwrap().remove(s.packet_index.unwrap());
            let f = x2_point(&c, &plane_frame(th)).unwrap();
            let got = s.fiber.unwrap();
            assert!((f.x - got.x).abs() < 1e-8 && (f.y - got.y).abs() < 1e-8 * f.y.max(1.0));
        }
    }
}
