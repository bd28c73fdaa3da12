//! Exact enumeration of norm balls Γ_T in arithmetic groups, the integer
//! points of 2xz − y² = 1, and growth-rate tables.

use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::geometry::{gram, phi_exact, ExactMatrix, GroupElement, Mat};
use crate::norm::NormSpec;

/// Guard on coordinate bounds so that all arithmetic stays inside i64/i128.
const MAX_ENTRY_BOUND: i64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaKind {
    /// Φ(SL(2,Z)) ⊂ SO(2,1)°.
    PhiSl2z,
    /// SO(Q)° ∩ SL(n+1,Z) where Q is a positive multiple of diag(1,…,1,−1).
    IntegerOrthogonal { form: Vec<Vec<i64>> },
    /// SO(Q)° ∩ SL(n+1,Z) acting through g = M γ M⁻¹, where MᵀJM = c·Q, c ≠ 0.
    ConjugatedIntegerOrthogonal { form: Vec<Vec<i64>>, conjugator: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSpec {
    #[serde(flatten)]
    pub kind: GammaKind,
    /// Integer generators in the coordinates of the defining form.
    #[serde(default)]
    pub generators: Option<Vec<ExactMatrix>>,
}

/// Validated group data used by the enumerators.
#[derive(Clone, Debug)]
pub struct Gamma {
    pub spec: GammaSpec,
    n: usize,
    form: Vec<Vec<i64>>,
    conj: Option<(Mat, Mat)>,
    /// integer vector w whose Q-value has the sign occurring once in the
    /// signature, orienting the time direction
    timelike: Vec<i64>,
    time_sign: i128,
}

fn form_matrix(form: &[Vec<i64>]) -> Result<Vec<Vec<i64>>> {
    let d = form.len();
    if d < 3 || form.iter().any(|r| r.len() != d) {
        return Err(LabError::Dimension("form must be square of size >= 3".into()));
    }
    for i in 0..d {
        for j in 0..d {
            if form[i][j] != form[j][i] {
                return invalid("form must be symmetric");
            }
        }
    }
    Ok(form.to_vec())
}

fn qeval(form: &[Vec<i64>], u: &[i64], v: &[i64]) -> i128 {
    let d = form.len();
    let mut acc = 0i128;
    for i in 0..d {
        if u[i] == 0 {
            continue;
        }
        for j in 0..d {
            acc += u[i] as i128 * form[i][j] as i128 * v[j] as i128;
        }
    }
    acc
}

fn find_timelike(form: &[Vec<i64>], sign: i128) -> Option<Vec<i64>> {
    let d = form.len();
    let mut best: Option<Vec<i64>> = None;
    let mut v = vec![-2i64; d];
    loop {
        if sign * qeval(form, &v, &v) > 0 {
            let cand = v.clone();
            let key = |w: &Vec<i64>| w.iter().map(|x| x.abs()).sum::<i64>();
            if best.as_ref().map_or(true, |b| key(&cand) < key(b)) {
                best = Some(cand);
            }
        }
        let mut i = 0;
        loop {
            if i == d {
                return best;
            }
            v[i] += 1;
            if v[i] <= 2 {
                break;
            }
            v[i] = -2;
            i += 1;
        }
    }
}

impl Gamma {
    pub fn new(spec: GammaSpec) -> Result<Self> {
        let (n, form, conj, time_sign) = match &spec.kind {
            GammaKind::PhiSl2z => {
                let f = (0..3).map(|i| (0..3).map(|j| gram(2)[(i, j)] as i64).collect()).collect();
                (2, f, None, -1)
            }
            GammaKind::IntegerOrthogonal { form } => {
                let f = form_matrix(form)?;
                let d = f.len();
                let c = f[0][0];
                let ok = c > 0
                    && (0..d).all(|i| {
                        (0..d).all(|j| {
                            let want = if i != j { 0 } else if i == d - 1 { -c } else { c };
                            f[i][j] == want
                        })
                    });
                if !ok {
                    return invalid(
                        "integer-orthogonal form must be a positive multiple of diag(1,..,1,-1); \
                         use the conjugated kind for other forms",
                    );
                }
                (d - 1, f, None, -1)
            }
            GammaKind::ConjugatedIntegerOrthogonal { form, conjugator } => {
                let f = form_matrix(form)?;
                let d = f.len();
                if conjugator.len() != d || conjugator.iter().any(|r| r.len() != d) {
                    return Err(LabError::Dimension("conjugator must match the form".into()));
                }
                let m = Mat::from_fn(d, d, |i, j| conjugator[i][j]);
                let mi = m
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| LabError::Invalid("conjugator is singular".into()))?;
                let pulled = m.transpose() * gram(d - 1) * &m;
                let qf = Mat::from_fn(d, d, |i, j| f[i][j] as f64);
                let (mut num, mut den) = (0.0, 0.0);
                for (a, b) in pulled.iter().zip(qf.iter()) {
                    num += a * b;
                    den += b * b;
                }
                let c = num / den;
                if !(c.abs() > 1e-12) || (pulled - &qf * c).abs().max() > 1e-9 * c.abs().max(1.0) {
                    return invalid("conjugator does not carry the form to a multiple of q");
                }
                (d - 1, f, Some((m, mi)), if c > 0.0 { -1 } else { 1 })
            }
        };
        let timelike = find_timelike(&form, time_sign)
            .ok_or_else(|| LabError::Invalid("form has no small timelike vector".into()))?;
        let g = Gamma { spec, n, form, conj, timelike, time_sign };
        if let Some(gens) = &g.spec.generators {
            for x in gens {
                if !g.contains_exact(x) {
                    return invalid("generator does not lie in the group");
                }
            }
        }
        Ok(g)
    }

    pub fn phi_sl2z() -> Self {
        Gamma::new(GammaSpec { kind: GammaKind::PhiSl2z, generators: None }).expect("valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn form(&self) -> &[Vec<i64>] {
        &self.form
    }

    pub fn conjugator(&self) -> Option<&Mat> {
        self.conj.as_ref().map(|(m, _)| m)
    }

    /// Exact membership in SO(Q)° (and, for Φ(SL(2,Z)), in the image of Φ).
    pub fn contains_exact(&self, x: &ExactMatrix) -> bool {
        let d = self.n + 1;
        if x.dim() != d {
            return false;
        }
        match self.spec.kind {
            GammaKind::PhiSl2z => {
                if x.den() != 2 || !x.preserves_gram() || x.det_num() <= 0 || x.get(2, 2) < 2 {
                    return false;
                }
                match crate::geometry::phi_inverse(&GroupElement::from_parts_unchecked(x.to_mat(), None)) {
                    Ok(s) => {
                        let e = s.entries();
                        let r: Vec<f64> = e.iter().map(|v| v.round()).collect();
                        if e.iter().zip(&r).any(|(a, b)| (a - b).abs() > 1e-6) {
                            return false;
                        }
                        phi_exact(r[0] as i64, r[1] as i64, r[2] as i64, r[3] as i64)
                            .map(|p| &p == x)
                            .unwrap_or(false)
                    }
                    Err(_) => false,
                }
            }
            _ => {
                if x.den() != 1 {
                    return false;
                }
                let cols: Vec<Vec<i64>> = (0..d).map(|j| (0..d).map(|i| x.get(i, j)).collect()).collect();
                for i in 0..d {
                    for j in i..d {
                        if qeval(&self.form, &cols[i], &cols[j]) != self.form[i][j] as i128 {
                            return false;
                        }
                    }
                }
                x.det_num() == 1 && self.preserves_orientation(x)
            }
        }
    }

    /// γ keeps the chosen timelike vector in its half of the cone.
    fn preserves_orientation(&self, x: &ExactMatrix) -> bool {
        let d = self.n + 1;
        let w = &self.timelike;
        let gw: Vec<i64> = (0..d).map(|i| (0..d).map(|j| x.get(i, j) * w[j]).sum()).collect();
        self.time_sign * qeval(&self.form, &gw, w) > 0
    }

    /// The element of SO(n,1)° represented by an exact group member.
    pub fn acting(&self, x: &ExactMatrix) -> Result<GroupElement> {
        match &self.conj {
            None => GroupElement::from_exact(x.clone()),
            Some((m, mi)) => GroupElement::new(m * x.to_mat() * mi),
        }
    }

    /// Bound B with ‖X‖_F ≤ B for every exact representative X whose acting
    /// element has norm ≤ T.
    fn frobenius_budget(&self, norm: &NormSpec, t: f64) -> Result<f64> {
        let f = norm.frobenius_factor(self.n + 1)? * t;
        Ok(match &self.conj {
            None => f,
            Some((m, mi)) => {
                let s1 = m.clone().svd(false, false).singular_values.max();
                let s2 = mi.clone().svd(false, false).singular_values.max();
                f * s1 * s2 * (1.0 + 1e-12)
            }
        })
    }

    fn norm_of(&self, norm: &NormSpec, x: &ExactMatrix) -> Result<f64> {
        Ok(norm.eval(self.acting(x)?.mat()))
    }

    fn within(&self, norm: &NormSpec, x: &ExactMatrix, t: f64) -> Result<bool> {
        // an orthogonal conjugator leaves the Frobenius norm unchanged
        let exact = match &self.conj {
            None => true,
            Some((m, _)) => {
                matches!(norm, NormSpec::Frobenius)
                    && (m.transpose() * m - Mat::identity(m.nrows(), m.nrows())).abs().max() < 1e-12
            }
        };
        if exact {
            return Ok(norm.exact_within(x, t));
        }
        Ok(self.norm_of(norm, x)? <= t * (1.0 + 1e-12))
    }

    /// Default generators: S, T, T⁻¹ through Φ, or the nontrivial elements of
    /// a small ball for the other kinds.
    pub fn generators(&self, norm: &NormSpec) -> Result<Vec<ExactMatrix>> {
        if let Some(g) = &self.spec.generators {
            let mut all: BTreeSet<ExactMatrix> = g.iter().cloned().collect();
            for x in g {
                all.insert(exact_inverse(&self.form, x)?);
            }
            return Ok(all.into_iter().collect());
        }
        match self.spec.kind {
            GammaKind::PhiSl2z => Ok(vec![phi_exact(0, -1, 1, 0)?, phi_exact(1, 1, 0, 1)?, phi_exact(1, -1, 0, 1)?]),
            _ => {
                let id = self.norm_of(norm, &ExactMatrix::identity(self.n + 1, 1))?;
                let ball = enumerate_int_orth(self, norm, id * 4.0, 1 << 16)?;
                Ok(ball.exact.into_iter().filter(|x| *x != ExactMatrix::identity(self.n + 1, 1)).collect())
            }
        }
    }
}

/// γ⁻¹ = Q⁻¹γᵀQ for an exact element of SO(Q); computed via the adjugate
/// identity γ⁻¹ = (Q γᵀ Q)/c² when Q = c·J, or by solving exactly otherwise.
fn exact_inverse(form: &[Vec<i64>], x: &ExactMatrix) -> Result<ExactMatrix> {
    let d = x.dim();
    // γᵀQγ = Q ⇒ γ⁻¹ = Q⁻¹γᵀQ; Q⁻¹ is rational, so clear denominators via det Q
    let qm = Mat::from_fn(d, d, |i, j| form[i][j] as f64);
    let qi = qm.clone().try_inverse().ok_or_else(|| LabError::Invalid("singular form".into()))?;
    let inv = &qi * x.to_mat().transpose() * &qm;
    let den = x.den();
    let num: Vec<i64> = (0..d * d).map(|k| (inv[(k / d, k % d)] * den as f64).round() as i64).collect();
    let cand = ExactMatrix::new(d, den, num)?;
    match x.mul(&cand) {
        Some(p) if p == ExactMatrix::identity(d, den) => Ok(cand),
        _ => invalid("generator has no exact inverse with the same denominator"),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BallEnumeration {
    #[serde(rename = "T")]
    pub t: f64,
    pub count: usize,
    /// Sorted lexicographically by (denominator, numerators).
    pub exact: Vec<ExactMatrix>,
}

impl BallEnumeration {
    fn from_set(t: f64, set: impl IntoIterator<Item = ExactMatrix>) -> Self {
        let mut exact: Vec<ExactMatrix> = set.into_iter().collect();
        exact.sort();
        exact.dedup();
        BallEnumeration { t, count: exact.len(), exact }
    }

    pub fn elements(&self, gamma: &Gamma) -> Result<Vec<GroupElement>> {
        self.exact.iter().map(|x| gamma.acting(x)).collect()
    }

    /// JSON body {T, count, den, elements: [[row-major numerators]]}.
    pub fn to_json(&self) -> serde_json::Value {
        let den = self.exact.first().map(|x| x.den()).unwrap_or(1);
        serde_json::json!({
            "T": self.t,
            "count": self.count,
            "den": den,
            "elements": self.exact.iter().map(|x| x.numerators().to_vec()).collect::<Vec<_>>(),
        })
    }
}

/// Γ_T for Φ(SL(2,Z)) by direct search over integer quadruples.
///
/// ‖Φ(g)‖_F² = ‖g‖_F⁴ − 1, so ‖Φ(g)‖_F ≤ F·T with F the norm's Frobenius
/// factor forces a² + b² + c² + d² ≤ √(F²T² + 1).
pub fn enumerate_ball_direct(gamma: &Gamma, norm: &NormSpec, t: f64) -> Result<BallEnumeration> {
    if gamma.spec.kind != GammaKind::PhiSl2z {
        return invalid("direct enumeration is implemented for Φ(SL(2,Z))");
    }
    if !(t.is_finite()) {
        return invalid("T must be finite");
    }
    let f = norm.frobenius_factor(3)? * t.max(0.0);
    let r2 = ((f * f + 1.0).sqrt() * (1.0 + 1e-12)).floor();
    let bound = r2.sqrt().floor();
    if bound > MAX_ENTRY_BOUND as f64 {
        return Err(LabError::Cap(format!("entry bound {bound} too large")));
    }
    let (bound, r2) = (bound as i64, r2 as i64);
    let found: Vec<ExactMatrix> = (-bound..=bound)
        .into_par_iter()
        .flat_map_iter(|a| {
            let mut out = Vec::new();
            for b in -bound..=bound {
                for c in -bound..=bound {
                    let rest = r2 - a * a - b * b - c * c;
                    if rest < 0 {
                        continue;
                    }
                    let mut push = |d: i64| {
                        // one representative of ±g: first nonzero entry positive
                        let lead = [a, b, c, d].into_iter().find(|&v| v != 0).unwrap_or(0);
                        if lead > 0 {
                            if let Ok(x) = phi_exact(a, b, c, d) {
                                if norm.exact_within(&x, t) {
                                    out.push(x);
                                }
                            }
                        }
                    };
                    if a != 0 {
                        if (1 + b * c) % a == 0 {
                            let d = (1 + b * c) / a;
                            if d * d <= rest {
                                push(d);
                            }
                        }
                    } else if b * c == -1 {
                        let dm = (rest as f64).sqrt().floor() as i64;
                        for d in -dm..=dm {
                            push(d);
                        }
                    }
                }
            }
            out
        })
        .collect();
    Ok(BallEnumeration::from_set(t, found))
}

/// Γ_T by breadth-first closure over the generators, exploring products with
/// norm ≤ κT.
pub fn enumerate_ball_bfs(
    gamma: &Gamma,
    generators: &[ExactMatrix],
    norm: &NormSpec,
    t: f64,
    margin: f64,
    cap: usize,
) -> Result<BallEnumeration> {
    if generators.is_empty() {
        return invalid("generator list is empty");
    }
    if !(margin >= 1.0) {
        return invalid("margin must be >= 1");
    }
    let d = gamma.n() + 1;
    let den = generators[0].den();
    let id = ExactMatrix::identity(d, den);
    let mut seen: HashSet<ExactMatrix> = HashSet::new();
    let mut frontier = Vec::new();
    if gamma.within(norm, &id, margin * t)? {
        seen.insert(id.clone());
        frontier.push(id);
    }
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for x in &frontier {
            for g in generators {
                let y = x
                    .mul(g)
                    .ok_or_else(|| LabError::Invalid("generator product left the lattice".into()))?;
                if seen.contains(&y) || !gamma.within(norm, &y, margin * t)? {
                    continue;
                }
                seen.insert(y.clone());
                next.push(y);
                if seen.len() > cap {
                    return Err(LabError::Cap(format!("more than {cap} elements within κT")));
                }
            }
        }
        frontier = next;
    }
    let mut keep = Vec::new();
    for x in seen {
        if gamma.within(norm, &x, t)? {
            keep.push(x);
        }
    }
    Ok(BallEnumeration::from_set(t, keep))
}

/// Integer vectors c with cᵀQc = target and |c|² ≤ budget.
fn vectors_with_value(form: &[Vec<i64>], target: i64, budget: i64) -> Vec<Vec<i64>> {
    let d = form.len();
    let last = d - 1;
    let bound = (budget as f64).sqrt().floor() as i64;
    let q_nn = form[last][last] as i128;
    (-bound..=bound)
        .into_par_iter()
        .flat_map_iter(|x0| {
            let mut out = Vec::new();
            let mut v = vec![0i64; d];
            v[0] = x0;
            rec_fill(form, &mut v, 1, x0 * x0, budget, target, q_nn, &mut out);
            out
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn rec_fill(
    form: &[Vec<i64>],
    v: &mut Vec<i64>,
    i: usize,
    used: i64,
    budget: i64,
    target: i64,
    q_nn: i128,
    out: &mut Vec<Vec<i64>>,
) {
    let d = v.len();
    let last = d - 1;
    if i == last {
        // Q(v) = q_nn·z² + 2·lin·z + rest with z the last coordinate
        v[last] = 0;
        let rest = qeval(form, v, v);
        let lin: i128 = (0..last).map(|k| form[k][last] as i128 * v[k] as i128).sum();
        let room = budget - used;
        let zmax = (room as f64).sqrt().floor() as i64;
        let t = target as i128 - rest;
        let mut accept = |z: i64| {
            if z.abs() <= zmax && z * z <= room {
                v[last] = z;
                out.push(v.clone());
            }
        };
        if q_nn != 0 {
            // q_nn z² + 2 lin z − t = 0
            let disc = lin * lin + q_nn * t;
            if disc < 0 {
                return;
            }
            let s = isqrt(disc);
            if s * s != disc {
                return;
            }
            for num in [-lin + s, -lin - s] {
                if num % q_nn == 0 {
                    accept((num / q_nn) as i64);
                }
                if s == 0 {
                    break;
                }
            }
        } else if lin != 0 {
            if t % (2 * lin) == 0 {
                accept((t / (2 * lin)) as i64);
            }
        } else if t == 0 {
            for z in -zmax..=zmax {
                accept(z);
            }
        }
        v[last] = 0;
        return;
    }
    let room = budget - used;
    let m = (room as f64).sqrt().floor() as i64;
    for x in -m..=m {
        if x * x > room {
            continue;
        }
        v[i] = x;
        rec_fill(form, v, i + 1, used + x * x, budget, target, q_nn, out);
    }
    v[i] = 0;
}

fn isqrt(n: i128) -> i128 {
    if n < 2 {
        return n;
    }
    let mut x = (n as f64).sqrt() as i128;
    while x * x > n {
        x -= 1;
    }
    while (x + 1) * (x + 1) <= n {
        x += 1;
    }
    x
}

/// Γ_T for SO(Q)° ∩ SL(n+1,Z) by column backtracking: column j runs over
/// integer vectors with Q(c) = Q_jj, subject to the bilinear constraints with
/// earlier columns and a shared Frobenius budget.
pub fn enumerate_int_orth(gamma: &Gamma, norm: &NormSpec, t: f64, cap: usize) -> Result<BallEnumeration> {
    if gamma.spec.kind == GammaKind::PhiSl2z {
        return invalid("column backtracking needs an integer-orthogonal kind");
    }
    let d = gamma.n() + 1;
    let b = gamma.frobenius_budget(norm, t.max(0.0))?;
    if b > MAX_ENTRY_BOUND as f64 {
        return Err(LabError::Cap(format!("Frobenius budget {b} too large")));
    }
    let budget = (b * b * (1.0 + 1e-12)).floor() as i64;
    let form = gamma.form();
    let mut lists: Vec<Vec<Vec<i64>>> = Vec::with_capacity(d);
    for j in 0..d {
        let mut l = vectors_with_value(form, form[j][j], budget);
        l.sort_by_key(|v| v.iter().map(|x| x * x).sum::<i64>());
        lists.push(l);
    }
    let sq = |v: &[i64]| v.iter().map(|x| x * x).sum::<i64>();
    let found: Vec<ExactMatrix> = lists[0]
        .par_iter()
        .flat_map_iter(|c0| {
            let mut out = Vec::new();
            let mut cols = vec![c0.clone()];
            dfs(gamma, norm, t, &lists, &mut cols, sq(c0), budget, &mut out);
            out
        })
        .collect();
    if found.len() > cap {
        return Err(LabError::Cap(format!("{} elements exceed the cap {cap}", found.len())));
    }
    Ok(BallEnumeration::from_set(t, found))
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    gamma: &Gamma,
    norm: &NormSpec,
    t: f64,
    lists: &[Vec<Vec<i64>>],
    cols: &mut Vec<Vec<i64>>,
    used: i64,
    budget: i64,
    out: &mut Vec<ExactMatrix>,
) {
    let d = lists.len();
    let j = cols.len();
    let form = gamma.form();
    if j == d {
        let num: Vec<i64> = (0..d * d).map(|k| cols[k % d][k / d]).collect();
        if let Ok(x) = ExactMatrix::new(d, 1, num) {
            if x.det_num() == 1 && gamma.preserves_orientation(&x) && gamma.within(norm, &x, t).unwrap_or(false) {
                out.push(x);
            }
        }
        return;
    }
    for c in &lists[j] {
        let s: i64 = c.iter().map(|x| x * x).sum();
        if used + s > budget {
            break;
        }
        if (0..j).all(|i| qeval(form, &cols[i], c) == form[i][j] as i128) {
            cols.push(c.clone());
            dfs(gamma, norm, t, lists, cols, used + s, budget, out);
            cols.pop();
        }
    }
}

/// Γ_T using the exact enumerator suited to the kind.
pub fn enumerate_ball(gamma: &Gamma, norm: &NormSpec, t: f64, cap: usize) -> Result<BallEnumeration> {
    match gamma.spec.kind {
        GammaKind::PhiSl2z => enumerate_ball_direct(gamma, norm, t),
        _ => enumerate_int_orth(gamma, norm, t, cap),
    }
}

/// Integer points of 2xz − y² = 1 with Euclidean norm ≤ T.
pub fn enumerate_hz(t: f64) -> Vec<[i64; 3]> {
    let m = t.max(0.0).floor() as i64;
    let t2 = t * t;
    let mut out = Vec::new();
    for y in -m..=m {
        let p = y * y + 1;
        if p % 2 != 0 {
            continue;
        }
        let xz = p / 2;
        for x in 1..=xz.min(m) {
            if xz % x != 0 {
                continue;
            }
            let z = xz / x;
            for s in [1, -1] {
                let v = [s * x, y, s * z];
                if ((x * x + y * y + z * z) as f64) <= t2 {
                    out.push(v);
                }
            }
        }
    }
    out.sort();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow {
    #[serde(rename = "T")]
    pub t: f64,
    pub count: usize,
    pub per_power: f64,
    pub per_volume: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub rows: Vec<GrowthRow>,
    /// Least-squares slope of log count against log T.
    pub exponent: f64,
    /// (max − min)/mean of `per_volume` over the top three rungs.
    pub top_variation: f64,
}

/// Rows (T, #Γ_T, #Γ_T/T^{n−1}, #Γ_T/Vol(G_T)) over a ladder.
pub fn growth_report(n: usize, ladder: &[(f64, usize)], volumes: &[f64]) -> Result<GrowthReport> {
    if ladder.len() < 3 {
        return invalid("ladder needs at least three rungs");
    }
    if volumes.len() != ladder.len() {
        return Err(LabError::Dimension("one volume per rung".into()));
    }
    let rows: Vec<GrowthRow> = ladder
        .iter()
        .zip(volumes)
        .map(|(&(t, count), &v)| GrowthRow {
            t,
            count,
            per_power: count as f64 / t.powi(n as i32 - 1),
            per_volume: count as f64 / v,
        })
        .collect();
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.count > 0)
        .map(|r| (r.t.ln(), (r.count as f64).ln()))
        .collect();
    let k = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / k, pts.iter().map(|p| p.1).sum::<f64>() / k);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let top: Vec<f64> = rows[rows.len() - 3..].iter().map(|r| r.per_volume).collect();
    let mean = top.iter().sum::<f64>() / 3.0;
    let spread = top.iter().cloned().fold(f64::MIN, f64::max) - top.iter().cloned().fold(f64::MAX, f64::min);
    Ok(GrowthReport { rows, exponent: sxy / sxx, top_variation: spread / mean })
}
