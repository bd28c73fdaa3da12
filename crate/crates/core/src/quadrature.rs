//! Haar integration on K, K_{P^∞}, H_{i,j} and U; limiting densities on
//! K/K_{P^∞}; norm-ball volumes and their T^{n−1} asymptotics.

use std::f64::consts::PI;
use std::sync::OnceLock;

use gauss_quad::legendre::GaussLegendre;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::geometry::{make_a_block, make_a_infty, make_k_theta, make_u, GroupElement, InfSign, Mat};
use crate::norm::{BaseNorm, NormSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Number of Monte Carlo draws of the compact factors.
    pub mc_samples: usize,
    /// Truncation of the Cartan coordinate t on H_{i,j}.
    pub t_max: f64,
    /// Truncation radius of x on U.
    pub x_max: f64,
    pub seed: u64,
    /// Trapezoid points on circles (K for n = 2, directions in R²).
    #[serde(default = "default_angular")]
    pub angular_points: usize,
    /// Batches for batch-means standard errors.
    #[serde(default = "default_batches")]
    pub batches: usize,
    /// Scan step when locating sublevel sets in s.
    #[serde(default = "default_step")]
    pub s_step: f64,
}

fn default_angular() -> usize {
    32
}
fn default_batches() -> usize {
    16
}
fn default_step() -> f64 {
    0.02
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            mc_samples: 200_000,
            t_max: 12.0,
            x_max: 100.0,
            seed: 0,
            angular_points: default_angular(),
            batches: default_batches(),
            s_step: default_step(),
        }
    }
}

impl QuadratureSpec {
    pub fn with_samples(mut self, mc: usize) -> Self {
        self.mc_samples = mc;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 || self.batches == 0 || self.angular_points < 2 {
            return invalid("mc_samples, batches must be positive and angular_points >= 2");
        }
        if !(self.t_max > 0.0 && self.x_max > 0.0 && self.s_step > 0.0) {
            return invalid("t_max, x_max and s_step must be positive");
        }
        Ok(())
    }
}

/// Independent random stream `stream` of the generator seeded by `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Value with batch-means standard error and an estimate of the truncated tail.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub tail_bound: f64,
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / k;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0);
    (m, (var / k).sqrt())
}

/// Runs `samples` draws split into batches with independent streams and
/// returns the per-batch means of the vector-valued `draw`, in batch order.
fn batch_means<F>(seed: u64, samples: usize, batches: usize, len: usize, draw: F) -> Vec<Vec<f64>>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    let b = batches.min(samples).max(1);
    (0..b)
        .into_par_iter()
        .map(|bi| {
            let count = samples / b + usize::from(bi < samples % b);
            let mut rng = rng_stream(seed, bi as u64);
            let mut acc = vec![0.0; len];
            for _ in 0..count {
                draw(&mut rng, &mut acc);
            }
            acc.iter_mut().for_each(|x| *x /= count as f64);
            acc
        })
        .collect()
}

/// Haar-random element of SO(m): QR of a Gaussian matrix with R's diagonal
/// made positive, then a column flip if the determinant is −1.
pub fn haar_sample_so<R: Rng>(m: usize, rng: &mut R) -> Mat {
    let mut q = haar_sample_o(m, rng);
    if m > 0 && q.determinant() < 0.0 {
        let c = -q.column(0);
        q.set_column(0, &c);
    }
    q
}

/// Haar-random element of O(m).
pub fn haar_sample_o<R: Rng>(m: usize, rng: &mut R) -> Mat {
    if m == 0 {
        return Mat::identity(0, 0);
    }
    let g = Mat::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            let c = -q.column(j);
            q.set_column(j, &c);
        }
    }
    q
}

/// Haar-random element of K = diag(SO(n), 1).
pub fn sample_k<R: Rng>(n: usize, rng: &mut R) -> Mat {
    embed_block(&haar_sample_so(n, rng), n + 1)
}

fn embed_block(r: &Mat, d: usize) -> Mat {
    let mut m = Mat::identity(d, d);
    m.view_mut((0, 0), (r.nrows(), r.ncols())).copy_from(r);
    m
}

/// Haar-random element of K_{P^∞} = {diag(1, A, B, 1) : A ∈ O(r−1), B ∈ O(n−r), det A·det B = 1}.
pub fn sample_k_pinfty<R: Rng>(n: usize, r: usize, rng: &mut R) -> Mat {
    let mut a = haar_sample_o(r - 1, rng);
    let mut b = haar_sample_o(n - r, rng);
    let sign = (if r > 1 { a.determinant() } else { 1.0 }) * (if n > r { b.determinant() } else { 1.0 });
    if sign < 0.0 {
        if n > r {
            let c = -b.column(0);
            b.set_column(0, &c);
        } else {
            let c = -a.column(0);
            a.set_column(0, &c);
        }
    }
    let mut k = Mat::identity(n + 1, n + 1);
    k.view_mut((1, 1), (r - 1, r - 1)).copy_from(&a);
    k.view_mut((r, r), (n - r, n - r)).copy_from(&b);
    k
}

fn gl16() -> &'static [(f64, f64)] {
    static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    NODES.get_or_init(|| {
        let rule = GaussLegendre::new(16.try_into().expect("nonzero"));
        rule.as_node_weight_pairs().to_vec()
    })
}

/// Gauss–Legendre nodes on [a, b] split into panels of width at most `width`.
fn panel_nodes(a: f64, b: f64, width: f64) -> Vec<(f64, f64)> {
    if !(b > a) {
        return Vec::new();
    }
    let k = ((b - a) / width).ceil().max(1.0) as usize;
    let h = (b - a) / k as f64;
    let mut out = Vec::with_capacity(16 * k);
    for p in 0..k {
        let (lo, hi) = (a + p as f64 * h, a + (p + 1) as f64 * h);
        for &(x, w) in gl16() {
            out.push((0.5 * (hi - lo) * x + 0.5 * (hi + lo), 0.5 * (hi - lo) * w));
        }
    }
    out
}

/// Nodes for the Cartan coordinate of H_{i,j} with the weight sinh(t)^{j−1}
/// folded in: j = 0 has no t, j = 1 integrates over [−t_max, t_max], j ≥ 2
/// over [0, t_max].
pub fn t_nodes(j: usize, t_max: f64) -> Vec<(f64, f64)> {
    match j {
        0 => vec![(0.0, 1.0)],
        1 => panel_nodes(-t_max, t_max, 1.0),
        _ => panel_nodes(0.0, t_max, 1.0)
            .into_iter()
            .map(|(t, w)| (t, w * t.sinh().powi(j as i32 - 1)))
            .collect(),
    }
}

/// Radial nodes on [0, x_max] with geometric panels [0,1], [1,2], [2,4], …
/// and the weight r^{dim−1} folded in.
pub fn radial_nodes(x_max: f64, dim: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let (mut lo, mut hi) = (0.0, 1.0f64.min(x_max));
    while lo < x_max {
        for (r, w) in panel_nodes(lo, hi, hi - lo) {
            out.push((r, w * r.powi(dim as i32 - 1)));
        }
        lo = hi;
        hi = (2.0 * hi).min(x_max);
    }
    out
}

/// Area of the unit sphere S^{dim−1} ⊂ R^dim.
pub fn sphere_area(dim: usize) -> f64 {
    match dim {
        0 => 0.0,
        1 => 2.0,
        2 => 2.0 * PI,
        _ => 2.0 * PI / (dim as f64 - 2.0) * sphere_area(dim - 2),
    }
}

/// Directions with weights summing to the sphere area: ±1 for dim 1, a
/// trapezoid circle for dim 2, random directions otherwise.
fn directions<R: Rng>(dim: usize, points: usize, rng: &mut R) -> Vec<(Vec<f64>, f64)> {
    match dim {
        1 => vec![(vec![1.0], 1.0), (vec![-1.0], 1.0)],
        2 => (0..points)
            .map(|l| {
                let a = 2.0 * PI * l as f64 / points as f64;
                (vec![a.cos(), a.sin()], 2.0 * PI / points as f64)
            })
            .collect(),
        _ => {
            let w = sphere_area(dim) / points as f64;
            (0..points)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    (v.iter().map(|x| x / nv).collect(), w)
                })
                .collect()
        }
    }
}

/// Compact factors of the Cartan form h = diag(c, c₁ a_j(t) c₂).
#[derive(Clone, Debug)]
pub struct HFactors {
    pub c: Mat,
    pub c1: Mat,
    pub c2: Mat,
}

impl HFactors {
    pub fn sample<R: Rng>(i: usize, j: usize, rng: &mut R) -> Self {
        let (c1, c2) = if j >= 1 {
            (haar_sample_so(j, rng), haar_sample_so(j, rng))
        } else {
            (Mat::identity(0, 0), Mat::identity(0, 0))
        };
        HFactors { c: haar_sample_so(i + 1, rng), c1, c2 }
    }

    pub fn identity(i: usize, j: usize) -> Self {
        HFactors { c: Mat::identity(i + 1, i + 1), c1: Mat::identity(j, j), c2: Mat::identity(j, j) }
    }

    /// The element of H_{i,j} with these factors and coordinate t.
    pub fn h(&self, t: f64) -> Mat {
        let p = self.c.nrows();
        let j = self.c1.nrows();
        let mut out = Mat::identity(p + j + 1, p + j + 1);
        out.view_mut((0, 0), (p, p)).copy_from(&self.c);
        if j > 0 {
            let second = embed_block(&self.c1, j + 1) * make_a_block(j, t) * embed_block(&self.c2, j + 1);
            out.view_mut((p, p), (j + 1, j + 1)).copy_from(&second);
        }
        out
    }
}

fn compact_trivial_h(i: usize, j: usize) -> bool {
    i == 0 && j <= 1
}

/// ∫_H f dh in Cartan coordinates: probability Haar on the compact factors
/// (Monte Carlo) and sinh(t)^{j−1} dt (Gauss–Legendre). The integrand must
/// decay like ‖h‖^{−α} with α > i + j − 1.
pub fn h_cartan_quadrature<F>(i: usize, j: usize, integrand: F, alpha: f64, spec: &QuadratureSpec) -> Result<Estimate>
where
    F: Fn(&Mat) -> f64 + Sync,
{
    spec.validate()?;
    if j >= 1 && alpha <= (i + j) as f64 - 1.0 {
        return invalid(format!("decay exponent {alpha} does not exceed n - 2 = {}", i + j - 1));
    }
    let nodes = t_nodes(j, spec.t_max);
    let samples = if compact_trivial_h(i, j) { 1 } else { spec.mc_samples };
    let tail = std::sync::Mutex::new(0.0f64);
    let per = batch_means(spec.seed, samples, spec.batches, 1, |rng, acc| {
        let f = HFactors::sample(i, j, rng);
        let mut s = 0.0;
        for &(t, w) in &nodes {
            s += w * integrand(&f.h(t));
        }
        acc[0] += s;
        if j >= 1 {
            let edge = integrand(&f.h(spec.t_max)) * (alpha * spec.t_max).exp();
            let mut tl = tail.lock().expect("tail lock");
            *tl = tl.max(edge);
        }
    });
    let (value, se) = mean_and_se(&per.iter().map(|v| v[0]).collect::<Vec<_>>());
    let c = *tail.lock().expect("tail lock");
    let jm = j as f64 - 1.0;
    let tail_bound = if j == 0 {
        0.0
    } else {
        let sides = if j == 1 { 2.0 } else { 1.0 };
        sides * c * ((jm - alpha) * spec.t_max).exp() / (2f64.powf(jm) * (alpha - jm))
    };
    Ok(Estimate { value, std_error: se, tail_bound })
}

/// ∫_{R^{n−1}} f(u(x)) dx over |x| ≤ x_max; the integrand must decay like
/// ‖u(x)‖^{−α} with α > (n−1)/2.
pub fn u_quadrature<F>(n: usize, integrand: F, alpha: f64, spec: &QuadratureSpec) -> Result<Estimate>
where
    F: Fn(&Mat) -> f64 + Sync,
{
    spec.validate()?;
    if n < 2 {
        return Err(LabError::Dimension("n >= 2".into()));
    }
    let dim = n - 1;
    if alpha <= dim as f64 / 2.0 {
        return invalid(format!("decay exponent {alpha} does not exceed (n-1)/2"));
    }
    let radial = radial_nodes(spec.x_max, dim);
    let samples = if dim <= 2 { 1 } else { spec.mc_samples };
    let edge = std::sync::Mutex::new(0.0f64);
    let per = batch_means(spec.seed, samples, spec.batches, 1, |rng, acc| {
        let dirs = directions(dim, spec.angular_points, rng);
        let mut s = 0.0;
        for (d, wd) in &dirs {
            for &(r, wr) in &radial {
                let x: Vec<f64> = d.iter().map(|c| c * r).collect();
                s += wd * wr * integrand(make_u(&x).mat());
            }
            let x: Vec<f64> = d.iter().map(|c| c * spec.x_max).collect();
            let e = integrand(make_u(&x).mat()) * spec.x_max.powf(2.0 * alpha);
            let mut m = edge.lock().expect("edge lock");
            *m = m.max(e);
        }
        acc[0] += s;
    });
    let (value, se) = mean_and_se(&per.iter().map(|v| v[0]).collect::<Vec<_>>());
    let c = *edge.lock().expect("edge lock");
    let excess = 2.0 * alpha - dim as f64;
    let tail_bound = sphere_area(dim) * c * spec.x_max.powf(-excess) / excess;
    Ok(Estimate { value, std_error: se, tail_bound })
}

/// The matrix s ↦ k a(s) M P written entrywise as α e^s + β e^{−s} + γ, with
/// the norm's right factor P absorbed.
#[derive(Clone, Debug)]
pub struct Pencil {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    base: BaseNorm,
}

/// {z > 0 : a z² + b z + c ≤ 0} (strict when `strict`) as intervals in s = ln z.
fn quadratic_set(a: f64, b: f64, c: f64, strict: bool) -> Vec<(f64, f64)> {
    let ninf = f64::NEG_INFINITY;
    let pinf = f64::INFINITY;
    let ln = |z: f64| if z <= 0.0 { ninf } else { z.ln() };
    let holds = |v: f64| if strict { v < 0.0 } else { v <= 0.0 };
    let mut out = Vec::new();
    if a == 0.0 {
        if b == 0.0 {
            if holds(c) {
                out.push((ninf, pinf));
            }
        } else if b > 0.0 {
            let r = -c / b;
            if r > 0.0 {
                out.push((ninf, ln(r)));
            }
        } else {
            let r = -c / b;
            out.push((ln(r.max(0.0)), pinf));
        }
        return out;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        if a < 0.0 {
            out.push((ninf, pinf));
        }
        return out;
    }
    let sgn = if b >= 0.0 { 1.0 } else { -1.0 };
    let q = -0.5 * (b + sgn * disc.sqrt());
    let (mut r1, mut r2) = (q / a, if q != 0.0 { c / q } else { 0.0 });
    if r1 > r2 {
        std::mem::swap(&mut r1, &mut r2);
    }
    if a > 0.0 {
        if r2 > 0.0 {
            out.push((ln(r1), ln(r2)));
        }
    } else {
        if r1 > 0.0 {
            out.push((ninf, ln(r1)));
        }
        out.push((ln(r2.max(0.0)), pinf));
    }
    out
}

fn complement(set: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut cur = f64::NEG_INFINITY;
    for &(a, b) in set {
        if a > cur {
            out.push((cur, a));
        }
        cur = cur.max(b);
    }
    if cur < f64::INFINITY {
        out.push((cur, f64::INFINITY));
    }
    out
}

fn intersect(x: &[(f64, f64)], y: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < x.len() && j < y.len() {
        let lo = x[i].0.max(y[j].0);
        let hi = x[i].1.min(y[j].1);
        if lo <= hi {
            out.push((lo, hi));
        }
        if x[i].1 < y[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

impl Pencil {
    pub fn new(k: &Mat, m: &Mat, post: Option<&Mat>, base: BaseNorm) -> Self {
        let d = m.nrows();
        let n = d - 1;
        let mp = match post {
            Some(p) => m * p,
            None => m.clone(),
        };
        // a(s) = cosh(s)·D + sinh(s)·F + (I − D) with D = E₀₀ + E_nn, F = E₀n + E_n0
        let mut dm = Mat::zeros(d, d);
        let mut fm = Mat::zeros(d, d);
        let mut om = mp.clone();
        for col in 0..d {
            dm[(0, col)] = mp[(0, col)];
            dm[(n, col)] = mp[(n, col)];
            fm[(0, col)] = mp[(n, col)];
            fm[(n, col)] = mp[(0, col)];
            om[(0, col)] = 0.0;
            om[(n, col)] = 0.0;
        }
        let (c, s) = (k * dm, k * fm);
        Pencil {
            alpha: c.iter().zip(s.iter()).map(|(c, s)| 0.5 * (c + s)).collect(),
            beta: c.iter().zip(s.iter()).map(|(c, s)| 0.5 * (c - s)).collect(),
            gamma: (k * om).as_slice().to_vec(),
            base,
        }
    }

    fn entries(&self, s: f64) -> impl Iterator<Item = f64> + '_ {
        let (z, zi) = (s.exp(), (-s).exp());
        self.alpha.iter().zip(&self.beta).zip(&self.gamma).map(move |((a, b), g)| a * z + b * zi + g)
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self.base {
            BaseNorm::Frobenius => self.entries(s).map(|v| v * v).sum::<f64>().sqrt(),
            BaseNorm::Max => self.entries(s).fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    /// {s ∈ [lo, hi] : max-entry ≤ t}, exactly: each entry condition is a
    /// pair of quadratic inequalities in e^s.
    fn max_sublevel(&self, t: f64, lo: f64, hi: f64) -> Vec<(f64, f64)> {
        let mut set = vec![(lo, hi)];
        for ((&a, &b), &g) in self.alpha.iter().zip(&self.beta).zip(&self.gamma) {
            // −t ≤ a z + b/z + g ≤ t  ⇔  a z² + (g − t) z + b ≤ 0  and  not(a z² + (g + t) z + b < 0)
            let upper = quadratic_set(a, g - t, b, false);
            let lower = complement(&quadratic_set(a, g + t, b, true));
            set = intersect(&intersect(&set, &upper), &lower);
            if set.is_empty() {
                break;
            }
        }
        set
    }

    /// {s ∈ [lo, hi] : eval(s) ≤ t} as closed intervals. Exact for the max
    /// norm; for the Frobenius norm the exact max-entry set is a bracket,
    /// scanned with `step` and refined by bisection.
    pub fn sublevel(&self, t: f64, lo: f64, hi: f64, step: f64) -> Vec<(f64, f64)> {
        if !(hi > lo) {
            return Vec::new();
        }
        let bracket = self.max_sublevel(t, lo, hi);
        if self.base == BaseNorm::Max {
            return bracket;
        }
        let mut out = Vec::new();
        for (a, b) in bracket {
            self.scan(t, a, b, step, &mut out);
        }
        out
    }

    fn scan(&self, t: f64, lo: f64, hi: f64, step: f64, out: &mut Vec<(f64, f64)>) {
        let k = ((hi - lo) / step).ceil().max(1.0) as usize;
        let h = (hi - lo) / k as f64;
        let g = |s: f64| self.eval(s) - t;
        let refine = |mut a: f64, mut b: f64| {
            let ga = g(a);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                if (g(m) <= 0.0) == (ga <= 0.0) {
                    a = m;
                } else {
                    b = m;
                }
                if b - a < 1e-13 * (1.0 + a.abs()) {
                    break;
                }
            }
            0.5 * (a + b)
        };
        let mut prev_s = lo;
        let mut prev_in = g(lo) <= 0.0;
        let mut start = if prev_in { Some(lo) } else { None };
        for i in 1..=k {
            let s = if i == k { hi } else { lo + i as f64 * h };
            let inside = g(s) <= 0.0;
            if inside != prev_in {
                let x = refine(prev_s, s);
                if inside {
                    start = Some(x);
                } else if let Some(a) = start.take() {
                    out.push((a, x));
                }
            }
            prev_s = s;
            prev_in = inside;
        }
        if let Some(a) = start {
            out.push((a, hi));
        }
    }
}

/// ω(s) = sinh(s)^i cosh(s)^j or e^{ks}, integrated exactly through its
/// exponential expansion.
#[derive(Clone, Debug)]
pub struct Omega {
    terms: Vec<(i32, f64)>,
}

impl Omega {
    pub fn sinh_cosh(i: usize, j: usize) -> Self {
        // (e^s − e^{−s})^i (e^s + e^{−s})^j / 2^{i+j}
        let mut poly: Vec<(i32, f64)> = vec![(0, 1.0)];
        let mul = |p: &Vec<(i32, f64)>, sign: f64| {
            let mut out: std::collections::BTreeMap<i32, f64> = Default::default();
            for &(e, c) in p {
                *out.entry(e + 1).or_default() += c * 0.5;
                *out.entry(e - 1).or_default() += sign * c * 0.5;
            }
            out.into_iter().filter(|(_, c)| *c != 0.0).collect::<Vec<_>>()
        };
        for _ in 0..i {
            poly = mul(&poly, -1.0);
        }
        for _ in 0..j {
            poly = mul(&poly, 1.0);
        }
        Omega { terms: poly }
    }

    pub fn exp(k: usize) -> Self {
        Omega { terms: vec![(k as i32, 1.0)] }
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.terms.iter().map(|&(e, c)| c * (e as f64 * s).exp()).sum()
    }

    pub fn integral(&self, a: f64, b: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(e, c)| {
                if e == 0 {
                    c * (b - a)
                } else {
                    let k = e as f64;
                    c * ((k * b).exp() - (k * a).exp()) / k
                }
            })
            .sum()
    }
}

/// The subgroup H in a KAH decomposition of G.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HKind {
    H { i: usize, j: usize },
    U,
}

impl HKind {
    fn validate(&self, n: usize) -> Result<()> {
        match *self {
            HKind::H { i, j } if i + j != n - 1 => invalid("H(i,j) needs i + j = n - 1"),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            HKind::H { i, j } => format!("H({i},{j})"),
            HKind::U => "U".into(),
        }
    }
}

fn infty(n: usize, sign: InfSign) -> Mat {
    make_a_infty(n, sign).mat
}

/// diag(−I₂, I_{n−1}), the second sheet in the KAH_{0,n−1} decomposition.
fn sheet_flip(n: usize) -> Mat {
    let mut m = Mat::identity(n + 1, n + 1);
    m[(0, 0)] = -1.0;
    m[(1, 1)] = -1.0;
    m
}

fn k_grid_circle(points: usize) -> Vec<(Mat, f64)> {
    (0..points)
        .map(|l| {
            let th = 2.0 * PI * l as f64 / points as f64;
            (make_k_theta(th).mat().clone(), 1.0 / points as f64)
        })
        .collect()
}

/// Points of K used for the outer K-integral of one Monte Carlo draw: the
/// trapezoid circle for n = 2, one Haar draw otherwise.
fn outer_k<R: Rng>(n: usize, spec: &QuadratureSpec, rng: &mut R) -> Vec<(Mat, f64)> {
    if n == 2 {
        k_grid_circle(spec.angular_points)
    } else {
        vec![(sample_k(n, rng), 1.0)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeConstant {
    pub n: usize,
    pub norm: NormSpec,
    pub formula: HKind,
    pub value: f64,
    pub std_error: f64,
    pub tail_bound: f64,
}

/// lim Vol(G_T)/T^{n−1} from the chosen KAH decomposition:
/// (1/(n−1)) ∫_K∫_U ‖k a(∞) u(x)‖^{−(n−1)} for U, and
/// (1/((n−1)2^{n−1})) ∫_K∫_H ‖k a(∞) h‖^{−(n−1)} (+ the a(−∞) term when i = 0) for H_{i,j}.
pub fn volume_constant(n: usize, norm: &NormSpec, formula: HKind, spec: &QuadratureSpec) -> Result<VolumeConstant> {
    spec.validate()?;
    formula.validate(n)?;
    let prep = norm.prepare()?;
    let alpha = (n - 1) as f64;
    let p = |m: &Mat| prep.eval(m).powf(-alpha);
    let (ap, am) = (infty(n, InfSign::Plus), infty(n, InfSign::Minus));
    let (value, se, tail) = match formula {
        HKind::U => {
            let dim = n - 1;
            let radial = radial_nodes(spec.x_max, dim);
            let samples = if n == 2 { 1 } else { spec.mc_samples };
            let per = batch_means(spec.seed, samples, spec.batches, 2, |rng, acc| {
                let ks = outer_k(n, spec, rng);
                let dirs = directions(dim, spec.angular_points, rng);
                for (k, wk) in &ks {
                    let left = k * &ap;
                    for (d, wd) in &dirs {
                        for &(r, wr) in &radial {
                            let x: Vec<f64> = d.iter().map(|c| c * r).collect();
                            acc[0] += wk * wd * wr * p(&(&left * make_u(&x).mat()));
                        }
                        let x: Vec<f64> = d.iter().map(|c| c * spec.x_max).collect();
                        let e = p(&(&left * make_u(&x).mat())) * spec.x_max.powf(2.0 * alpha);
                        acc[1] = acc[1].max(wk * wd * e);
                    }
                }
            });
            let (v, se) = mean_and_se(&per.iter().map(|b| b[0]).collect::<Vec<_>>());
            let c = per.iter().map(|b| b[1]).fold(0.0, f64::max) * (spec.batches as f64);
            let excess = 2.0 * alpha - dim as f64;
            let tail = c * spec.x_max.powf(-excess) / excess;
            let f = 1.0 / alpha;
            (f * v, f * se, f * tail)
        }
        HKind::H { i, j } => {
            let nodes = t_nodes(j, spec.t_max);
            let samples = if n == 2 && compact_trivial_h(i, j) { 1 } else { spec.mc_samples };
            let per = batch_means(spec.seed, samples, spec.batches, 1, |rng, acc| {
                let ks = outer_k(n, spec, rng);
                let f = HFactors::sample(i, j, rng);
                for (k, wk) in &ks {
                    let lp = k * &ap;
                    let lm = k * &am;
                    for &(t, w) in &nodes {
                        let h = f.h(t);
                        let mut v = p(&(&lp * &h));
                        if i == 0 {
                            v += p(&(&lm * &h));
                        }
                        acc[0] += wk * w * v;
                    }
                }
            });
            let (v, se) = mean_and_se(&per.iter().map(|b| b[0]).collect::<Vec<_>>());
            let f = 1.0 / (alpha * 2f64.powf(alpha));
            let jm = j as f64 - 1.0;
            let tail = if j == 0 { 0.0 } else { v * ((jm - alpha) * spec.t_max).exp() };
            (f * v, f * se, f * tail)
        }
    };
    Ok(VolumeConstant { n, norm: norm.clone(), formula, value, std_error: se, tail_bound: tail })
}

/// Vol(G_T) computed in the normalization of the chosen decomposition, by
/// integrating ω(s) over the exact s-sublevel sets {‖k a(s) h‖ ≤ T}.
pub fn reference_volume(n: usize, norm: &NormSpec, formula: HKind, t: f64, spec: &QuadratureSpec) -> Result<Estimate> {
    spec.validate()?;
    formula.validate(n)?;
    let prep = norm.prepare()?;
    let f = norm.frobenius_factor(n + 1)? * t;
    if f < 1.0 {
        return Ok(Estimate { value: 0.0, std_error: 0.0, tail_bound: 0.0 });
    }
    // ‖g‖ ≤ T forces cosh(s) ≤ ‖g‖_F ≤ F·T
    let s_max = f.acosh() + spec.s_step;
    let post = prep.post.as_ref();
    match formula {
        HKind::U => {
            let dim = n - 1;
            let omega = Omega::exp(n - 1);
            // e^s |x|²/2 ≤ F·T and e^{−s} ≤ 2F·T give |x| ≤ 2F·T
            let radial = radial_nodes(2.0 * f + 1.0, dim);
            let samples = if n == 2 { 1 } else { spec.mc_samples };
            let per = batch_means(spec.seed, samples, spec.batches, 1, |rng, acc| {
                let ks = outer_k(n, spec, rng);
                let dirs = directions(dim, spec.angular_points, rng);
                for (k, wk) in &ks {
                    for (d, wd) in &dirs {
                        for &(r, wr) in &radial {
                            let x: Vec<f64> = d.iter().map(|c| c * r).collect();
                            let pen = Pencil::new(k, make_u(&x).mat(), post, prep.base);
                            let s: f64 = pen
                                .sublevel(t, -s_max, s_max, spec.s_step)
                                .iter()
                                .map(|&(a, b)| omega.integral(a, b))
                                .sum();
                            acc[0] += wk * wd * wr * s;
                        }
                    }
                }
            });
            let (v, se) = mean_and_se(&per.iter().map(|b| b[0]).collect::<Vec<_>>());
            Ok(Estimate { value: v, std_error: se, tail_bound: 0.0 })
        }
        HKind::H { i, j } => {
            let omega = Omega::sinh_cosh(i, j);
            // (a(s)h)_{nn} = cosh(s) cosh(t), so cosh(t) ≤ F·T as well
            let nodes = t_nodes(j, s_max);
            let flip = sheet_flip(n);
            let samples = if n == 2 && compact_trivial_h(i, j) { 1 } else { spec.mc_samples };
            let per = batch_means(spec.seed, samples, spec.batches, 1, |rng, acc| {
                let ks = outer_k(n, spec, rng);
                let fac = HFactors::sample(i, j, rng);
                for (k, wk) in &ks {
                    for &(tc, w) in &nodes {
                        let h = fac.h(tc);
                        let mut s: f64 = Pencil::new(k, &h, post, prep.base)
                            .sublevel(t, 0.0, s_max, spec.s_step)
                            .iter()
                            .map(|&(a, b)| omega.integral(a, b))
                            .sum();
                        if i == 0 {
                            s += Pencil::new(k, &(&flip * &h), post, prep.base)
                                .sublevel(t, 0.0, s_max, spec.s_step)
                                .iter()
                                .map(|&(a, b)| omega.integral(a, b))
                                .sum::<f64>();
                        }
                        acc[0] += wk * w * s;
                    }
                }
            });
            let (v, se) = mean_and_se(&per.iter().map(|b| b[0]).collect::<Vec<_>>());
            Ok(Estimate { value: v, std_error: se, tail_bound: 0.0 })
        }
    }
}

/// Vol(G_T) = ∫_K∫_{R^{n−1}}∫_R 1{‖k a(s) u(x)‖ ≤ T} e^{(n−1)s} ds dx dk.
pub fn vol_ball_mc(n: usize, norm: &NormSpec, t: f64, spec: &QuadratureSpec) -> Result<Estimate> {
    reference_volume(n, norm, HKind::U, t, spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossFormulaRow {
    pub formula: HKind,
    pub constant: f64,
    pub reference_volume: f64,
    /// constant · Vol_U(T₀) / Vol_formula(T₀): the constant in the U normalization.
    pub normalized: f64,
}

/// Puts the volume constants of several decompositions on the common Haar
/// normalization fixed by Vol(G_{T₀}) in the KAU formula.
pub fn cross_formula_check(
    n: usize,
    norm: &NormSpec,
    formulas: &[HKind],
    t0: f64,
    spec: &QuadratureSpec,
) -> Result<Vec<CrossFormulaRow>> {
    let v_u = reference_volume(n, norm, HKind::U, t0, spec)?.value;
    formulas
        .iter()
        .map(|&f| {
            let c = volume_constant(n, norm, f, spec)?.value;
            let v = reference_volume(n, norm, f, t0, spec)?.value;
            Ok(CrossFormulaRow { formula: f, constant: c, reference_volume: v, normalized: c * v_u / v })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BtRow {
    #[serde(rename = "T")]
    pub t: f64,
    pub lhs: f64,
    pub lhs_std_error: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Compares T^{−(n−1)} ∫_H ∫_{b_T(k,h)} ω(s) ds dh, b_T = {s ≥ 0 : ‖k a(s) h‖ ≤ T},
/// with its limit (1/((n−1)2^{n−1}))∫_H ‖k a(∞)h‖^{−(n−1)} dh, or
/// (1/(n−1))∫_U ‖k a(∞)u(x)‖^{−(n−1)} dx when H = U.
pub fn bt_limit_check(
    n: usize,
    k: &GroupElement,
    kind: HKind,
    norm: &NormSpec,
    ladder: &[f64],
    spec: &QuadratureSpec,
) -> Result<Vec<BtRow>> {
    spec.validate()?;
    kind.validate(n)?;
    if k.n() != n || !crate::geometry::is_in_k(k.mat(), 1e-9) {
        return invalid("k must be an element of K");
    }
    if ladder.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("T ladder must be increasing");
    }
    let prep = norm.prepare()?;
    let post = prep.post.as_ref();
    let km = k.mat();
    let alpha = (n - 1) as f64;
    let ap = km * infty(n, InfSign::Plus);
    let factor = norm.frobenius_factor(n + 1)?;
    let rhs = match kind {
        HKind::U => {
            u_quadrature(n, |u| prep.eval(&(&ap * u)).powf(-alpha), alpha, spec)?.value / alpha
        }
        HKind::H { i, j } => {
            h_cartan_quadrature(i, j, |h| prep.eval(&(&ap * h)).powf(-alpha), alpha, spec)?.value
                / (alpha * 2f64.powf(alpha))
        }
    };
    let mut rows = Vec::with_capacity(ladder.len());
    for &t in ladder {
        let f = factor * t;
        let s_max = f.max(1.0).acosh() + spec.s_step;
        let per = match kind {
            HKind::U => {
                let dim = n - 1;
                let omega = Omega::exp(n - 1);
                // s ≥ 0 and e^s|x|²/2 ≤ F·T
                let radial = radial_nodes((2.0 * f).sqrt() + 1.0, dim);
                let samples = if dim <= 2 { 1 } else { spec.mc_samples };
                batch_means(spec.seed, samples, spec.batches, 1, |rng, acc| {
                    for (d, wd) in directions(dim, spec.angular_points, rng) {
                        for &(r, wr) in &radial {
                            let x: Vec<f64> = d.iter().map(|c| c * r).collect();
                            let s: f64 = Pencil::new(km, make_u(&x).mat(), post, prep.base)
                                .sublevel(t, 0.0, s_max, spec.s_step)
                                .iter()
                                .map(|&(a, b)| omega.integral(a, b))
                                .sum();
                            acc[0] += wd * wr * s;
                        }
                    }
                })
            }
            HKind::H { i, j } => {
                let omega = Omega::sinh_cosh(i, j);
                let nodes = t_nodes(j, s_max);
                let samples = if compact_trivial_h(i, j) { 1 } else { spec.mc_samples };
                batch_means(spec.seed, samples, spec.batches, 1, |rng, acc| {
                    let fac = HFactors::sample(i, j, rng);
                    for &(tc, w) in &nodes {
                        let s: f64 = Pencil::new(km, &fac.h(tc), post, prep.base)
                            .sublevel(t, 0.0, s_max, spec.s_step)
                            .iter()
                            .map(|&(a, b)| omega.integral(a, b))
                            .sum();
                        acc[0] += w * s;
                    }
                })
            }
        };
        let (v, se) = mean_and_se(&per.iter().map(|b| b[0]).collect::<Vec<_>>());
        let scale = t.powf(alpha);
        rows.push(BtRow { t, lhs: v / scale, lhs_std_error: se / scale, rhs, ratio: v / scale / rhs });
    }
    Ok(rows)
}

/// Which limiting density a profile represents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "snake_case")]
pub enum DensityCase {
    /// w_{P₀}: P₀ = g₀·span(e₁,…,e_r) positive definite, H = H_{r−1,n−r}.
    Nondegenerate { r: usize },
    /// w^∞_{P₀}: P₀ = g₀·P₁^∞ degenerate, n ≥ 3, H = U.
    DegenerateHigh { r: usize },
    /// w_{θ₀}: n = 2, P₀ = k_{θ₀}·P^∞.
    DegenerateLow { theta0: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    /// Angle of k_θ when n = 2.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// Row-major k ∈ K.
    pub k: Vec<f64>,
}

/// Density on K/K_{P^∞} relative to the K-invariant probability measure,
/// sampled on a grid with quadrature weights summing to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub n: usize,
    pub case: DensityCase,
    pub norm: NormSpec,
    pub grid: Vec<GridPoint>,
    pub values: Vec<f64>,
    pub sigma: Vec<f64>,
    pub weights: Vec<f64>,
    pub tail_bound: f64,
    pub seed: u64,
    pub spec: QuadratureSpec,
}

impl DensityProfile {
    pub fn normalization(&self) -> f64 {
        self.values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    pub fn thetas(&self) -> Option<Vec<f64>> {
        self.grid.iter().map(|g| g.theta).collect()
    }

    pub fn k_mats(&self) -> Vec<Mat> {
        let d = self.n + 1;
        self.grid.iter().map(|g| Mat::from_row_slice(d, d, &g.k)).collect()
    }

    /// max |v − 1| / max(3σ, 1e−9) over the grid.
    pub fn constancy_score(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.sigma)
            .map(|(v, s)| (v - 1.0).abs() / (3.0 * s).max(1e-9))
            .fold(0.0, f64::max)
    }

    /// Periodic linear interpolation of a circle profile at angle θ.
    pub fn value_at(&self, theta: f64) -> Option<f64> {
        let th = self.thetas()?;
        let m = th.len();
        let step = 2.0 * PI / m as f64;
        let x = theta.rem_euclid(2.0 * PI) / step;
        let i = (x.floor() as usize) % m;
        let fr = x - x.floor();
        Some(self.values[i] * (1.0 - fr) + self.values[(i + 1) % m] * fr)
    }
}

/// Grid of K/K_{P^∞}: the θ circle for n = 2, Haar-random k otherwise.
fn make_grid(n: usize, m: usize, seed: u64) -> Vec<(Option<f64>, Mat)> {
    if n == 2 {
        (0..m)
            .map(|l| {
                let th = 2.0 * PI * l as f64 / m as f64;
                (Some(th), make_k_theta(th).mat().clone())
            })
            .collect()
    } else {
        let mut rng = rng_stream(seed, u64::MAX);
        (0..m).map(|_| (None, sample_k(n, &mut rng))).collect()
    }
}

/// Shared engine: for every draw, the list `draws` of weighted matrices X,
/// accumulated as Σ w·‖k₀X‖^{−(n−1)} for every grid point k₀ (common random
/// numbers across the grid), normalized by the grid quadrature.
fn profile_engine<F>(
    n: usize,
    case: DensityCase,
    norm: &NormSpec,
    grid_size: usize,
    spec: &QuadratureSpec,
    samples: usize,
    tail_bound: f64,
    draws: F,
) -> Result<DensityProfile>
where
    F: Fn(&mut ChaCha8Rng) -> Vec<(Mat, f64)> + Sync,
{
    spec.validate()?;
    if grid_size == 0 {
        return invalid("grid must be nonempty");
    }
    let prep = norm.prepare()?;
    let alpha = (n - 1) as f64;
    let grid = make_grid(n, grid_size, spec.seed);
    let m = grid.len();
    let per = batch_means(spec.seed, samples, spec.batches, m, |rng, acc| {
        for (x, w) in draws(rng) {
            let xp = prep.absorb(&x);
            for (l, (_, k0)) in grid.iter().enumerate() {
                acc[l] += w * prep.base.of_slice((k0 * &xp).as_slice()).powf(-alpha);
            }
        }
    });
    let weights = vec![1.0 / m as f64; m];
    let normalize = |num: &[f64]| -> Vec<f64> {
        let z: f64 = num.iter().zip(&weights).map(|(a, w)| a * w).sum();
        num.iter().map(|a| a / z).collect()
    };
    let total: Vec<f64> = (0..m).map(|l| per.iter().map(|b| b[l]).sum::<f64>() / per.len() as f64).collect();
    let values = normalize(&total);
    let batch_vals: Vec<Vec<f64>> = per.iter().map(|b| normalize(b)).collect();
    let sigma: Vec<f64> = (0..m)
        .map(|l| mean_and_se(&batch_vals.iter().map(|b| b[l]).collect::<Vec<_>>()).1)
        .collect();
    Ok(DensityProfile {
        n,
        case,
        norm: norm.clone(),
        grid: grid
            .into_iter()
            .map(|(theta, k)| GridPoint { theta, k: k.transpose().as_slice().to_vec() })
            .collect(),
        values,
        sigma,
        weights,
        tail_bound,
        seed: spec.seed,
        spec: spec.clone(),
    })
}

/// w_{P₀} on K/K_{P^∞} for P₀ = g₀·span(e₁,…,e_r), with H = H_{r−1,n−r}.
pub fn eval_w_p0(
    r: usize,
    n: usize,
    g0: &GroupElement,
    norm: &NormSpec,
    grid_size: usize,
    spec: &QuadratureSpec,
) -> Result<DensityProfile> {
    if n < 2 || r == 0 || r > n || g0.n() != n {
        return Err(LabError::Dimension(format!("need 1 <= r <= n and g0 in SO({n},1)")));
    }
    let (i, j) = (r - 1, n - r);
    let g0inv = g0.inverse().mat().clone();
    let (ap, am) = (infty(n, InfSign::Plus), infty(n, InfSign::Minus));
    let nodes = t_nodes(j, spec.t_max);
    let trivial = n == 2 && compact_trivial_h(i, j);
    let samples = if trivial { 1 } else { spec.mc_samples };
    let alpha = (n - 1) as f64;
    let tail = if j == 0 {
        0.0
    } else {
        let jm = j as f64 - 1.0;
        ((jm - alpha) * spec.t_max).exp() / (2f64.powf(jm) * (alpha - jm))
    };
    profile_engine(n, DensityCase::Nondegenerate { r }, norm, grid_size, spec, samples, tail, |rng| {
        let kappa = if n > 2 { sample_k_pinfty(n, r, rng) } else { Mat::identity(3, 3) };
        let f = HFactors::sample(i, j, rng);
        let lp = &kappa * &ap;
        let lm = &kappa * &am;
        let mut out = Vec::with_capacity(nodes.len() * 2);
        for &(t, w) in &nodes {
            let hg = f.h(t) * &g0inv;
            out.push((&lp * &hg, w));
            if r == 1 {
                out.push((&lm * &hg, w));
            }
        }
        out
    })
}

fn u_profile(
    n: usize,
    r: usize,
    case: DensityCase,
    g0inv: Mat,
    norm: &NormSpec,
    grid_size: usize,
    spec: &QuadratureSpec,
) -> Result<DensityProfile> {
    let dim = n - 1;
    let ap = infty(n, InfSign::Plus);
    let radial = radial_nodes(spec.x_max, dim);
    let trivial = n == 2;
    let samples = if trivial { 1 } else { spec.mc_samples };
    let alpha = (n - 1) as f64;
    let excess = 2.0 * alpha - dim as f64;
    let tail = sphere_area(dim) * spec.x_max.powf(-excess) / excess;
    profile_engine(n, case, norm, grid_size, spec, samples, tail, |rng| {
        let kappa = if n > 2 { sample_k_pinfty(n, r, rng) } else { Mat::identity(3, 3) };
        let left = &kappa * &ap;
        let dirs = directions(dim, spec.angular_points, rng);
        let mut out = Vec::with_capacity(dirs.len() * radial.len());
        for (d, wd) in &dirs {
            for &(rr, wr) in &radial {
                let x: Vec<f64> = d.iter().map(|c| c * rr).collect();
                out.push((&left * make_u(&x).mat() * &g0inv, wd * wr));
            }
        }
        out
    })
}

/// w^∞_{P₀} on K/K_{P^∞} for a degenerate P₀ = g₀·P₁^∞, n ≥ 3.
pub fn eval_w_infty(
    r: usize,
    n: usize,
    g0: &GroupElement,
    norm: &NormSpec,
    grid_size: usize,
    spec: &QuadratureSpec,
) -> Result<DensityProfile> {
    if n < 3 {
        return Err(LabError::Dimension("degenerate densities for n = 2 use eval_w_theta0".into()));
    }
    if r == 0 || r > n || g0.n() != n {
        return Err(LabError::Dimension("need 1 <= r <= n and g0 in SO(n,1)".into()));
    }
    u_profile(n, r, DensityCase::DegenerateHigh { r }, g0.inverse().mat().clone(), norm, grid_size, spec)
}

/// w_{θ₀}(ϑ) on the circle, relative to dϑ/2π, sampled at ϑ = 2πl/m.
pub fn eval_w_theta0(theta0: f64, norm: &NormSpec, grid_size: usize, spec: &QuadratureSpec) -> Result<DensityProfile> {
    let kinv = make_k_theta(-theta0).mat().clone();
    u_profile(2, 2, DensityCase::DegenerateLow { theta0 }, kinv, norm, grid_size, spec)
}
