//! End-to-end orbit experiments: enumerate Γ_T along a ladder, push the
//! starting pair through each γ, and compare the marginals with the
//! predicted law.
//!
//! Output files written by [`emit`]:
//!
//! * `report.json`: the [`Report`] (config echo, predicted law, per-T rows,
//!   trends, verdicts).
//! * `curves.csv`: `T,count,complete,ks_theta,shape_discrepancy,bin_fill,
//!   near_degenerate_fraction,multisection_failures,max_gap,mean_gap`, one row
//!   per rung. Missing statistics are empty cells.
//! * `histograms.csv`: `T,marginal,bin,empirical,predicted` with marginal
//!   `theta` (or `coordinate` for n ≥ 3) and `shape`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enumeration::{enumerate_ball, Gamma, GammaSpec};
use crate::error::{invalid, LabError, Result};
use crate::geometry::{q_gram, star, GroupElement, Mat, Vector};
use crate::lattice::{
    act, orthonormal_basis, ortho_lattice, shape, x2_point, LatticeBasis, OrthoPair, ShapePoint,
    X2Point,
};
use crate::limit_law::{
    classify_start, coset_angle, multi_section_check, plane_frame, sample_predicted, shape_unit_coords,
    subspace_coordinate, CircleSampler, ClassifyOptions, LawCase, PredictedLaw, PredictedSample,
};
use crate::norm::NormSpec;
use crate::quadrature::{rng_stream, QuadratureSpec};

/// Starting pair, in the coordinates Γ acts in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StartSpec {
    /// Explicit bases, one vector per basis element.
    Pair { first: Vec<Vec<f64>>, second: Vec<Vec<f64>> },
    /// The line Z·v and the lattice v^⊥ ∩ Z^{n+1}, both given in the
    /// coordinates of Γ's defining form and moved by its conjugator M
    /// (v ↦ Mv, plane ↦ M^{−T}·plane).
    OrthogonalComplement { v: Vec<i64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stat", rename_all = "snake_case")]
pub enum StatSpec {
    KsTheta,
    ShapeBins { bins: usize },
    TestFunctions { count: usize, seed: u64 },
    Multisection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// At the top rung.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks_theta_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_discrepancy_max: Option<f64>,
    /// Shape discrepancy strictly decreasing along the ladder.
    #[serde(default)]
    pub shape_decreasing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_points: Option<usize>,
    /// Fraction of nonempty shape bins at the top rung.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_bin_fill: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multisection_failures_max: Option<usize>,
}

fn default_cap() -> usize {
    2_000_000
}

fn default_predicted() -> usize {
    1_000_000
}

fn default_grid() -> usize {
    64
}

fn default_n_max() -> usize {
    1000
}

fn default_quadrature() -> QuadratureSpec {
    QuadratureSpec::default().with_samples(4000)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub r: usize,
    pub gamma: GammaSpec,
    pub norm: NormSpec,
    pub start: StartSpec,
    #[serde(rename = "T_ladder")]
    pub t_ladder: Vec<f64>,
    #[serde(default)]
    pub stats: Vec<StatSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_predicted")]
    pub predicted_samples: usize,
    #[serde(default = "default_cap")]
    pub enumeration_cap: usize,
    /// Grid size of the density profile.
    #[serde(default = "default_grid")]
    pub density_grid: usize,
    #[serde(default = "default_quadrature")]
    pub quadrature: QuadratureSpec,
    /// Orbit-size bound for the special-point search.
    #[serde(default = "default_n_max")]
    pub special_n_max: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.r == 0 || self.r > self.n {
            return Err(LabError::Dimension(format!("need n ≥ 2 and 1 ≤ r ≤ n, got n = {}, r = {}", self.n, self.r)));
        }
        if self.t_ladder.is_empty() {
            return invalid("T_ladder is empty");
        }
        if self.t_ladder.iter().any(|t| !t.is_finite()) || self.t_ladder.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("T_ladder must be finite and strictly increasing");
        }
        for s in &self.stats {
            match s {
                StatSpec::ShapeBins { bins } if *bins < 10 => return invalid("shape_bins needs bins ≥ 10"),
                StatSpec::TestFunctions { count: 0, .. } => return invalid("test_functions needs count ≥ 1"),
                _ => {}
            }
        }
        if self.predicted_samples == 0 && !self.stats.is_empty() {
            return invalid("predicted_samples must be positive");
        }
        Ok(())
    }

    fn has(&self, f: impl Fn(&StatSpec) -> bool) -> bool {
        self.stats.iter().any(f)
    }

    fn bins(&self) -> Option<usize> {
        self.stats.iter().find_map(|s| match s {
            StatSpec::ShapeBins { bins } => Some(*bins),
            _ => None,
        })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> LabError {
    LabError::Io { path: path.display().to_string(), err: e }
}

fn basis_from_vectors(vs: &[Vec<f64>], d: usize) -> Result<LatticeBasis> {
    if vs.is_empty() || vs.iter().any(|v| v.len() != d) {
        return Err(LabError::Dimension(format!("basis vectors must have length {d}")));
    }
    let cols: Vec<Vector> = vs.iter().map(|v| Vector::from_column_slice(v)).collect();
    LatticeBasis::from_columns(&cols)
}

/// The starting pair in acting coordinates, ordered so the first span is not
/// indefinite; the flag reports a swap. Γ_T is closed under g ↦ g* for the
/// star-invariant norms, so the swapped pair has the same orbit averages.
pub fn build_start(config: &ExperimentConfig, gamma: &Gamma) -> Result<(OrthoPair, bool)> {
    let d = config.n + 1;
    let (a, b) = match &config.start {
        StartSpec::Pair { first, second } => (basis_from_vectors(first, d)?, basis_from_vectors(second, d)?),
        StartSpec::OrthogonalComplement { v } => {
            if v.len() != d {
                return Err(LabError::Dimension(format!("v must have length {d}")));
            }
            let plane = ortho_lattice(v)?;
            let line = Vector::from_iterator(d, v.iter().map(|&x| x as f64));
            match gamma.conjugator() {
                Some(m) => {
                    let mit = m.clone().try_inverse().ok_or_else(|| LabError::Invalid("singular conjugator".into()))?;
                    let line = LatticeBasis::new(Mat::from_column_slice(d, 1, (m * line).as_slice()))?;
                    (plane.transform(&mit.transpose())?, line)
                }
                None => (plane, LatticeBasis::new(Mat::from_column_slice(d, 1, line.as_slice()))?),
            }
        }
    };
    let (pair, swapped) = OrthoPair::new_ordered(&a, &b)?;
    if swapped && !config.norm.is_star_invariant() {
        return invalid("the pair needs reordering, which requires a star-invariant norm");
    }
    if pair.r() != config.r {
        return Err(LabError::Dimension(format!("start has r = {} but the config says r = {}", pair.r(), config.r)));
    }
    Ok((pair, swapped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalPoint {
    /// n = 2: angle of the first span.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// n ≥ 3: 1-d subspace coordinate and the row-major orthonormal frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<Vec<f64>>,
    pub shape: Option<ShapePoint>,
    /// Oriented fiber coordinate in P^∞_θ, for degenerate 2-lattices in R³.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x2: Option<X2Point>,
    pub gamma_index: usize,
    /// |det| of the q-Gram of an orthonormal basis of the first span.
    pub degeneracy: f64,
    /// Whether γ·[Λ] lies on the multi-section (special starts only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_section: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    #[serde(rename = "T")]
    pub t: f64,
    /// False when enumeration hit its cap; `points` is then empty.
    pub complete: bool,
    pub points: Vec<EmpiricalPoint>,
}

fn rank2_member(pair: &OrthoPair) -> Option<&crate::lattice::HomothetyClass> {
    if pair.first.rank() == 2 {
        Some(&pair.first)
    } else if pair.second.rank() == 2 {
        Some(&pair.second)
    } else {
        None
    }
}

fn point_of(
    g: &GroupElement,
    index: usize,
    start: &OrthoPair,
    law: Option<&PredictedLaw>,
) -> Result<EmpiricalPoint> {
    let moved = act(g, start)?;
    let first = moved.first.basis();
    let n = start.n();
    let (theta, coordinate, frame) = if n == 2 {
        (coset_angle(first).ok(), None, None)
    } else {
        let o = orthonormal_basis(first);
        (None, subspace_coordinate(first).ok(), Some(o.transpose().as_slice().to_vec()))
    };
    let degeneracy = q_gram(&orthonormal_basis(first)).determinant().abs();
    let shape = rank2_member(&moved).map(shape).transpose()?;
    let (mut x2, mut on_section) = (None, None);
    if let Some(PredictedLaw { case: LawCase::SpecialExtension { packet, theta0, .. }, .. }) = law {
        let check = multi_section_check(g, &start.first, packet, *theta0)?;
        on_section = Some(check.is_ok());
        if let Some(th) = theta {
            x2 = x2_point(&moved.first, &plane_frame(th)).ok();
        }
    }
    Ok(EmpiricalPoint { theta, coordinate, frame, shape, x2, gamma_index: index, degeneracy, on_section })
}

/// Empirical distributions along the ladder. Γ is enumerated once at the top
/// rung and filtered; if that exceeds the cap, each rung is tried alone and
/// rungs over the cap come back flagged incomplete.
pub fn run_orbit(
    config: &ExperimentConfig,
    gamma: &Gamma,
    start: &OrthoPair,
    law: Option<&PredictedLaw>,
) -> Result<Vec<EmpiricalDistribution>> {
    let top = *config.t_ladder.last().expect("validated ladder");
    let per_rung: Vec<Option<Vec<crate::geometry::ExactMatrix>>> =
        match enumerate_ball(gamma, &config.norm, top, config.enumeration_cap) {
            Ok(ball) => config
                .t_ladder
                .iter()
                .map(|&t| Some(ball.exact.iter().filter(|x| config.norm.exact_within(x, t)).cloned().collect()))
                .collect(),
            Err(LabError::Cap(_)) => config
                .t_ladder
                .iter()
                .map(|&t| match enumerate_ball(gamma, &config.norm, t, config.enumeration_cap) {
                    Ok(b) => Ok(Some(b.exact)),
                    Err(LabError::Cap(_)) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect::<Result<_>>()?,
            Err(e) => return Err(e),
        };
    config
        .t_ladder
        .par_iter()
        .zip(per_rung.into_par_iter())
        .map(|(&t, elems)| {
            let Some(elems) = elems else {
                return Ok(EmpiricalDistribution { t, complete: false, points: Vec::new() });
            };
            let points = elems
                .par_iter()
                .enumerate()
                .map(|(i, x)| point_of(&gamma.acting(x)?, i, start, law))
                .collect::<Result<Vec<_>>>()?;
            Ok(EmpiricalDistribution { t, complete: true, points })
        })
        .collect()
}

fn ks_uniform(mut u: Vec<f64>) -> f64 {
    u.sort_by(f64::total_cmp);
    let m = u.len() as f64;
    u.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / m).max((i + 1) as f64 / m - x))
        .fold(0.0, f64::max)
}

fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Kolmogorov–Smirnov distance between the empirical angle (n = 2) or
/// subspace coordinate (n ≥ 3) and the predicted marginal. For n = 2 the
/// exact profile CDF is used; otherwise the predicted sample's empirical CDF.
pub fn ks_theta(emp: &EmpiricalDistribution, law: &PredictedLaw, predicted: &[PredictedSample]) -> Result<f64> {
    if law.n == 2 {
        let cs = CircleSampler::new(law.profile())?;
        let u: Vec<f64> = emp.points.iter().filter_map(|p| p.theta).map(|t| cs.cdf(t)).collect();
        if u.is_empty() {
            return invalid("empty distribution");
        }
        Ok(ks_uniform(u))
    } else {
        let a: Vec<f64> = emp.points.iter().filter_map(|p| p.coordinate).collect();
        let b: Vec<f64> = predicted.iter().filter_map(|p| p.coordinate).collect();
        if a.is_empty() || b.is_empty() {
            return invalid("empty distribution");
        }
        Ok(ks_two_sample(a, b))
    }
}

/// Equal-area bins of the shape space: a bx × by grid in the coordinates
/// of [`shape_unit_coords`], bx the largest divisor of `bins` with bx² ≤ bins.
pub fn shape_bin(s: ShapePoint, bins: usize) -> usize {
    let bx = (1..=bins).filter(|b| bins % b == 0 && b * b <= bins).max().unwrap_or(1);
    let by = bins / bx;
    let (u, v) = shape_unit_coords(s);
    let i = ((u * bx as f64) as usize).min(bx - 1);
    let j = ((v * by as f64) as usize).min(by - 1);
    i * by + j
}

pub fn shape_histogram(shapes: impl Iterator<Item = ShapePoint>, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let mut total = 0usize;
    for s in shapes {
        h[shape_bin(s, bins)] += 1.0;
        total += 1;
    }
    if total > 0 {
        h.iter_mut().for_each(|x| *x /= total as f64);
    }
    h
}

/// Total-variation distance between binned empirical and predicted shapes.
pub fn shape_discrepancy(emp: &[ShapePoint], predicted: &[ShapePoint], bins: usize) -> Result<f64> {
    if emp.is_empty() || predicted.is_empty() {
        return invalid("empty distribution");
    }
    let a = shape_histogram(emp.iter().copied(), bins);
    let b = shape_histogram(predicted.iter().copied(), bins);
    Ok(0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Bounded Lipschitz test functions of (a, u, v): a ∈ [0,1) the angle over
/// 2π (periodic) or (coordinate + 1)/2, and (u, v) the equal-area shape
/// coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    Constant,
    /// Product of plateau bumps φ(d/w), φ(x) = clamp(2 − 2x, 0, 1).
    Bump { center: [f64; 3], width: [f64; 3], periodic: bool },
}

fn plateau(d: f64, w: f64) -> f64 {
    (2.0 - 2.0 * d / w).clamp(0.0, 1.0)
}

impl TestFunction {
    /// Missing shape coordinates drop the shape factors.
    pub fn eval(&self, a: f64, uv: Option<(f64, f64)>) -> f64 {
        match self {
            TestFunction::Constant => 1.0,
            TestFunction::Bump { center, width, periodic } => {
                let mut da = (a - center[0]).abs();
                if *periodic {
                    da = da.min(1.0 - da);
                }
                let mut f = plateau(da, width[0]);
                if let Some((u, v)) = uv {
                    f *= plateau((u - center[1]).abs(), width[1]) * plateau((v - center[2]).abs(), width[2]);
                }
                f
            }
        }
    }
}

pub fn test_function_family(count: usize, seed: u64, periodic: bool) -> Vec<TestFunction> {
    let mut rng = rng_stream(seed, 0);
    (0..count)
        .map(|_| {
            let center = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let width = [rng.gen_range(0.15..0.5), rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8)];
            TestFunction::Bump { center, width, periodic }
        })
        .collect()
}

fn angle_coord(theta: Option<f64>, coordinate: Option<f64>) -> Option<f64> {
    theta.map(|t| t.rem_euclid(2.0 * PI) / (2.0 * PI)).or(coordinate.map(|c| (c + 1.0) / 2.0))
}

/// |empirical average − predicted-sample average| for each function.
pub fn test_function_gaps(
    emp: &EmpiricalDistribution,
    predicted: &[PredictedSample],
    functions: &[TestFunction],
) -> Result<Vec<f64>> {
    let e: Vec<(f64, Option<(f64, f64)>)> = emp
        .points
        .iter()
        .filter_map(|p| angle_coord(p.theta, p.coordinate).map(|a| (a, p.shape.map(shape_unit_coords))))
        .collect();
    let q: Vec<(f64, Option<(f64, f64)>)> = predicted
        .iter()
        .filter_map(|p| angle_coord(p.theta, p.coordinate).map(|a| (a, p.shape().map(shape_unit_coords))))
        .collect();
    if e.is_empty() || q.is_empty() {
        return invalid("empty distribution");
    }
    let avg = |xs: &[(f64, Option<(f64, f64)>)], f: &TestFunction| {
        xs.iter().map(|(a, uv)| f.eval(*a, *uv)).sum::<f64>() / xs.len() as f64
    };
    Ok(functions.iter().map(|f| (avg(&e, f) - avg(&q, f)).abs()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RungRow {
    #[serde(rename = "T")]
    pub t: f64,
    pub count: usize,
    pub complete: bool,
    pub ks_theta: Option<f64>,
    pub shape_discrepancy: Option<f64>,
    /// Fraction of shape bins holding at least one orbit point.
    pub bin_fill: Option<f64>,
    pub test_function_gaps: Vec<f64>,
    pub multisection_failures: Option<usize>,
    /// Fraction of points with first-span degeneracy below 0.1.
    pub near_degenerate_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    #[serde(rename = "T")]
    pub t: f64,
    pub marginal: String,
    pub empirical: Vec<f64>,
    pub predicted: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trends {
    pub shape_decreasing: Option<bool>,
    /// Fraction of test functions whose gap at the top rung is below the
    /// gap at the bottom rung.
    pub gaps_shrink_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    /// The start was given with the indefinite span first and reordered.
    pub swapped: bool,
    pub law: PredictedLaw,
    pub rows: Vec<RungRow>,
    pub histograms: Vec<Histogram>,
    pub trends: Trends,
    pub verdicts: Vec<Verdict>,
    pub pass: bool,
}

const THETA_BINS: usize = 36;

fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

/// Trends from the rows alone.
pub fn trends(rows: &[RungRow]) -> Trends {
    let shapes: Option<Vec<f64>> = rows.iter().map(|r| r.shape_discrepancy).collect();
    let shape_decreasing = shapes.filter(|s| s.len() >= 2).map(|s| strictly_decreasing(&s));
    let gaps_shrink_fraction = match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if rows.len() >= 2 && !a.test_function_gaps.is_empty() => {
            let k = a.test_function_gaps.iter().zip(&b.test_function_gaps).filter(|(x, y)| y < x).count();
            Some(k as f64 / a.test_function_gaps.len() as f64)
        }
        _ => None,
    };
    Trends { shape_decreasing, gaps_shrink_fraction }
}

/// Threshold verdicts from the rows alone; a configured threshold whose
/// statistic is missing fails.
pub fn evaluate(rows: &[RungRow], th: &Thresholds) -> Vec<Verdict> {
    let mut out = Vec::new();
    let top = rows.last();
    let mut max_check = |name: &str, value: Option<f64>, limit: Option<f64>| {
        if let Some(limit) = limit {
            let v = value.unwrap_or(f64::INFINITY);
            out.push(Verdict { name: name.into(), value: v, threshold: limit, pass: v < limit });
        }
    };
    max_check("ks_theta", top.and_then(|r| r.ks_theta), th.ks_theta_max);
    max_check("shape_discrepancy", top.and_then(|r| r.shape_discrepancy), th.shape_discrepancy_max);
    max_check(
        "max_gap",
        top.and_then(|r| r.test_function_gaps.iter().cloned().reduce(f64::max)),
        th.max_gap,
    );
    max_check(
        "multisection_failures",
        top.and_then(|r| r.multisection_failures.map(|x| x as f64)),
        th.multisection_failures_max.map(|m| m as f64 + 0.5),
    );
    if let Some(m) = th.min_points {
        let v = top.map_or(0, |r| r.count) as f64;
        out.push(Verdict { name: "min_points".into(), value: v, threshold: m as f64, pass: v >= m as f64 });
    }
    if let Some(m) = th.min_bin_fill {
        let v = top.and_then(|r| r.bin_fill).unwrap_or(0.0);
        out.push(Verdict { name: "bin_fill".into(), value: v, threshold: m, pass: v >= m });
    }
    if th.shape_decreasing {
        let ok = trends(rows).shape_decreasing.unwrap_or(false);
        out.push(Verdict { name: "shape_decreasing".into(), value: f64::from(u8::from(ok)), threshold: 1.0, pass: ok });
    }
    out
}

fn theta_histogram(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut h = vec![0.0; THETA_BINS];
    let mut total = 0usize;
    for a in values {
        h[((a * THETA_BINS as f64) as usize).min(THETA_BINS - 1)] += 1.0;
        total += 1;
    }
    if total > 0 {
        h.iter_mut().for_each(|x| *x /= total as f64);
    }
    h
}

/// Runs the whole experiment. Deterministic given the config.
pub fn run(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let gamma = Gamma::new(config.gamma.clone())?;
    if gamma.n() != config.n {
        return Err(LabError::Dimension(format!("Γ acts on R^{} but n = {}", gamma.n() + 1, config.n)));
    }
    let (start, swapped) = build_start(config, &gamma)?;
    let opts = ClassifyOptions {
        norm: config.norm.clone(),
        grid: config.density_grid,
        quadrature: config.quadrature.clone(),
        n_max: config.special_n_max,
    };
    let law = classify_start(&start, &gamma, &opts)?;
    if config.stats.is_empty() {
        return Ok(Report {
            config: config.clone(),
            swapped,
            law,
            rows: Vec::new(),
            histograms: Vec::new(),
            trends: Trends { shape_decreasing: None, gaps_shrink_fraction: None },
            verdicts: evaluate(&[], &config.thresholds),
            pass: evaluate(&[], &config.thresholds).iter().all(|v| v.pass),
        });
    }
    let dists = run_orbit(config, &gamma, &start, Some(&law))?;
    let predicted = sample_predicted(&law, config.predicted_samples, config.seed)?;
    let predicted_shapes: Vec<ShapePoint> = predicted.iter().filter_map(|p| p.shape()).collect();
    let functions = config
        .stats
        .iter()
        .find_map(|s| match s {
            StatSpec::TestFunctions { count, seed } => Some(test_function_family(*count, *seed, config.n == 2)),
            _ => None,
        })
        .unwrap_or_default();
    let bins = config.bins();
    let mut rows = Vec::with_capacity(dists.len());
    let mut histograms = Vec::new();
    for d in &dists {
        let shapes: Vec<ShapePoint> = d.points.iter().filter_map(|p| p.shape).collect();
        let usable = d.complete && !d.points.is_empty();
        let ks = if usable && config.has(|s| matches!(s, StatSpec::KsTheta)) {
            ks_theta(d, &law, &predicted).ok()
        } else {
            None
        };
        let (disc, fill) = match bins {
            Some(b) if usable && !shapes.is_empty() && !predicted_shapes.is_empty() => {
                let h = shape_histogram(shapes.iter().copied(), b);
                let fill = h.iter().filter(|x| **x > 0.0).count() as f64 / b as f64;
                histograms.push(Histogram {
                    t: d.t,
                    marginal: "shape".into(),
                    empirical: h,
                    predicted: shape_histogram(predicted_shapes.iter().copied(), b),
                });
                (shape_discrepancy(&shapes, &predicted_shapes, b).ok(), Some(fill))
            }
            _ => (None, None),
        };
        let gaps = if usable && !functions.is_empty() {
            test_function_gaps(d, &predicted, &functions).unwrap_or_default()
        } else {
            Vec::new()
        };
        let multisection_failures = if config.has(|s| matches!(s, StatSpec::Multisection)) && d.complete {
            match law.case {
                LawCase::SpecialExtension { .. } => {
                    Some(d.points.iter().filter(|p| p.on_section == Some(false)).count())
                }
                _ => None,
            }
        } else {
            None
        };
        if usable {
            let marginal = if config.n == 2 { "theta" } else { "coordinate" };
            histograms.push(Histogram {
                t: d.t,
                marginal: marginal.into(),
                empirical: theta_histogram(d.points.iter().filter_map(|p| angle_coord(p.theta, p.coordinate))),
                predicted: theta_histogram(predicted.iter().filter_map(|p| angle_coord(p.theta, p.coordinate))),
            });
        }
        let near = if d.points.is_empty() {
            0.0
        } else {
            d.points.iter().filter(|p| p.degeneracy < 0.1).count() as f64 / d.points.len() as f64
        };
        rows.push(RungRow {
            t: d.t,
            count: d.points.len(),
            complete: d.complete,
            ks_theta: ks,
            shape_discrepancy: disc,
            bin_fill: fill,
            test_function_gaps: gaps,
            multisection_failures,
            near_degenerate_fraction: near,
        });
    }
    let verdicts = evaluate(&rows, &config.thresholds);
    let pass = verdicts.iter().all(|v| v.pass) && rows.iter().all(|r| r.complete);
    Ok(Report { config: config.clone(), swapped, trends: trends(&rows), law, rows, histograms, verdicts, pass })
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn curves_csv(report: &Report) -> String {
    let mut s = String::from(
        "T,count,complete,ks_theta,shape_discrepancy,bin_fill,near_degenerate_fraction,multisection_failures,max_gap,mean_gap\n",
    );
    for r in &report.rows {
        let g = &r.test_function_gaps;
        let max = g.iter().cloned().reduce(f64::max);
        let mean = if g.is_empty() { None } else { Some(g.iter().sum::<f64>() / g.len() as f64) };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.t,
            r.count,
            r.complete,
            cell(r.ks_theta),
            cell(r.shape_discrepancy),
            cell(r.bin_fill),
            r.near_degenerate_fraction,
            r.multisection_failures.map(|x| x.to_string()).unwrap_or_default(),
            cell(max),
            cell(mean)
        ));
    }
    s
}

pub fn histograms_csv(report: &Report) -> String {
    let mut s = String::from("T,marginal,bin,empirical,predicted\n");
    for h in &report.histograms {
        for (i, (e, p)) in h.empirical.iter().zip(&h.predicted).enumerate() {
            s.push_str(&format!("{},{},{},{},{}\n", h.t, h.marginal, i, e, p));
        }
    }
    s
}

pub fn report_json(report: &Report) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Writes report.json, curves.csv and histograms.csv into `out_dir`.
pub fn emit(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let files = [
        ("report.json", report_json(report)?),
        ("curves.csv", curves_csv(report)),
        ("histograms.csv", histograms_csv(report)),
    ];
    let mut out = Vec::new();
    for (name, body) in files {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))?;
        out.push(p);
    }
    Ok(out)
}

pub fn load_report(dir: &Path) -> Result<Report> {
    let p = dir.join("report.json");
    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// g ↦ g* keeps Γ_T for star-invariant norms; used by the swap argument.
pub fn star_closed(elems: &[GroupElement], tol: f64) -> bool {
    elems.iter().all(|g| {
        let s = star(g);
        elems.iter().any(|h| (h.mat() - s.mat()).abs().max() < tol)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enumeration::GammaKind;
    use crate::limit_law::sample_x2;
    use crate::lattice::shape_of_x2;

    fn ss_config() -> ExperimentConfig {
        let s = 0.5f64.sqrt();
        ExperimentConfig {
            n: 2,
            r: 2,
            gamma: GammaSpec {
                kind: GammaKind::ConjugatedIntegerOrthogonal {
                    form: vec![vec![0, 0, 1], vec![0, -1, 0], vec![1, 0, 0]],
                    conjugator: vec![vec![s, 0.0, -s], vec![0.0, 1.0, 0.0], vec![s, 0.0, s]],
                },
                generators: None,
            },
            norm: NormSpec::Frobenius,
            start: StartSpec::OrthogonalComplement { v: vec![1, 1, 1] },
            t_ladder: vec![10.0, 20.0, 30.0],
            stats: vec![
                StatSpec::KsTheta,
                StatSpec::ShapeBins { bins: 12 },
                StatSpec::TestFunctions { count: 5, seed: 1 },
            ],
            seed: 3,
            out_dir: None,
            thresholds: Thresholds::default(),
            predicted_samples: 20_000,
            enumeration_cap: 1_000_000,
            density_grid: 16,
            quadrature: QuadratureSpec::default().with_samples(50),
            special_n_max: 100,
        }
    }

    #[test]
    fn ladder_validation() {
        let mut c = ss_config();
        c.t_ladder = vec![10.0, 10.0];
        assert!(c.validate().is_err());
        let mut c = ss_config();
        c.stats = vec![StatSpec::ShapeBins { bins: 9 }];
        assert!(c.validate().is_err());
    }

    #[test]
    fn ss_start_is_positive_plane() {
        let c = ss_config();
        let g = Gamma::new(c.gamma.clone()).unwrap();
        let (p, _) = build_start(&c, &g).unwrap();
        assert_eq!(p.r(), 2);
        assert_eq!(crate::lattice::span_type(p.first.basis()), crate::lattice::SpanType::PositiveDefinite);
    }

    #[test]
    fn ball_is_star_closed() {
        let c = ss_config();
        let g = Gamma::new(c.gamma.clone()).unwrap();
        let ball = enumerate_ball(&g, &c.norm, 30.0, 100_000).unwrap();
        assert!(star_closed(&ball.elements(&g).unwrap(), 1e-9));
    }

    #[test]
    fn counts_match_enumeration() {
        let c = ss_config();
        let g = Gamma::new(c.gamma.clone()).unwrap();
        let (p, _) = build_start(&c, &g).unwrap();
        let d = run_orbit(&c, &g, &p, None).unwrap();
        for dist in &d {
            let ball = enumerate_ball(&g, &c.norm, dist.t, 1_000_000).unwrap();
            assert_eq!(dist.points.len(), ball.count);
        }
        let mut low = c.clone();
        low.t_ladder = vec![0.5, 1.0];
        assert!(run_orbit(&low, &g, &p, None).unwrap().iter().all(|d| d.points.is_empty()));
    }

    #[test]
    fn ks_self_test_and_point_mass() {
        let c = ss_config();
        let g = Gamma::new(c.gamma.clone()).unwrap();
        let (p, _) = build_start(&c, &g).unwrap();
        let law = classify_start(&p, &g, &ClassifyOptions { grid: 16, quadrature: c.quadrature.clone(), ..Default::default() }).unwrap();
        let s = sample_predicted(&law, 10_000, 11).unwrap();
        let pt = |theta: f64| EmpiricalPoint {
            theta: Some(theta),
            coordinate: None,
            frame: None,
            shape: None,
            x2: None,
            gamma_index: 0,
            degeneracy: 0.0,
            on_section: None,
        };
        let emp = EmpiricalDistribution { t: 1.0, complete: true, points: s.iter().map(|x| pt(x.theta.unwrap())).collect() };
        assert!(ks_theta(&emp, &law, &s).unwrap() < 0.02);
        let mass = EmpiricalDistribution { t: 1.0, complete: true, points: vec![pt(1.0); 100] };
        assert!(ks_theta(&mass, &law, &s).unwrap() > 0.8);
        let empty = EmpiricalDistribution { t: 1.0, complete: true, points: vec![] };
        assert!(ks_theta(&empty, &law, &s).is_err());
    }

    #[test]
    fn two_sample_ks_known_values() {
        assert_eq!(ks_two_sample(vec![0.0, 1.0], vec![0.0, 1.0]), 0.0);
        assert_eq!(ks_two_sample(vec![0.0, 0.1], vec![0.5, 0.6]), 1.0);
        assert!((ks_two_sample(vec![0.0, 1.0, 2.0, 3.0], vec![1.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shape_discrepancy_self_and_point_mass() {
        let mut r1 = rng_stream(1, 0);
        let mut r2 = rng_stream(2, 0);
        let a: Vec<ShapePoint> = (0..100_000).map(|_| shape_of_x2(sample_x2(&mut r1))).collect();
        let b: Vec<ShapePoint> = (0..100_000).map(|_| shape_of_x2(sample_x2(&mut r2))).collect();
        assert!(shape_discrepancy(&a, &b, 100).unwrap() < 0.03);
        let hex = vec![ShapePoint { x: 0.5, y: 0.75f64.sqrt() }; 50];
        assert!(shape_discrepancy(&hex, &b, 20).unwrap() > 0.9);
        // equal-area bins under the invariant measure
        let h = shape_histogram(a.iter().copied(), 12);
        assert!(h.iter().all(|x| (x - 1.0 / 12.0).abs() < 0.005));
    }

    #[test]
    fn constant_test_function_has_zero_gap() {
        let c = ss_config();
        let g = Gamma::new(c.gamma.clone()).unwrap();
        let (p, _) = build_start(&c, &g).unwrap();
        let d = run_orbit(&c, &g, &p, None).unwrap();
        let law = classify_start(&p, &g, &ClassifyOptions { grid: 16, quadrature: c.quadrature.clone(), ..Default::default() }).unwrap();
        let s = sample_predicted(&law, 1000, 1).unwrap();
        let gaps = test_function_gaps(&d[2], &s, &[TestFunction::Constant]).unwrap();
        assert_eq!(gaps, vec![0.0]);
    }

    #[test]
    fn plateau_is_lipschitz_bump() {
        let f = TestFunction::Bump { center: [0.95, 0.5, 0.5], width: [0.2, 0.4, 0.4], periodic: true };
        assert!((f.eval(0.95, Some((0.5, 0.5))) - 1.0).abs() < 1e-12);
        assert!((f.eval(0.05, None) - 1.0).abs() < 1e-12);
        assert_eq!(f.eval(0.5, None), 0.0);
        assert!((f.eval(0.1, None) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn report_round_trip_and_csv_shape() {
        let c = ss_config();
        let r = run(&c).unwrap();
        let text = report_json(&r).unwrap();
        let back: Report = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(curves_csv(&r).lines().count(), 1 + c.t_ladder.len());
        assert_eq!(evaluate(&back.rows, &back.config.thresholds), back.verdicts);
        let again = run(&c).unwrap();
        assert_eq!(report_json(&again).unwrap(), text);
        let mut empty = c.clone();
        empty.stats.clear();
        assert!(run(&empty).unwrap().rows.is_empty());
    }

    #[test]
    fn verdicts_fail_on_missing_statistic() {
        let th = Thresholds { ks_theta_max: Some(0.1), ..Default::default() };
        let row = RungRow {
            t: 1.0,
            count: 3,
            complete: true,
            ks_theta: None,
            shape_discrepancy: None,
            bin_fill: None,
            test_function_gaps: vec![],
            multisection_failures: None,
            near_degenerate_fraction: 0.0,
        };
        assert!(!evaluate(&[row], &th)[0].pass);
    }
}
