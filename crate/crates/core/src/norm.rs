use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::geometry::{ExactMatrix, GroupElement, Mat};

/// Matrix norms used to define the balls Γ_T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormSpec {
    Frobenius,
    MaxEntry,
    /// ‖g‖ = ‖g g₀⁻¹‖_F; `g0` is stored row-major.
    SkewedFrobenius { g0: Vec<Vec<f64>> },
}

impl NormSpec {
    pub fn skewed(g0: &GroupElement) -> Self {
        let m = g0.mat();
        NormSpec::SkewedFrobenius {
            g0: (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormSpec::Frobenius => "frobenius",
            NormSpec::MaxEntry => "max",
            NormSpec::SkewedFrobenius { .. } => "skewed",
        }
    }

    pub fn g0(&self) -> Option<Mat> {
        match self {
            NormSpec::SkewedFrobenius { g0 } => {
                let d = g0.len();
                Some(Mat::from_fn(d, d, |i, j| g0[i][j]))
            }
            _ => None,
        }
    }

    pub fn prepare(&self) -> Result<PreparedNorm> {
        let post = match self.g0() {
            Some(g) => {
                if g.nrows() != g.ncols() {
                    return Err(LabError::Dimension("g0 must be square".into()));
                }
                Some(g.try_inverse().ok_or_else(|| LabError::Invalid("g0 is singular".into()))?)
            }
            None => None,
        };
        let base = match self {
            NormSpec::MaxEntry => BaseNorm::Max,
            _ => BaseNorm::Frobenius,
        };
        Ok(PreparedNorm { base, post })
    }

    pub fn eval(&self, m: &Mat) -> f64 {
        self.prepare().expect("valid norm").eval(m)
    }

    /// ‖J g J‖ = ‖g‖ for every g; holds for the entrywise norms.
    pub fn is_star_invariant(&self) -> bool {
        !matches!(self, NormSpec::SkewedFrobenius { .. })
    }

    /// A constant c with ‖g‖_F ≤ c·‖g‖ for d×d matrices.
    pub fn frobenius_factor(&self, d: usize) -> Result<f64> {
        Ok(match self {
            NormSpec::Frobenius => 1.0,
            NormSpec::MaxEntry => d as f64,
            NormSpec::SkewedFrobenius { .. } => {
                let g = self.g0().unwrap();
                if g.nrows() != d {
                    return invalid("g0 has the wrong size");
                }
                g.svd(false, false).singular_values.max()
            }
        })
    }

    /// ‖X‖ ≤ T for an exact rational matrix, comparing integers against the
    /// floating threshold with relative slack 1e-12 (so T = ‖X‖ computed in
    /// floating point still admits X). The skewed norm is evaluated in floating point.
    pub fn exact_within(&self, x: &ExactMatrix, t: f64) -> bool {
        let den = x.den() as f64;
        let slack = 1.0 + 1e-12;
        match self {
            NormSpec::Frobenius => {
                let lhs = x.frobenius_sq_num();
                (lhs as f64) <= t * t * den * den * slack
            }
            NormSpec::MaxEntry => {
                let m = x.numerators().iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
                (m as f64) <= t * den * slack
            }
            NormSpec::SkewedFrobenius { .. } => self.eval(&x.to_mat()) <= t * slack,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseNorm {
    Frobenius,
    Max,
}

impl BaseNorm {
    #[inline]
    pub fn of_slice(&self, xs: &[f64]) -> f64 {
        match self {
            BaseNorm::Frobenius => xs.iter().map(|v| v * v).sum::<f64>().sqrt(),
            BaseNorm::Max => xs.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }
    }
}

/// A norm with the skew factor g₀⁻¹ inverted once.
#[derive(Clone, Debug)]
pub struct PreparedNorm {
    pub base: BaseNorm,
    pub post: Option<Mat>,
}

impl PreparedNorm {
    pub fn eval(&self, m: &Mat) -> f64 {
        match &self.post {
            Some(p) => self.base.of_slice((m * p).as_slice()),
            None => self.base.of_slice(m.as_slice()),
        }
    }

    /// m·g₀⁻¹ (or m itself), so later evaluations only need the base norm.
    pub fn absorb(&self, m: &Mat) -> Mat {
        match &self.post {
            Some(p) => m * p,
            None => m.clone(),
        }
    }
}
