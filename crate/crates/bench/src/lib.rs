//! Shared fixtures for the criterion benches.

use lab_core::{LatticeBasis, Mat};

/// A rank-`r` lattice in R^`d` with a mildly skewed basis, deterministic in `seed`.
pub fn skewed_lattice(d: usize, r: usize, seed: u64) -> LatticeBasis {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
    };
    let mut m = Mat::zeros(d, r);
    for j in 0..r {
        for i in 0..d {
            m[(i, j)] = next() + if i == j { 3.0 } else { 0.0 };
        }
    }
    // Shear the second column far along the first so reduction has work to do.
    if r > 1 {
        let first = m.column(0).into_owned();
        let mut second = m.column_mut(1);
        second += first * 37.0;
    }
    LatticeBasis::new(m).expect("fixture basis has full rank")
}
