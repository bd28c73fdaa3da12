//! Instance generators shared by the identity tests and the acceptance run.
#![allow(dead_code)]

use lab_core::geometry::{
    basis_infty, make_a, make_d1_d2, make_delta, make_g1_g2, make_r1_r2, make_u, make_upsilon, star,
};
use lab_core::{canonical_class, same_class, HomothetyClass, LatticeBasis, Mat};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Nonsingular integer matrix with entries in [−3, 3].
pub fn int_matrix(k: usize, rng: &mut ChaCha8Rng) -> Mat {
    loop {
        let m = Mat::from_fn(k, k, |_, _| rng.gen_range(-3i64..=3) as f64);
        if m.determinant().abs() > 0.5 {
            return m;
        }
    }
}

fn class(m: Mat) -> HomothetyClass {
    canonical_class(&LatticeBasis::new(m).unwrap()).unwrap()
}

/// Columns `from..from + k` of the identity.
fn coords(d: usize, from: usize, k: usize) -> Mat {
    Mat::identity(d, d).columns(from, k).into_owned()
}

/// One instance of ([g₁(s)Λ₁],[g₂(s)Λ₂]) = R(ρ⁽⁰⁾(d₁(s)y₁, d₂(s)y₂)) with
/// Λᵢ = ρ⁽⁰⁾(yᵢ); returns whether both classes agree to `tol`.
pub fn g1g2_identity(n: usize, i: usize, s: f64, seed: u64, tol: f64) -> bool {
    let d = n + 1;
    let j = n - 1 - i;
    let mut r = rng(seed);
    let (y1, y2) = (int_matrix(i + 1, &mut r), int_matrix(j + 1, &mut r));
    let (e1, e2) = (coords(d, 0, i + 1), coords(d, i + 1, j + 1));
    let (g1, g2) = make_g1_g2(n, s);
    let (r1, r2) = make_r1_r2(n);
    let (d1, d2) = make_d1_d2(i, j, s);
    let lhs1 = class(&g1 * &e1 * &y1);
    let lhs2 = class(&g2 * &e2 * &y2);
    let rhs1 = class(&r1 * &e1 * d1 * &y1);
    let rhs2 = class(&r2 * &e2 * d2 * &y2);
    same_class(&lhs1, &rhs1, tol) && same_class(&lhs2, &rhs2, tol)
}

/// One instance of a(s)u(x)·([Λ₁],[Λ₂]) = ρ^∞(δ(s)υ(x)·y) with
/// Λᵢ = ρ^∞(yᵢ) in the light-like bases.
pub fn au_identity(n: usize, i: usize, seed: u64, tol: f64) -> bool {
    let j = n - 1 - i;
    let mut r = rng(seed);
    let s: f64 = r.gen_range(0.1..3.0);
    let x: Vec<f64> = (0..n - 1).map(|_| r.gen_range(-2.0..2.0)).collect();
    let (y1, y2) = (int_matrix(i + 1, &mut r), int_matrix(j + 1, &mut r));
    let b = basis_infty(n, i + 1);
    let (b1, b2) = (b.columns(0, i + 1).into_owned(), b.columns(i + 1, j + 1).into_owned());
    let g = make_a(n, s).mul(&make_u(&x));
    let lhs1 = class(g.mat() * &b1 * &y1);
    let lhs2 = class(star(&g).mat() * &b2 * &y2);
    let (dl1, dl2) = make_delta(i, j, s);
    let (u1, u2) = make_upsilon(&x[..i], &x[i..]);
    let rhs1 = class(&b1 * dl1 * u1 * &y1);
    let rhs2 = class(&b2 * dl2 * u2 * &y2);
    same_class(&lhs1, &rhs1, tol) && same_class(&lhs2, &rhs2, tol)
}
