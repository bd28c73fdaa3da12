//! Numerical laboratory for norm-ball orbit averages of lattices Γ ⊂ SO(n,1)°
//! acting on homothety classes of orthogonal lattice pairs.

pub mod enumeration;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod lattice;
pub mod limit_law;
pub mod norm;
pub mod quadrature;

pub use error::{LabError, Result};
pub use geometry::{ExactMatrix, GroupElement, Mat, QuadForm, SL2Element, Vector};
pub use lattice::{canonical_class, same_class, HomothetyClass, LatticeBasis, OrthoPair, ShapePoint, X2Point};
pub use norm::NormSpec;
