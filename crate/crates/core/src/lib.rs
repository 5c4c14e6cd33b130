//! Finite-difference solvers for scalar variational and quasi-variational
//! inequalities with gradient constraints |∇u| ≤ g on 1D intervals and 2D
//! rectangles.

pub mod applications;
pub mod constraints;
pub mod elliptic;
pub mod error;
pub mod evolution;
pub mod geodesic;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod penalized;
pub mod qvi;

pub use constraints::{
    evaluate_constraint, kappa, penalty, penalty_derivative, scale_to_feasible, violation,
    BoundField, ConstraintOperator, GammaFunctional, PenaltyParams, PointwiseMap,
};
pub use error::{Error, Result};
pub use grid::{
    constants_report, divergence, field_norm, gradient, monotonicity_constant, p_flux,
    poincare_constant, ConstantsReport, Grid, ScalarField, VectorField,
};
