//! Affine modeling of linear, second-order-cone and semidefinite programs, solved with clarabel.

extern crate openblas_src;

pub mod expr;
pub mod problem;

pub use expr::{dot_const, lin_comb, AffMat, LinExpr};
pub use problem::{Problem, ReusableSolver, Settings, Solution, Status};
