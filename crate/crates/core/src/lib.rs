//! Identification of structured linear Gaussian models, parametric uncertainty quantification,
//! robust H2 output-feedback synthesis and stochastic tube MPC built on the learned model.

pub mod cli;
pub mod data;
pub mod error;
pub mod gem;
pub mod lfr;
pub mod linalg;
pub mod model;
pub mod mpcdesign;
pub mod mpconline;
pub mod serde_mat;
pub mod sim;
pub mod smoother;
pub mod study;
pub mod synth;
#[cfg(test)]
pub(crate) mod testutil;
pub mod uq;

pub use error::{Error, Result};
