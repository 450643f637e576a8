//! Matrix-free P1 finite elements on block-structured tetrahedral and triangular grids
//! with stencil scaling for variable coefficients.

pub mod error;
pub mod mesh;
pub mod stencil;
pub mod jet;
pub mod coefficients;
pub mod operators;
pub mod oracle;
pub mod multigrid;
pub mod analysis;
pub mod costmodel;
pub mod experiments;

pub use error::{Error, Result};
