//! Sectional solver and analysis toolkit for the coagulation-fragmentation
//! equation on `(0, 1]` coupled to a prescribed large-cluster reservoir on `(1, ∞)`.

pub mod analysis;
pub mod boundary;
pub mod error;
pub mod kernel;
pub mod operators;
pub mod oracle;
pub mod profile;
pub mod io;
pub mod quadrature;
pub mod scenario;
pub mod solver;
pub mod state;

pub use error::{Error, Result};
