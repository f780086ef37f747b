pub mod base_space;
pub mod cli;
pub mod dirichlet;
pub mod error;
pub mod functionals;
pub mod inequality;
pub mod mixing;
pub mod par;
pub mod poisson;
pub mod quadrature;
pub mod rng;
pub mod spectral;
pub mod stats;

pub use base_space::{BaseSpace, TestFunction};
pub use error::{Error, Result};
pub use mixing::{MixingKind, MixingMeasure};
