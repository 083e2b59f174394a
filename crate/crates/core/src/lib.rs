//! Semiparametric calculus on finite sample spaces.
//!
//! The crate builds submodels, scores, pathwise derivatives, influence
//! functions and estimating functions over finite atom sets, and checks
//! numerically that Neyman orthogonality of an estimating function and
//! pathwise differentiability of its target line up.

pub mod ate;
pub mod cli;
pub mod error;
pub mod estimating;
pub mod functional;
pub mod input;
pub mod model;
pub mod numdiff;
pub mod report;
pub mod submodel;
pub mod tolerance;

pub use error::{Error, Result};
pub use model::{Distribution, RealFunction, SampleSpace, ScoreFunction};
pub use tolerance::Tolerances;
