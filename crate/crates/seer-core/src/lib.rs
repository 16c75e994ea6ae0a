//! Latent component regression of a dependent variable group on several
//! predictor groups, built on weighted-triplet linear algebra.

pub mod criteria;
pub mod error;
pub mod linalg;
pub mod pls;
pub mod seer;

pub use error::{Error, Result};
