//! Numerical toolkit for nonuniformly partially hyperbolic torus maps: adapted
//! norms, block certificates, quasi-shadowing and entropy counting.

pub mod entropy;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod lyapnorm;
pub mod oseledets;
pub mod regularity;
pub mod shadowing;
pub mod systems;

pub use error::{Error, Result};
