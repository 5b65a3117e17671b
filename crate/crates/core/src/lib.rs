//! Numerical laboratory for Schrödinger operators `-u'' + V u` on a bounded
//! interval whose potential is a signed delta comb accumulating at the right
//! endpoint, perturbed by random kicks of size `lambda n^{-1/2}`.

pub mod acceptance;
pub mod comb;
pub mod config;
pub mod dd;
pub mod error;
pub mod linalg;
pub mod path;
pub mod prufer;
pub mod run;
pub mod spectral;
pub mod transfer;

pub use error::{Error, Result};
