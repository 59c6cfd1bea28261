pub mod config;
pub mod defect;
pub mod error;
pub mod experiments;
pub mod fft;
pub mod lattice;
pub mod model;
pub mod montecarlo;
pub mod par;
pub mod scaling;
pub mod special;
pub mod spin;
pub mod summation;

pub use error::{Error, Result};
