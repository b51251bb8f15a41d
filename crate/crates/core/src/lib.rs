pub mod anchored;
pub mod config;
pub mod coupling;
pub mod error;
pub mod evalharness;
pub mod pipeline;
pub mod solver;
pub mod tensornet;
pub mod timesamplers;
pub mod toydata;
pub mod training;
pub mod util;
pub mod velocityfield;

pub use error::{Error, Result};
