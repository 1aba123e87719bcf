pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod posemodel;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
