pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod keypoint;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
