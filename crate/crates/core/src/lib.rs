pub mod augment;
pub mod autodiff;
pub mod colorizer;
pub mod colorspace;
pub mod error;
pub mod keyview;
pub mod losses;
pub mod metrics;
pub mod rasterizer;
pub mod reconstruct;
pub mod scene;

pub use error::{Error, Result};
