//! Differentiable Gaussian-surfel avatar engine.

pub mod articulation;
pub mod avatar;
pub mod camera;
pub mod error;
pub mod field;
pub mod image;
pub mod io;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod mesh;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod shapes;
pub mod spatial;
pub mod surfel;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
