pub mod datagen;
pub mod depthmap;
pub mod descnet;
pub mod error;
pub mod geomatch;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod losses;
pub mod params;
pub mod raster;
pub mod retrieval;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
