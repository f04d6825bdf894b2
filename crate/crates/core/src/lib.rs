pub mod autodiff;
pub mod cli;
pub mod decoder;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod imaging;
pub mod lens;
pub mod losses;
pub mod math;
pub mod optimize;
pub mod psf;
pub mod raytrace;
pub mod rng;
pub mod tolerance;

pub use error::{Error, Result};
