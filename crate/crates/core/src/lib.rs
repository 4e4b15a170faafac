pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod cartesian;
pub mod cli;
pub mod decoder;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result, WeightError};
