pub mod autodiff;
pub mod ctensor;
pub mod data;
pub mod encodings;
pub mod evaluation;
mod error;
pub mod layers;
pub mod models;
pub mod training;

pub use error::{CdsError, Result};
