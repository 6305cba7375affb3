pub mod bounds;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod model;
pub mod modes;
pub mod ps;
pub mod seed;
pub mod sim;
pub mod workload;

pub use error::{Error, Result};
