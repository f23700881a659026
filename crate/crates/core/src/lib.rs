pub mod audio;
pub mod config;
pub mod container;
pub mod discriminators;
pub mod error;
pub mod eval;
pub mod features;
pub mod generator;
pub mod losses;
pub mod optim;
pub mod pulse;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
