pub mod cli;
pub mod cohort;
pub mod error;
pub mod fusion;
pub mod modulation;
pub mod numnet;
pub mod smoothing;
pub mod survival;

pub use error::{Error, Result};
