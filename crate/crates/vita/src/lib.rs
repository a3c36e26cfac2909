pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod optim;
pub mod priors;
pub mod schedule;

pub use error::{Result, VitaError};
