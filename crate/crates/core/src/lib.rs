pub mod attack;
pub mod data;
pub mod datastats;
pub mod error;
pub mod exec;
pub mod nn;
pub mod prune;
pub mod rng;
pub mod sweep;
pub mod toymodel;
pub mod train;

pub use error::{Error, Result};
