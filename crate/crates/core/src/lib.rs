pub mod analytics;
pub mod cluster;
pub mod devices;
pub mod error;
pub mod fusion;
pub mod gkp;
pub mod sqec;
pub mod topo;

pub use error::{Error, Result};
