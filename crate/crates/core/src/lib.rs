pub mod basis;
pub mod bench;
pub mod cli;
pub mod cokriging;
pub mod config;
pub mod covariance;
pub mod deepkriging;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod simulate;
pub mod spatial;
pub mod special;
pub mod uncertainty;

pub use error::{Error, Result};
