pub mod calib;
pub mod dialoguesim;
pub mod diffnet;
pub mod distill;
pub mod ensemble;
pub mod error;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod tracker;
pub mod uncmath;

pub use error::{Error, Result};
