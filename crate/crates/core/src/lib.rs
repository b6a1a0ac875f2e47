pub mod datamodel;
pub mod experiments;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod preprocess;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
