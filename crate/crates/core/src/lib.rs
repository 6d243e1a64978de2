pub mod autodiff;
pub mod bench;
pub mod error;
pub mod graph;
pub mod io;
pub mod model;
pub mod msm;
pub mod pipeline;
pub mod rng;
pub mod train;
pub mod types;

pub use error::{Error, Result};
