pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fixtures;
pub mod gradsuite;
pub mod index;
pub mod io_util;
pub mod mapper;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prompting;
pub mod rng;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeededRng;
