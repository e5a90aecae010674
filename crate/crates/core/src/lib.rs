pub mod align;
pub mod commands;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
