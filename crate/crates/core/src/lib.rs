pub mod data;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod losses;
pub mod mlp;
pub mod ndcore;
pub mod optim;
pub mod real;
pub mod stochastics;

pub use error::{Error, Result};
