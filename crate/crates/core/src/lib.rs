mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod ggm;
pub mod kernel;
pub mod mex;
pub mod network;
pub mod numdiff;
pub mod pipeline;
pub mod similarity;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Result, SimNetError};
