pub mod ensemble;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod augment;
pub mod config;
pub mod data;
pub mod model;
pub mod postprocess;
pub mod pretrain;
pub mod run;
pub mod raster;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
