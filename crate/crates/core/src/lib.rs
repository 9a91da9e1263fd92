//! Frozen vision-transformer encoders, parameter-efficient adapters and a zoo
//! of segmentation heads, with the data, training and evaluation pipeline
//! around them.

pub mod assembly;
pub mod backbones;
pub mod config;
pub mod container;
pub mod data;
pub mod decoders;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod nn;
pub mod params;
pub mod peft;
pub mod seed;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
