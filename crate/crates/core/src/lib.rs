pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod inference;
pub mod losses;
pub mod masks;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod styles;
pub mod svgl;
pub mod training;

pub use error::{Error, Result};
