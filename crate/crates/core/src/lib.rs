//! Class-imbalanced multi-class image classification: augmentation,
//! balanced sampling, focal loss, AdamW, combined-score checkpointing,
//! probability-averaging ensembles and evaluation metrics.

pub mod augment;
pub mod catalog;
pub mod cli;
pub mod config;
pub mod data_io;
pub mod ensemble;
pub mod error;
pub mod image;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod sampling;
pub mod trainloop;

pub use catalog::ClassCatalog;
pub use error::{Error, Result};
pub use image::ImageBuffer;
pub use matrix::{Matrix, ProbMatrix};
pub use nn::{Arch, ModelParams};
