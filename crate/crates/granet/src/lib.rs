//! GraNet: relation-aware attentional semantic labeling of airborne LiDAR
//! point clouds.
//!
//! The crate bundles a small f64 autodiff engine, the spatial machinery
//! (KNN, farthest point sampling, tiling), the local spatial discrepancy
//! attention convolution, the global relation-aware attention modules, the
//! multi-scale encoder-decoder network built from them, and the training
//! and evaluation pipeline around it all.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gra;
pub mod gradcheck;
pub mod losda;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod pointcloud;
pub mod spatial;
pub mod training;

pub use autodiff::{Tape, Tensor};
pub use config::{NetworkConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use network::{Block, GraNetModel};
pub use pointcloud::{ClassMap, Point, PointCloud};
