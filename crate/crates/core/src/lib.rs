//! Dense top-view semantic segmentation of single-sweep LiDAR scans.
//!
//! The pipeline rasterizes a point cloud into vertical pillars, encodes
//! the pillars with a shared point network, casts rays from the sensor to
//! build a dense observability channel, and segments the resulting
//! pseudo image with a modified UNet. Three optional attention blocks
//! (LSTM over a PCA ordering of the pillars, key-node graph attention
//! built from feature-steered graph convolutions, and per-pillar
//! attention) re-weight the pillar features before encoding.
//!
//! Everything numerical runs on a small reverse-mode tape in [`nn`] so
//! every block can be checked against central differences.

pub mod attention;
pub mod augment;
pub mod config;
pub mod dataio;
pub mod error;
pub mod labels;
pub mod model;
pub mod nn;
pub mod occupancy;
pub mod par;
pub mod pillars;
pub mod render;
pub mod verify;

pub use error::{Error, Result};
