//! Retrieval-augmented aesthetic image cropping.
//!
//! The pipeline: encode a query image, retrieve compositionally similar
//! professional embeddings from an index, fuse them with the query features
//! through projection and cross-attention, and decode a ranked set of
//! `(crop box, aesthetic score)` proposals from learnable anchors. Training
//! is either supervised (annotated crops with opinion scores) or weakly
//! supervised via canvas expansion and iterative pseudo-label refinement.
//! An evaluation harness provides IoU, boundary displacement, and the
//! `ACC_{K/N}` accuracy family.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod embed;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod hungarian;
pub mod model;
pub mod nn;
pub mod par;
pub mod render;
pub mod synth;
pub mod train;
pub mod weakgen;

pub use error::{Error, Result};
pub use geometry::{contains, disp, iou, to_pixels, CropBox, ImageSize, PixelRect};
