//! Single-stage detector that localizes a C-shaped structure and classifies
//! the image into one of two classes, with Eigen-CAM heatmaps and a hold-out
//! evaluation protocol over a procedurally generated corpus.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndtensor`]: tensors and a reverse-mode autodiff graph.
//! * [`detector`]: CSP backbone, SPP + PAN neck, 3-scale head, decoding.
//! * [`losses`]: CIoU / BCE objective and target assignment.
//! * [`augment`], [`dataset`]: mosaic/flip/gamma and the synthetic corpus.
//! * [`train`]: SGD loop and the hold-out driver.
//! * [`postprocess`], [`evalmetrics`], [`eigencam`]: inference side.
//! * [`weightfile`], [`config`], [`render`]: persistence and outputs.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod eigencam;
mod error;
pub mod evalmetrics;
pub mod geometry;
pub mod losses;
pub mod ndtensor;
pub mod parallel;
pub mod postprocess;
pub mod render;
pub mod train;
pub mod weightfile;

pub use error::{Error, Result};
pub use geometry::{BBox, GtBox};
pub use parallel::Exec;
