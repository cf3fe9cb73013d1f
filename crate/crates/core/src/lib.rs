//! Amodal bird's-eye-view (BEV) scene layout estimation from a single image.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! * [`grid`] — BEV occupancy grids over a metric footprint: world↔cell
//!   mapping, rasterization, IoU, connected components, occlusion masks,
//!   and the `.bevg` file format.
//! * [`model`] — the context encoder, the static and dynamic layout
//!   decoders sharing that context, and the two patch discriminators.
//! * [`losses`] — supervised L2 plus least-squares adversarial objectives.
//! * [`mapgen`] — temporal sensor fusion: depth/lidar back-projection,
//!   odometry registration, and fused BEV ground-truth generation.
//! * [`training`] — alternating generator/discriminator optimization,
//!   augmentation, and unpaired prior-layout sampling.
//! * [`eval`] — static/occluded mIoU, vehicle mIoU and mAP, throughput.
//! * [`tracker`] — BEV multi-object tracking by maximum-IoU association.
//! * [`forecast`] — ConvLSTM encoder-decoder trajectory forecasting.
//! * [`synth`] — deterministic synthetic scene sequences so every stage is
//!   trainable and checkable without external datasets.
//!
//! The `bevlayout` binary wires these together behind subcommands; see the
//! repository README for usage.

pub mod dataset;
mod error;
pub mod eval;
pub mod forecast;
pub mod grid;
pub mod losses;
pub mod mapgen;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
