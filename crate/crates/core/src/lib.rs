//! Interactive segmentation as a probe for frozen feature upsamplers.
//!
//! A frozen vision transformer and a frozen upsampler produce dense features;
//! a trainable click encoder and a light segmentation head are fitted on top.
//! The crate carries everything needed to train and score such probes:
//!
//! * [`tensor`]: a small dense tensor library with reverse-mode autodiff.
//! * [`clicks`]: mask morphology, the deterministic evaluation clicker and the
//!   randomized training samplers.
//! * [`upsample`]: bilinear, nearest, stacked joint bilateral and ingested
//!   feature upsampling, plus PCA visualization.
//! * [`model`]: the probe architecture (backbone, click encoders, heads).
//! * [`train`] and [`eval`]: the optimization loop and the NoC / IoU@k protocol.
//! * [`data`]: datasets, the synthetic corpus and the tensor container format.

pub mod clicks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;
pub mod upsample;

pub use error::{Error, Result};
