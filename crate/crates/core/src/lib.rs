//! Motion-robust remote photoplethysmography (rPPG) for face anti-spoofing.
//!
//! The pipeline aligns every frame of a face video to a template frame by
//! chaining keypoint-based affine hops through intermediate frames (chosen by
//! dynamic programming, with facial landmarks as drift anchors), extracts
//! per-ROI colour traces in RGB/YUV/Lab, band-pass filters them, weights them
//! by vessel density and stacks them into `[24, 120, 18]` spatial-temporal
//! tensors for liveness scoring.
//!
//! A synthetic-video harness with exact ground truth lives in [`synth`].

pub mod affine;
pub mod config;
pub mod error;
pub mod features;
pub mod filter;
pub mod image;
pub mod ingest;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod signal;
pub mod stitch;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
