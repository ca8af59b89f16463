//! Music auto-tagging engine.
//!
//! The crate is organised as a pipeline:
//!
//! * [`tensor`] — dense f64 tensors, a reverse-mode autodiff tape, ADAM and
//!   Nesterov SGD steps.
//! * [`dsp`] — WAV loading, resampling, STFT, log mel-spectrograms, chunking.
//! * [`data`] — annotation tables, splits, batching, and a seeded synthetic
//!   corpus generator for desk-scale experiments.
//! * [`model`] — CNN front-ends over spectrograms or raw audio, CNN and
//!   Transformer-encoder back-ends, all expressed on the autodiff graph.
//! * [`train`] — the mixed ADAM→SGD schedule, AUROC/AUPR evaluation, and a
//!   binary checkpoint format.
//! * [`interpret`] — attention heat maps and tag-wise contribution maps,
//!   rendered as PPM images with CSV score dumps.

pub mod data;
pub mod dsp;
pub mod error;
pub mod interpret;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Tensor};
