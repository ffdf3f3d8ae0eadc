//! ViT-B/16 inference with full trace capture, plus the analysis toolkit
//! built on top of it: tile-basis visualization of neurons and embeddings
//! propagated through attention, occlusion and grid-shuffle protocols,
//! clustering measures over patch embeddings, and a numerical harness for
//! the contraction behavior of row-stochastic attention dynamics.
//!
//! Everything is CPU-only `f32` (the dynamics harness uses `f64`), with no
//! ML framework dependency. Weights load from a small self-describing
//! binary archive; images load from PNG or binary PPM.

pub mod archive;
pub mod cluster;
pub mod dynamics;
pub mod error;
pub mod image;
pub mod labels;
pub mod model;
pub mod perturb;
pub mod rng;
pub mod tensor;
pub mod tsne;
pub mod vis;

pub use error::{Error, Result};
pub use tensor::Tensor;
