//! Graph-guided machine translation toolkit: scene-graph construction with
//! global super nodes, a cross-modal graph-attention adapter fused into a
//! small encoder–decoder backbone, and a two-stage training pipeline that
//! learns on multimodal graphs and generalizes to image-free inference.

pub mod adapter;
pub mod batch;
pub mod embeddings;
pub mod error;
pub mod nn;
pub mod parallel;
pub mod scene_graph;
pub mod util;

pub use error::{Error, Result};
