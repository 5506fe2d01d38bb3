//! Graph-scheduled multimodal contrastive learning.
//!
//! Per-modality encoders are trained with a pairwise contrastive objective
//! whose pairing structure is a dynamically re-estimated modality graph,
//! either fully connected or a minimum spanning tree over correlation
//! distances with node pruning. Evaluation classifies by highest cosine
//! against concatenated per-class prototypes, masking absent modalities.

pub mod alignment;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod graph;
pub mod numerics;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
