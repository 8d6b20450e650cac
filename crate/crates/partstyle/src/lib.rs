//! Part-tailored text-driven 3D mesh stylization.
//!
//! A neural style field (per-vertex colors and normal-direction displacements)
//! is optimized so that named mesh parts match the style words of a prompt like
//! `"red body, blue handle"`. Supervision comes from region-word alignment
//! scores in a grounding backend's vision-language space, computed on
//! differentiable CPU renders. Three interchangeable backends are provided:
//!
//! - `toy`: deterministic, differentiable color-word grounding for weight-free
//!   end-to-end runs and tests,
//! - `oracle`: geometric ground truth derived from part masks, for grading,
//! - `pretrained`: an adapter that drives an external model process.
//!
//! The pipeline: render the content mesh, localize each part phrase to grid
//! cells once per camera, then alternate between a part-level alignment loss
//! and an embedding (crop similarity) loss on renders of the styled mesh.

pub mod autodiff;
pub mod config;
pub mod field;
pub mod finetune;
pub mod fixtures;
pub mod grounding;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod render;
pub mod trainer;

pub use mesh::{PartitionedMesh, StylizedMesh};
