//! Traffic-flow-aware lane feature fusion.
//!
//! Tracked-object trajectories are aligned to the current ego frame,
//! encoded over time with masked self-attention, and fused with lane
//! feature rows through block-masked cross-attention.

pub mod experiment;
pub mod flow_extract;
pub mod geometry;
pub mod gradcheck_suite;
pub mod neural;
pub mod pipeline;
pub mod scenesynth;
pub mod spatial_enc;
pub mod temporal_enc;
pub mod tensor_io;
