//! Fog-robust domain-adaptive object detection at desk scale.
//!
//! The crate bundles a small reverse-mode differentiation engine, the fog
//! image-formation model with dark-channel-prior dehazing, a synthetic scene
//! renderer, the detector and its auxiliary heads, the adaptation losses, the
//! two-stage mean-teacher training loop, and detection evaluation.

pub mod tensor;
pub mod fog;
pub mod boxes;
pub mod scene;
pub mod model;
pub mod loss;
pub mod eval;
pub mod train;
pub mod experiment;
