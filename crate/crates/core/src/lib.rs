//! Allocation-only core of a vision-and-language navigation agent that reads
//! its panorama through language-conditioned dynamic filters.
//!
//! * [`tensor`], [`graph`], [`params`], [`nn`], [`adam`], [`checkpoint`]: a small
//!   reverse-mode autodiff stack over `f64` tensors.
//! * [`sim`], [`episode`]: the navigation graph, six-action pose machine and ground-truth oracle.
//! * [`world`]: deterministic synthetic worlds, embeddings and instruction datasets.
//! * [`encoders`], [`agent`]: instruction and panorama encoders and the policy decoder.
//! * [`rollout`]: running an agent through an episode, with or without supervision.
//! * [`metrics`]: NE, SR, OSR and SPL.

#![no_std]

extern crate alloc;

pub mod adam;
pub mod agent;
pub mod checkpoint;
pub mod encoders;
pub mod episode;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod rollout;
pub mod sim;
pub mod tensor;
pub mod world;

pub use graph::{Graph, NodeId};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{Tensor, TensorError};
