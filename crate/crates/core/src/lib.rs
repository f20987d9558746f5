//! Cooperative trajectory prediction for road actors.
//!
//! The crate covers the full pipeline: scene data model and file formats
//! ([`scene`]), cooperative-role sampling and trajectory augmentation
//! ([`coop`]), heterogeneous graph construction ([`graph`]), a small
//! reverse-mode autodiff engine sized for the model ([`autodiff`]), the graph
//! network itself ([`network`]), the training loop with checkpointing
//! ([`training`]), displacement metrics and parameter sweeps ([`metrics`]),
//! and a procedural scenario generator used in place of a recorded dataset
//! ([`synth`]).

pub mod autodiff;
pub mod checks;
pub mod coop;
pub mod graph;
pub mod metrics;
pub mod network;
pub mod plot;
pub mod scene;
#[cfg(test)]
pub(crate) mod testutil;
pub mod synth;
pub mod training;
pub mod util;
