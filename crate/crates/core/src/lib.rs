//! Discriminative segmental cascades.
//!
//! Segmental structured SVMs decoded over time-stamped weighted graphs, with
//! max-marginal pruning between levels of increasingly expensive features.

pub mod beam;
pub mod cascade;
pub mod compose;
pub mod corpus;
pub mod eval;
pub mod features;
pub mod graph;
pub mod hypothesis;
pub mod io;
pub mod learn;
pub mod prune;
pub mod synth;
pub mod workflow;
