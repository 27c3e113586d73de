//! Bundle recommendation on a user-item-bundle tripartite graph.
//!
//! The crate trains relational graph-convolution models for user-bundle
//! link prediction with a leakage-safe mini-batch scheme (sampled target
//! edges are deleted from the graph before each propagation step), and
//! evaluates them with leave-one-out ranking against 99 sampled negatives.

pub mod cli;
pub mod data;
pub mod eval;
pub mod graph;
pub mod model;
pub mod numcore;
pub mod training;
