//! Zero-shot node classification on text-attributed graphs from bundle-level
//! labels.
//!
//! The pipeline samples bundles of nearby nodes, asks an annotator for each
//! bundle's majority class, trains a two-layer GCN against those bundle labels
//! and periodically evicts members the model is least confident about.

pub mod annotate;
pub mod bench;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod jsonl;
pub mod sampling;
pub mod supervise;

pub use error::{Error, Result};
