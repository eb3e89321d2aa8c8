//! Label-efficient open-set node classification.
//!
//! An active-learning loop that screens likely out-of-distribution nodes
//! with a `C+1`-way GCN filter, picks diverse and uncertain candidates with
//! K-Medoids over first-layer GCN features, trains a `C`-way classifier on
//! the annotated in-distribution nodes, and scores OOD-ness by prediction
//! entropy.

pub mod active;
pub mod config;
pub mod datasets;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod neural;
pub mod oracle;
pub mod report;
pub mod runner;
pub mod seed;
pub mod selector;
pub mod session;

pub use error::{Error, Result};
