//! Structured clinical information extraction harness.
//!
//! The crate covers the full workflow: the closed extraction [`schema`], the
//! annotated [`corpus`], exact nearest-neighbour [`retrieval`] of in-context
//! examples, [`prompting`] for the three extraction setups, [`inference`]
//! against chat-completion endpoints, [`metrics`] for per-category scoring,
//! [`error_analysis`], and the annotation workflow in [`datasetgen`].

pub mod concurrency;
pub mod corpus;
pub mod datasetgen;
pub mod embedding;
pub mod error_analysis;
pub mod inference;
pub mod metrics;
pub mod prompting;
pub mod retrieval;
pub mod schema;
pub mod sidecar;
pub mod shuffle;
