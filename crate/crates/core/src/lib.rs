//! Context-dependent knowledge-graph validation for medical question answering.
//!
//! The crate is organised bottom-up:
//!
//! * [`kg`] holds the immutable triplet store and its importers.
//! * [`subgraph`] builds the two-layer disease-centric subgraph.
//! * [`constraints`] stores the per-triplet applicability conditions.
//! * [`patient`] extracts patient context and decides constraint applicability.
//! * [`llm`] is the role-based chat-completion gateway with a scripted mock.
//! * [`validator`] runs the tool-using claim validator.
//! * [`pipeline`] orchestrates reasoner, validator and reconsideration over a dataset.
//! * [`stats`] holds McNemar testing, leakage classification and adjusted accuracy.
//! * [`dataset`] builds KG-grounded evaluation sets.
//! * [`config`] resolves run configuration and writes run manifests.

pub mod config;
pub mod constraints;
pub mod dataset;
pub mod error;
pub mod kg;
pub mod llm;
pub mod patient;
pub mod pipeline;
pub mod prompts;
pub mod stats;
pub mod subgraph;
pub mod validator;

pub use error::{QkgError, Result};
