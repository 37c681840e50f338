//! Desk-scale simulator of curvature-aware heterogeneous federated
//! pruning: K clients train structured-pruned sub-models of a shared
//! classifier under non-IID data; the server scores parameter groups
//! with a second-order saliency, generates per-client masks, and
//! reconstructs heterogeneous sub-models into the global parameter
//! space before weighted aggregation.
//!
//! The crate is organized around the protocol's moving parts:
//!
//! - [`nn`]: the minimal dense+conv substrate with finite-difference
//!   oracles for gradients and diagonal curvature.
//! - [`data`]: synthetic blobs, IDX ingestion, Dirichlet partitioning.
//! - [`pruning`]: structured group maps, saliency criteria, masks.
//! - [`federation`]: the round state machine (dispatch, masked local
//!   SGD, reconstruction, weighted aggregation, noise bookkeeping).
//! - [`analysis`]: the loss-perturbation oracle, convergence
//!   diagnostics, cost accounting, and metrics CSV.
//! - [`experiment`]: declarative configs, the run/summarize/oracle
//!   entry points used by the CLI.

pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod oracle;
pub mod pruning;
pub mod seeds;

pub use error::{Error, Result};
