//! Edge/cloud orchestration of ensemble-voting diabetes prediction.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataset`]: CSV loading, missing-value filtering, splitting, scaling, RFE.
//! - [`models`]: from-scratch classifiers and evaluation metrics.
//! - [`ensemble`]: hard/soft voting and sharded member training.
//! - [`pipeline`]: preprocessing plus training, packaged as a model bundle.
//! - [`protocol`]: the length-prefixed, HMAC-tagged JSON wire format.
//! - [`node`]: gateway, master and worker roles.
//! - [`bench`]: multi-process deployment scenarios with timing instrumentation.

pub mod bench;
pub mod dataset;
pub mod ensemble;
pub mod models;
pub mod node;
pub mod pipeline;
pub mod protocol;
