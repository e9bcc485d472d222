//! Deterministic federated document-VQA training simulator.

pub mod client;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod fsp;
pub mod metrics;
pub mod orchestrator;
pub mod partition;
pub mod seed;
pub mod server;
pub mod vector;

pub use error::{Error, Result};
