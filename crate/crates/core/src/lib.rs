//! Co-evolutionary multi-objective search.
//!
//! Two proposers (a frozen one and a trainable one) take turns turning parent
//! pairs into offspring. Offspring are scored on several objectives, survive
//! by Pareto rank and crowding, and every prompt event is logged. Preference
//! pairs synthesized from the log drive periodic updates of the trainable
//! proposer through an external trainer contract.

pub mod cli;
pub mod config;
pub mod domain;
pub mod engine;
pub mod memory;
pub mod metrics;
pub mod objectives;
pub mod pareto;
pub mod proposers;
pub mod similarity;
pub mod synthesis;
pub mod trainer;
