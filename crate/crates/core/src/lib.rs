//! Harness search: candidate harness programs are proposed by an external
//! command, gated on a smoke task, scored on accuracy and additional context,
//! and kept in an append-only run directory that the proposer reads back.

pub mod dataset;
pub mod evaluator;
pub mod harness;
pub mod llm;
pub mod metrics;
pub mod reference;
pub mod search;
pub mod store;
