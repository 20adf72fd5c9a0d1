//! Inference compilation for a small embedded probabilistic programming
//! runtime.
//!
//! Models are Rust programs that call `sample` and `observe` through an
//! [`runtime::ExecutionHandle`]. The [`compiler`] trains a recurrent proposal
//! network on traces drawn from the unconstrained model, and the
//! [`sis`] engine uses the resulting [`neural::ProposalArtifact`] as the
//! proposal for sequential importance sampling.

pub mod cli;
pub mod compiler;
pub mod distributions;
pub mod evaluate;
pub mod models;
pub mod neural;
pub mod runtime;
pub mod sis;
pub mod trace;
pub mod wire;
