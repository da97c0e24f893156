//! Research harness for availability attacks on retrieval-augmented
//! generation: optimizes single retrievable blocking documents against a
//! surrogate RAG environment with an attacker/judge loop and a reusable
//! strategy library, then evaluates transfer, robustness, and defenses
//! against simulated target systems.
//!
//! All model roles run over pluggable backends; the scripted backend makes
//! every pipeline stage reproducible offline.

pub mod corpus;
pub mod error;
pub mod library;
pub mod retrieval;

pub use error::{Error, Result};
