//! Rule-driven routing for hybrid-source retrieval-augmented question answering.
//!
//! Each query is sent down one of four augmentation paths (database facts,
//! document passages, both, or neither) chosen by interpretable additive rules.
//! Routing decisions are reused through an embedding-similarity meta-cache,
//! and the rule set is refined from batched QA outcomes.

pub mod cache;
pub mod evolution;
pub mod grading;
pub mod harness;
pub mod qa;
pub mod retrieval;
pub mod router;
pub mod rules;
pub mod text;
