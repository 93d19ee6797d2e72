//! Desk-scale meta-reinforcement learning with language instructions.
//!
//! A single memory-augmented policy learns families of instructed 2D
//! manipulation tasks. Episodes interleave instruction phases (word
//! embeddings as observations) with trial phases (environment
//! interaction); training couples a FIFO-buffered constrained policy
//! optimizer with per-task adaptively normalized value targets.

pub mod cli;
pub mod config;
pub mod envs;
pub mod eval;
pub mod lang;
pub mod learner;
pub mod metrics;
pub mod plot;
pub mod policy;
pub mod popart;
pub mod protocol;
pub mod seeding;
pub mod train;
