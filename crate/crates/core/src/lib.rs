//! Prompt-conditioned imitation learning for multi-object grasping.
//!
//! The crate covers the full loop: a deterministic planar pick-and-lift
//! world ([`sim`]), scripted multimodal demonstrations ([`expert`]), frozen
//! feature extractors including a promptable tracker with temporal memory
//! ([`perception`]), offline feature caching ([`cache`]), a feed-forward
//! action-chunk head trained with a mean squared error objective
//! ([`policy`]), the asynchronous chunked-action runtime ([`runtime`]) and
//! the experiment harness ([`eval`]).

pub mod cache;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod expert;
pub mod geometry;
pub mod perception;
pub mod policy;
pub mod rng;
pub mod runtime;
pub mod sim;

pub use error::{Error, Result};
