//! Core library for `cmdse`: an open-vocabulary human-object interaction
//! detector built as a set-prediction problem, exercised end to end on
//! synthetic scenes.
//!
//! The pipeline: frozen visual and text encoders feed a weight-shared
//! transformer decoder that is run once per requested feature level; each
//! decoded query is classified against two text embedding banks (interaction
//! names and body-part state descriptions) whose logits are fused with
//! learnable weights; predictions are matched to ground truth with a
//! Hungarian assignment whose cost includes a level/distance agreement term,
//! so that shallow levels learn close-range interactions and deep levels
//! distant ones.

pub mod boxes;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod losses;
pub mod matching;
pub mod nn;
pub mod rng;
pub mod semantics;
pub mod synthgen;
pub mod trainer;

pub mod numcore;

pub use error::{Error, Result};
