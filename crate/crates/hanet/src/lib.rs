//! Hierarchical video-text retrieval library.
//!
//! Videos and captions are parsed into event/action/entity semantic levels,
//! encoded into individual, local and global representations, aligned across
//! modalities at every level, and trained end to end with a ranking plus
//! concept-classification objective. Everything runs on a small built-in
//! reverse-mode autodiff engine so the whole pipeline is dependency-light
//! and deterministic.

pub mod corpus;
pub mod align;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod text;
pub mod train;
pub mod video;
pub mod io;
pub mod tensor;

pub use error::{Error, Result};
