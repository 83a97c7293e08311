//! Query-focused summarization over sets of related tables.
//!
//! A small decoder-only transformer is trained end to end on a synthetic
//! multi-table benchmark with a reverse-mode autodiff engine written in
//! plain Rust.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod table;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
