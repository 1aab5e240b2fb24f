//! Doctest harness for the book under `book/`.
//!
//! Each chapter is included as a documented module, so `cargo test --doc
//! -p psa-book` compiles and runs every fenced Rust snippet in the book.
//! When a library change breaks a snippet, this crate fails the build
//! instead of letting the book drift.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}

#[doc = include_str!("../../../book/src/prompts_and_parsing.md")]
pub mod prompts_and_parsing {}

#[doc = include_str!("../../../book/src/retrieval.md")]
pub mod retrieval {}

#[doc = include_str!("../../../book/src/rendering.md")]
pub mod rendering {}

#[doc = include_str!("../../../book/src/scoring.md")]
pub mod scoring {}

#[doc = include_str!("../../../book/src/replay.md")]
pub mod replay {}

#[doc = include_str!("../../../book/src/reporting.md")]
pub mod reporting {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

#[doc = include_str!("../../../book/src/configuration.md")]
pub mod configuration {}
