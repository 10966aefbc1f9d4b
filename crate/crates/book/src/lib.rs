//! Runs the code blocks of the guide in `book/src` as doc-tests.
//!
//! mdbook cannot link external crates when testing, so each chapter is
//! included here as the docs of an empty module and `cargo test --doc`
//! does the rest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/streams.md")]
pub mod streams {}
#[doc = include_str!("../../../book/src/threshold.md")]
pub mod threshold {}
#[doc = include_str!("../../../book/src/class-weights.md")]
pub mod class_weights {}
#[doc = include_str!("../../../book/src/alignment.md")]
pub mod alignment {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
