//! Runs every Rust code block in the guide as a documentation test, so the
//! book cannot drift from the library. Each chapter becomes one module; the
//! chapter text is the module's documentation.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/getting-started.md")]
pub mod getting_started {}

#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}

#[doc = include_str!("../../../book/src/windows.md")]
pub mod windows {}

#[doc = include_str!("../../../book/src/encoder.md")]
pub mod encoder {}

#[doc = include_str!("../../../book/src/resampling.md")]
pub mod resampling {}

#[doc = include_str!("../../../book/src/redundancy.md")]
pub mod redundancy {}

#[doc = include_str!("../../../book/src/grounding.md")]
pub mod grounding {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}
