//! Window-split vision front-end for document images.
//!
//! The crate covers the path from a raw RGB image to a compact token
//! sequence, plus the text-side utilities that surround it:
//!
//! * resizing to a multiple-of-448 canvas and splitting into 448×448 windows
//! * a shifted-window transformer encoder with zero-initialized adapters
//! * image and token resamplers with a similarity-based token filter
//! * token redundancy analysis
//! * grounding markup in `(0, 1000)` normalized coordinates
//! * OCR-oriented evaluation metrics

pub mod archive;
pub mod config;
pub mod error;
pub mod grounding;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod redundancy;
pub mod resampler;
pub mod split;
pub mod swa;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Tensor, MASK_SENTINEL};
