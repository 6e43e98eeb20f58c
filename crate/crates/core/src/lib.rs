//! Core of a desk-scale contrastive language-image pretraining lab.
//!
//! Everything in this crate is pure computation over in-memory buffers: the
//! reverse-mode tensor engine, the paired encoders, the contrastive and
//! self-supervised objectives, augmentation, tokenization, quality filtering,
//! the optimizer and FLOPs accounting, and the evaluation metrics. File
//! formats, the sweep runner and the command line live in the `clip-lab`
//! companion crate.
//!
//! The crate is `no_std` and needs only `alloc`.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;

/// Fixed text context length; every tokenized caption has exactly this many ids.
pub const CONTEXT_LENGTH: usize = 16;

/// Input resolution of the canonical image preprocessing.
pub const DEFAULT_RESOLUTION: usize = 224;
