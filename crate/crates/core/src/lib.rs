//! Compressed-history student modeling.
//!
//! Student interaction histories are compressed into `m` vectors per
//! interaction by a small bidirectional encoder, projected into a decoder's
//! embedding space and combined with an uncompressed task instruction. One
//! decoder serves four tasks: knowledge recommendation, knowledge tracing,
//! time cost prediction and user answer prediction.
//!
//! The crate also carries an exact, integer-byte VRAM cost model for
//! transformer training and inference ([`vram`]), a synthetic cohort
//! generator with planted latent skills ([`cohort`]) and the experiment
//! pipeline driven by the `edu` binary ([`pipeline`]).

pub mod cohort;
pub mod error;
pub mod interaction;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod tasks;
pub mod vram;

pub use error::{Error, Result};
