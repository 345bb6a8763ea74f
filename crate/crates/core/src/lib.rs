//! Forensic residual analysis for synthetic-music detection.
//!
//! The pipeline decodes audio to 44.1 kHz mono, cuts it into 4-second
//! segments, extracts a bounded-mask residual from each segment's
//! magnitude spectrogram, turns the residual into a seven-channel
//! harmonic/percussive feature image and scores it with a compact CNN.
//! Song verdicts take the median segment probability.
//!
//! Alongside the pipeline the crate carries the training phases at desk
//! scale and an evaluation harness (metrics, ROC sweeps, per-subset sanity
//! gates, codec sweeps, effective-bandwidth fingerprints, missing-prediction
//! accounting).

pub mod audio_io;
pub mod bandwidth;
pub mod bench;
pub mod codecs;
pub mod error;
pub mod features;
pub mod nn;
pub mod pipeline;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};

/// Book chapters, compiled here so their examples run as doc-tests.
#[doc(hidden)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod chapter0 {}
    #[doc = include_str!("../../../book/src/features.md")]
    pub mod chapter1 {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod chapter2 {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod chapter3 {}
    #[doc = include_str!("../../../book/src/codecs.md")]
    pub mod chapter4 {}
    #[doc = include_str!("../../../book/src/formats.md")]
    pub mod chapter5 {}
}
