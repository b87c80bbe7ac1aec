//! Speaker change detection through `<st>`-augmented CTC transcription.
//!
//! The crate covers the whole desk-scale loop: synthetic speaker-labelled
//! corpora, a log-mel frontend, a small chunk-attention encoder trained with
//! CTC (after masked-prediction and ASR pretraining), greedy decoding with
//! `<st>` posterior scaling, and interval-based precision/recall/F1 plus
//! `<st>`-stripped WER.

pub mod bestrq;
pub mod corpus;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod features;
pub mod fsio;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
