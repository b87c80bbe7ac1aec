//! CTC loss by log-space forward-backward, greedy decoding with `<st>`
//! posterior scaling, and an enumeration oracle.

mod decode;
mod loss;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fsio;

pub use decode::{
    collapse_alignment, ctc_greedy_decode, frame_argmax, DecodeConfig, DecodeResult, LogPosteriorMatrix,
    TimestampMode, ROW_TOLERANCE,
};
pub use loss::{brute_force_ctc, ctc_loss, min_frames, CtcLoss, BRUTE_FORCE_LIMIT};

/// One line of a hypothesis file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub times_s: Vec<f64>,
    pub st_times_s: Vec<f64>,
    pub lambda: f64,
}

pub fn write_hyps(path: &Path, hyps: &[HypRecord]) -> Result<()> {
    fsio::write_atomic(path, &fsio::to_jsonl(hyps)?)
}

pub fn read_hyps(path: &Path) -> Result<Vec<HypRecord>> {
    fsio::from_jsonl(&fsio::read_to_string(path)?)
}
