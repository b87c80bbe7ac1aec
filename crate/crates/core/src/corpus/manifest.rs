use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SpeakerSegment, Utterance};
use crate::error::Result;
use crate::fsio;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub speaker: String,
    pub start_s: f64,
    pub end_s: f64,
    pub transcript: String,
}

/// One line of a corpus manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub duration_s: f64,
    pub language_id: usize,
    pub segments: Vec<SegmentRecord>,
    #[serde(default)]
    pub feature_file: Option<String>,
}

impl From<&Utterance> for ManifestRecord {
    fn from(u: &Utterance) -> Self {
        Self {
            id: u.id.clone(),
            duration_s: u.duration_s,
            language_id: u.language_id,
            segments: u
                .segments
                .iter()
                .map(|s| SegmentRecord {
                    speaker: s.speaker.clone(),
                    start_s: s.start_s,
                    end_s: s.end_s,
                    transcript: s.transcript.clone(),
                })
                .collect(),
            feature_file: u.feature_file.clone(),
        }
    }
}

impl ManifestRecord {
    pub fn into_utterance(self, max_dur_s: f64) -> Result<Utterance> {
        let language_id = self.language_id;
        let segments = self
            .segments
            .into_iter()
            .map(|s| SpeakerSegment::new(s.speaker, s.start_s, s.end_s, s.transcript, language_id))
            .collect::<Result<Vec<_>>>()?;
        let over_length = self.duration_s > max_dur_s && segments.len() == 1;
        let utt = Utterance {
            id: self.id,
            language_id,
            segments,
            duration_s: self.duration_s,
            offset_s: 0.0,
            feature_file: self.feature_file,
            over_length,
        };
        utt.validate(max_dur_s)?;
        Ok(utt)
    }
}

pub fn write_manifest(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let records: Vec<ManifestRecord> = utterances.iter().map(ManifestRecord::from).collect();
    fsio::write_atomic(path, &fsio::to_jsonl(&records)?)
}

/// Read and validate a manifest. Utterances longer than `max_dur_s` are only
/// accepted when they consist of a single segment.
pub fn read_manifest(path: &Path, max_dur_s: f64) -> Result<Vec<Utterance>> {
    let text = fsio::read_to_string(path)?;
    fsio::from_jsonl::<ManifestRecord>(&text)?
        .into_iter()
        .map(|r| r.into_utterance(max_dur_s))
        .collect()
}
