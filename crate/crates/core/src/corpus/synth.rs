//! Synthetic multi-speaker corpus. Each speaker adds a fixed bias signature to
//! the first `signature_dim` feature dims; each word adds an enveloped
//! template to the remaining dims; everything gets Gaussian noise.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{build_vocab, group_segments, write_manifest, SpeakerSegment, TokenizerMode, Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::fsio;
use crate::rng::{named_rng, sub_rng};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub n_languages: usize,
    pub words_per_language: usize,
    pub n_utterances: usize,
    pub n_test_utterances: usize,
    pub feature_dim: usize,
    pub signature_dim: usize,
    pub max_utterance_s: f64,
    /// Inclusive range of words per segment.
    pub segment_words: [usize; 2],
    /// Inclusive range of frames per word.
    pub word_frames: [usize; 2],
    pub change_prob: f64,
    /// Force a speaker change at every segment boundary.
    pub alternate_speakers: bool,
    pub noise_std: f64,
    pub signature_scale: f64,
    pub token_scale: f64,
    pub frame_shift_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 4,
            n_languages: 2,
            words_per_language: 10,
            n_utterances: 40,
            n_test_utterances: 0,
            feature_dim: 16,
            signature_dim: 4,
            max_utterance_s: 15.0,
            segment_words: [4, 10],
            word_frames: [12, 20],
            change_prob: 0.7,
            alternate_speakers: false,
            noise_std: 0.3,
            signature_scale: 2.0,
            token_scale: 1.0,
            frame_shift_s: 0.01,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::TooFewSpeakers(self.n_speakers));
        }
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.n_languages == 0 || self.words_per_language == 0 {
            return bad("need at least one language and one word per language");
        }
        if self.signature_dim == 0 || self.signature_dim >= self.feature_dim {
            return bad("signature_dim must be in 1..feature_dim");
        }
        if self.segment_words[0] == 0 || self.segment_words[0] > self.segment_words[1] {
            return bad("segment_words must be a non-empty range starting at >= 1");
        }
        if self.word_frames[0] == 0 || self.word_frames[0] > self.word_frames[1] {
            return bad("word_frames must be a non-empty range starting at >= 1");
        }
        if !(0.0..=1.0).contains(&self.change_prob) {
            return bad("change_prob must be in [0, 1]");
        }
        if !(self.frame_shift_s > 0.0) || !(self.max_utterance_s > 0.0) {
            return bad("frame_shift_s and max_utterance_s must be positive");
        }
        let longest = self.segment_words[1] * self.word_frames[1];
        if longest as f64 * self.frame_shift_s * 2.0 > self.max_utterance_s {
            return bad("max_utterance_s must hold at least two of the longest segments");
        }
        Ok(())
    }

    fn frames_per_second(&self) -> f64 {
        (1.0 / self.frame_shift_s).round()
    }
}

/// Fixed speaker signatures, word templates and word spellings.
#[derive(Clone, Debug)]
pub struct World {
    pub signatures: Vec<Vec<f64>>,
    pub templates: Vec<Vec<f64>>,
    /// `words[language][j]`
    pub words: Vec<Vec<String>>,
}

impl World {
    pub fn new(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = named_rng(seed, "world");
        let sig_dim = cfg.signature_dim;
        let mut signatures: Vec<Vec<f64>> = Vec::new();
        let min_dist = cfg.signature_scale * (sig_dim as f64).sqrt() * 0.5;
        let mut tries = 0;
        while signatures.len() < cfg.n_speakers {
            tries += 1;
            if tries > 100_000 {
                return Err(Error::InvalidConfig(
                    "cannot place distinct speaker signatures; raise signature_dim".into(),
                ));
            }
            let raw: Vec<f64> = (0..sig_dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let sig: Vec<f64> = raw
                .iter()
                .map(|v| v / norm * cfg.signature_scale * (sig_dim as f64).sqrt())
                .collect();
            if signatures.iter().all(|s| dist(s, &sig) >= min_dist) {
                signatures.push(sig);
            }
        }
        let tok_dim = cfg.feature_dim - sig_dim;
        let n_words = cfg.n_languages * cfg.words_per_language;
        let templates = (0..n_words)
            .map(|_| {
                let raw: Vec<f64> = (0..tok_dim).map(|_| normal.sample(&mut rng)).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                raw.iter()
                    .map(|v| v / norm * cfg.token_scale * (tok_dim as f64).sqrt())
                    .collect()
            })
            .collect();
        let words = (0..cfg.n_languages)
            .map(|l| {
                (0..cfg.words_per_language)
                    .map(|j| spell(l * cfg.words_per_language + j))
                    .collect()
            })
            .collect();
        Ok(Self {
            signatures,
            templates,
            words,
        })
    }

    pub fn speaker_name(i: usize) -> String {
        format!("spk{i}")
    }

    /// Nearest signature over the signature dims of one frame.
    pub fn nearest_speaker(&self, frame: &[f64]) -> usize {
        let d = self.signatures[0].len();
        let mut best = (0, f64::INFINITY);
        for (k, s) in self.signatures.iter().enumerate() {
            let dd = dist(&frame[..d], s);
            if dd < best.1 {
                best = (k, dd);
            }
        }
        best.0
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Pronounceable, unique spelling for a word index.
fn spell(mut i: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut s = String::new();
    loop {
        s.push(C[i % C.len()] as char);
        i /= C.len();
        s.push(V[i % V.len()] as char);
        i /= V.len();
        if i == 0 {
            break;
        }
        i -= 1;
    }
    s
}

struct WordSpan {
    word: usize,
    speaker: usize,
    len: usize,
}

struct StreamSegment {
    speaker: usize,
    words: Vec<WordSpan>,
    start_frame: usize,
    end_frame: usize,
}

/// Generated corpus held in memory; see [`SynthCorpus::write`].
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub seed: u64,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub features: BTreeMap<String, FeatureMatrix>,
    /// Speaker index per feature frame, keyed by utterance id.
    pub frame_speakers: BTreeMap<String, Vec<usize>>,
    pub vocab: Vocabulary,
}

pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    let world = World::new(cfg, seed)?;
    let mut features = BTreeMap::new();
    let mut frame_speakers = BTreeMap::new();
    let train = generate_split(cfg, &world, seed, "train", cfg.n_utterances, &mut features, &mut frame_speakers)?;
    let test = generate_split(cfg, &world, seed, "test", cfg.n_test_utterances, &mut features, &mut frame_speakers)?;
    let all_words: Vec<String> = world.words.iter().flatten().cloned().collect();
    let vocab = build_vocab(&all_words, TokenizerMode::Word)?;
    Ok(SynthCorpus {
        config: cfg.clone(),
        seed,
        train,
        test,
        features,
        frame_speakers,
        vocab,
    })
}

fn generate_split(
    cfg: &SynthConfig,
    world: &World,
    seed: u64,
    split: &str,
    n: usize,
    features: &mut BTreeMap<String, FeatureMatrix>,
    frame_speakers: &mut BTreeMap<String, Vec<usize>>,
) -> Result<Vec<Utterance>> {
    let fps = cfg.frames_per_second();
    let mut out = Vec::with_capacity(n);
    let mut session = 0u64;
    while out.len() < n {
        let language = session as usize % cfg.n_languages;
        let mut rng = named_rng(seed, &format!("{split}/session/{session}"));
        let stream = generate_stream(cfg, &mut rng);
        let as_segments: Vec<SpeakerSegment> = stream
            .iter()
            .map(|s| SpeakerSegment {
                speaker: World::speaker_name(s.speaker),
                start_s: s.start_frame as f64 / fps,
                end_s: s.end_frame as f64 / fps,
                transcript: s.words.iter().map(|w| world.words[language][w.word].as_str()).collect::<Vec<_>>().join(" "),
                language_id: language,
            })
            .collect();
        let groups = group_segments(&as_segments, cfg.max_utterance_s);
        let mut cursor = 0;
        // The final group of a stream is usually truncated; drop it.
        for group in &groups[..groups.len().saturating_sub(1)] {
            if out.len() >= n {
                break;
            }
            let members = &stream[cursor..cursor + group.segments.len()];
            cursor += group.segments.len();
            let id = format!("{split}-{:05}", out.len());
            let (utt, feats, spk) = render(cfg, world, language, members, &id, seed)?;
            features.insert(id.clone(), feats);
            frame_speakers.insert(id, spk);
            out.push(utt);
        }
        session += 1;
    }
    Ok(out)
}

fn generate_stream<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<StreamSegment> {
    let target_frames = (3.0 * cfg.max_utterance_s * cfg.frames_per_second()) as usize;
    let mut segs = Vec::new();
    let mut frame = 0;
    let mut speaker = rng.random_range(0..cfg.n_speakers);
    while frame < target_frames {
        if !segs.is_empty() && (cfg.alternate_speakers || rng.random_bool(cfg.change_prob)) {
            let shift = rng.random_range(1..cfg.n_speakers);
            speaker = (speaker + shift) % cfg.n_speakers;
        }
        let n_words = rng.random_range(cfg.segment_words[0]..=cfg.segment_words[1]);
        let words: Vec<WordSpan> = (0..n_words)
            .map(|_| WordSpan {
                word: rng.random_range(0..cfg.words_per_language),
                speaker,
                len: rng.random_range(cfg.word_frames[0]..=cfg.word_frames[1]),
            })
            .collect();
        let len: usize = words.iter().map(|w| w.len).sum();
        segs.push(StreamSegment {
            speaker,
            words,
            start_frame: frame,
            end_frame: frame + len,
        });
        frame += len;
    }
    segs
}

fn render(
    cfg: &SynthConfig,
    world: &World,
    language: usize,
    members: &[StreamSegment],
    id: &str,
    seed: u64,
) -> Result<(Utterance, FeatureMatrix, Vec<usize>)> {
    let fps = cfg.frames_per_second();
    let origin = members[0].start_frame;
    let total = members.last().unwrap().end_frame - origin;
    let sig_dim = cfg.signature_dim;
    let mut frames = Mat::zeros(total, cfg.feature_dim);
    let mut speakers = Vec::with_capacity(total);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = sub_rng(seed, crate::rng::fnv1a(id.as_bytes()));
    let mut t = 0;
    let mut segments = Vec::with_capacity(members.len());
    for seg in members {
        for w in &seg.words {
            let template = &world.templates[language * cfg.words_per_language + w.word];
            for k in 0..w.len {
                let env = (std::f64::consts::PI * (k as f64 + 0.5) / w.len as f64).sin();
                let row = frames.row_mut(t);
                row[..sig_dim].copy_from_slice(&world.signatures[w.speaker]);
                for (v, tv) in row[sig_dim..].iter_mut().zip(template) {
                    *v = env * tv;
                }
                for v in row.iter_mut() {
                    // Stored as f32 on disk; keep memory and disk identical.
                    *v = (*v + noise.sample(&mut rng)) as f32 as f64;
                }
                speakers.push(w.speaker);
                t += 1;
            }
        }
        segments.push(SpeakerSegment::new(
            World::speaker_name(seg.speaker),
            (seg.start_frame - origin) as f64 / fps,
            (seg.end_frame - origin) as f64 / fps,
            seg.words.iter().map(|w| world.words[language][w.word].as_str()).collect::<Vec<_>>().join(" "),
            language,
        )?);
    }
    let utt = Utterance {
        id: id.to_owned(),
        language_id: language,
        segments,
        duration_s: total as f64 / fps,
        offset_s: 0.0,
        feature_file: Some(format!("features/{id}.scdf")),
        over_length: false,
    };
    Ok((utt, FeatureMatrix::new(frames, cfg.frame_shift_s)?, speakers))
}

pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const TEST_MANIFEST: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CONFIG_FILE: &str = "synth_config.json";

impl SynthCorpus {
    /// Write manifests, feature files, vocabulary and the config. Returns the
    /// written paths relative to `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        let mut written = Vec::new();
        write_manifest(&dir.join(TRAIN_MANIFEST), &self.train)?;
        written.push(TRAIN_MANIFEST.to_owned());
        if !self.test.is_empty() {
            write_manifest(&dir.join(TEST_MANIFEST), &self.test)?;
            written.push(TEST_MANIFEST.to_owned());
        }
        for utt in self.train.iter().chain(&self.test) {
            let rel = utt.feature_file.as_ref().expect("synthetic utterances carry features");
            self.features[&utt.id].save(&dir.join(rel))?;
            written.push(rel.clone());
        }
        fsio::write_atomic(&dir.join(VOCAB_FILE), serde_json::to_string_pretty(&self.vocab)?.as_bytes())?;
        written.push(VOCAB_FILE.to_owned());
        fsio::write_atomic(&dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)?.as_bytes())?;
        written.push(CONFIG_FILE.to_owned());
        Ok(written)
    }

    pub fn total_frames(&self) -> usize {
        self.features.values().map(FeatureMatrix::n_frames).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_utterances: 6,
            n_test_utterances: 2,
            max_utterance_s: 6.0,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_manifests() {
        let a = synth_corpus(&small(), 7).unwrap();
        let b = synth_corpus(&small(), 7).unwrap();
        let enc = |c: &SynthCorpus| {
            let recs: Vec<_> = c.train.iter().map(super::super::ManifestRecord::from).collect();
            fsio::to_jsonl(&recs).unwrap()
        };
        assert_eq!(enc(&a), enc(&b));
        assert_eq!(a.features, b.features);
        let c = synth_corpus(&small(), 8).unwrap();
        assert_ne!(enc(&a), enc(&c));
    }

    #[test]
    fn one_speaker_is_rejected() {
        let cfg = SynthConfig {
            n_speakers: 1,
            ..small()
        };
        assert!(matches!(synth_corpus(&cfg, 0), Err(Error::TooFewSpeakers(1))));
    }

    #[test]
    fn forced_alternation_gives_changes() {
        let cfg = SynthConfig {
            n_speakers: 2,
            alternate_speakers: true,
            ..small()
        };
        let c = synth_corpus(&cfg, 3).unwrap();
        for u in c.train.iter().chain(&c.test) {
            assert!(u.speaker_changes() >= 1, "{}", u.id);
        }
    }

    #[test]
    fn utterances_are_valid_and_aligned() {
        let cfg = small();
        let c = synth_corpus(&cfg, 11).unwrap();
        assert_eq!(c.train.len(), 6);
        assert_eq!(c.test.len(), 2);
        for u in c.train.iter().chain(&c.test) {
            u.validate(cfg.max_utterance_s).unwrap();
            let f = &c.features[&u.id];
            assert_eq!(f.n_frames() as f64 / 100.0, u.duration_s);
            assert_eq!(u.segments[0].start_s, 0.0);
            c.vocab.tokenize(&u.segments[0].transcript).unwrap();
        }
    }

    #[test]
    fn spellings_are_unique() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..500 {
            assert!(seen.insert(spell(i)));
        }
    }
}
