//! Speaker-labelled transcripts, the toy tokenizer, `<st>` target
//! construction and segment grouping.

mod manifest;
pub mod synth;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{read_manifest, write_manifest, ManifestRecord, SegmentRecord};
pub use synth::{synth_corpus, SynthConfig, SynthCorpus, World};

pub const BLANK_TOKEN: &str = "<blank>";
pub const ST_TOKEN: &str = "<st>";
pub const BLANK_ID: usize = 0;
pub const ST_ID: usize = 1;

/// Default cap on grouped utterance length, in seconds.
pub const DEFAULT_MAX_UTTERANCE_S: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerSegment {
    pub speaker: String,
    pub start_s: f64,
    pub end_s: f64,
    pub transcript: String,
    pub language_id: usize,
}

impl SpeakerSegment {
    pub fn new(
        speaker: impl Into<String>,
        start_s: f64,
        end_s: f64,
        transcript: impl Into<String>,
        language_id: usize,
    ) -> Result<Self> {
        let seg = Self {
            speaker: speaker.into(),
            start_s,
            end_s,
            transcript: transcript.into(),
            language_id,
        };
        seg.validate()?;
        Ok(seg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start_s >= 0.0 && self.start_s < self.end_s && self.end_s.is_finite()) {
            return Err(Error::InvalidSegment(format!(
                "speaker {} has bad span [{}, {}]",
                self.speaker, self.start_s, self.end_s
            )));
        }
        if self.transcript.split_whitespace().next().is_none() {
            return Err(Error::InvalidSegment(format!(
                "empty transcript for speaker {} at {}",
                self.speaker, self.start_s
            )));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub language_id: usize,
    pub segments: Vec<SpeakerSegment>,
    /// Seconds; measured from `offset_s`.
    pub duration_s: f64,
    /// Start of this utterance in its source stream. Zero once rebased.
    pub offset_s: f64,
    pub feature_file: Option<String>,
    /// Set when a single segment alone exceeds the grouping limit.
    pub over_length: bool,
}

impl Utterance {
    pub fn validate(&self, max_dur_s: f64) -> Result<()> {
        let mut prev_end = self.offset_s;
        for (i, seg) in self.segments.iter().enumerate() {
            seg.validate()?;
            if seg.start_s < prev_end - 1e-9 {
                return Err(Error::InvalidSegment(format!(
                    "utterance {}: segment {i} starts at {} before previous end {prev_end}",
                    self.id, seg.start_s
                )));
            }
            prev_end = seg.end_s;
        }
        if self.duration_s + 1e-9 < prev_end - self.offset_s {
            return Err(Error::InvalidSegment(format!(
                "utterance {}: duration {} shorter than last segment end",
                self.id, self.duration_s
            )));
        }
        if !self.over_length && self.duration_s > max_dur_s + 1e-9 {
            return Err(Error::InvalidSegment(format!(
                "utterance {}: duration {} exceeds limit {max_dur_s}",
                self.id, self.duration_s
            )));
        }
        Ok(())
    }

    /// Number of adjacent segment pairs with differing speakers.
    pub fn speaker_changes(&self) -> usize {
        self.segments
            .windows(2)
            .filter(|w| w[0].speaker != w[1].speaker)
            .count()
    }

    /// Shift all times so the utterance starts at zero.
    pub fn rebase(&mut self) {
        let off = self.offset_s;
        if off == 0.0 {
            return;
        }
        for seg in &mut self.segments {
            seg.start_s -= off;
            seg.end_s -= off;
        }
        self.offset_s = 0.0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Char,
    Word,
}

impl std::str::FromStr for TokenizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Self::Char),
            "word" => Ok(Self::Word),
            other => Err(Error::InvalidConfig(format!("unknown tokenizer mode {other:?}"))),
        }
    }
}

/// Splits text into symbols. Whitespace is normalized to single spaces first.
pub fn split_symbols(text: &str, mode: TokenizerMode) -> Vec<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    match mode {
        TokenizerMode::Word => words.into_iter().map(str::to_owned).collect(),
        TokenizerMode::Char => words.join(" ").chars().map(String::from).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    mode: TokenizerMode,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    blank_id: usize,
    st_id: usize,
    mode: TokenizerMode,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.blank_id != BLANK_ID || f.st_id != ST_ID {
            return Err(Error::format("vocabulary", "reserved ids must be blank=0, <st>=1"));
        }
        Vocabulary::from_tokens(f.tokens, f.mode)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            tokens: v.tokens,
            blank_id: BLANK_ID,
            st_id: ST_ID,
            mode: v.mode,
        }
    }
}

impl Vocabulary {
    /// Build from the full token list (reserved tokens first).
    pub fn from_tokens(tokens: Vec<String>, mode: TokenizerMode) -> Result<Self> {
        if tokens.len() < 2 || tokens[BLANK_ID] != BLANK_TOKEN || tokens[ST_ID] != ST_TOKEN {
            return Err(Error::format(
                "vocabulary",
                "token list must start with <blank>, <st>",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            mode,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn blank_id(&self) -> usize {
        BLANK_ID
    }

    pub fn st_id(&self) -> usize {
        ST_ID
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Tokenize text. Never yields the reserved ids.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        split_symbols(text, self.mode)
            .into_iter()
            .map(|sym| match self.index.get(&sym) {
                Some(&id) if id != BLANK_ID && id != ST_ID => Ok(id),
                _ => Err(Error::OutOfVocabulary(sym)),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

/// Build a vocabulary over `transcripts`: blank, `<st>`, then sorted symbols.
pub fn build_vocab<S: AsRef<str>>(transcripts: &[S], mode: TokenizerMode) -> Result<Vocabulary> {
    let mut symbols = BTreeSet::new();
    for t in transcripts {
        for sym in split_symbols(t.as_ref(), mode) {
            if sym != BLANK_TOKEN && sym != ST_TOKEN {
                symbols.insert(sym);
            }
        }
    }
    if symbols.is_empty() {
        return Err(Error::NoSymbols);
    }
    if mode == TokenizerMode::Char {
        symbols.insert(" ".to_owned());
    }
    let mut tokens = vec![BLANK_TOKEN.to_owned(), ST_TOKEN.to_owned()];
    tokens.extend(symbols);
    Vocabulary::from_tokens(tokens, mode)
}

/// Target ids: no blank, every id in range.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i == BLANK_ID || i >= vocab_size) {
            return Err(Error::InvalidConfig(format!(
                "token id {bad} not allowed in a target (vocab size {vocab_size})"
            )));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self, id: usize) -> usize {
        self.0.iter().filter(|&&i| i == id).count()
    }
}

/// Tokenized transcripts with `<st>` between adjacent segments of different
/// speakers, plus one trailing `<st>` when `trailing_st` is set.
pub fn make_target(utt: &Utterance, vocab: &Vocabulary, trailing_st: bool) -> Result<TokenSeq> {
    let mut ids = Vec::new();
    for (i, seg) in utt.segments.iter().enumerate() {
        if i > 0 && seg.speaker != utt.segments[i - 1].speaker {
            ids.push(ST_ID);
        }
        ids.extend(vocab.tokenize(&seg.transcript)?);
    }
    if trailing_st && !utt.segments.is_empty() {
        ids.push(ST_ID);
    }
    Ok(TokenSeq(ids))
}

/// Plain transcript target, no speaker-change tokens.
pub fn make_asr_target(utt: &Utterance, vocab: &Vocabulary) -> Result<TokenSeq> {
    let mut ids = Vec::new();
    for seg in &utt.segments {
        ids.extend(vocab.tokenize(&seg.transcript)?);
    }
    Ok(TokenSeq(ids))
}

/// Greedy left-to-right packing of consecutive segments into utterances whose
/// span stays within `max_dur_s`. A lone segment longer than the limit becomes
/// its own utterance with `over_length` set. Segment times are kept as given;
/// each utterance records its start in `offset_s`.
pub fn group_segments(segments: &[SpeakerSegment], max_dur_s: f64) -> Vec<Utterance> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < segments.len() {
        let first = i;
        let start = segments[first].start_s;
        let mut j = i + 1;
        while j < segments.len() && segments[j].end_s - start <= max_dur_s {
            j += 1;
        }
        let group = segments[first..j].to_vec();
        let span = group.last().map_or(0.0, |s| s.end_s) - start;
        if span > max_dur_s {
            log::warn!(
                "segment at {start:.2}s spans {span:.2}s, longer than the {max_dur_s}s limit; kept whole"
            );
        }
        out.push(Utterance {
            id: format!("group-{:05}", out.len()),
            language_id: group[0].language_id,
            duration_s: span,
            offset_s: start,
            feature_file: None,
            over_length: span > max_dur_s,
            segments: group,
        });
        i = j;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(spk: &str, a: f64, b: f64, text: &str) -> SpeakerSegment {
        SpeakerSegment::new(spk, a, b, text, 0).unwrap()
    }

    fn utt(segs: Vec<SpeakerSegment>) -> Utterance {
        let dur = segs.last().unwrap().end_s;
        Utterance {
            id: "u".into(),
            language_id: 0,
            segments: segs,
            duration_s: dur,
            offset_s: 0.0,
            feature_file: None,
            over_length: false,
        }
    }

    #[test]
    fn char_vocab_includes_space() {
        let v = build_vocab(&["ab"], TokenizerMode::Char).unwrap();
        assert_eq!(v.tokens(), &["<blank>", "<st>", " ", "a", "b"]);
    }

    #[test]
    fn word_vocab_dedups() {
        let v = build_vocab(&["hi hi yo"], TokenizerMode::Word).unwrap();
        assert_eq!(v.tokens(), &["<blank>", "<st>", "hi", "yo"]);
    }

    #[test]
    fn empty_corpus_has_no_symbols() {
        let empty: [&str; 0] = [];
        assert!(matches!(
            build_vocab(&empty, TokenizerMode::Word),
            Err(Error::NoSymbols)
        ));
        assert!(matches!(
            build_vocab(&["   "], TokenizerMode::Char),
            Err(Error::NoSymbols)
        ));
    }

    #[test]
    fn reserved_strings_never_tokenize() {
        let v = build_vocab(&["a <st> b"], TokenizerMode::Word).unwrap();
        assert_eq!(v.len(), 4);
        assert!(matches!(v.tokenize("a <st>"), Err(Error::OutOfVocabulary(s)) if s == "<st>"));
    }

    #[test]
    fn target_between_speakers_with_trailing() {
        let texts = ["hello how are you", "i am good"];
        let v = build_vocab(&texts, TokenizerMode::Word).unwrap();
        let u = utt(vec![seg("A", 0.0, 2.0, texts[0]), seg("B", 2.0, 3.0, texts[1])]);
        let t = make_target(&u, &v, true).unwrap();
        let words: Vec<String> = v.detokenize(t.ids());
        assert_eq!(
            words.join(" "),
            "hello how are you <st> i am good <st>"
        );
        let t = make_target(&u, &v, false).unwrap();
        assert_eq!(t.count(ST_ID), 1);
        assert_ne!(*t.ids().last().unwrap(), ST_ID);
    }

    #[test]
    fn single_speaker_target_has_no_st() {
        let v = build_vocab(&["a b", "c"], TokenizerMode::Word).unwrap();
        let u = utt(vec![seg("A", 0.0, 1.0, "a b"), seg("A", 1.0, 2.0, "c")]);
        let t = make_target(&u, &v, false).unwrap();
        assert_eq!(t.ids(), &[2, 3, 4]);
    }

    #[test]
    fn aba_gives_two_st() {
        let v = build_vocab(&["a"], TokenizerMode::Word).unwrap();
        let u = utt(vec![
            seg("A", 0.0, 1.0, "a"),
            seg("B", 1.0, 2.0, "a"),
            seg("A", 2.0, 3.0, "a"),
        ]);
        let t = make_target(&u, &v, false).unwrap();
        assert_eq!(t.count(ST_ID), 2);
        assert_eq!(t.ids()[0], 2);
    }

    #[test]
    fn oov_names_symbol() {
        let v = build_vocab(&["ab"], TokenizerMode::Char).unwrap();
        let u = utt(vec![seg("A", 0.0, 1.0, "abz")]);
        match make_target(&u, &v, false) {
            Err(Error::OutOfVocabulary(s)) => assert_eq!(s, "z"),
            other => panic!("expected OOV, got {other:?}"),
        }
    }

    #[test]
    fn grouping_examples() {
        let three: Vec<_> = (0..3)
            .map(|i| seg("A", 5.0 * i as f64, 5.0 * (i + 1) as f64, "x"))
            .collect();
        assert_eq!(group_segments(&three, 30.0).len(), 1);

        let segs = vec![
            seg("A", 0.0, 20.0, "x"),
            seg("B", 20.0, 25.0, "y"),
            seg("A", 25.0, 40.0, "z"),
        ];
        let groups = group_segments(&segs, 30.0);
        let sizes: Vec<usize> = groups.iter().map(|g| g.segments.len()).collect();
        assert_eq!(sizes, vec![2, 1]);
        assert_eq!(groups[1].offset_s, 25.0);
        assert!((groups[1].duration_s - 15.0).abs() < 1e-12);

        let long = vec![seg("A", 0.0, 45.0, "x")];
        let g = group_segments(&long, 30.0);
        assert_eq!(g.len(), 1);
        assert!(g[0].over_length);
        assert!(g[0].validate(30.0).is_ok());
    }

    /// Brute-force greedy oracle: for each start, the longest prefix that fits.
    fn greedy_oracle(segs: &[SpeakerSegment], max: f64) -> Vec<usize> {
        let mut sizes = Vec::new();
        let mut i = 0;
        while i < segs.len() {
            let best = (1..=segs.len() - i)
                .filter(|&n| n == 1 || segs[i + n - 1].end_s - segs[i].start_s <= max)
                .max()
                .unwrap();
            sizes.push(best);
            i += best;
        }
        sizes
    }

    fn arb_segments() -> impl Strategy<Value = Vec<SpeakerSegment>> {
        prop::collection::vec((0.0f64..3.0, 0.1f64..20.0, 0usize..3), 1..25).prop_map(|parts| {
            let mut t = 0.0;
            parts
                .into_iter()
                .map(|(gap, len, spk)| {
                    let start = t + gap;
                    t = start + len;
                    seg(&format!("S{spk}"), start, t, "w")
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn grouping_partitions_and_matches_oracle(segs in arb_segments(), max in 1.0f64..40.0) {
            let groups = group_segments(&segs, max);
            let flat: Vec<SpeakerSegment> = groups.iter().flat_map(|g| g.segments.clone()).collect();
            prop_assert_eq!(&flat, &segs);
            let sizes: Vec<usize> = groups.iter().map(|g| g.segments.len()).collect();
            prop_assert_eq!(sizes, greedy_oracle(&segs, max));
            for g in &groups {
                prop_assert!(g.validate(max).is_ok());
            }
        }

        #[test]
        fn target_length_is_predictable(
            spks in prop::collection::vec(0usize..3, 1..12),
            trailing in any::<bool>(),
        ) {
            let v = build_vocab(&["a b c"], TokenizerMode::Word).unwrap();
            let segs: Vec<_> = spks.iter().enumerate()
                .map(|(i, s)| seg(&format!("S{s}"), i as f64, i as f64 + 1.0, "a b"))
                .collect();
            let u = utt(segs);
            let t = make_target(&u, &v, trailing).unwrap();
            let changes = u.speaker_changes();
            prop_assert_eq!(t.len(), 2 * spks.len() + changes + usize::from(trailing));
            prop_assert_eq!(t.count(ST_ID), changes + usize::from(trailing));
            prop_assert_eq!(t.count(BLANK_ID), 0);
            prop_assert!(t.ids()[0] != ST_ID);
        }

        #[test]
        fn char_vocab_is_order_independent(words in prop::collection::vec("[a-e ]{1,6}", 1..6)) {
            prop_assume!(words.iter().any(|w| !w.trim().is_empty()));
            let mut rev = words.clone();
            rev.reverse();
            let a = build_vocab(&words, TokenizerMode::Char).unwrap();
            let b = build_vocab(&rev, TokenizerMode::Char).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
