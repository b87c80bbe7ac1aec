//! Speaker-change precision/recall/F1 by interval membership, and WER with
//! `<st>` removed before alignment.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{split_symbols, SpeakerSegment, TokenizerMode, Utterance, ST_TOKEN};
use crate::ctc::HypRecord;
use crate::error::{Error, Result};

pub const DEFAULT_COLLAR_S: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefChangeInterval {
    pub begin_s: f64,
    pub end_s: f64,
}

impl RefChangeInterval {
    pub fn contains(&self, t: f64) -> bool {
        self.begin_s <= t && t <= self.end_s
    }
}

/// `[end(prev) - collar, start(next) + collar]` for each adjacent pair with
/// different speakers, clamped to `[0, duration_s]`.
pub fn ref_intervals(segments: &[SpeakerSegment], collar_s: f64, duration_s: f64) -> Vec<RefChangeInterval> {
    segments
        .windows(2)
        .filter(|w| w[0].speaker != w[1].speaker)
        .map(|w| RefChangeInterval {
            begin_s: (w[0].end_s - collar_s).clamp(0.0, duration_s),
            end_s: (w[1].start_s + collar_s).clamp(0.0, duration_s),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScdCounts {
    pub n_hyp: usize,
    pub n_hyp_correct: usize,
    pub n_ref: usize,
    pub n_ref_detected: usize,
}

impl ScdCounts {
    /// 0 with references but no predictions; 100 when both are empty.
    pub fn precision(&self) -> f64 {
        match (self.n_hyp, self.n_ref) {
            (0, 0) => 100.0,
            (0, _) => 0.0,
            (h, _) => 100.0 * self.n_hyp_correct as f64 / h as f64,
        }
    }

    /// 100 when there is nothing to detect.
    pub fn recall(&self) -> f64 {
        if self.n_ref == 0 {
            100.0
        } else {
            100.0 * self.n_ref_detected as f64 / self.n_ref as f64
        }
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }

    pub fn add(&mut self, o: &ScdCounts) {
        self.n_hyp += o.n_hyp;
        self.n_hyp_correct += o.n_hyp_correct;
        self.n_ref += o.n_ref;
        self.n_ref_detected += o.n_ref_detected;
    }
}

/// Harmonic mean of two percentages; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Counts for sorted `hyp_times` against `refs`.
pub fn score_scd(refs: &[RefChangeInterval], hyp_times: &[f64]) -> ScdCounts {
    debug_assert!(hyp_times.windows(2).all(|w| w[0] <= w[1]));
    // Each interval covers a contiguous range of sorted hypotheses; mark
    // those ranges with a difference array.
    let mut cover = vec![0i64; hyp_times.len() + 1];
    let mut detected = 0;
    for r in refs {
        let lo = hyp_times.partition_point(|&t| t < r.begin_s);
        let hi = hyp_times.partition_point(|&t| t <= r.end_s);
        if lo < hi {
            detected += 1;
            cover[lo] += 1;
            cover[hi] -= 1;
        }
    }
    let mut run = 0;
    let mut correct = 0;
    for c in &cover[..hyp_times.len()] {
        run += c;
        if run > 0 {
            correct += 1;
        }
    }
    ScdCounts {
        n_hyp: hyp_times.len(),
        n_hyp_correct: correct,
        n_ref: refs.len(),
        n_ref_detected: detected,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerCounts {
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub n_ref: usize,
    /// Set when the stripped reference is empty but the hypothesis is not.
    #[serde(default)]
    pub empty_ref: bool,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.sub + self.ins + self.del
    }

    /// Empty reference: `100 · |hyp|` (all insertions), or 0 if both empty.
    pub fn wer(&self) -> f64 {
        if self.n_ref == 0 {
            100.0 * self.ins as f64
        } else {
            100.0 * self.errors() as f64 / self.n_ref as f64
        }
    }

    pub fn add(&mut self, o: &WerCounts) {
        self.sub += o.sub;
        self.ins += o.ins;
        self.del += o.del;
        self.n_ref += o.n_ref;
        self.empty_ref |= o.empty_ref;
    }
}

/// Unit-cost Levenshtein alignment after removing `st_token` from both sides.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S], st_token: &str) -> WerCounts {
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).filter(|t| *t != st_token).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).filter(|t| *t != st_token).collect();
    // cell = (cost, sub, ins, del); prefer fewer total edits, then subs.
    type Cell = (usize, usize, usize, usize);
    let mut prev: Vec<Cell> = (0..=h.len()).map(|j| (j, 0, j, 0)).collect();
    for i in 1..=r.len() {
        let mut cur: Vec<Cell> = Vec::with_capacity(h.len() + 1);
        cur.push((i, 0, 0, i));
        for j in 1..=h.len() {
            let diag = prev[j - 1];
            let same = r[i - 1] == h[j - 1];
            let sub = (diag.0 + usize::from(!same), diag.1 + usize::from(!same), diag.2, diag.3);
            let up = prev[j];
            let del = (up.0 + 1, up.1, up.2, up.3 + 1);
            let left = cur[j - 1];
            let ins = (left.0 + 1, left.1, left.2 + 1, left.3);
            cur.push([sub, del, ins].into_iter().min_by_key(|c| c.0).unwrap());
        }
        prev = cur;
    }
    let (_, sub, ins, del) = prev[h.len()];
    WerCounts {
        sub,
        ins,
        del,
        n_ref: r.len(),
        empty_ref: r.is_empty() && !h.is_empty(),
    }
}

/// Scores for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttScore {
    pub id: String,
    pub language_id: usize,
    pub scd: ScdCounts,
    pub wer: WerCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    Language,
    Pooled,
}

impl std::str::FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "language" => Ok(Self::Language),
            "pooled" => Ok(Self::Pooled),
            _ => Err(Error::InvalidConfig(format!("unknown grouping {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub wer: f64,
    pub counts: ScdCounts,
    pub wer_counts: WerCounts,
    pub n_utterances: usize,
}

impl GroupReport {
    /// Micro-average: counts are summed before rates are taken.
    pub fn from_scores<'a>(scores: impl IntoIterator<Item = &'a UttScore>) -> Self {
        let mut counts = ScdCounts::default();
        let mut wer_counts = WerCounts::default();
        let mut n = 0;
        for s in scores {
            counts.add(&s.scd);
            wer_counts.add(&s.wer);
            n += 1;
        }
        Self {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            wer: wer_counts.wer(),
            counts,
            wer_counts,
            n_utterances: n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScdReport {
    /// Keyed by language id; `null` marks a language with no utterances.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_language: BTreeMap<String, Option<GroupReport>>,
    pub pooled: GroupReport,
}

pub fn aggregate(scores: &[UttScore], grouping: Grouping, n_languages: usize) -> ScdReport {
    let mut per_language = BTreeMap::new();
    if grouping == Grouping::Language {
        let n = n_languages.max(scores.iter().map(|s| s.language_id + 1).max().unwrap_or(0));
        for l in 0..n {
            let group: Vec<&UttScore> = scores.iter().filter(|s| s.language_id == l).collect();
            let entry = (!group.is_empty()).then(|| GroupReport::from_scores(group));
            per_language.insert(l.to_string(), entry);
        }
    }
    ScdReport {
        per_language,
        pooled: GroupReport::from_scores(scores),
    }
}

impl ScdReport {
    /// Pooled only: one row per metric. Per language: one row per group
    /// plus the pooled row, metrics as columns.
    pub fn table(&self) -> String {
        let metrics: [(&str, fn(&GroupReport) -> f64); 4] = [
            ("Precision", |g| g.precision),
            ("Recall", |g| g.recall),
            ("F1", |g| g.f1),
            ("WER", |g| g.wer),
        ];
        let mut out = String::new();
        if self.per_language.is_empty() {
            out.push_str(&format!("{:<10}{:>10}\n", "", "pooled"));
            for (label, get) in metrics {
                out.push_str(&format!("{label:<10}{:>10.1}\n", get(&self.pooled)));
            }
            return out;
        }
        out.push_str(&format!("{:<10}", "group"));
        for (label, _) in metrics {
            out.push_str(&format!("{label:>10}"));
        }
        out.push('\n');
        let rows = self
            .per_language
            .iter()
            .map(|(l, g)| (format!("lang {l}"), g.as_ref()))
            .chain(std::iter::once(("pooled".to_owned(), Some(&self.pooled))));
        for (name, g) in rows {
            out.push_str(&format!("{name:<10}"));
            for (_, get) in metrics {
                match g {
                    Some(g) => out.push_str(&format!("{:>10.1}", get(g))),
                    None => out.push_str(&format!("{:>10}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Reference tokens of an utterance in the requested unit.
pub fn reference_tokens(utt: &Utterance, unit: TokenizerMode) -> Vec<String> {
    utt.segments
        .iter()
        .flat_map(|s| split_symbols(&s.transcript, unit))
        .filter(|t| !t.trim().is_empty())
        .collect()
}

/// Hypothesis tokens re-split to the requested unit; `<st>` is kept.
pub fn hypothesis_tokens(tokens: &[String], unit: TokenizerMode) -> Vec<String> {
    match unit {
        TokenizerMode::Word => tokens.iter().filter(|t| !t.trim().is_empty()).cloned().collect(),
        TokenizerMode::Char => tokens
            .iter()
            .flat_map(|t| {
                if t == ST_TOKEN {
                    vec![t.clone()]
                } else {
                    t.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
                }
            })
            .collect(),
    }
}

/// Ids present on only one side.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Orphans {
    pub refs_only: Vec<String>,
    pub hyps_only: Vec<String>,
}

impl Orphans {
    pub fn is_empty(&self) -> bool {
        self.refs_only.is_empty() && self.hyps_only.is_empty()
    }
}

pub fn orphans(refs: &[Utterance], hyps: &[HypRecord]) -> Orphans {
    let r: BTreeSet<&str> = refs.iter().map(|u| u.id.as_str()).collect();
    let h: BTreeSet<&str> = hyps.iter().map(|x| x.id.as_str()).collect();
    Orphans {
        refs_only: r.difference(&h).map(|s| s.to_string()).collect(),
        hyps_only: h.difference(&r).map(|s| s.to_string()).collect(),
    }
}

/// Per-utterance scores; every reference needs exactly one hypothesis.
pub fn score_corpus(refs: &[Utterance], hyps: &[HypRecord], collar_s: f64, unit: TokenizerMode) -> Result<Vec<UttScore>> {
    let o = orphans(refs, hyps);
    if !o.is_empty() {
        return Err(Error::format(
            "hypotheses",
            format!("unmatched ids: refs only {:?}, hyps only {:?}", o.refs_only, o.hyps_only),
        ));
    }
    let by_id: BTreeMap<&str, &HypRecord> = hyps.iter().map(|h| (h.id.as_str(), h)).collect();
    Ok(refs
        .iter()
        .map(|u| {
            let h = by_id[u.id.as_str()];
            let mut times = h.st_times_s.clone();
            times.sort_by(f64::total_cmp);
            let intervals = ref_intervals(&u.segments, collar_s, u.duration_s);
            let rt = reference_tokens(u, unit);
            let ht = hypothesis_tokens(&h.tokens, unit);
            UttScore {
                id: u.id.clone(),
                language_id: u.language_id,
                scd: score_scd(&intervals, &times),
                wer: wer(&rt, &ht, ST_TOKEN),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(spk: &str, a: f64, b: f64) -> SpeakerSegment {
        SpeakerSegment::new(spk, a, b, "x", 0).unwrap()
    }

    #[test]
    fn interval_examples() {
        let r = ref_intervals(&[seg("A", 0.0, 2.0), seg("B", 3.0, 5.0)], 0.0, 5.0);
        assert_eq!(r, vec![RefChangeInterval { begin_s: 2.0, end_s: 3.0 }]);
        assert!(ref_intervals(&[seg("A", 0.0, 2.0), seg("A", 2.0, 4.0)], 0.25, 4.0).is_empty());
        let r = ref_intervals(&[seg("A", 0.0, 2.0), seg("B", 2.0, 4.0)], 0.25, 4.0);
        assert_eq!(r, vec![RefChangeInterval { begin_s: 1.75, end_s: 2.25 }]);
        let r = ref_intervals(&[seg("A", 0.0, 0.1), seg("B", 0.1, 4.0)], 0.25, 4.0);
        assert_eq!(r[0].begin_s, 0.0);
    }

    #[test]
    fn midpoints_are_perfect() {
        let refs = [
            RefChangeInterval { begin_s: 1.0, end_s: 2.0 },
            RefChangeInterval { begin_s: 4.0, end_s: 5.0 },
        ];
        let c = score_scd(&refs, &[1.5, 4.5]);
        assert_eq!((c.precision(), c.recall(), c.f1()), (100.0, 100.0, 100.0));
        let none = score_scd(&refs, &[]);
        assert_eq!((none.precision(), none.recall(), none.f1()), (0.0, 0.0, 0.0));
        let empty = score_scd(&[], &[]);
        assert_eq!((empty.precision(), empty.recall()), (100.0, 100.0));
    }

    #[test]
    fn two_hyps_in_one_interval_count_once() {
        let refs = [RefChangeInterval { begin_s: 1.0, end_s: 2.0 }];
        let c = score_scd(&refs, &[1.1, 1.9, 3.0]);
        assert_eq!(c, ScdCounts { n_hyp: 3, n_hyp_correct: 2, n_ref: 1, n_ref_detected: 1 });
    }

    #[test]
    fn f1_edges() {
        assert_eq!(f1(100.0, 100.0), 100.0);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a", "b"], &["a", "b"], ST_TOKEN).wer(), 0.0);
        let w = wer(&["a", "b", "c"], &["a", "x", "c"], ST_TOKEN);
        assert_eq!((w.sub, w.ins, w.del), (1, 0, 0));
        assert!((w.wer() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer(&["a", "b"], &["a", "<st>", "b"], ST_TOKEN).wer(), 0.0);
        let e = wer(&["<st>"], &["a", "b"], ST_TOKEN);
        assert!(e.empty_ref);
        assert_eq!(e.wer(), 200.0);
        assert_eq!(wer::<&str>(&[], &[], ST_TOKEN).wer(), 0.0);
        let d = wer(&["a", "b", "c"], &["b"], ST_TOKEN);
        assert_eq!((d.sub, d.ins, d.del), (0, 0, 2));
    }

    fn utt_score(lang: usize, hyp: usize, correct: usize) -> UttScore {
        UttScore {
            id: format!("u{lang}{hyp}{correct}"),
            language_id: lang,
            scd: ScdCounts { n_hyp: hyp, n_hyp_correct: correct, n_ref: 2, n_ref_detected: correct },
            wer: WerCounts { n_ref: 4, sub: 1, ..Default::default() },
        }
    }

    #[test]
    fn micro_average() {
        let s = [utt_score(0, 2, 1), utt_score(0, 2, 2)];
        let r = aggregate(&s, Grouping::Pooled, 1);
        assert_eq!(r.pooled.precision, 75.0);
        let one = aggregate(&s[..1], Grouping::Pooled, 1);
        assert_eq!(one.pooled.precision, s[0].scd.precision());
    }

    #[test]
    fn micro_differs_from_macro() {
        // Group sizes differ, so per-utterance means and pooled rates diverge.
        let s = [utt_score(0, 1, 1), utt_score(0, 4, 0)];
        let micro = aggregate(&s, Grouping::Pooled, 1).pooled.precision;
        let macro_: f64 = s.iter().map(|u| u.scd.precision()).sum::<f64>() / 2.0;
        assert_eq!(micro, 20.0);
        assert_eq!(macro_, 50.0);
    }

    #[test]
    fn empty_language_is_flagged() {
        let r = aggregate(&[utt_score(1, 2, 2)], Grouping::Language, 3);
        assert!(r.per_language["0"].is_none());
        assert!(r.per_language["1"].is_some());
        let table = r.table();
        assert_eq!(table.lines().count(), 5);
        assert!(table.lines().last().unwrap().starts_with("pooled"));
        let pooled = aggregate(&[utt_score(1, 2, 2)], Grouping::Pooled, 3).table();
        assert!(pooled.lines().any(|l| l.starts_with("Precision")));
    }

    proptest! {
        #[test]
        fn extra_hyps_move_rates_the_right_way(
            spans in prop::collection::vec((0.0f64..10.0, 0.0f64..1.0), 0..6),
            hyps in prop::collection::vec(0.0f64..11.0, 0..8),
            extra in 0.0f64..11.0,
        ) {
            let refs: Vec<RefChangeInterval> = spans.iter().map(|&(a, w)| RefChangeInterval { begin_s: a, end_s: a + w }).collect();
            let mut h = hyps.clone();
            h.sort_by(f64::total_cmp);
            let base = score_scd(&refs, &h);
            h.push(extra);
            h.sort_by(f64::total_cmp);
            let more = score_scd(&refs, &h);
            let inside = refs.iter().any(|r| r.contains(extra));
            if inside {
                prop_assert!(more.recall() >= base.recall());
            } else if base.n_hyp > 0 {
                prop_assert!(more.precision() <= base.precision());
            }
        }

        #[test]
        fn wer_ignores_st_and_relabeling(
            r in prop::collection::vec(0u8..4, 0..8),
            h in prop::collection::vec(0u8..4, 0..8),
            at in 0usize..9,
        ) {
            let name = |v: &[u8], p: &str| v.iter().map(|x| format!("{p}{x}")).collect::<Vec<_>>();
            let (rs, hs) = (name(&r, "w"), name(&h, "w"));
            let base = wer(&rs, &hs, ST_TOKEN);
            let mut hs2 = hs.clone();
            hs2.insert(at.min(hs2.len()), ST_TOKEN.to_string());
            let mut rs2 = rs.clone();
            rs2.insert(at.min(rs2.len()), ST_TOKEN.to_string());
            prop_assert_eq!(wer(&rs2, &hs2, ST_TOKEN).errors(), base.errors());
            prop_assert_eq!(wer(&name(&r, "z"), &name(&h, "z"), ST_TOKEN).errors(), base.errors());
        }
    }
}
