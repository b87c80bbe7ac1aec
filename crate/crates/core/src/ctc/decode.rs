use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Mat};

/// Frames × vocabulary log-posteriors from the decoder projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LogPosteriorMatrix {
    logp: Mat,
    frame_shift_s: f64,
}

pub const ROW_TOLERANCE: f64 = 1e-6;

impl LogPosteriorMatrix {
    /// Checks that each row log-sum-exps to zero and no entry is positive.
    pub fn new(logp: Mat, frame_shift_s: f64) -> Result<Self> {
        for (t, row) in logp.iter_rows().enumerate() {
            let lse = crate::tensor::log_sum_exp(row);
            if (lse.abs() > ROW_TOLERANCE) || row.iter().any(|&v| v > ROW_TOLERANCE || v.is_nan()) {
                return Err(Error::format(
                    "log-posterior matrix",
                    format!("row {t} is not a normalized log distribution (lse = {lse})"),
                ));
            }
        }
        Ok(Self {
            logp,
            frame_shift_s,
        })
    }

    pub fn logp(&self) -> &Mat {
        &self.logp
    }

    pub fn frame_shift_s(&self) -> f64 {
        self.frame_shift_s
    }

    pub fn n_frames(&self) -> usize {
        self.logp.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.logp.cols()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestampMode {
    /// First frame of the run.
    #[default]
    Onset,
    /// Midpoint of the run.
    Center,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Multiplier λ on the `<st>` posterior; applied as `+ ln λ`.
    pub st_scale: f64,
    #[serde(default)]
    pub timestamp: TimestampMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            st_scale: 1.0,
            timestamp: TimestampMode::Onset,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.st_scale > 0.0 && self.st_scale.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "st_scale must be positive, got {}",
                self.st_scale
            )))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeResult {
    pub tokens: TokenSeq,
    pub token_frames: Vec<usize>,
    pub token_times_s: Vec<f64>,
    pub st_times_s: Vec<f64>,
}

/// Per-frame argmax after adding `ln λ` to the `<st>` column. Rows are not
/// renormalized. Ties go to the lowest id.
pub fn frame_argmax(logp: &Mat, st_id: usize, st_scale: f64) -> Vec<usize> {
    let bonus = st_scale.ln();
    let mut row = vec![0.0; logp.cols()];
    logp.iter_rows()
        .map(|r| {
            row.copy_from_slice(r);
            row[st_id] += bonus;
            argmax(&row)
        })
        .collect()
}

/// Merge runs of identical ids, drop blanks, and time-stamp each token.
pub fn collapse_alignment(
    frame_ids: &[usize],
    blank_id: usize,
    st_id: usize,
    frame_shift_s: f64,
    mode: TimestampMode,
) -> DecodeResult {
    let mut out = DecodeResult::default();
    let mut t = 0;
    while t < frame_ids.len() {
        let id = frame_ids[t];
        let start = t;
        while t < frame_ids.len() && frame_ids[t] == id {
            t += 1;
        }
        if id == blank_id {
            continue;
        }
        let time = match mode {
            TimestampMode::Onset => start as f64 * frame_shift_s,
            TimestampMode::Center => (start + t) as f64 * 0.5 * frame_shift_s,
        };
        out.tokens.0.push(id);
        out.token_frames.push(start);
        out.token_times_s.push(time);
        if id == st_id {
            out.st_times_s.push(time);
        }
    }
    out
}

/// Greedy CTC decoding with `<st>` posterior scaling.
pub fn ctc_greedy_decode(logp: &LogPosteriorMatrix, vocab: &Vocabulary, cfg: &DecodeConfig) -> Result<DecodeResult> {
    cfg.validate()?;
    if logp.vocab_size() != vocab.len() {
        return Err(Error::DimensionMismatch {
            expected: vocab.len(),
            got: logp.vocab_size(),
        });
    }
    let ids = frame_argmax(logp.logp(), vocab.st_id(), cfg.st_scale);
    Ok(collapse_alignment(
        &ids,
        vocab.blank_id(),
        vocab.st_id(),
        logp.frame_shift_s(),
        cfg.timestamp,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, TokenizerMode};
    use proptest::prelude::*;

    #[test]
    fn textbook_collapse() {
        let r = collapse_alignment(&[0, 2, 2, 0, 2], 0, 1, 0.04, TimestampMode::Onset);
        assert_eq!(r.tokens.ids(), &[2, 2]);
        assert_eq!(r.token_times_s, vec![0.04, 4.0 * 0.04]);
        assert!(r.st_times_s.is_empty());
        let c = collapse_alignment(&[0, 2, 2, 0], 0, 1, 0.04, TimestampMode::Center);
        assert_eq!(c.token_times_s, vec![2.0 * 0.04]);
    }

    #[test]
    fn all_blank_is_empty() {
        let r = collapse_alignment(&[0; 6], 0, 1, 0.04, TimestampMode::Onset);
        assert!(r.tokens.is_empty() && r.token_times_s.is_empty());
    }

    fn vocab3() -> Vocabulary {
        build_vocab(&["a"], TokenizerMode::Word).unwrap()
    }

    fn lpm(rows: &[[f64; 3]]) -> LogPosteriorMatrix {
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let z: f64 = r.iter().sum();
                r.iter().map(|p| (p / z).ln()).collect()
            })
            .collect();
        LogPosteriorMatrix::new(Mat::from_rows(&rows), 0.04).unwrap()
    }

    #[test]
    fn huge_scale_gives_single_st() {
        let m = lpm(&[[0.8, 0.1, 0.1], [0.1, 0.1, 0.8], [0.7, 0.2, 0.1]]);
        let cfg = DecodeConfig {
            st_scale: 1e6,
            ..Default::default()
        };
        let r = ctc_greedy_decode(&m, &vocab3(), &cfg).unwrap();
        assert_eq!(r.tokens.ids(), &[1]);
        assert_eq!(r.st_times_s, vec![0.0]);
    }

    #[test]
    fn flip_example() {
        // Frame 1: <st> sits 0.5 nats below the best entry.
        let best = 0.6f64;
        let st = best * (-0.5f64).exp();
        let m = lpm(&[[0.9, 0.05, 0.05], [1.0 - best - st, st, best], [0.9, 0.05, 0.05]]);
        let v = vocab3();
        let one = frame_argmax(m.logp(), 1, 1.0);
        let two = frame_argmax(m.logp(), 1, 2.0);
        assert_eq!(one, vec![0, 2, 0]);
        assert_eq!(two, vec![0, 1, 0]);
        let r = ctc_greedy_decode(&m, &v, &DecodeConfig { st_scale: 2.0, ..Default::default() }).unwrap();
        assert_eq!(r.st_times_s, vec![0.04]);
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        let m = lpm(&[[0.5, 0.25, 0.25]]);
        for bad in [0.0, -1.0, f64::NAN] {
            let cfg = DecodeConfig { st_scale: bad, ..Default::default() };
            assert!(ctc_greedy_decode(&m, &vocab3(), &cfg).is_err());
        }
    }

    #[test]
    fn unnormalized_rows_are_rejected() {
        assert!(LogPosteriorMatrix::new(Mat::from_rows(&[vec![0.0, 0.0]]), 0.04).is_err());
    }

    /// Expand tokens into a frame labeling: each token repeated 1..=3 times,
    /// blank runs of 0..=2 frames between tokens (at least one between repeats).
    fn expand(tokens: &[usize], reps: &[usize], gaps: &[usize]) -> Vec<usize> {
        let mut out = vec![0; gaps[0]];
        for (i, &tok) in tokens.iter().enumerate() {
            let mut gap = gaps[i + 1];
            if i + 1 < tokens.len() && tokens[i + 1] == tok {
                gap = gap.max(1);
            }
            out.extend(std::iter::repeat(tok).take(reps[i]));
            out.extend(std::iter::repeat(0).take(gap));
        }
        out
    }

    proptest! {
        #[test]
        fn collapse_inverts_expansion(
            tokens in prop::collection::vec(1usize..4, 0..10),
            reps in prop::collection::vec(1usize..4, 10),
            gaps in prop::collection::vec(0usize..3, 11),
        ) {
            let frames = expand(&tokens, &reps, &gaps);
            let r = collapse_alignment(&frames, 0, 1, 0.04, TimestampMode::Onset);
            prop_assert_eq!(r.tokens.ids(), &tokens[..]);
            for w in r.token_times_s.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            for (&f, &t) in r.token_frames.iter().zip(&r.token_times_s) {
                prop_assert_eq!(frames[f], r.tokens.ids()[r.token_frames.iter().position(|&x| x == f).unwrap()]);
                prop_assert_eq!(t, f as f64 * 0.04);
            }
        }
    }
}
