//! Acoustic frontend: log-mel extraction, mean-variance normalization and
//! SpecAugment over row-major `frames × dims` matrices.

mod logmel;
pub mod scdf;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sub_rng;
use crate::tensor::Mat;

pub use logmel::{hann, hz_to_mel, logmel, mel_centers, mel_filterbank, mel_to_hz, power_spectrum, LogMelConfig, LOG_FLOOR};

pub const DEFAULT_FRAME_SHIFT_S: f64 = 0.010;
pub const STD_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: Mat,
    frame_shift_s: f64,
}

impl FeatureMatrix {
    pub fn new(frames: Mat, frame_shift_s: f64) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::InvalidConfig("feature matrix must be non-empty".into()));
        }
        if !frames.all_finite() {
            return Err(Error::InvalidConfig("feature matrix has non-finite values".into()));
        }
        Ok(Self {
            frames,
            frame_shift_s,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame_shift_s(&self) -> f64 {
        self.frame_shift_s
    }

    pub fn data(&self) -> &Mat {
        &self.frames
    }

    pub fn into_mat(self) -> Mat {
        self.frames
    }

    pub fn load(path: &Path, frame_shift_s: f64) -> Result<Self> {
        Self::new(scdf::read(path)?, frame_shift_s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        scdf::write(path, &self.frames)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Per-dimension mean and population standard deviation, std floored.
    pub fn from_features<'a>(feats: impl IntoIterator<Item = &'a FeatureMatrix>) -> Self {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut seen = Vec::new();
        for f in feats {
            if sum.is_empty() {
                sum = vec![0.0; f.dim()];
                sq = vec![0.0; f.dim()];
            }
            for row in f.data().iter_rows() {
                for (d, &v) in row.iter().enumerate() {
                    sum[d] += v;
                }
            }
            n += f.n_frames();
            seen.push(f);
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        // Second pass for a numerically stable variance.
        for f in seen {
            for row in f.data().iter_rows() {
                for (d, &v) in row.iter().enumerate() {
                    let c = v - mean[d];
                    sq[d] += c * c;
                }
            }
        }
        let std = sq.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MvnMode {
    #[default]
    Utterance,
    Global,
    None,
}

pub fn mvn(features: &FeatureMatrix, stats: &NormStats) -> Result<FeatureMatrix> {
    if stats.dim() != features.dim() {
        return Err(Error::DimensionMismatch {
            expected: features.dim(),
            got: stats.dim(),
        });
    }
    let mut out = features.frames.clone();
    for t in 0..out.rows() {
        for (d, v) in out.row_mut(t).iter_mut().enumerate() {
            *v = (*v - stats.mean[d]) / stats.std[d];
        }
    }
    FeatureMatrix::new(out, features.frame_shift_s)
}

/// Inverse of [`mvn`].
pub fn denormalize(features: &FeatureMatrix, stats: &NormStats) -> Result<FeatureMatrix> {
    if stats.dim() != features.dim() {
        return Err(Error::DimensionMismatch {
            expected: features.dim(),
            got: stats.dim(),
        });
    }
    let mut out = features.frames.clone();
    for t in 0..out.rows() {
        for (d, v) in out.row_mut(t).iter_mut().enumerate() {
            *v = *v * stats.std[d] + stats.mean[d];
        }
    }
    FeatureMatrix::new(out, features.frame_shift_s)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpecAugmentPolicy {
    pub n_time_masks: usize,
    pub max_time_width_frames: usize,
    pub n_freq_masks: usize,
    pub max_freq_width_bins: usize,
    #[serde(default)]
    pub mask_value: f64,
}

impl SpecAugmentPolicy {
    pub fn is_identity(&self) -> bool {
        (self.n_time_masks == 0 || self.max_time_width_frames == 0)
            && (self.n_freq_masks == 0 || self.max_freq_width_bins == 0)
    }
}

/// Start of a `width`-long block, uniform over `0..=len - width`.
pub fn sample_block<R: Rng>(rng: &mut R, len: usize, width: usize) -> usize {
    let width = width.min(len);
    rng.random_range(0..=len - width)
}

pub fn specaugment(features: &FeatureMatrix, policy: &SpecAugmentPolicy, seed: u64) -> FeatureMatrix {
    let mut out = features.clone();
    if policy.is_identity() {
        return out;
    }
    let mut rng = sub_rng(seed, 0x5bec_a06e);
    let (t_len, d_len) = (out.n_frames(), out.dim());
    for _ in 0..policy.n_time_masks {
        let w = rng.random_range(0..=policy.max_time_width_frames.min(t_len));
        let start = sample_block(&mut rng, t_len, w);
        for t in start..start + w {
            out.frames.row_mut(t).fill(policy.mask_value);
        }
    }
    for _ in 0..policy.n_freq_masks {
        let w = rng.random_range(0..=policy.max_freq_width_bins.min(d_len));
        let start = sample_block(&mut rng, d_len, w);
        for t in 0..t_len {
            out.frames.row_mut(t)[start..start + w].fill(policy.mask_value);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn random_features(t: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = sub_rng(seed, 1);
        let data = (0..t * d).map(|_| rng.random_range(-3.0..5.0)).collect();
        FeatureMatrix::new(Mat::from_vec(t, d, data), 0.01).unwrap()
    }

    #[test]
    fn self_normalization() {
        let f = random_features(200, 7, 3);
        let n = mvn(&f, &NormStats::from_features([&f])).unwrap();
        let s = NormStats::from_features([&n]);
        for d in 0..7 {
            assert!(s.mean[d].abs() < 1e-9);
            assert!((s.std[d].powi(2) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let f = FeatureMatrix::new(Mat::filled(10, 3, 4.2), 0.01).unwrap();
        let stats = NormStats::from_features([&f]);
        assert!(stats.std.iter().all(|&s| s == STD_FLOOR));
        let n = mvn(&f, &stats).unwrap();
        assert!(n.data().data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn mvn_twice_is_identity() {
        for seed in 0..20 {
            let f = random_features(50, 5, seed);
            let once = mvn(&f, &NormStats::from_features([&f])).unwrap();
            let twice = mvn(&once, &NormStats::from_features([&once])).unwrap();
            for (a, b) in once.data().data().iter().zip(twice.data().data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mvn_dimension_mismatch() {
        let f = random_features(5, 3, 0);
        let stats = NormStats {
            mean: vec![0.0; 2],
            std: vec![1.0; 2],
        };
        assert!(matches!(mvn(&f, &stats), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn mvn_is_invertible() {
        let f = random_features(30, 4, 9);
        let stats = NormStats::from_features([&f]);
        let back = denormalize(&mvn(&f, &stats).unwrap(), &stats).unwrap();
        for (a, b) in f.data().data().iter().zip(back.data().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_policy_is_identity() {
        let f = random_features(20, 4, 1);
        assert_eq!(specaugment(&f, &SpecAugmentPolicy::default(), 5), f);
    }

    #[test]
    fn one_time_mask_is_one_block() {
        let f = random_features(40, 6, 2);
        let policy = SpecAugmentPolicy {
            n_time_masks: 1,
            max_time_width_frames: 5,
            mask_value: -99.0,
            ..Default::default()
        };
        for seed in 0..50 {
            let out = specaugment(&f, &policy, seed);
            let masked: Vec<usize> = (0..40)
                .filter(|&t| out.data().row(t).iter().all(|&v| v == -99.0))
                .collect();
            assert!(masked.len() <= 5);
            if let (Some(a), Some(b)) = (masked.first(), masked.last()) {
                assert_eq!(b - a + 1, masked.len(), "not contiguous");
            }
            for t in (0..40).filter(|t| !masked.contains(t)) {
                assert_eq!(out.data().row(t), f.data().row(t));
            }
        }
    }

    #[test]
    fn freq_masks_leave_other_cells() {
        let f = random_features(10, 12, 4);
        let policy = SpecAugmentPolicy {
            n_freq_masks: 2,
            max_freq_width_bins: 3,
            mask_value: f64::MAX,
            ..Default::default()
        };
        let out = specaugment(&f, &policy, 11);
        for (a, b) in f.data().data().iter().zip(out.data().data()) {
            assert!(a == b || *b == f64::MAX);
        }
        assert_eq!(specaugment(&f, &policy, 11), out);
    }

    #[test]
    fn block_starts_are_uniform() {
        let (len, width, draws) = (30usize, 6usize, 10_000usize);
        let n_bins = len - width + 1;
        let mut rng = sub_rng(2024, 7);
        let mut counts = vec![0usize; n_bins];
        for _ in 0..draws {
            counts[sample_block(&mut rng, len, width)] += 1;
        }
        let expected = draws as f64 / n_bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new((n_bins - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2={chi2} p={p}");
    }
}
