//! Masked-prediction pretraining against a frozen random-projection quantizer.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{Container, Encoder, Parameters, Tensor};
use crate::error::{Error, Result};
use crate::rng::{named_rng, sub_rng};
use crate::tensor::{log_sum_exp, Mat};

pub const HEAD_PREFIX: &str = "bestrq_head";
pub const PROJECTION: &str = "quantizer.projection";
pub const CODEBOOK: &str = "quantizer.codebook";
/// Input frames per encoder output frame.
pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub input_dim: usize,
    pub proj_dim: usize,
    pub codebook_size: usize,
    pub seed: u64,
}

/// Frozen projection (`D_in × d_proj`) and ℓ2-normalized codebook (`K × d_proj`).
#[derive(Clone, Debug, PartialEq)]
pub struct RandomQuantizer {
    pub config: QuantizerConfig,
    pub projection: Mat,
    pub codebook: Mat,
}

impl RandomQuantizer {
    pub fn new(config: QuantizerConfig) -> Result<Self> {
        let QuantizerConfig {
            input_dim,
            proj_dim,
            codebook_size,
            seed,
        } = config;
        if input_dim == 0 || proj_dim == 0 || codebook_size == 0 {
            return Err(Error::InvalidConfig("quantizer dimensions must be >= 1".into()));
        }
        let bound = 1.0 / (input_dim as f64).sqrt();
        let mut rng = named_rng(seed, PROJECTION);
        let proj = (0..input_dim * proj_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let mut rng = named_rng(seed, CODEBOOK);
        let mut codebook = Mat::zeros(codebook_size, proj_dim);
        for k in 0..codebook_size {
            let row = codebook.row_mut(k);
            for v in row.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self {
            config,
            projection: Mat::from_vec(input_dim, proj_dim, proj),
            codebook,
        })
    }

    /// Label per frame: index of the nearest codeword to `frame · projection`.
    pub fn quantize(&self, features: &Mat) -> Result<Vec<usize>> {
        let (d_in, d_proj) = (self.projection.rows(), self.projection.cols());
        if features.cols() != d_in {
            return Err(Error::DimensionMismatch {
                expected: d_in,
                got: features.cols(),
            });
        }
        let mut z = vec![0.0; d_proj];
        Ok(features
            .iter_rows()
            .map(|x| {
                z.fill(0.0);
                for (i, &xi) in x.iter().enumerate() {
                    for (zj, &p) in z.iter_mut().zip(self.projection.row(i)) {
                        *zj += xi * p;
                    }
                }
                let mut best = (f64::INFINITY, 0);
                for (k, c) in self.codebook.iter_rows().enumerate() {
                    let d: f64 = z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                best.1
            })
            .collect())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut params = Parameters::new();
        for (name, m) in [(PROJECTION, &self.projection), (CODEBOOK, &self.codebook)] {
            params.insert(
                name,
                Tensor {
                    shape: vec![m.rows(), m.cols()],
                    data: m.data().to_vec(),
                },
            );
        }
        Ok(Container {
            config: serde_json::to_value(self.config)?,
            params,
            frozen: vec![PROJECTION.into(), CODEBOOK.into()],
            meta: serde_json::Value::Null,
        })
    }

    /// Rebuilds from the stored seed and checks the stored tensors agree
    /// to f32 precision.
    pub fn from_container(c: &Container) -> Result<Self> {
        let config: QuantizerConfig = serde_json::from_value(c.config.clone())?;
        let q = Self::new(config)?;
        for (name, m) in [(PROJECTION, &q.projection), (CODEBOOK, &q.codebook)] {
            if !c.params.contains(name) {
                return Err(Error::ShapeMismatch(vec![format!("{name}: missing")]));
            }
            let stored = c.params.data(name);
            let same = stored.len() == m.data().len()
                && stored.iter().zip(m.data()).all(|(&a, &b)| a == f64::from(b as f32));
            if !same {
                return Err(Error::format("quantizer", format!("{name} does not match its seed")));
            }
        }
        Ok(q)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub mask: Vec<bool>,
    pub span_frames: usize,
    pub mask_prob: f64,
}

impl MaskSpec {
    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Encoder-frame mask: set if any of its source frames is masked.
    pub fn downsampled(&self, n_out: usize) -> Vec<bool> {
        (0..n_out)
            .map(|t| {
                let lo = (t * DOWNSAMPLE).min(self.mask.len());
                let hi = ((t + 1) * DOWNSAMPLE).min(self.mask.len());
                self.mask[lo..hi].iter().any(|m| *m)
            })
            .collect()
    }
}

/// Each frame starts a `span_frames` span with probability `mask_prob`.
pub fn sample_mask(n_frames: usize, span_frames: usize, mask_prob: f64, seed: u64) -> Result<MaskSpec> {
    if span_frames == 0 || !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::InvalidConfig(format!(
            "mask span {span_frames} / prob {mask_prob} out of range"
        )));
    }
    let mut rng = sub_rng(seed, 0x3a5c);
    let mut mask = vec![false; n_frames];
    for t in 0..n_frames {
        if rng.random_bool(mask_prob) {
            let end = (t + span_frames).min(n_frames);
            mask[t..end].fill(true);
        }
    }
    Ok(MaskSpec {
        mask,
        span_frames,
        mask_prob,
    })
}

/// Zero the masked frames.
pub fn apply_mask(features: &Mat, mask: &MaskSpec) -> Mat {
    let mut out = features.clone();
    for (t, &m) in mask.mask.iter().enumerate() {
        if m {
            out.row_mut(t).fill(0.0);
        }
    }
    out
}

/// Label of each encoder frame: the label of its first source frame.
pub fn downsample_labels(labels: &[usize], n_out: usize) -> Vec<usize> {
    (0..n_out)
        .map(|t| labels[(t * DOWNSAMPLE).min(labels.len() - 1)])
        .collect()
}

/// Mean cross-entropy over masked frames and its gradient wrt `logits`.
pub fn masked_cross_entropy(logits: &Mat, labels: &[usize], mask: &[bool]) -> Result<(f64, Mat)> {
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::NoPredictionTargets);
    }
    let mut grad = Mat::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for t in 0..logits.rows() {
        if !mask[t] {
            continue;
        }
        let row = logits.row(t);
        let lse = log_sum_exp(row);
        total += lse - row[labels[t]];
        let g = grad.row_mut(t);
        for (gk, &z) in g.iter_mut().zip(row) {
            *gk = (z - lse).exp() / n as f64;
        }
        g[labels[t]] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Output of [`bestrq_step`].
pub struct BestRqStep {
    pub nll: f64,
    pub n_targets: usize,
    pub d_hidden: Mat,
}

/// Head loss on encoder outputs computed from masked input. Accumulates the
/// head gradients into `grads` and returns the gradient wrt `hidden`.
pub fn bestrq_step(
    enc: &Encoder,
    hidden: &Mat,
    labels: &[usize],
    mask: &[bool],
    grads: &mut Parameters,
) -> Result<BestRqStep> {
    let logits = enc.head_logits(HEAD_PREFIX, hidden);
    let (nll, dlogits) = masked_cross_entropy(&logits, labels, mask)?;
    let d_hidden = enc.head_backward(HEAD_PREFIX, hidden, &dlogits, grads);
    Ok(BestRqStep {
        nll,
        n_targets: mask.iter().filter(|m| **m).count(),
        d_hidden,
    })
}
