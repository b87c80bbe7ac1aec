use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::corpus::{make_asr_target, make_target, TokenSeq, Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::features::{mvn, FeatureMatrix, MvnMode, NormStats};
use crate::rng::sub_rng;

use super::Stage;

/// One training or evaluation example with normalized features.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub language_id: usize,
    pub features: FeatureMatrix,
    pub target: Option<TokenSeq>,
}

pub fn normalize(f: &FeatureMatrix, mode: MvnMode, global: Option<&NormStats>) -> Result<FeatureMatrix> {
    match mode {
        MvnMode::None => Ok(f.clone()),
        MvnMode::Utterance => mvn(f, &NormStats::from_features([f])),
        MvnMode::Global => {
            let stats = global.ok_or_else(|| Error::InvalidConfig("global MVN needs statistics".into()))?;
            mvn(f, stats)
        }
    }
}

/// Normalized samples with stage-appropriate targets: none for `bestrq`,
/// plain transcripts for `asr`, `<st>`-augmented ones for `scd`.
pub fn build_samples(
    utts: &[Utterance],
    features: &BTreeMap<String, FeatureMatrix>,
    vocab: &Vocabulary,
    stage: Stage,
    trailing_st: bool,
    mode: MvnMode,
    global: Option<&NormStats>,
) -> Result<Vec<Sample>> {
    utts.iter()
        .map(|u| {
            let f = features
                .get(&u.id)
                .ok_or_else(|| Error::format("corpus", format!("no features for {}", u.id)))?;
            let target = match stage {
                Stage::Bestrq => None,
                Stage::Asr => Some(make_asr_target(u, vocab)?),
                Stage::Scd => Some(make_target(u, vocab, trailing_st)?),
            };
            Ok(Sample {
                id: u.id.clone(),
                language_id: u.language_id,
                features: normalize(f, mode, global)?,
                target,
            })
        })
        .collect()
}

/// Consecutive batches over a fresh seeded permutation per epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    perms: BTreeMap<usize, Vec<usize>>,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size: batch_size.max(1),
            seed,
            perms: BTreeMap::new(),
        }
    }

    /// Sample indices for 1-based `step`.
    pub fn batch(&mut self, step: usize) -> Vec<usize> {
        if self.n == 0 {
            return Vec::new();
        }
        let start = (step - 1) * self.batch_size;
        (start..start + self.batch_size)
            .map(|p| {
                let epoch = p / self.n;
                let (n, seed) = (self.n, self.seed);
                let perm = self.perms.entry(epoch).or_insert_with(|| {
                    let mut v: Vec<usize> = (0..n).collect();
                    v.shuffle(&mut sub_rng(seed, 0xe90c_0000 + epoch as u64));
                    v
                });
                perm[p % n]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_epoch_visits_every_sample_once() {
        let mut s = BatchSampler::new(10, 5, 7);
        let mut seen: Vec<usize> = (1..=2).flat_map(|st| s.batch(st)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let again: Vec<usize> = BatchSampler::new(10, 5, 7).batch(3);
        assert_eq!(again, s.batch(3));
    }
}
