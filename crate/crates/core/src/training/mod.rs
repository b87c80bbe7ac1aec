//! Staged training: masked-prediction pretraining, ASR pretraining and SCD
//! fine-tuning, with separate learning-rate schedules for the encoder and
//! the output heads.

mod data;
mod optim;
mod schedule;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bestrq::{self, QuantizerConfig, RandomQuantizer};
use crate::corpus::{Vocabulary, BLANK_ID};
use crate::ctc::ctc_loss;
use crate::encoder::layers::log_softmax_backward;
use crate::encoder::{
    expected_shapes, is_encoder_tensor, select_trainable, CheckpointMeta, Encoder, LayerSelection, ModelCheckpoint,
    ModelConfig, Parameters, TrainableMask,
};
use crate::error::{Error, Result};
use crate::features::{specaugment, MvnMode, NormStats, SpecAugmentPolicy};
use crate::rng::splitmix64;

pub use data::{build_samples, normalize, BatchSampler, Sample};
pub use optim::{AdamConfig, OptimizerState};
pub use schedule::{lr_at, LrSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Bestrq,
    Asr,
    Scd,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Bestrq => "bestrq",
            Stage::Asr => "asr",
            Stage::Scd => "scd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub span_frames: usize,
    pub mask_prob: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            span_frames: 8,
            mask_prob: 0.04,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizerSettings {
    pub proj_dim: usize,
    pub codebook_size: usize,
}

impl Default for QuantizerSettings {
    fn default() -> Self {
        Self {
            proj_dim: 16,
            codebook_size: 64,
        }
    }
}

fn default_trainable() -> String {
    "all".into()
}

fn default_batch() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub enc_schedule: LrSchedule,
    pub dec_schedule: LrSchedule,
    /// Layer selection such as `all` or `first_and_last_4`.
    #[serde(default = "default_trainable")]
    pub trainable: String,
    #[serde(default)]
    pub seed: u64,
    /// Save a checkpoint every N steps; 0 saves only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Evaluate held-out loss every N steps; 0 disables.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global gradient-norm clip over trainable tensors; 0 disables.
    #[serde(default)]
    pub clip_norm: f64,
    #[serde(default)]
    pub specaugment: SpecAugmentPolicy,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub quantizer: QuantizerSettings,
    #[serde(default)]
    pub trailing_st: bool,
    #[serde(default)]
    pub mvn: MvnMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be >= 1".into()));
        }
        self.enc_schedule.validate()?;
        self.dec_schedule.validate()?;
        self.selection()?;
        Ok(())
    }

    pub fn selection(&self) -> Result<LayerSelection> {
        self.trainable.parse()
    }
}

/// The `<st>`-free and masked-prediction stages never touch the other
/// stage's head.
pub fn stage_mask(mut mask: TrainableMask, stage: Stage) -> TrainableMask {
    let names: Vec<String> = mask.iter().map(|(n, _)| n.to_owned()).collect();
    for n in names {
        let other_head = match stage {
            Stage::Bestrq => n.starts_with("decoder."),
            Stage::Asr | Stage::Scd => n.starts_with(bestrq::HEAD_PREFIX),
        };
        if other_head {
            mask.set(&n, false);
        }
    }
    mask
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Null when every sample in the batch was skipped.
    pub loss: Option<f64>,
    pub lr_enc: f64,
    pub lr_dec: f64,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
}

/// Everything a gradient computation reads besides parameters.
pub struct StepContext<'a> {
    pub cfg: &'a TrainConfig,
    pub model: &'a ModelConfig,
    pub quantizer: Option<&'a RandomQuantizer>,
    /// 1-based step, or 0 for evaluation (no augmentation).
    pub step: usize,
}

/// Summed loss, its weight (frames or targets) and summed gradients.
struct SampleGrad {
    loss: f64,
    weight: f64,
    grads: Parameters,
}

fn sample_seed(seed: u64, step: usize, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64((step as u64) << 20 ^ index as u64))
}

/// `None` when the sample cannot contribute (unalignable or no targets).
fn sample_grad(params: &Parameters, ctx: &StepContext, sample: &Sample, index: usize) -> Result<Option<SampleGrad>> {
    let enc = Encoder::new(ctx.model, params);
    let mut grads = params.zeros_like();
    let x = sample.features.data();
    if x.rows() < 4 {
        return Ok(None);
    }
    let seed = sample_seed(ctx.cfg.seed, ctx.step, index);
    match ctx.cfg.stage {
        Stage::Bestrq => {
            let q = ctx
                .quantizer
                .ok_or_else(|| Error::InvalidConfig("bestrq stage needs a quantizer".into()))?;
            let labels = q.quantize(x)?;
            let m = ctx.cfg.mask;
            let mask = bestrq::sample_mask(x.rows(), m.span_frames, m.mask_prob, seed)?;
            let n_out = ModelConfig::downsampled_frames(x.rows());
            let mask_ds = mask.downsampled(n_out);
            if !mask_ds.iter().any(|b| *b) {
                return Ok(None);
            }
            let fwd = enc.forward(&bestrq::apply_mask(x, &mask), sample.language_id)?;
            let labels_ds = bestrq::downsample_labels(&labels, n_out);
            let out = bestrq::bestrq_step(&enc, &fwd.hidden, &labels_ds, &mask_ds, &mut grads)?;
            enc.backward(&fwd, &out.d_hidden, &mut grads);
            // Head and encoder gradients are for the mean; rescale to the sum.
            let n = out.n_targets as f64;
            grads.scale(n);
            Ok(Some(SampleGrad {
                loss: out.nll * n,
                weight: n,
                grads,
            }))
        }
        Stage::Asr | Stage::Scd => {
            let target = sample
                .target
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig(format!("sample {} has no target", sample.id)))?;
            let augmented;
            let feats = if ctx.step > 0 && !ctx.cfg.specaugment.is_identity() {
                augmented = specaugment(&sample.features, &ctx.cfg.specaugment, seed);
                augmented.data()
            } else {
                x
            };
            let fwd = enc.forward(feats, sample.language_id)?;
            let logp = enc.decoder_projection(&fwd.hidden);
            let out = ctc_loss(&logp, target.ids(), BLANK_ID);
            if !out.alignable {
                return Ok(None);
            }
            let dlogits = log_softmax_backward(&logp, &out.grad);
            let dh = enc.head_backward("decoder", &fwd.hidden, &dlogits, &mut grads);
            enc.backward(&fwd, &dh, &mut grads);
            Ok(Some(SampleGrad {
                loss: out.nll,
                weight: logp.rows() as f64,
                grads,
            }))
        }
    }
}

/// Mean stage loss over `batch` and its gradient (zero-filled when every
/// sample was skipped), plus the skip count.
pub fn batch_gradient(
    params: &Parameters,
    ctx: &StepContext,
    batch: &[(usize, &Sample)],
) -> Result<(Option<f64>, Parameters, usize)> {
    let parts: Vec<Result<Option<SampleGrad>>> = batch
        .par_iter()
        .map(|&(i, s)| sample_grad(params, ctx, s, i))
        .collect();
    let mut total = params.zeros_like();
    let (mut loss, mut weight, mut skipped) = (0.0, 0.0, 0);
    // Fixed-order reduction keeps results independent of thread scheduling.
    for part in parts {
        match part? {
            Some(g) => {
                loss += g.loss;
                weight += g.weight;
                total.accumulate(&g.grads);
            }
            None => skipped += 1,
        }
    }
    if weight == 0.0 {
        return Ok((None, total, skipped));
    }
    total.scale(1.0 / weight);
    Ok((Some(loss / weight), total, skipped))
}

fn clip(grads: &mut Parameters, mask: &TrainableMask, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .iter()
        .filter(|(n, _)| mask.is_trainable(n))
        .flat_map(|(_, t)| t.data.iter())
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
}

/// One optimizer step. Tensors whose mask flag is false are never written.
pub fn train_step(
    params: &mut Parameters,
    opt: &mut OptimizerState,
    mask: &TrainableMask,
    batch: &[(usize, &Sample)],
    cfg: &TrainConfig,
    model: &ModelConfig,
    quantizer: Option<&RandomQuantizer>,
) -> Result<StepReport> {
    let step = opt.step + 1;
    let lr_enc = lr_at(&cfg.enc_schedule, step)?;
    let lr_dec = lr_at(&cfg.dec_schedule, step)?;
    let ctx = StepContext {
        cfg,
        model,
        quantizer,
        step,
    };
    let (loss, mut grads, skipped) = batch_gradient(params, &ctx, batch)?;
    if let Some(l) = loss {
        if !l.is_finite() || !grads.all_finite() {
            let ids: Vec<&str> = batch.iter().map(|(_, s)| s.id.as_str()).collect();
            return Err(Error::NonFinite {
                step,
                detail: format!("{} loss {l}, batch {ids:?}", cfg.stage),
            });
        }
        clip(&mut grads, mask, cfg.clip_norm);
        opt.apply(params, &grads, |n| if is_encoder_tensor(n) { lr_enc } else { lr_dec });
    } else {
        opt.step += 1;
    }
    Ok(StepReport {
        step,
        loss,
        lr_enc,
        lr_dec,
        skipped,
        eval_loss: None,
    })
}

/// Owns parameters, optimizer state and the effective trainable mask.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelConfig,
    pub params: Parameters,
    pub mask: TrainableMask,
    pub opt: OptimizerState,
    pub quantizer: Option<RandomQuantizer>,
    pub skipped_total: usize,
    sampler: Option<BatchSampler>,
}

impl Trainer {
    /// `frozen` names tensors that must stay fixed regardless of the layer
    /// selection. The masked-prediction stage builds its quantizer and head
    /// when absent.
    pub fn new(
        cfg: TrainConfig,
        model: ModelConfig,
        mut params: Parameters,
        mut quantizer: Option<RandomQuantizer>,
        frozen: &[String],
    ) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if cfg.stage == Stage::Bestrq {
            if quantizer.is_none() {
                quantizer = Some(RandomQuantizer::new(QuantizerConfig {
                    input_dim: model.input_dim,
                    proj_dim: cfg.quantizer.proj_dim,
                    codebook_size: cfg.quantizer.codebook_size,
                    seed: splitmix64(cfg.seed ^ 0x9a47),
                })?);
            }
            let k = quantizer.as_ref().map_or(0, |q| q.config.codebook_size);
            let head_w = format!("{}.weight", bestrq::HEAD_PREFIX);
            if !params.contains(&head_w) || params.get(&head_w).shape != [k, model.model_dim] {
                params.add_head(bestrq::HEAD_PREFIX, k, model.model_dim, splitmix64(cfg.seed ^ 0x4ead));
            }
        }
        let mut mask = stage_mask(select_trainable(&params, &model, cfg.selection()?)?, cfg.stage);
        for n in frozen {
            mask.set(n, false);
        }
        let opt = OptimizerState::new(&params, &mask, cfg.adam);
        Ok(Self {
            cfg,
            model,
            params,
            mask,
            opt,
            quantizer,
            skipped_total: 0,
            sampler: None,
        })
    }

    pub fn step_count(&self) -> usize {
        self.opt.step
    }

    /// Next seeded batch from `data`, then one update.
    pub fn step(&mut self, data: &[Sample]) -> Result<StepReport> {
        let (n, bs, seed) = (data.len(), self.cfg.batch_size, self.cfg.seed);
        let sampler = self.sampler.get_or_insert_with(|| BatchSampler::new(n, bs, seed));
        let idx = sampler.batch(self.opt.step + 1);
        let batch: Vec<(usize, &Sample)> = idx.iter().map(|&i| (i, &data[i])).collect();
        let report = train_step(
            &mut self.params,
            &mut self.opt,
            &self.mask,
            &batch,
            &self.cfg,
            &self.model,
            self.quantizer.as_ref(),
        )?;
        self.skipped_total += report.skipped;
        Ok(report)
    }

    /// Loss on `data` without augmentation; masks use step 0 seeds.
    pub fn eval_loss(&self, data: &[Sample]) -> Result<Option<f64>> {
        let ctx = StepContext {
            cfg: &self.cfg,
            model: &self.model,
            quantizer: self.quantizer.as_ref(),
            step: 0,
        };
        let batch: Vec<(usize, &Sample)> = data.iter().enumerate().collect();
        Ok(batch_gradient(&self.params, &ctx, &batch)?.0)
    }

    /// Run the configured number of steps, calling `on_step` after each.
    pub fn run(
        &mut self,
        data: &[Sample],
        dev: Option<&[Sample]>,
        mut on_step: impl FnMut(&StepReport, &Trainer) -> Result<()>,
    ) -> Result<Vec<StepReport>> {
        let mut out = Vec::with_capacity(self.cfg.steps);
        while self.opt.step < self.cfg.steps {
            let mut r = self.step(data)?;
            if let Some(dev) = dev {
                if self.cfg.eval_every > 0 && r.step % self.cfg.eval_every == 0 {
                    r.eval_loss = self.eval_loss(dev)?;
                }
            }
            on_step(&r, self)?;
            out.push(r);
        }
        Ok(out)
    }

    pub fn checkpoint(&self, vocab: Option<&Vocabulary>, norm_stats: Option<&NormStats>) -> ModelCheckpoint {
        ModelCheckpoint {
            config: self.model.clone(),
            params: self.params.clone(),
            meta: CheckpointMeta {
                stage: Some(self.cfg.stage.to_string()),
                step: self.opt.step,
                vocab: vocab.cloned(),
                mvn: self.cfg.mvn,
                norm_stats: norm_stats.cloned(),
                trainable: Some(self.cfg.trainable.clone()),
            },
        }
    }
}

/// Encoder tensors copied from `ckpt`, checked against `target`; a fresh
/// decoder sized for `vocab`. Extra heads are dropped.
pub fn warm_start_scd(
    ckpt: &ModelCheckpoint,
    target: &ModelConfig,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<(ModelConfig, Parameters)> {
    let mut cfg = target.clone();
    cfg.vocab_size = vocab.len();
    cfg.validate()?;
    let mut problems = Vec::new();
    let mut params = Parameters::new();
    for (name, shape) in expected_shapes(&cfg) {
        if !is_encoder_tensor(&name) {
            continue;
        }
        if !ckpt.params.contains(&name) {
            problems.push(format!("{name}: missing"));
        } else if ckpt.params.get(&name).shape != shape {
            problems.push(format!(
                "{name}: expected {shape:?}, found {:?}",
                ckpt.params.get(&name).shape
            ));
        } else {
            params.insert(name.clone(), ckpt.params.get(&name).clone());
        }
    }
    if !problems.is_empty() {
        return Err(Error::ShapeMismatch(problems));
    }
    params.reinit_decoder(&cfg, vocab.len(), splitmix64(seed ^ 0xdec0_de00));
    Ok((cfg, params))
}

/// Trailing window for [`steps_to_threshold`]; single-batch losses are noisy.
pub const THRESHOLD_WINDOW: usize = 10;

/// First step at which the mean training loss over the last
/// [`THRESHOLD_WINDOW`] steps is at or below `threshold`, within `max_steps`.
pub fn steps_to_threshold(trainer: &mut Trainer, data: &[Sample], threshold: f64, max_steps: usize) -> Result<Option<usize>> {
    let mut recent = std::collections::VecDeque::with_capacity(THRESHOLD_WINDOW);
    for _ in 0..max_steps {
        let r = trainer.step(data)?;
        let Some(loss) = r.loss else { continue };
        if recent.len() == THRESHOLD_WINDOW {
            recent.pop_front();
        }
        recent.push_back(loss);
        let mean = recent.iter().sum::<f64>() / recent.len() as f64;
        if recent.len() == THRESHOLD_WINDOW && mean <= threshold {
            return Ok(Some(r.step));
        }
    }
    Ok(None)
}
