//! Command-line front end: `synth | train | decode | score`.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 3 runtime failure.

mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use scdlab::bestrq::RandomQuantizer;
use scdlab::corpus::synth::{CONFIG_FILE, VOCAB_FILE};
use scdlab::corpus::{read_manifest, synth_corpus, SynthConfig, TokenizerMode, Utterance, Vocabulary};
use scdlab::ctc::{
    ctc_greedy_decode, frame_argmax, write_hyps, DecodeConfig, HypRecord, LogPosteriorMatrix, TimestampMode,
};
use scdlab::encoder::{Encoder, ModelCheckpoint, ModelConfig, Parameters};
use scdlab::features::{scdf, FeatureMatrix, MvnMode, NormStats, DEFAULT_FRAME_SHIFT_S};
use scdlab::fsio;
use scdlab::scoring::{aggregate, orphans, score_corpus, Grouping, DEFAULT_COLLAR_S};
use scdlab::training::{build_samples, normalize, warm_start_scd, Stage, StepReport, TrainConfig, Trainer};

use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const SEED_ENV: &str = "SCDLAB_SEED";
pub const MODEL_FILE: &str = "model.scdt";
pub const QUANTIZER_FILE: &str = "quantizer.scdt";
pub const LAST_GOOD_FILE: &str = "last_good.scdt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const SWEEP_JSON: &str = "sweep_summary.json";
pub const SWEEP_TXT: &str = "sweep_summary.txt";

/// Encoder frames span this many feature frames.
const DOWNSAMPLE: f64 = 4.0;

#[derive(Parser)]
#[command(name = "scdlab", version, about = "Speaker change detection with <st>-augmented CTC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic speaker-labelled corpus.
    Synth(SynthArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Greedy decoding with optional `<st>` posterior scaling.
    Decode(DecodeArgs),
    /// Score hypotheses against reference manifests.
    Score(ScoreArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic corpus config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; falls back to $SCDLAB_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Bestrq,
    Asr,
    Scd,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Bestrq => Stage::Bestrq,
            StageArg::Asr => Stage::Asr,
            StageArg::Scd => Stage::Scd,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Training config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Corpus directory as written by `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model config (JSON); required unless `--init` supplies one.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Checkpoint to continue from or warm-start the encoder with.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Allow the scd stage to start from random weights.
    #[arg(long)]
    from_scratch: bool,
    /// Encoder layers to fine-tune, e.g. `first_and_last_4`.
    #[arg(long)]
    freeze: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TimestampArg {
    Onset,
    Center,
}

#[derive(Args)]
struct DecodeArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Manifest name inside the corpus directory.
    #[arg(long, default_value = "test")]
    split: String,
    /// Single `<st>` posterior scale λ.
    #[arg(long, conflicts_with = "st_scale_sweep", allow_negative_numbers = true)]
    st_scale: Option<f64>,
    /// Sweep `a:b:step`, e.g. `1:9:1`.
    #[arg(long, allow_hyphen_values = true)]
    st_scale_sweep: Option<String>,
    #[arg(long, value_enum, default_value = "onset")]
    timestamps: TimestampArg,
    /// Collar for the sweep summary metrics.
    #[arg(long, default_value_t = DEFAULT_COLLAR_S)]
    collar: f64,
    /// Also write per-utterance log-posteriors.
    #[arg(long)]
    dump_posteriors: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    Language,
    Pooled,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnitArg {
    Word,
    Char,
}

#[derive(Args)]
struct ScoreArgs {
    /// Reference manifest (JSON lines).
    #[arg(long)]
    refs: PathBuf,
    /// Hypothesis file (JSON lines).
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long, default_value_t = DEFAULT_COLLAR_S)]
    collar: f64,
    #[arg(long, value_enum, default_value = "pooled")]
    group_by: GroupArg,
    #[arg(long, value_enum, default_value = "word")]
    unit: UnitArg,
    #[arg(long)]
    out: PathBuf,
}

/// Invalid invocation or inputs; maps to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<scdlab::Error>() {
        Some(scdlab::Error::NonFinite { .. } | scdlab::Error::Io { .. }) | None => EXIT_RUNTIME,
        Some(_) => EXIT_USAGE,
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Score(a) => cmd_score(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// `--seed`, then `$SCDLAB_SEED`, then the config value, then 0.
fn master_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(config.unwrap_or(0)),
    }
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} not found", p.display())))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path, what: &str) -> Result<T> {
    require_file(p, what)?;
    let text = fsio::read_to_string(p)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{what} {}: {e}", p.display())))
}

fn write_json<T: Serialize>(p: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(fsio::write_atomic(p, &bytes)?)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg: SynthConfig = read_json(&a.config, "synth config")?;
    cfg.validate()?;
    let seed = master_seed(a.seed, None)?;
    let corpus = synth_corpus(&cfg, seed)?;
    let written = corpus.write(&a.out)?;
    let mut m = RunManifest::new("synth", Some(&a.config), seed, json!({ "synth": cfg }));
    m.input(&a.config);
    m.finish(&a.out, written)?;
    println!(
        "wrote {} train / {} test utterances ({:.1} min of features) to {}",
        corpus.train.len(),
        corpus.test.len(),
        corpus.total_frames() as f64 * cfg.frame_shift_s / 60.0,
        a.out.display()
    );
    Ok(())
}

struct CorpusDir {
    dir: PathBuf,
    max_utterance_s: f64,
}

impl CorpusDir {
    fn open(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(usage(format!("corpus directory {} not found", dir.display())));
        }
        let cfg_path = dir.join(CONFIG_FILE);
        let max_utterance_s = if cfg_path.is_file() {
            read_json::<SynthConfig>(&cfg_path, "corpus config")?.max_utterance_s
        } else {
            scdlab::corpus::DEFAULT_MAX_UTTERANCE_S
        };
        Ok(Self {
            dir: dir.to_owned(),
            max_utterance_s,
        })
    }

    fn vocab(&self) -> Result<Vocabulary> {
        read_json(&self.dir.join(VOCAB_FILE), "vocabulary")
    }

    fn manifest_path(&self, split: &str) -> PathBuf {
        self.dir.join(format!("{split}.jsonl"))
    }

    fn has_split(&self, split: &str) -> bool {
        self.manifest_path(split).is_file()
    }

    fn split(&self, split: &str) -> Result<(Vec<Utterance>, BTreeMap<String, FeatureMatrix>)> {
        let path = self.manifest_path(split);
        require_file(&path, "manifest")?;
        let utts = read_manifest(&path, self.max_utterance_s)?;
        let mut feats = BTreeMap::new();
        for u in &utts {
            let rel = u
                .feature_file
                .as_ref()
                .ok_or_else(|| usage(format!("utterance {} has no feature_file", u.id)))?;
            let f = FeatureMatrix::load(&self.dir.join(rel), DEFAULT_FRAME_SHIFT_S)?;
            feats.insert(u.id.clone(), f);
        }
        Ok((utts, feats))
    }
}

fn check_model_fits(model: &ModelConfig, vocab: &Vocabulary, feats: &BTreeMap<String, FeatureMatrix>, utts: &[Utterance]) -> Result<()> {
    if model.vocab_size != vocab.len() {
        return Err(usage(format!(
            "model vocab_size {} does not match corpus vocabulary of {}",
            model.vocab_size,
            vocab.len()
        )));
    }
    if let Some(f) = feats.values().next() {
        if f.dim() != model.input_dim {
            return Err(usage(format!("model input_dim {} but features have {}", model.input_dim, f.dim())));
        }
    }
    if let Some(u) = utts.iter().find(|u| u.language_id >= model.n_languages) {
        return Err(usage(format!(
            "utterance {} has language {} but the model has {} languages",
            u.id, u.language_id, model.n_languages
        )));
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = read_json(&a.config, "training config")?;
    cfg.stage = a.stage.into();
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(f) = &a.freeze {
        cfg.trainable = f.clone();
    }
    cfg.seed = master_seed(a.seed, Some(cfg.seed))?;
    cfg.validate()?;
    if cfg.stage == Stage::Scd && a.init.is_none() && !a.from_scratch {
        return Err(usage("the scd stage needs --init <checkpoint> or --from-scratch"));
    }
    let corpus = CorpusDir::open(&a.data)?;
    let vocab = corpus.vocab()?;
    let (train, feats) = corpus.split("train")?;
    let explicit_model: Option<ModelConfig> = a.model.as_deref().map(|p| read_json(p, "model config")).transpose()?;

    let mut quantizer = None;
    let (model, params) = match &a.init {
        Some(init) => {
            require_file(init, "checkpoint")?;
            let ckpt = ModelCheckpoint::load(init)?;
            match cfg.stage {
                Stage::Bestrq => {
                    let q = init.with_file_name(QUANTIZER_FILE);
                    if q.is_file() {
                        quantizer = Some(RandomQuantizer::load(&q)?);
                    }
                    (ckpt.config, ckpt.params)
                }
                Stage::Asr | Stage::Scd => {
                    let target = explicit_model.clone().unwrap_or_else(|| ckpt.config.clone());
                    warm_start_scd(&ckpt, &target, &vocab, cfg.seed)?
                }
            }
        }
        None => {
            let mut model = explicit_model
                .clone()
                .ok_or_else(|| usage("--model <config> is required without --init"))?;
            model.seed = cfg.seed;
            let params = Parameters::init(&model)?;
            (model, params)
        }
    };
    check_model_fits(&model, &vocab, &feats, &train)?;

    let stats = (cfg.mvn == MvnMode::Global).then(|| NormStats::from_features(feats.values()));
    let samples = build_samples(&train, &feats, &vocab, cfg.stage, cfg.trailing_st, cfg.mvn, stats.as_ref())?;
    let dev = if cfg.eval_every > 0 && corpus.has_split("test") {
        let (u, f) = corpus.split("test")?;
        Some(build_samples(&u, &f, &vocab, cfg.stage, cfg.trailing_st, cfg.mvn, stats.as_ref())?)
    } else {
        None
    };

    let mut trainer = Trainer::new(cfg.clone(), model.clone(), params, quantizer, &[])?;
    let out = a.out.clone();
    let mut log_lines: Vec<StepReport> = Vec::new();
    let mut outputs: Vec<String> = Vec::new();
    let every = cfg.checkpoint_every;
    let result = trainer.run(&samples, dev.as_deref(), |r, t| {
        log_lines.push(r.clone());
        if let Some(l) = r.loss {
            log::info!("step {} loss {l:.4} skipped {}", r.step, r.skipped);
        }
        if every > 0 && r.step % every == 0 && r.step < t.cfg.steps {
            let name = format!("ckpt_step{:06}.scdt", r.step);
            t.checkpoint(Some(&vocab), stats.as_ref()).save(&out.join(&name))?;
            fsio::write_atomic(&out.join(LOG_FILE), &fsio::to_jsonl(&log_lines)?)?;
            outputs.push(name);
        }
        Ok(())
    });
    fsio::write_atomic(&out.join(LOG_FILE), &fsio::to_jsonl(&log_lines)?)?;
    if let Err(e) = result {
        if matches!(e, scdlab::Error::NonFinite { .. }) {
            // Parameters are untouched by the failing step.
            trainer.checkpoint(Some(&vocab), stats.as_ref()).save(&out.join(LAST_GOOD_FILE))?;
            eprintln!("kept last good parameters in {}", out.join(LAST_GOOD_FILE).display());
        }
        return Err(e.into());
    }
    trainer.checkpoint(Some(&vocab), stats.as_ref()).save(&out.join(MODEL_FILE))?;
    outputs.push(MODEL_FILE.into());
    outputs.push(LOG_FILE.into());
    if let Some(q) = &trainer.quantizer {
        q.save(&out.join(QUANTIZER_FILE))?;
        outputs.push(QUANTIZER_FILE.into());
    }
    let frozen: Vec<&str> = trainer.mask.iter().filter(|(_, f)| !f).map(|(n, _)| n).collect();
    let settings = json!({
        "stage": cfg.stage,
        "train": cfg,
        "model": model,
        "freeze": cfg.trainable,
        "init": a.init.as_ref().map(|p| p.display().to_string()),
        "from_scratch": a.from_scratch,
        "frozen_tensors": frozen,
        "skipped_samples": trainer.skipped_total,
    });
    let mut m = RunManifest::new("train", Some(&a.config), cfg.seed, settings);
    m.input(&a.config);
    m.input(&a.data);
    if let Some(p) = &a.model {
        m.input(p);
    }
    if let Some(p) = &a.init {
        m.input(p);
    }
    m.finish(&a.out, outputs)?;
    let last = log_lines.iter().rev().find_map(|r| r.loss);
    println!(
        "{} stage: {} steps, final loss {}, {} skipped samples",
        cfg.stage,
        trainer.step_count(),
        last.map_or("n/a".into(), |l| format!("{l:.4}")),
        trainer.skipped_total
    );
    Ok(())
}

/// `a:b:step`, inclusive of `b` up to rounding.
fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("bad sweep {s:?}; expected a:b:step")))?;
    let [a, b, step] = parts[..] else {
        return Err(usage(format!("bad sweep {s:?}; expected a:b:step")));
    };
    if !(step > 0.0) || b < a {
        return Err(usage(format!("bad sweep {s:?}; need step > 0 and a <= b")));
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| a + i as f64 * step).collect())
}

#[derive(Serialize)]
struct SweepRow {
    lambda: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    wer: f64,
    /// Frames whose scaled argmax is `<st>`.
    st_frame_wins: usize,
    n_st_hyp: usize,
    hyp_file: String,
}

#[derive(Serialize)]
struct SweepSummary {
    collar_s: f64,
    best_lambda: f64,
    rows: Vec<SweepRow>,
}

fn hyp_file_name(lambda: f64) -> String {
    format!("hyp_lambda_{lambda:.2}.jsonl")
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let lambdas = match (&a.st_scale_sweep, a.st_scale) {
        (Some(s), _) => parse_sweep(s)?,
        (None, Some(l)) => vec![l],
        (None, None) => vec![1.0],
    };
    if let Some(bad) = lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(usage(format!("--st-scale must be positive, got {bad}")));
    }
    require_file(&a.model, "checkpoint")?;
    let ckpt = ModelCheckpoint::load(&a.model)?;
    let corpus = CorpusDir::open(&a.data)?;
    let vocab = match &ckpt.meta.vocab {
        Some(v) => v.clone(),
        None => corpus.vocab()?,
    };
    let (utts, feats) = corpus.split(&a.split)?;
    check_model_fits(&ckpt.config, &vocab, &feats, &utts)?;
    let enc = Encoder::new(&ckpt.config, &ckpt.params);
    let mut posteriors = Vec::with_capacity(utts.len());
    let mut outputs = Vec::new();
    for u in &utts {
        let f = normalize(&feats[&u.id], ckpt.meta.mvn, ckpt.meta.norm_stats.as_ref())?;
        let hidden = enc.encode(f.data(), u.language_id)?;
        let logp = enc.decoder_projection(&hidden);
        if a.dump_posteriors {
            let rel = format!("posteriors/{}.scdf", u.id);
            scdf::write(&a.out.join(&rel), &logp)?;
            outputs.push(rel);
        }
        posteriors.push(LogPosteriorMatrix::new(logp, f.frame_shift_s() * DOWNSAMPLE)?);
    }
    let timestamp = match a.timestamps {
        TimestampArg::Onset => TimestampMode::Onset,
        TimestampArg::Center => TimestampMode::Center,
    };
    let mut rows = Vec::new();
    for &lambda in &lambdas {
        let cfg = DecodeConfig {
            st_scale: lambda,
            timestamp,
        };
        let mut hyps = Vec::with_capacity(utts.len());
        let mut wins = 0;
        for (u, lp) in utts.iter().zip(&posteriors) {
            let r = ctc_greedy_decode(lp, &vocab, &cfg)?;
            wins += frame_argmax(lp.logp(), vocab.st_id(), lambda)
                .iter()
                .filter(|&&k| k == vocab.st_id())
                .count();
            hyps.push(HypRecord {
                id: u.id.clone(),
                tokens: vocab.detokenize(r.tokens.ids()),
                times_s: r.token_times_s,
                st_times_s: r.st_times_s,
                lambda,
            });
        }
        let name = hyp_file_name(lambda);
        write_hyps(&a.out.join(&name), &hyps)?;
        if a.st_scale_sweep.is_some() {
            let scores = score_corpus(&utts, &hyps, a.collar, vocab.mode())?;
            let pooled = aggregate(&scores, Grouping::Pooled, ckpt.config.n_languages).pooled;
            rows.push(SweepRow {
                lambda,
                precision: pooled.precision,
                recall: pooled.recall,
                f1: pooled.f1,
                wer: pooled.wer,
                st_frame_wins: wins,
                n_st_hyp: pooled.counts.n_hyp,
                hyp_file: name.clone(),
            });
        }
        outputs.push(name);
    }
    if !rows.is_empty() {
        // Highest F1; the smallest λ wins ties.
        let best = rows.iter().fold(&rows[0], |b, r| if r.f1 > b.f1 { r } else { b });
        let summary = SweepSummary {
            collar_s: a.collar,
            best_lambda: best.lambda,
            rows,
        };
        let table = sweep_table(&summary);
        write_json(&a.out.join(SWEEP_JSON), &summary)?;
        fsio::write_atomic(&a.out.join(SWEEP_TXT), table.as_bytes())?;
        print!("{table}");
        outputs.push(SWEEP_JSON.into());
        outputs.push(SWEEP_TXT.into());
    }
    let settings = json!({
        "lambdas": lambdas,
        "split": a.split,
        "timestamps": timestamp,
        "collar_s": a.collar,
        "dump_posteriors": a.dump_posteriors,
    });
    let seed = master_seed(None, Some(ckpt.config.seed))?;
    let mut m = RunManifest::new("decode", None, seed, settings);
    m.input(&a.model);
    m.input(&corpus.manifest_path(&a.split));
    m.finish(&a.out, outputs)?;
    Ok(())
}

fn sweep_table(s: &SweepSummary) -> String {
    let mut out = format!(
        "{:>8}{:>11}{:>9}{:>8}{:>8}{:>10}\n",
        "lambda", "Precision", "Recall", "F1", "WER", "st_wins"
    );
    for r in &s.rows {
        out.push_str(&format!(
            "{:>8.2}{:>11.1}{:>9.1}{:>8.1}{:>8.1}{:>10}\n",
            r.lambda, r.precision, r.recall, r.f1, r.wer, r.st_frame_wins
        ));
    }
    out.push_str(&format!("best lambda {:.2}\n", s.best_lambda));
    out
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    require_file(&a.refs, "reference manifest")?;
    require_file(&a.hyps, "hypothesis file")?;
    if !(a.collar >= 0.0) {
        return Err(usage(format!("--collar must be >= 0, got {}", a.collar)));
    }
    let refs = read_manifest(&a.refs, f64::INFINITY)?;
    let hyps = scdlab::ctc::read_hyps(&a.hyps)?;
    let o = orphans(&refs, &hyps);
    if !o.is_empty() {
        return Err(usage(format!(
            "ids do not match: only in refs {:?}; only in hyps {:?}",
            o.refs_only, o.hyps_only
        )));
    }
    let unit = match a.unit {
        UnitArg::Word => TokenizerMode::Word,
        UnitArg::Char => TokenizerMode::Char,
    };
    let grouping = match a.group_by {
        GroupArg::Language => Grouping::Language,
        GroupArg::Pooled => Grouping::Pooled,
    };
    let scores = score_corpus(&refs, &hyps, a.collar, unit)?;
    let n_lang = refs.iter().map(|u| u.language_id + 1).max().unwrap_or(0);
    let report = aggregate(&scores, grouping, n_lang);
    let table = report.table();
    write_json(&a.out.join(REPORT_JSON), &report)?;
    fsio::write_atomic(&a.out.join(REPORT_TXT), table.as_bytes())?;
    print!("{table}");
    let settings = json!({ "collar_s": a.collar, "group_by": grouping, "unit": unit });
    let mut m = RunManifest::new("score", None, master_seed(None, None)?, settings);
    m.input(&a.refs);
    m.input(&a.hyps);
    m.finish(&a.out, [REPORT_JSON.to_owned(), REPORT_TXT.to_owned()])?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        assert_eq!(parse_sweep("1:9:1").unwrap(), (1..=9).map(f64::from).collect::<Vec<_>>());
        assert_eq!(parse_sweep("0.5:1.5:0.5").unwrap(), vec![0.5, 1.0, 1.5]);
        assert!(parse_sweep("1:9").is_err());
        assert!(parse_sweep("1:9:0").is_err());
        assert!(parse_sweep("9:1:1").is_err());
    }

    #[test]
    fn file_names() {
        assert_eq!(hyp_file_name(1.0), "hyp_lambda_1.00.jsonl");
        assert_eq!(hyp_file_name(2.5), "hyp_lambda_2.50.jsonl");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&usage("x")), EXIT_USAGE);
        assert_eq!(exit_code(&scdlab::Error::StepZero.into()), EXIT_USAGE);
        let nan = scdlab::Error::NonFinite { step: 1, detail: String::new() };
        assert_eq!(exit_code(&anyhow::Error::from(nan).context("training")), EXIT_RUNTIME);
    }
}
