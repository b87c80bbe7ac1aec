use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::named_rng;

pub mod names {
    pub const CONV1_W: &str = "feature_encoder.conv1.weight";
    pub const CONV1_B: &str = "feature_encoder.conv1.bias";
    pub const CONV2_W: &str = "feature_encoder.conv2.weight";
    pub const CONV2_B: &str = "feature_encoder.conv2.bias";
    pub const PROJ_W: &str = "input_projection.weight";
    pub const PROJ_B: &str = "input_projection.bias";
    pub const DEC_W: &str = "decoder.weight";
    pub const DEC_B: &str = "decoder.bias";
    pub const LAYER_PREFIX: &str = "encoder.layers.";
    pub const BLOCK_TENSORS: [&str; 16] = [
        "attn_norm.gain",
        "attn_norm.bias",
        "attn.q.weight",
        "attn.q.bias",
        "attn.k.weight",
        "attn.k.bias",
        "attn.v.weight",
        "attn.v.bias",
        "attn.o.weight",
        "attn.o.bias",
        "ff_norm.gain",
        "ff_norm.bias",
        "ff.w1.weight",
        "ff.w1.bias",
        "ff.w2.weight",
        "ff.w2.bias",
    ];

    pub fn layer(i: usize, tensor: &str) -> String {
        format!("{LAYER_PREFIX}{i}.{tensor}")
    }

    /// Encoder layer index of a tensor name, if it belongs to a layer.
    pub fn layer_of(name: &str) -> Option<usize> {
        name.strip_prefix(LAYER_PREFIX)?
            .split('.')
            .next()?
            .parse()
            .ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform in ±1/sqrt(fan_in).
    FanIn(usize),
    Zeros,
    Ones,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, tensor));
            }
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|(n, _)| !n.starts_with(prefix));
        self.reindex();
    }

    fn reindex(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Panics on unknown names; layouts are fixed by [`ModelConfig`].
    pub fn get(&self, name: &str) -> &Tensor {
        match self.index.get(name) {
            Some(&i) => &self.entries[i].1,
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        match self.index.get(name) {
            Some(&i) => &mut self.entries[i].1,
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn data(&self, name: &str) -> &[f64] {
        &self.get(name).data
    }

    pub fn data_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self.get_mut(name).data
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in &mut out.entries {
            t.data.fill(0.0);
        }
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += other` for tensors present in both.
    pub fn accumulate(&mut self, other: &Parameters) {
        for (name, t) in &mut self.entries {
            if let Some(&j) = other.index.get(name) {
                for (a, b) in t.data.iter_mut().zip(&other.entries[j].1.data) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in &mut self.entries {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }

    /// Fresh parameters for the whole model, deterministic in `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::new();
        for (name, shape, init) in layout(cfg) {
            p.insert(name.clone(), make(&name, &shape, init, cfg.seed));
        }
        Ok(p)
    }

    /// Replace the decoder projection with a fresh one for `vocab_size` outputs.
    pub fn reinit_decoder(&mut self, cfg: &ModelConfig, vocab_size: usize, seed: u64) {
        let d = cfg.model_dim;
        self.insert(
            names::DEC_W,
            make(names::DEC_W, &[vocab_size, d], Init::FanIn(d), seed),
        );
        self.insert(names::DEC_B, Tensor::zeros(&[vocab_size]));
    }

    /// Add a `classes`-way linear head on the encoder output under `prefix`.
    pub fn add_head(&mut self, prefix: &str, classes: usize, model_dim: usize, seed: u64) {
        let w = format!("{prefix}.weight");
        let t = make(&w, &[classes, model_dim], Init::FanIn(model_dim), seed);
        self.insert(w, t);
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[classes]));
    }
}

fn make(name: &str, shape: &[usize], init: Init, seed: u64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    match init {
        Init::Zeros => {}
        Init::Ones => t.data.fill(1.0),
        Init::FanIn(fan_in) => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = named_rng(seed, name);
            for v in &mut t.data {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
    t
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let [c1, c2] = cfg.conv_channels;
    let d = cfg.model_dim;
    let ff = cfg.ff_dim();
    let proj_in = cfg.feature_encoder_dim() + cfg.n_languages;
    let mut out = vec![
        (names::CONV1_W.to_owned(), vec![c1, 1, 3, 3], Init::FanIn(9)),
        (names::CONV1_B.to_owned(), vec![c1], Init::Zeros),
        (names::CONV2_W.to_owned(), vec![c2, c1, 3, 3], Init::FanIn(9 * c1)),
        (names::CONV2_B.to_owned(), vec![c2], Init::Zeros),
        (names::PROJ_W.to_owned(), vec![d, proj_in], Init::FanIn(proj_in)),
        (names::PROJ_B.to_owned(), vec![d], Init::Zeros),
    ];
    for l in 0..cfg.n_layers {
        for tensor in names::BLOCK_TENSORS {
            let (shape, init) = match tensor {
                "attn_norm.gain" | "ff_norm.gain" => (vec![d], Init::Ones),
                "ff.w1.weight" => (vec![ff, d], Init::FanIn(d)),
                "ff.w1.bias" => (vec![ff], Init::Zeros),
                "ff.w2.weight" => (vec![d, ff], Init::FanIn(ff)),
                t if t.ends_with("weight") => (vec![d, d], Init::FanIn(d)),
                _ => (vec![d], Init::Zeros),
            };
            out.push((names::layer(l, tensor), shape, init));
        }
    }
    out.push((names::DEC_W.to_owned(), vec![cfg.vocab_size, d], Init::FanIn(d)));
    out.push((names::DEC_B.to_owned(), vec![cfg.vocab_size], Init::Zeros));
    out
}

/// Names and shapes every checkpoint for `cfg` must provide.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// True for tensors of the feature encoder, input projection or encoder layers.
pub fn is_encoder_tensor(name: &str) -> bool {
    name.starts_with("feature_encoder.")
        || name.starts_with("input_projection.")
        || name.starts_with(names::LAYER_PREFIX)
}

/// Which encoder layers to fine-tune.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSelection {
    First(usize),
    Last(usize),
    FirstAndLast(usize),
    All,
}

impl FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self::All);
        }
        let parse_k = |k: &str| {
            k.parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("bad layer selection {s:?}")))
        };
        if let Some(k) = s.strip_prefix("first_and_last_") {
            Ok(Self::FirstAndLast(parse_k(k)?))
        } else if let Some(k) = s.strip_prefix("first_") {
            Ok(Self::First(parse_k(k)?))
        } else if let Some(k) = s.strip_prefix("last_") {
            Ok(Self::Last(parse_k(k)?))
        } else {
            Err(Error::InvalidConfig(format!(
                "bad layer selection {s:?} (expected all, first_K, last_K or first_and_last_K)"
            )))
        }
    }
}

impl std::fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::First(k) => write!(f, "first_{k}"),
            Self::Last(k) => write!(f, "last_{k}"),
            Self::FirstAndLast(k) => write!(f, "first_and_last_{k}"),
            Self::All => f.write_str("all"),
        }
    }
}

impl LayerSelection {
    pub fn layers(&self, n_layers: usize) -> Result<Vec<bool>> {
        let k = match *self {
            Self::All => return Ok(vec![true; n_layers]),
            Self::First(k) | Self::Last(k) | Self::FirstAndLast(k) => k,
        };
        if k > n_layers {
            return Err(Error::SelectionOutOfRange { k, n_layers });
        }
        Ok((0..n_layers)
            .map(|l| match self {
                Self::First(_) => l < k,
                Self::Last(_) => l >= n_layers - k,
                Self::FirstAndLast(_) => l < k || l >= n_layers - k,
                Self::All => true,
            })
            .collect())
    }
}

/// Per-tensor trainable flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableMask {
    flags: BTreeMap<String, bool>,
}

impl TrainableMask {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.flags.get(name).copied().unwrap_or(false)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.flags.iter().map(|(n, f)| (n.as_str(), *f))
    }

    pub fn n_trainable(&self) -> usize {
        self.flags.values().filter(|f| **f).count()
    }

    pub fn set(&mut self, name: &str, flag: bool) {
        if let Some(f) = self.flags.get_mut(name) {
            *f = flag;
        }
    }
}

/// Feature encoder, input projection, decoder and extra heads are always
/// trainable; encoder layers follow `selection`.
pub fn select_trainable(
    params: &Parameters,
    cfg: &ModelConfig,
    selection: LayerSelection,
) -> Result<TrainableMask> {
    let layers = selection.layers(cfg.n_layers)?;
    let flags = params
        .names()
        .map(|n| {
            let flag = match names::layer_of(n) {
                Some(l) => layers.get(l).copied().unwrap_or(false),
                None => true,
            };
            (n.to_owned(), flag)
        })
        .collect();
    Ok(TrainableMask { flags })
}
