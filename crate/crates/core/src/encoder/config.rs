use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub n_languages: usize,
    /// Output channels of the two strided convolutions.
    #[serde(default = "default_conv_channels")]
    pub conv_channels: [usize; 2],
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub ff_dim: usize,
    /// Frames per attention chunk, counted after downsampling.
    pub chunk_frames: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_conv_channels() -> [usize; 2] {
    [8, 8]
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_dim == 0 || self.n_languages == 0 || self.vocab_size < 2 {
            return bad("input_dim, n_languages must be >= 1 and vocab_size >= 2".into());
        }
        if self.conv_channels.contains(&0) {
            return bad("conv channels must be >= 1".into());
        }
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1".into());
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            ));
        }
        if self.chunk_frames == 0 {
            return bad("chunk_frames must be >= 1".into());
        }
        Ok(())
    }

    pub fn ff_dim(&self) -> usize {
        if self.ff_dim == 0 {
            4 * self.model_dim
        } else {
            self.ff_dim
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    /// Frequency bins after each strided convolution.
    pub fn freq_bins(&self) -> [usize; 2] {
        let f1 = self.input_dim.div_ceil(2);
        [f1, f1.div_ceil(2)]
    }

    /// Width of a flattened feature-encoder frame.
    pub fn feature_encoder_dim(&self) -> usize {
        self.conv_channels[1] * self.freq_bins()[1]
    }

    pub fn downsampled_frames(n_frames: usize) -> usize {
        n_frames.div_ceil(2).div_ceil(2)
    }
}
