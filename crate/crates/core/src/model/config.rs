use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::N_WAYPOINTS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    /// Hash-bucket bag of words trained with the model.
    Scratch,
    /// Frozen vectors from an embedding file.
    Table,
}

/// Architecture of the reshaping transformer and the FCN baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub ffn_layers: usize,
    pub ffn_width: usize,
    pub use_norm: bool,
    pub dropout: f64,
    pub n_waypoints: usize,
    pub d_lang: usize,
    pub max_objects: usize,
    pub encoder: EncoderChoice,
    /// Hidden layers of the FCN baseline.
    pub fcn_layers: usize,
    pub fcn_width: usize,
    /// Std of the output-head init; small values start the model close to
    /// copying the input trajectory.
    pub head_init: f64,
    /// Std of the Gaussian noise added to teacher-fed waypoints in training
    /// steps, so the decoder learns to recover from its own drift.
    pub teacher_noise: f64,
    /// Fraction of samples in a training step whose decoder is fed the
    /// model's own autoregressive rollout instead of the target.
    pub self_feed: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            enc_blocks: 2,
            dec_blocks: 4,
            ffn_layers: 3,
            ffn_width: 128,
            use_norm: false,
            dropout: 0.0,
            n_waypoints: N_WAYPOINTS,
            d_lang: 768,
            max_objects: 6,
            encoder: EncoderChoice::Table,
            fcn_layers: 5,
            fcn_width: 128,
            head_init: 1e-3,
            teacher_noise: 0.0,
            self_feed: 1.0,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            d_model: 256,
            n_heads: 8,
            ffn_width: 512,
            dropout: 0.1,
            fcn_width: 512,
            ..ModelConfig::desk()
        }
    }

    /// Smallest configuration that still exercises every component.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            enc_blocks: 2,
            dec_blocks: 4,
            ffn_layers: 3,
            ffn_width: 8,
            use_norm: false,
            dropout: 0.0,
            n_waypoints: 6,
            d_lang: 8,
            max_objects: 6,
            encoder: EncoderChoice::Table,
            fcn_layers: 2,
            fcn_width: 8,
            head_init: 0.1,
            teacher_noise: 0.0,
            self_feed: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ModelConfig::desk()),
            "paper" => Ok(ModelConfig::paper()),
            "tiny" => Ok(ModelConfig::tiny()),
            other => Err(Error::Argument(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.enc_blocks == 0 || self.dec_blocks == 0 {
            return bad("encoder and decoder need at least one block".into());
        }
        if self.ffn_layers == 0 || self.ffn_width == 0 || self.fcn_layers == 0 || self.fcn_width == 0 {
            return bad("feed-forward layers need positive depth and width".into());
        }
        if self.n_waypoints < 3 {
            return bad(format!("need at least 3 waypoints, got {}", self.n_waypoints));
        }
        if self.d_lang == 0 || self.max_objects == 0 {
            return bad("d_lang and max_objects must be positive".into());
        }
        if !(self.teacher_noise >= 0.0 && self.teacher_noise.is_finite()) {
            return bad(format!("teacher noise {} must be finite and non-negative", self.teacher_noise));
        }
        if !(0.0..=1.0).contains(&self.self_feed) {
            return bad(format!("self feed {} outside [0, 1]", self.self_feed));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Width of the language projection input: `z_in`, the similarity
    /// vector and the similarity-weighted target pose.
    pub fn lang_input_width(&self) -> usize {
        self.d_lang + self.max_objects + 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for name in ["desk", "paper", "tiny"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("huge").is_err());
        let bad = ModelConfig {
            n_heads: 5,
            ..ModelConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn toml_round_trip_with_defaults() {
        let cfg: ModelConfig = toml::from_str("d_model = 32\nn_heads = 2").unwrap();
        assert_eq!(cfg.d_model, 32);
        assert_eq!(cfg.dec_blocks, 4);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), cfg);
    }
}
