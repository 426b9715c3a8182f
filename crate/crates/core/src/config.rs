//! Run configuration: model dimensions, loss weights, optimiser schedule and
//! synthetic-data settings. Serialised as TOML; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels of the stride-4/8/16 visual features.
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    /// Width of the frozen word embeddings.
    pub text_dim: usize,
    /// Shared visual-text width.
    pub d_model: usize,
    /// Dynamic kernel width.
    pub c0: usize,
    /// Number of candidate objects.
    pub candidates: usize,
    /// Channels per candidate in the stride-8 and stride-4 decoding features.
    pub alpha: usize,
    pub alpha_fine: usize,
    pub heads: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub max_tokens: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub dice: f64,
    pub reference: f64,
    pub focal: f64,
    pub diversity: f64,
    /// Weight of unmatched ("unreferred") candidates in the referring loss.
    pub negative: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dice: 5.0,
            reference: 5.0,
            focal: 2.0,
            diversity: 0.07,
            negative: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub encoder_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Epoch after which both learning rates are divided by `drop_factor`.
    pub drop_epoch: usize,
    pub drop_factor: f64,
    pub batch_size: usize,
    pub hflip_prob: f64,
    /// Optimiser steps over which both learning rates ramp up linearly.
    #[serde(default)]
    pub warmup_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub clips: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Pixels moved per frame by a moving object.
    pub speed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::format("preset", format!("unknown preset `{other}`"))),
        }
    }
}

impl Config {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Full-size dimensions and the published training recipe.
    pub fn paper() -> Self {
        Config {
            seed: 0,
            model: ModelConfig {
                c1: 96,
                c2: 192,
                c3: 384,
                text_dim: 768,
                d_model: 256,
                c0: 8,
                candidates: 50,
                alpha: 4,
                alpha_fine: 2,
                heads: 8,
                frames: 8,
                height: 320,
                width: 576,
                max_tokens: 32,
                dropout: 0.1,
            },
            loss: LossWeights::default(),
            optim: OptimConfig {
                lr: 1e-4,
                encoder_lr: 5e-5,
                weight_decay: 1e-4,
                clip_norm: 0.1,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                epochs: 70,
                drop_epoch: 50,
                drop_factor: 2.5,
                batch_size: 4,
                hflip_prob: 0.5,
                warmup_steps: 0,
            },
            data: DataConfig {
                clips: 64,
                min_objects: 2,
                max_objects: 4,
                min_size: 12,
                max_size: 18,
                speed: 4,
            },
            paths: PathsConfig::default(),
        }
    }

    /// CPU-sized model on 64x64 two-frame clips.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.model = ModelConfig {
            c1: 24,
            c2: 48,
            c3: 96,
            text_dim: 96,
            d_model: 64,
            c0: 8,
            candidates: 6,
            alpha: 4,
            alpha_fine: 2,
            heads: 4,
            frames: 2,
            height: 64,
            width: 64,
            max_tokens: 32,
            dropout: 0.1,
        };
        c.optim.lr = 7e-4;
        c.optim.encoder_lr = 1.5e-4;
        c.optim.beta2 = 0.99;
        c.optim.warmup_steps = 30;
        c.optim.batch_size = 2;
        c.optim.epochs = 200;
        c.optim.drop_epoch = 150;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::format("config", msg));
        if !m.height.is_multiple_of(16) || !m.width.is_multiple_of(16) || m.height == 0 || m.width == 0 {
            return bad(format!("frame size {}x{} must be a positive multiple of 16", m.height, m.width));
        }
        if m.c2 != 2 * m.c1 || m.c3 != 2 * m.c2 {
            return bad(format!("visual channels {}/{}/{} must keep ratio 1:2:4", m.c1, m.c2, m.c3));
        }
        if m.heads == 0 || !m.d_model.is_multiple_of(m.heads) {
            return bad(format!("d_model {} not divisible by {} heads", m.d_model, m.heads));
        }
        if !m.d_model.is_multiple_of(4) {
            return bad(format!("d_model {} must be divisible by 4 for 2D positional encoding", m.d_model));
        }
        if m.candidates == 0 || m.alpha == 0 || m.alpha_fine == 0 || m.c0 == 0 || m.frames == 0 {
            return bad("candidates, alpha, alpha_fine, c0 and frames must be positive".into());
        }
        if m.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("dropout {} outside [0, 1)", m.dropout));
        }
        let l = &self.loss;
        if [l.dice, l.reference, l.focal, l.diversity, l.negative, l.focal_alpha, l.focal_gamma]
            .iter()
            .any(|&w| w < 0.0 || !w.is_finite())
        {
            return bad("loss weights must be finite and non-negative".into());
        }
        let d = &self.data;
        if d.min_objects == 0 || d.min_objects > d.max_objects {
            return bad(format!("object range {}..={} is empty", d.min_objects, d.max_objects));
        }
        if d.max_objects > m.candidates {
            return bad(format!("{} objects exceed {} candidates", d.max_objects, m.candidates));
        }
        if self.optim.batch_size == 0 || self.optim.drop_factor <= 0.0 {
            return bad("batch_size and drop_factor must be positive".into());
        }
        Ok(())
    }
}
