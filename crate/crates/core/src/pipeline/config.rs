//! `key = value` configuration files for training stages and model shapes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::generator::{DetectorConfig, SegmenterConfig};
use crate::prompt::PromptEncoderConfig;

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
    Detector,
    Segmenter,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Detector => "detector",
            Stage::Segmenter => "segmenter",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            "detector" => Ok(Stage::Detector),
            "segmenter" => Ok(Stage::Segmenter),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: Option<u64>,
    pub freeze_encoder: bool,
    pub freeze_prompt_encoder: bool,
    /// Fraction of the training split held out for model selection.
    pub validation_fraction: f64,
    /// Train/test split of a dataset directory.
    pub train_fraction: f64,
    pub split_seed: u64,
    pub augment: bool,
}

impl TrainConfig {
    pub fn defaults(stage: Stage) -> Self {
        let (lr, epochs, batch_size, freeze, augment) = match stage {
            Stage::Pretrain => (1e-4, 30, 8, false, true),
            Stage::Finetune => (1e-4, 20, 32, true, true),
            Stage::Detector => (1e-4, 100, 16, false, true),
            Stage::Segmenter => (1e-4, 100, 8, false, false),
        };
        TrainConfig {
            stage,
            lr,
            epochs,
            batch_size,
            seed: None,
            freeze_encoder: freeze,
            freeze_prompt_encoder: freeze,
            validation_fraction: 0.1,
            train_fraction: 0.8,
            split_seed: 0,
            augment,
        }
    }

    /// Applies overrides; `stage` itself may not change.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            match k.as_str() {
                "stage" => {
                    let s: Stage = v.parse()?;
                    if s != self.stage {
                        return Err(Error::Config(format!("config is for stage `{s}`, command runs `{}`", self.stage)));
                    }
                }
                "lr" => self.lr = value(k, v)?,
                "epochs" => self.epochs = value(k, v)?,
                "batch_size" => self.batch_size = value(k, v)?,
                "seed" => self.seed = Some(value(k, v)?),
                "freeze_encoder" => self.freeze_encoder = flag(k, v)?,
                "freeze_prompt_encoder" => self.freeze_prompt_encoder = flag(k, v)?,
                "validation_fraction" => self.validation_fraction = value(k, v)?,
                "train_fraction" => self.train_fraction = value(k, v)?,
                "split_seed" => self.split_seed = value(k, v)?,
                "augment" => self.augment = flag(k, v)?,
                _ if ModelConfig::is_key(k) => {}
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("lr, epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!("validation_fraction {} outside [0, 1)", self.validation_fraction)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        let frozen = self.freeze_encoder && self.freeze_prompt_encoder;
        let thawed = !self.freeze_encoder && !self.freeze_prompt_encoder;
        match self.stage {
            Stage::Finetune if !frozen => Err(Error::Config("finetune requires both freeze flags".into())),
            Stage::Pretrain if !thawed => Err(Error::Config("pretrain trains every component; unset freeze flags".into())),
            _ => Ok(()),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("missing seed; pass --seed".into()))
    }
}

/// Shapes of every model in a bundle. The embedding width `C` is shared by
/// the encoder neck, prompt encoder and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prompt: PromptEncoderConfig,
    pub decoder: DecoderConfig,
    pub detector: DetectorConfig,
    pub segmenter: SegmenterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            prompt: PromptEncoderConfig::default(),
            decoder: DecoderConfig::default(),
            detector: DetectorConfig::default(),
            segmenter: SegmenterConfig::default(),
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "input_size",
    "embed_dim",
    "encoder.patch_size",
    "encoder.width",
    "encoder.blocks",
    "encoder.heads",
    "encoder.window",
    "encoder.global_blocks",
    "decoder.heads",
    "detector.channels",
    "detector.context_convs",
    "segmenter.channels",
];

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| value(key, p.trim())).collect()
}

impl ModelConfig {
    pub fn is_key(k: &str) -> bool {
        MODEL_KEYS.contains(&k)
    }

    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            match k.as_str() {
                "input_size" => {
                    let n: usize = value(k, v)?;
                    self.encoder.input_size = n;
                    self.prompt.input_size = n;
                    self.detector.input_size = n;
                    self.segmenter.input_size = n;
                }
                "embed_dim" => {
                    let c: usize = value(k, v)?;
                    self.encoder.neck_channels = c;
                    self.prompt.embed_dim = c;
                    let heads = self.decoder.num_heads;
                    self.decoder = DecoderConfig::with_dim(c);
                    self.decoder.num_heads = heads;
                }
                "encoder.patch_size" => self.encoder.patch_size = value(k, v)?,
                "encoder.width" => self.encoder.embed_dim = value(k, v)?,
                "encoder.blocks" => self.encoder.num_blocks = value(k, v)?,
                "encoder.heads" => self.encoder.num_heads = value(k, v)?,
                "encoder.window" => self.encoder.window_size = value(k, v)?,
                "encoder.global_blocks" => self.encoder.global_block_indices = list(k, v)?,
                "decoder.heads" => self.decoder.num_heads = value(k, v)?,
                "detector.channels" => {
                    let c = list(k, v)?;
                    self.detector.channels = c
                        .try_into()
                        .map_err(|_| Error::Config("detector.channels needs four values".into()))?;
                }
                "detector.context_convs" => self.detector.context_convs = value(k, v)?,
                "segmenter.channels" => {
                    let c = list(k, v)?;
                    self.segmenter.channels = c
                        .try_into()
                        .map_err(|_| Error::Config("segmenter.channels needs two values".into()))?;
                }
                _ => {}
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompt.validate()?;
        self.decoder.validate()?;
        self.detector.validate()?;
        let n = self.encoder.input_size;
        let c = self.encoder.neck_channels;
        if self.prompt.input_size != n || self.detector.input_size != n || self.segmenter.input_size != n {
            return Err(Error::Config("all models must share input_size".into()));
        }
        if self.prompt.embed_dim != c || self.decoder.token_dim != c {
            return Err(Error::Config(format!(
                "embedding width mismatch: neck {c}, prompt {}, decoder {}",
                self.prompt.embed_dim, self.decoder.token_dim
            )));
        }
        if self.prompt.mask_side() != 4 * self.encoder.grid_side() {
            return Err(Error::Config("mask prompt side must be 4·G".into()));
        }
        Ok(())
    }

    /// Round-trippable `key = value` form.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("input_size".into(), self.encoder.input_size.to_string()),
            ("embed_dim".into(), self.encoder.neck_channels.to_string()),
            ("encoder.patch_size".into(), self.encoder.patch_size.to_string()),
            ("encoder.width".into(), self.encoder.embed_dim.to_string()),
            ("encoder.blocks".into(), self.encoder.num_blocks.to_string()),
            ("encoder.heads".into(), self.encoder.num_heads.to_string()),
            ("encoder.window".into(), self.encoder.window_size.to_string()),
            ("encoder.global_blocks".into(), join(&self.encoder.global_block_indices)),
            ("decoder.heads".into(), self.decoder.num_heads.to_string()),
            ("detector.channels".into(), join(&self.detector.channels)),
            ("detector.context_convs".into(), self.detector.context_convs.to_string()),
            ("segmenter.channels".into(), join(&self.segmenter.channels)),
        ]
    }
}

/// Reads a config file, returning the model and training settings for `stage`.
pub fn load_config(path: Option<&Path>, stage: Stage) -> Result<(ModelConfig, TrainConfig)> {
    let kv = match path {
        Some(p) => parse_kv(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => BTreeMap::new(),
    };
    let mut model = ModelConfig::default();
    model.apply(&kv)?;
    let mut train = TrainConfig::defaults(stage);
    train.apply(&kv)?;
    Ok((model, train))
}
