//! Model and training configuration, read from flat `key = value` files.
//!
//! ```text
//! # comments start with '#'
//! preset = desk            # or: paper
//! channels = 8,16,32,64,64
//! lr = 1e-3
//! precision = f32
//! ```
//!
//! `preset` selects the base values; every other key overrides one field.
//! Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key = value` lines, skipping blanks and `#` comments. Duplicate
/// keys are an error.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_list5(key: &str, value: &str) -> Result<[usize; 5]> {
    let items: Vec<usize> = value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs exactly 5 comma-separated values")))
}

fn list5(v: &[usize; 5]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Output channels of the five VGG-style blocks.
    pub channels: [usize; 5],
    pub convs_per_block: [usize; 5],
    /// Square input resolution; must be divisible by 16.
    pub input_size: usize,
    pub rgb_channels: usize,
    pub depth_channels: usize,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            channels: [8, 16, 32, 64, 64],
            convs_per_block: [2, 2, 2, 2, 2],
            input_size: 64,
            rgb_channels: 3,
            depth_channels: 1,
        }
    }

    /// VGG-19 block widths and depths at 256×256.
    pub fn paper() -> Self {
        Self {
            channels: [64, 128, 256, 512, 512],
            convs_per_block: [2, 2, 4, 4, 4],
            input_size: 256,
            ..Self::desk()
        }
    }

    /// Spatial size of feature level `level` (1-based).
    pub fn level_size(&self, level: usize) -> usize {
        self.input_size >> (level - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 16 || !self.input_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        if self.channels.contains(&0) || self.convs_per_block.contains(&0) {
            return Err(Error::Config("channels and convs_per_block must be positive".into()));
        }
        if self.rgb_channels == 0 || self.depth_channels == 0 {
            return Err(Error::Config("input channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Common channel width of the high-level pyramid.
    pub c_common: usize,
    /// Channel width of every per-level fused feature.
    pub c_fuse: usize,
    pub head_channels: usize,
}

impl ModelConfig {
    /// Bottleneck ratio of channel attention.
    pub const CA_RATIO: usize = 4;
    /// Kernel size of spatial attention.
    pub const SA_KERNEL: usize = 5;

    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            c_common: 32,
            c_fuse: 32,
            head_channels: 16,
        }
    }

    pub fn paper() -> Self {
        Self {
            backbone: BackboneConfig::paper(),
            ..Self::desk()
        }
    }

    /// Channel count of the level-`i` features entering fusion.
    pub fn fusion_channels(&self, level: usize) -> usize {
        if level <= 2 {
            self.backbone.channels[level - 1]
        } else {
            self.c_common
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.c_common < Self::CA_RATIO {
            return Err(Error::Config(format!(
                "c_common must be at least {} (channel-attention bottleneck), got {}",
                Self::CA_RATIO,
                self.c_common
            )));
        }
        for level in 1..=5 {
            let c = self.fusion_channels(level);
            if !c.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "level-{level} fusion width {c} must be even (split into two gated halves)"
                )));
            }
        }
        if self.c_fuse == 0 || self.head_channels == 0 {
            return Err(Error::Config("c_fuse and head_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got `{s}`"))),
        }
    }
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub precision: Precision,
}

impl TrainConfig {
    /// Trainable from random initialisation on synthetic data.
    pub fn desk() -> Self {
        Self {
            batch_size: 2,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 300,
            seed: 0,
            shuffle: true,
            precision: Precision::F32,
        }
    }

    /// Published optimiser settings (they assume a pretrained backbone).
    pub fn paper() -> Self {
        Self {
            batch_size: 2,
            lr: 1e-10,
            momentum: 0.99,
            weight_decay: 0.0005,
            epochs: 61,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

impl Config {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
        }
    }

    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let mut cfg = match pairs.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str()) {
            None | Some("desk") => Self::desk(),
            Some("paper") => Self::paper(),
            Some(other) => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one field from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bb = &mut self.model.backbone;
        let t = &mut self.train;
        match key {
            "preset" => {}
            "input_size" => bb.input_size = parse_value(key, value)?,
            "channels" => bb.channels = parse_list5(key, value)?,
            "convs_per_block" => bb.convs_per_block = parse_list5(key, value)?,
            "rgb_channels" => bb.rgb_channels = parse_value(key, value)?,
            "depth_channels" => bb.depth_channels = parse_value(key, value)?,
            "c_common" => self.model.c_common = parse_value(key, value)?,
            "c_fuse" => self.model.c_fuse = parse_value(key, value)?,
            "head_channels" => self.model.head_channels = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "lr" => t.lr = parse_value(key, value)?,
            "momentum" => t.momentum = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "shuffle" => t.shuffle = parse_bool(key, value)?,
            "precision" => t.precision = value.parse()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Serialises every field; `Config::parse(&cfg.to_text())` reproduces `cfg`.
    pub fn to_text(&self) -> String {
        let bb = &self.model.backbone;
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "input_size = {}", bb.input_size);
        let _ = writeln!(s, "channels = {}", list5(&bb.channels));
        let _ = writeln!(s, "convs_per_block = {}", list5(&bb.convs_per_block));
        let _ = writeln!(s, "rgb_channels = {}", bb.rgb_channels);
        let _ = writeln!(s, "depth_channels = {}", bb.depth_channels);
        let _ = writeln!(s, "c_common = {}", self.model.c_common);
        let _ = writeln!(s, "c_fuse = {}", self.model.c_fuse);
        let _ = writeln!(s, "head_channels = {}", self.model.head_channels);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "lr = {:e}", t.lr);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "weight_decay = {:e}", t.weight_decay);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "shuffle = {}", t.shuffle);
        let _ = writeln!(s, "precision = {}", t.precision.as_str());
        s
    }
}
