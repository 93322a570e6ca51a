use std::fmt;
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::autodiff::EpsRule;
use crate::error::{Error, Result};
use crate::models::{Activation, ModelConfig};
use crate::synthdata::config_digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// End-to-end trilevel optimization.
    GenSeg,
    /// GAN first, then the segmenter on frozen generator output.
    Separate,
    /// Segmenter on real data only.
    Baseline,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "genseg" => Ok(Mode::GenSeg),
            "separate" => Ok(Mode::Separate),
            "baseline" => Ok(Mode::Baseline),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected genseg, separate or baseline)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::GenSeg => "genseg",
            Mode::Separate => "separate",
            Mode::Baseline => "baseline",
        })
    }
}

/// How mixed second-order products inside the hypergradient are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Central finite differences of gradients.
    Fd,
    /// Double backward through the tape.
    Exact,
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fd" => Ok(Backend::Fd),
            "exact" => Ok(Backend::Exact),
            _ => Err(Error::Config(format!("unknown hypergradient backend {s:?} (expected fd or exact)"))),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Fd => "fd",
            Backend::Exact => "exact",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub iters: usize,
    /// `None` picks the whole training set when it has at most 32 pairs,
    /// else 16.
    pub batch: Option<usize>,
    pub img_size: usize,
    pub enc_cells: usize,
    pub base_channels: usize,
    pub eta_g: f64,
    pub eta_h: f64,
    pub eta_s: f64,
    pub eta_a: f64,
    pub gamma: f64,
    pub lambda_l1: f64,
    pub eps_scale: f64,
    pub hypergrad_backend: Backend,
    pub direct_path: bool,
    pub augment: AugmentConfig,
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::GenSeg,
            seed: 0,
            iters: 5000,
            batch: None,
            img_size: 32,
            enc_cells: 3,
            base_channels: 4,
            eta_g: 0.005,
            eta_h: 0.05,
            eta_s: 0.25,
            eta_a: 1e-4,
            gamma: 1.0,
            lambda_l1: 100.0,
            eps_scale: 0.01,
            hypergrad_backend: Backend::Fd,
            direct_path: false,
            augment: AugmentConfig::default(),
            data_dir: String::new(),
            out_dir: String::new(),
        }
    }
}

pub const KEYS: [&str; 21] = [
    "mode",
    "seed",
    "iters",
    "batch",
    "img_size",
    "enc_cells",
    "base_channels",
    "eta_g",
    "eta_h",
    "eta_s",
    "eta_a",
    "gamma",
    "lambda_l1",
    "eps_scale",
    "hypergrad_backend",
    "direct_path",
    "augment.rotate",
    "augment.flip",
    "augment.translate",
    "data_dir",
    "out_dir",
];

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for key `{key}`"))),
    }
}

impl TrainConfig {
    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)));
            };
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not of the form key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            "iters" => self.iters = parse_value(key, value)?,
            "batch" => self.batch = if value == "auto" { None } else { Some(parse_value(key, value)?) },
            "img_size" => self.img_size = parse_value(key, value)?,
            "enc_cells" => self.enc_cells = parse_value(key, value)?,
            "base_channels" => self.base_channels = parse_value(key, value)?,
            "eta_g" => self.eta_g = parse_value(key, value)?,
            "eta_h" => self.eta_h = parse_value(key, value)?,
            "eta_s" => self.eta_s = parse_value(key, value)?,
            "eta_a" => self.eta_a = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "lambda_l1" => self.lambda_l1 = parse_value(key, value)?,
            "eps_scale" => self.eps_scale = parse_value(key, value)?,
            "hypergrad_backend" => self.hypergrad_backend = value.parse()?,
            "direct_path" => self.direct_path = parse_bool(key, value)?,
            "augment.rotate" => self.augment.rotate = parse_bool(key, value)?,
            "augment.flip" => self.augment.flip = parse_bool(key, value)?,
            "augment.translate" => self.augment.translate = parse_bool(key, value)?,
            "data_dir" => self.data_dir = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Rates and weights must be finite and non-negative; zero rates are
    /// allowed and freeze the corresponding group.
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("eta_g", self.eta_g),
            ("eta_h", self.eta_h),
            ("eta_s", self.eta_s),
            ("eta_a", self.eta_a),
            ("gamma", self.gamma),
            ("lambda_l1", self.lambda_l1),
        ];
        for (k, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("`{k}` must be finite and non-negative, got {v}")));
            }
        }
        if !(self.eps_scale.is_finite() && self.eps_scale > 0.0) {
            return Err(Error::Config(format!("`eps_scale` must be positive, got {}", self.eps_scale)));
        }
        if self.batch == Some(0) {
            return Err(Error::Config("`batch` must be positive".into()));
        }
        if self.enc_cells == 0 || self.base_channels == 0 {
            return Err(Error::Config("`enc_cells` and `base_channels` must be positive".into()));
        }
        if !self.img_size.is_power_of_two() || self.img_size < (1 << self.enc_cells).max(8) {
            return Err(Error::Config(format!(
                "`img_size` must be a power of two >= max(8, 2^enc_cells), got {}",
                self.img_size
            )));
        }
        Ok(())
    }

    /// Every key with its effective value, one per line, in [`KEYS`] order.
    pub fn resolved(&self) -> String {
        let a = &self.augment;
        let batch = self.batch.map_or("auto".to_string(), |b| b.to_string());
        let values: [String; 21] = [
            self.mode.to_string(),
            self.seed.to_string(),
            self.iters.to_string(),
            batch,
            self.img_size.to_string(),
            self.enc_cells.to_string(),
            self.base_channels.to_string(),
            self.eta_g.to_string(),
            self.eta_h.to_string(),
            self.eta_s.to_string(),
            self.eta_a.to_string(),
            self.gamma.to_string(),
            self.lambda_l1.to_string(),
            self.eps_scale.to_string(),
            self.hypergrad_backend.to_string(),
            self.direct_path.to_string(),
            a.rotate.to_string(),
            a.flip.to_string(),
            a.translate.to_string(),
            self.data_dir.clone(),
            self.out_dir.clone(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn digest(&self) -> [u8; 32] {
        config_digest(&self.resolved())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            img_size: self.img_size,
            img_channels: 1,
            enc_cells: self.enc_cells,
            base_channels: self.base_channels,
            activation: Activation::Silu,
        }
    }

    pub fn eps_rule(&self) -> EpsRule {
        EpsRule { scale: self.eps_scale }
    }

    pub fn batch_for(&self, n_train: usize) -> usize {
        self.batch.unwrap_or(if n_train <= 32 { n_train } else { 16 }).min(n_train).max(1)
    }
}
