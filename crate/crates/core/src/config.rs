//! Run configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Learning rate used for fine-tuning pretrained encoders; selectable with
/// `lr = finetune`. Too small for the from-scratch toy models.
pub const LR_FINETUNE: f64 = 2e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Early,
    Late,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Early => "early",
            FusionMode::Late => "late",
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(FusionMode::Early),
            "late" => Ok(FusionMode::Late),
            _ => Err(Error::Config(format!("fusion must be `early` or `late`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Average {
    Macro,
    Weighted,
}

impl F1Average {
    pub fn as_str(self) -> &'static str {
        match self {
            F1Average::Macro => "macro",
            F1Average::Weighted => "weighted",
        }
    }
}

impl FromStr for F1Average {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(F1Average::Macro),
            "weighted" => Ok(F1Average::Weighted),
            _ => Err(Error::Config(format!("f1_average must be `macro` or `weighted`, got `{s}`"))),
        }
    }
}

/// Every architectural and optimization hyperparameter of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub text_layers: usize,
    pub extra_text_layers: usize,
    pub image_layers: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub tau: f64,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub fusion: FusionMode,
    pub f1_average: F1Average,
    pub clip_norm: Option<f64>,
    pub patience: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            n_heads: 8,
            text_layers: 2,
            extra_text_layers: 1,
            image_layers: 2,
            patch_size: 4,
            image_height: 16,
            image_width: 16,
            channels: 1,
            vocab_size: 512,
            max_seq_len: 16,
            num_classes: 3,
            tau: 0.5,
            lambda: 0.2,
            lr: 1e-3,
            batch_size: 16,
            epochs: 10,
            dropout: 0.1,
            seed: 42,
            fusion: FusionMode::Early,
            f1_average: F1Average::Macro,
            clip_norm: Some(1.0),
            patience: 10,
        }
    }
}

const KEYS: &[&str] = &[
    "hidden_dim",
    "n_heads",
    "text_layers",
    "extra_text_layers",
    "image_layers",
    "patch_size",
    "image_size",
    "channels",
    "vocab_size",
    "max_seq_len",
    "num_classes",
    "tau",
    "lambda",
    "lr",
    "batch_size",
    "epochs",
    "dropout",
    "seed",
    "fusion",
    "f1_average",
    "clip_norm",
    "patience",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    /// Feed-forward width of every encoder layer.
    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.text_layers == 0 || self.image_layers == 0 {
            return fail("text_layers and image_layers must be at least 1".into());
        }
        if self.patch_size == 0
            || self.image_height == 0
            || self.image_width == 0
            || !self.image_height.is_multiple_of(self.patch_size)
            || !self.image_width.is_multiple_of(self.patch_size)
        {
            return fail(format!(
                "image {}x{} is not divisible into {}x{} patches",
                self.image_height, self.image_width, self.patch_size, self.patch_size
            ));
        }
        if self.channels == 0 {
            return fail("channels must be at least 1".into());
        }
        if self.vocab_size < crate::text::NUM_RESERVED + 1 {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be at least 2".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return fail(format!("clip_norm must be positive or `off`, got {c}"));
            }
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("unknown config key `{key}` (line {})", lineno + 1)));
            }
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("duplicate config key `{key}`")));
            }
            seen.push(key.to_string());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "hidden_dim" => self.hidden_dim = parse_num(key, value)?,
            "n_heads" => self.n_heads = parse_num(key, value)?,
            "text_layers" => self.text_layers = parse_num(key, value)?,
            "extra_text_layers" => self.extra_text_layers = parse_num(key, value)?,
            "image_layers" => self.image_layers = parse_num(key, value)?,
            "patch_size" => self.patch_size = parse_num(key, value)?,
            "image_size" => {
                let (h, w) = value
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("image_size must look like `16x16`, got `{value}`")))?;
                self.image_height = parse_num(key, h.trim())?;
                self.image_width = parse_num(key, w.trim())?;
            }
            "channels" => self.channels = parse_num(key, value)?,
            "vocab_size" => self.vocab_size = parse_num(key, value)?,
            "max_seq_len" => self.max_seq_len = parse_num(key, value)?,
            "num_classes" => self.num_classes = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "lr" => {
                self.lr = if value == "finetune" { LR_FINETUNE } else { parse_num(key, value)? };
            }
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "f1_average" => self.f1_average = value.parse()?,
            "clip_norm" => {
                self.clip_norm = if value == "off" { None } else { Some(parse_num(key, value)?) };
            }
            "patience" => self.patience = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("hidden_dim", self.hidden_dim.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("text_layers", self.text_layers.to_string());
        kv("extra_text_layers", self.extra_text_layers.to_string());
        kv("image_layers", self.image_layers.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("image_size", format!("{}x{}", self.image_height, self.image_width));
        kv("channels", self.channels.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("tau", format!("{:?}", self.tau));
        kv("lambda", format!("{:?}", self.lambda));
        kv("lr", format!("{:?}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("dropout", format!("{:?}", self.dropout));
        kv("seed", self.seed.to_string());
        kv("fusion", self.fusion.as_str().to_string());
        kv("f1_average", self.f1_average.as_str().to_string());
        kv(
            "clip_norm",
            self.clip_norm.map_or_else(|| "off".to_string(), |c| format!("{c:?}")),
        );
        kv("patience", self.patience.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_are_valid_and_carry_the_published_settings() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_heads, 8);
        assert_eq!(c.extra_text_layers, 1);
        assert_eq!(c.lambda, 0.2);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.epochs, 10);
    }

    #[test]
    fn parses_comments_and_presets() {
        let c = RunConfig::parse("# toy\nhidden_dim = 16 # width\nlr = finetune\nclip_norm = off\nimage_size = 8x12\n").unwrap();
        assert_eq!(c.hidden_dim, 16);
        assert_eq!(c.lr, LR_FINETUNE);
        assert_eq!(c.clip_norm, None);
        assert_eq!((c.image_height, c.image_width), (8, 12));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("hidden_dim = 16\nwarmup = 3\n").unwrap_err();
        assert!(err.to_string().contains("warmup"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "hidden_dim = 30",
            "image_size = 15x16",
            "tau = 0",
            "lambda = -1",
            "dropout = 1",
            "fusion = middle",
            "num_classes = 1",
            "seed = -4",
            "lr",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    proptest! {
        #[test]
        fn text_round_trip(d_mult in 1usize..8, tau in 0.01f64..5.0, lambda in 0.0f64..2.0, lr in 1e-6f64..1e-1,
                           seed in any::<u64>(), late in any::<bool>(), clip in proptest::option::of(0.1f64..10.0)) {
            let c = RunConfig {
                hidden_dim: 8 * d_mult,
                tau,
                lambda,
                lr,
                seed,
                fusion: if late { FusionMode::Late } else { FusionMode::Early },
                clip_norm: clip,
                ..RunConfig::default()
            };
            prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
    }
}
