use std::fmt::Write;

use sha2::{Digest, Sha256};

use crate::clinical::TextEncoder;
use crate::error::{Error, Result};
use crate::model::{FrameDiff, ModelConfig, Towers};
use crate::visual::{GateMode, SeOrder};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub lambda: f64,
    /// Train, val and test fractions; they sum to one.
    pub ratios: [f64; 3],
    pub fold: usize,
    /// Augmented views drawn per training patient each epoch; 8 uses every
    /// view once.
    pub views_per_epoch: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 120,
            batch_size: 64,
            lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_every: 40,
            lambda: crate::fusion::DEFAULT_LAMBDA,
            ratios: [0.6, 0.2, 0.2],
            fold: 0,
            views_per_epoch: 8,
            model: ModelConfig::default(),
        }
    }
}

/// Every recognized key, in serialization order.
pub const KEYS: &[&str] = &[
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "lr_decay_factor",
    "lr_decay_every",
    "lambda",
    "ratios",
    "fold",
    "views_per_epoch",
    "omega",
    "towers",
    "encoder",
    "d",
    "heads",
    "layers",
    "mlp_hidden",
    "dims",
    "stem",
    "widths",
    "blocks",
    "reduction",
    "se_mode",
    "se_order",
    "channel_se",
    "temporal_se",
    "frame_diff",
    "head_hidden",
    "output_bias",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for `{key}`")))
}

fn parse_list(key: &str, v: &str, sep: char) -> Result<Vec<usize>> {
    v.split(sep).map(|x| parse_num(key, x)).collect()
}

fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects on/off, got {v:?}"))),
    }
}

fn join(xs: &[usize], sep: &str) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

pub fn gate_mode_name(m: GateMode) -> &'static str {
    match m {
        GateMode::Joint => "joint",
        GateMode::GlobalOnly => "global",
        GateMode::LocalOnly => "local",
        GateMode::Ones => "ones",
    }
}

pub fn frame_diff_name(f: FrameDiff) -> &'static str {
    match f {
        FrameDiff::On => "on",
        FrameDiff::ForwardOnly => "forward",
        FrameDiff::BackwardOnly => "backward",
        FrameDiff::Off => "off",
    }
}

impl TrainConfig {
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let on = |b: bool| if b { "on" } else { "off" }.to_string();
        Ok(match key {
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "lr_decay_every" => self.lr_decay_every.to_string(),
            "lambda" => self.lambda.to_string(),
            "ratios" => format!("{}:{}:{}", self.ratios[0], self.ratios[1], self.ratios[2]),
            "fold" => self.fold.to_string(),
            "views_per_epoch" => self.views_per_epoch.to_string(),
            "omega" => m.omega.to_string(),
            "towers" => match m.towers {
                Towers::Both => "both",
                Towers::ClinicalOnly => "clinical",
                Towers::VisualOnly => "visual",
            }
            .into(),
            "encoder" => match m.encoder {
                TextEncoder::LiteTransformer => "transformer",
                TextEncoder::Mlp => "mlp",
            }
            .into(),
            "d" => m.clinical.d.to_string(),
            "heads" => m.clinical.heads.to_string(),
            "layers" => m.clinical.layers.to_string(),
            "mlp_hidden" => m.clinical.mlp_hidden.to_string(),
            "dims" => join(&m.visual.input, "x"),
            "stem" => m.visual.stem.to_string(),
            "widths" => join(&m.visual.widths, ","),
            "blocks" => join(&m.visual.blocks, ","),
            "reduction" => m.visual.se.reduction.to_string(),
            "se_mode" => gate_mode_name(m.visual.se.mode).into(),
            "se_order" => match m.visual.se.order {
                SeOrder::ChannelFirst => "channel-first",
                SeOrder::TemporalFirst => "temporal-first",
            }
            .into(),
            "channel_se" => on(m.visual.se.channel),
            "temporal_se" => on(m.visual.se.temporal),
            "frame_diff" => frame_diff_name(m.frame_diff).into(),
            "head_hidden" => m.head_hidden.to_string(),
            "output_bias" => m.output_bias.to_string(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_num(key, v)?,
            "lr_decay_every" => self.lr_decay_every = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "ratios" => {
                let parts: Vec<f64> = v.split([':', ',']).map(|x| parse_num(key, x)).collect::<Result<_>>()?;
                let parts: [f64; 3] = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("`ratios` needs three values, got {v:?}")))?;
                let total: f64 = parts.iter().sum();
                if parts.iter().any(|&p| !(p > 0.0)) || !total.is_finite() {
                    return Err(Error::Config(format!("`ratios` must be positive, got {v:?}")));
                }
                self.ratios = parts.map(|p| p / total);
            }
            "fold" => self.fold = parse_num(key, v)?,
            "views_per_epoch" => self.views_per_epoch = parse_num(key, v)?,
            "omega" => m.omega = parse_num(key, v)?,
            "towers" => {
                m.towers = match v {
                    "both" => Towers::Both,
                    "clinical" => Towers::ClinicalOnly,
                    "visual" => Towers::VisualOnly,
                    _ => return Err(Error::Config(format!("`towers` expects both/clinical/visual, got {v:?}"))),
                }
            }
            "encoder" => {
                m.encoder = match v {
                    "transformer" => TextEncoder::LiteTransformer,
                    "mlp" => TextEncoder::Mlp,
                    _ => return Err(Error::Config(format!("`encoder` expects transformer/mlp, got {v:?}"))),
                }
            }
            "d" => m.clinical.d = parse_num(key, v)?,
            "heads" => m.clinical.heads = parse_num(key, v)?,
            "layers" => m.clinical.layers = parse_num(key, v)?,
            "mlp_hidden" => m.clinical.mlp_hidden = parse_num(key, v)?,
            "dims" => {
                let d = parse_list(key, v, 'x')?;
                m.visual.input = d
                    .try_into()
                    .map_err(|_| Error::Config(format!("`dims` expects FxHxW, got {v:?}")))?;
            }
            "stem" => m.visual.stem = parse_num(key, v)?,
            "widths" => m.visual.widths = parse_list(key, v, ',')?,
            "blocks" => m.visual.blocks = parse_list(key, v, ',')?,
            "reduction" => m.visual.se.reduction = parse_num(key, v)?,
            "se_mode" => {
                m.visual.se.mode = match v {
                    "joint" => GateMode::Joint,
                    "global" => GateMode::GlobalOnly,
                    "local" => GateMode::LocalOnly,
                    "ones" => GateMode::Ones,
                    _ => return Err(Error::Config(format!("`se_mode` expects joint/global/local/ones, got {v:?}"))),
                }
            }
            "se_order" => {
                m.visual.se.order = match v {
                    "channel-first" => SeOrder::ChannelFirst,
                    "temporal-first" => SeOrder::TemporalFirst,
                    _ => {
                        return Err(Error::Config(format!(
                            "`se_order` expects channel-first/temporal-first, got {v:?}"
                        )))
                    }
                }
            }
            "channel_se" => m.visual.se.channel = parse_switch(key, v)?,
            "temporal_se" => m.visual.se.temporal = parse_switch(key, v)?,
            "frame_diff" => {
                m.frame_diff = match v {
                    "on" => FrameDiff::On,
                    "forward" => FrameDiff::ForwardOnly,
                    "backward" => FrameDiff::BackwardOnly,
                    "off" => FrameDiff::Off,
                    _ => {
                        return Err(Error::Config(format!(
                            "`frame_diff` expects on/forward/backward/off, got {v:?}"
                        )))
                    }
                }
            }
            "head_hidden" => m.head_hidden = parse_num(key, v)?,
            "output_bias" => m.output_bias = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", self.get(key).expect("listed key")).expect("string write");
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`TrainConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn folds(&self) -> Result<usize> {
        crate::data::split::fold_count(self.ratios)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return Err(Error::Config("learning-rate schedule must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(1..=8).contains(&self.views_per_epoch) {
            return Err(Error::Config("views_per_epoch must lie in 1..=8".into()));
        }
        let folds = self.folds()?;
        if self.fold >= folds {
            return Err(Error::Config(format!("fold {} out of range for {folds} folds", self.fold)));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}
