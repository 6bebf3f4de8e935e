//! Plain-text `key = value` run configuration.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::DEFAULT_SPLIT;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::nn::{EnsembleConfig, Family, ResUNetConfig};
use crate::train::{OptimizerKind, TrainConfig};

/// Every key a configuration file may set, in the order the resolved
/// configuration is written.
pub const KEYS: [&str; 21] = [
    "model",
    "kernel",
    "depth",
    "base_filters",
    "size",
    "batch_size",
    "epochs",
    "learning_rate",
    "optimizer",
    "seed",
    "data",
    "split",
    "threshold",
    "out",
    "base_kernels",
    "meta_channels",
    "meta_hidden_layers",
    "stage2_epochs",
    "stage2_batch_size",
    "stage2_learning_rate",
    "record_time",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Family,
    pub kernel: usize,
    pub depth: usize,
    pub base_filters: usize,
    pub size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub split: (f64, f64, f64),
    pub threshold: f32,
    pub out: Option<PathBuf>,
    pub base_kernels: Vec<usize>,
    pub meta_channels: usize,
    pub meta_hidden_layers: usize,
    pub stage2_epochs: Option<usize>,
    pub stage2_batch_size: Option<usize>,
    pub stage2_learning_rate: Option<f32>,
    pub record_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let net = ResUNetConfig::default();
        let ens = EnsembleConfig::default();
        RunConfig {
            model: Family::ResUNet,
            kernel: net.kernel_size,
            depth: net.depth,
            base_filters: net.base_filters,
            size: 128,
            batch_size: train.batch_size,
            epochs: train.epochs,
            learning_rate: train.learning_rate,
            optimizer: train.optimizer,
            seed: train.seed,
            data: None,
            split: DEFAULT_SPLIT,
            threshold: DEFAULT_THRESHOLD,
            out: None,
            base_kernels: ens.base_kernel_sizes,
            meta_channels: ens.meta_channels,
            meta_hidden_layers: ens.meta_hidden_layers,
            stage2_epochs: None,
            stage2_batch_size: None,
            stage2_learning_rate: None,
            record_time: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    /// Parses a configuration file on top of the defaults. Blank lines and
    /// `#` comments are ignored; unknown or repeated keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} set twice", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => self.model = Family::parse(value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "base_filters" => self.base_filters = parse(key, value)?,
            "size" => self.size = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(value)?,
            "seed" => self.seed = parse(key, value)?,
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "split" => {
                let r: Vec<f64> = parse_list(key, value)?;
                let [a, b, c] = r[..] else {
                    return Err(Error::Config(format!("split needs three ratios, got {value:?}")));
                };
                self.split = (a, b, c);
            }
            "threshold" => self.threshold = parse(key, value)?,
            "out" => self.out = (!value.is_empty()).then(|| PathBuf::from(value)),
            "base_kernels" => self.base_kernels = parse_list(key, value)?,
            "meta_channels" => self.meta_channels = parse(key, value)?,
            "meta_hidden_layers" => self.meta_hidden_layers = parse(key, value)?,
            "stage2_epochs" => self.stage2_epochs = Some(parse(key, value)?),
            "stage2_batch_size" => self.stage2_batch_size = Some(parse(key, value)?),
            "stage2_learning_rate" => self.stage2_learning_rate = Some(parse(key, value)?),
            "record_time" => self.record_time = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn net(&self) -> ResUNetConfig {
        ResUNetConfig {
            kernel_size: self.kernel,
            depth: self.depth,
            base_filters: self.base_filters,
            ..ResUNetConfig::default()
        }
    }

    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig {
            base: self.net(),
            base_kernel_sizes: self.base_kernels.clone(),
            meta_channels: self.meta_channels,
            meta_hidden_layers: self.meta_hidden_layers,
        }
    }

    pub fn stage1(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed: self.seed,
            optimizer: self.optimizer,
            record_time: self.record_time,
        }
    }

    pub fn stage2(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.stage2_batch_size.unwrap_or(self.batch_size),
            epochs: self.stage2_epochs.unwrap_or(self.epochs),
            learning_rate: self.stage2_learning_rate.unwrap_or(self.learning_rate),
            ..self.stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1().validate()?;
        self.stage2().validate()?;
        if self.size == 0 {
            return Err(Error::Config("size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        Ok(())
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let s2 = self.stage2();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let kernels: Vec<String> = self.base_kernels.iter().map(usize::to_string).collect();
        let values = [
            self.model.to_string(),
            self.kernel.to_string(),
            self.depth.to_string(),
            self.base_filters.to_string(),
            self.size.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.learning_rate.to_string(),
            self.optimizer.to_string(),
            self.seed.to_string(),
            path(&self.data),
            format!("{},{},{}", self.split.0, self.split.1, self.split.2),
            self.threshold.to_string(),
            path(&self.out),
            kernels.join(","),
            self.meta_channels.to_string(),
            self.meta_hidden_layers.to_string(),
            s2.epochs.to_string(),
            s2.batch_size.to_string(),
            s2.learning_rate.to_string(),
            self.record_time.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
