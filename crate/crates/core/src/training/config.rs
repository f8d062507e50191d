//! Training configuration as a flat `key = value` text format.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Unknown keys and unparsable values are errors. [`TrainConfig::to_text`]
//! writes every key in a fixed order with round-trip float formatting, so
//! `parse(to_text(c)) == c` and the text is canonical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mlmdata::DataConfig;
use crate::model::{ModelConfig, ModelKind, PoolingMode};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub mask_fraction: f64,
    pub masked_sequence_fraction: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    /// Evaluate every this many steps (and before the first and after the
    /// last step); 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Seed for shuffling, masking and dropout during training.
    pub seed: u64,
    /// Seed for the fixed masking of the evaluation set.
    pub eval_seed: u64,
    /// When false the metrics log writes 0 for `wall_ms`, making the whole
    /// file a pure function of the configuration.
    pub record_wall_time: bool,
    /// Whitespace-tokenized training text; `None` selects the synthetic
    /// cycle task.
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    /// Real-word count of the synthetic cycle task.
    pub cycle_vocab: usize,
    pub train_sequences: usize,
    pub eval_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 32,
            mask_fraction: 0.15,
            masked_sequence_fraction: 0.90,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 1000,
            eval_every: 100,
            seed: 0,
            eval_seed: 1,
            record_wall_time: true,
            train_data: None,
            eval_data: None,
            cycle_vocab: 20,
            train_sequences: 2000,
            eval_sequences: 200,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse {key} = {value:?} as a boolean"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "model",
        "vocab_size",
        "layers",
        "heads",
        "d_model",
        "d_hidden",
        "pair_dim",
        "pair_hidden",
        "table_size",
        "pooling",
        "dropout",
        "seq_len",
        "positional",
        "hash_seed",
        "init_seed",
        "batch_size",
        "mask_fraction",
        "masked_sequence_fraction",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "steps",
        "eval_every",
        "seed",
        "eval_seed",
        "record_wall_time",
        "train_data",
        "eval_data",
        "cycle_vocab",
        "train_sequences",
        "eval_sequences",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        match key {
            "model" => m.kind = value.parse::<ModelKind>()?,
            "vocab_size" => m.vocab_size = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "d_model" => m.d_model = parse(key, value)?,
            "d_hidden" => m.d_hidden = parse(key, value)?,
            "pair_dim" => m.pair_dim = parse(key, value)?,
            "pair_hidden" => m.pair_hidden = parse(key, value)?,
            "table_size" => m.table_size = parse(key, value)?,
            "pooling" => m.pooling = value.parse::<PoolingMode>()?,
            "dropout" => m.dropout = parse(key, value)?,
            "seq_len" => m.seq_len = parse(key, value)?,
            "positional" => m.positional = parse_bool(key, value)?,
            "hash_seed" => m.hash_seed = parse(key, value)?,
            "init_seed" => m.init_seed = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "mask_fraction" => self.mask_fraction = parse(key, value)?,
            "masked_sequence_fraction" => self.masked_sequence_fraction = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_seed" => self.eval_seed = parse(key, value)?,
            "record_wall_time" => self.record_wall_time = parse_bool(key, value)?,
            "train_data" => self.train_data = parse_path(value),
            "eval_data" => self.eval_data = parse_path(value),
            "cycle_vocab" => self.cycle_vocab = parse(key, value)?,
            "train_sequences" => self.train_sequences = parse(key, value)?,
            "eval_sequences" => self.eval_sequences = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form listing every key.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let values: Vec<String> = vec![
            m.kind.to_string(),
            m.vocab_size.to_string(),
            m.layers.to_string(),
            m.heads.to_string(),
            m.d_model.to_string(),
            m.d_hidden.to_string(),
            m.pair_dim.to_string(),
            m.pair_hidden.to_string(),
            m.table_size.to_string(),
            m.pooling.to_string(),
            format!("{:?}", m.dropout),
            m.seq_len.to_string(),
            m.positional.to_string(),
            m.hash_seed.to_string(),
            m.init_seed.to_string(),
            self.batch_size.to_string(),
            format!("{:?}", self.mask_fraction),
            format!("{:?}", self.masked_sequence_fraction),
            format!("{:?}", self.lr),
            format!("{:?}", self.beta1),
            format!("{:?}", self.beta2),
            format!("{:?}", self.eps),
            self.steps.to_string(),
            self.eval_every.to_string(),
            self.seed.to_string(),
            self.eval_seed.to_string(),
            self.record_wall_time.to_string(),
            path(&self.train_data),
            path(&self.eval_data),
            self.cycle_vocab.to_string(),
            self.train_sequences.to_string(),
            self.eval_sequences.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            seq_len: self.model.seq_len,
            batch_size: self.batch_size,
            mask_fraction: self.mask_fraction,
            masked_sequence_fraction: self.masked_sequence_fraction,
            shuffle_seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data_config().validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        if self.cycle_vocab == 0 {
            return Err(Error::Config("cycle_vocab must be positive".into()));
        }
        Ok(())
    }
}
