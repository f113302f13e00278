//! Flat `key = value` run configuration.
//!
//! Dimensions shared by the data and the model (concept count, class count,
//! input width) are data keys only; [`RunConfig::model_config`] copies them
//! into the model so the two cannot disagree.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{ShiftKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::harness::train::TrainConfig;
use crate::model::{MeanMode, ModelConfig};

/// Named experiment grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Experiment {
    Baselines,
    Ablation,
    BetaSweep,
    WeightSweep,
    Intervention,
    Shift,
    Leakage,
    Consistency,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::Baselines,
        Experiment::Ablation,
        Experiment::BetaSweep,
        Experiment::WeightSweep,
        Experiment::Intervention,
        Experiment::Shift,
        Experiment::Leakage,
        Experiment::Consistency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Baselines => "baselines",
            Experiment::Ablation => "ablation",
            Experiment::BetaSweep => "beta_sweep",
            Experiment::WeightSweep => "weight_sweep",
            Experiment::Intervention => "intervention",
            Experiment::Shift => "shift",
            Experiment::Leakage => "leakage",
            Experiment::Consistency => "consistency",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == norm)
            .ok_or_else(|| Error::config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub experiment: Option<Experiment>,
    /// Intervention ratios.
    pub ratios: Vec<f64>,
    /// `beta_max` values for the beta sweep.
    pub beta_values: Vec<f64>,
    pub shifts: Vec<ShiftKind>,
    /// Seed for shift construction and metric randomness.
    pub eval_seed: u64,
    /// Decay used when `mean_mode = ema`.
    pub ema_decay: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            model: ModelConfig::default(),
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("results"),
            experiment: None,
            ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            beta_values: vec![0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
            shifts: ShiftKind::ALL.to_vec(),
            eval_seed: 0,
            ema_decay: 0.9,
        };
        cfg.sync_dims();
        cfg
    }
}

/// Every accepted key, in canonical output order.
pub const KEYS: &[&str] = &[
    "variant",
    "mechanisms",
    "emb_dim",
    "n_hidden",
    "grl_lambda",
    "randint_prob",
    "alpha",
    "lambda_m",
    "lambda_cvd",
    "lambda_rec",
    "beta_max",
    "beta_warmup_epochs",
    "hsic_beta_max",
    "mixup_beta_max",
    "mean_mode",
    "ema_decay",
    "num_concepts",
    "num_classes",
    "input_dim",
    "dim_r",
    "dim_z",
    "rho",
    "noise_sigma",
    "pair_correlation",
    "incomplete",
    "n_train",
    "n_val",
    "n_test",
    "data_seed",
    "lr",
    "momentum",
    "epochs",
    "batch_size",
    "grad_clip",
    "seeds",
    "out_dir",
    "experiment",
    "ratios",
    "beta_values",
    "shifts",
    "eval_seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "none" | "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn opt_str<T: ToString>(v: Option<T>, none: &str) -> String {
    v.map_or_else(|| none.to_string(), |x| x.to_string())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Normalizes `key` (dashes become underscores) and applies `value`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().trim_start_matches("--").replace('-', "_");
        let value = value.trim();
        let m = &mut self.model;
        let d = &mut self.data;
        let t = &mut self.train;
        match key.as_str() {
            "variant" => m.variant = value.parse()?,
            "mechanisms" => m.mechanisms = parse_bool(&key, value)?,
            "emb_dim" => m.emb_dim = parse(&key, value)?,
            "n_hidden" => m.n_hidden = parse(&key, value)?,
            "grl_lambda" => m.grl_lambda = parse(&key, value)?,
            "randint_prob" => m.randint_prob = parse(&key, value)?,
            "alpha" => m.weights.alpha = parse(&key, value)?,
            "lambda_m" => m.weights.lambda_m = parse(&key, value)?,
            "lambda_cvd" => m.weights.lambda_cvd = parse(&key, value)?,
            "lambda_rec" => m.weights.lambda_rec = parse(&key, value)?,
            "beta_max" => m.beta_max = parse(&key, value)?,
            "beta_warmup_epochs" => m.beta_warmup_epochs = parse_opt(&key, value)?,
            "hsic_beta_max" => m.hsic_beta_max = parse_opt(&key, value)?,
            "mixup_beta_max" => m.mixup_beta_max = parse_opt(&key, value)?,
            "mean_mode" => {
                m.mean_mode = match value {
                    "batch" => MeanMode::Batch,
                    "ema" => MeanMode::Ema { decay: self.ema_decay },
                    _ => return Err(Error::config(format!("mean_mode must be batch or ema, got `{value}`"))),
                }
            }
            "ema_decay" => {
                self.ema_decay = parse(&key, value)?;
                if let MeanMode::Ema { decay } = &mut m.mean_mode {
                    *decay = self.ema_decay;
                }
            }
            "num_concepts" => d.num_concepts = parse(&key, value)?,
            "num_classes" => d.num_classes = parse(&key, value)?,
            "input_dim" => d.input_dim = parse(&key, value)?,
            "dim_r" => d.dim_r = parse(&key, value)?,
            "dim_z" => d.dim_z = parse(&key, value)?,
            "rho" => d.rho = parse(&key, value)?,
            "noise_sigma" => d.noise_sigma = parse(&key, value)?,
            "pair_correlation" => d.pair_correlation = parse(&key, value)?,
            "incomplete" => d.incomplete = parse_bool(&key, value)?,
            "n_train" => d.n_train = parse(&key, value)?,
            "n_val" => d.n_val = parse(&key, value)?,
            "n_test" => d.n_test = parse(&key, value)?,
            "data_seed" => d.seed = parse(&key, value)?,
            "lr" => t.lr = parse(&key, value)?,
            "momentum" => t.momentum = parse(&key, value)?,
            "epochs" => t.epochs = parse(&key, value)?,
            "batch_size" => t.batch_size = parse(&key, value)?,
            "grad_clip" => t.grad_clip = parse_opt(&key, value)?,
            "seeds" => self.seeds = parse_list(&key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "experiment" => self.experiment = if value == "none" { None } else { Some(value.parse()?) },
            "ratios" => self.ratios = parse_list(&key, value)?,
            "beta_values" => self.beta_values = parse_list(&key, value)?,
            "shifts" => {
                self.shifts = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "eval_seed" => self.eval_seed = parse(&key, value)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        self.sync_dims();
        Ok(())
    }

    fn sync_dims(&mut self) {
        self.model.num_concepts = self.data.observed_concepts();
        self.model.num_classes = self.data.num_classes;
        self.model.input_dim = self.data.input_dim;
    }

    /// Parses config text on top of the defaults. Blank lines and `#`
    /// comments are ignored; repeated keys keep the last value.
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
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Value of one key in canonical form.
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let d = &self.data;
        let t = &self.train;
        Some(match key {
            "variant" => m.variant.to_string(),
            "mechanisms" => m.mechanisms.to_string(),
            "emb_dim" => m.emb_dim.to_string(),
            "n_hidden" => m.n_hidden.to_string(),
            "grl_lambda" => m.grl_lambda.to_string(),
            "randint_prob" => m.randint_prob.to_string(),
            "alpha" => m.weights.alpha.to_string(),
            "lambda_m" => m.weights.lambda_m.to_string(),
            "lambda_cvd" => m.weights.lambda_cvd.to_string(),
            "lambda_rec" => m.weights.lambda_rec.to_string(),
            "beta_max" => m.beta_max.to_string(),
            "beta_warmup_epochs" => opt_str(m.beta_warmup_epochs, "auto"),
            "hsic_beta_max" => opt_str(m.hsic_beta_max, "none"),
            "mixup_beta_max" => opt_str(m.mixup_beta_max, "none"),
            "mean_mode" => match m.mean_mode {
                MeanMode::Batch => "batch".into(),
                MeanMode::Ema { .. } => "ema".into(),
            },
            "ema_decay" => self.ema_decay.to_string(),
            "num_concepts" => d.num_concepts.to_string(),
            "num_classes" => d.num_classes.to_string(),
            "input_dim" => d.input_dim.to_string(),
            "dim_r" => d.dim_r.to_string(),
            "dim_z" => d.dim_z.to_string(),
            "rho" => d.rho.to_string(),
            "noise_sigma" => d.noise_sigma.to_string(),
            "pair_correlation" => d.pair_correlation.to_string(),
            "incomplete" => d.incomplete.to_string(),
            "n_train" => d.n_train.to_string(),
            "n_val" => d.n_val.to_string(),
            "n_test" => d.n_test.to_string(),
            "data_seed" => d.seed.to_string(),
            "lr" => t.lr.to_string(),
            "momentum" => t.momentum.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "grad_clip" => opt_str(t.grad_clip, "none"),
            "seeds" => join(&self.seeds),
            "out_dir" => self.out_dir.display().to_string(),
            "experiment" => self.experiment.map_or("none", Experiment::as_str).to_string(),
            "ratios" => join(&self.ratios),
            "beta_values" => join(&self.beta_values),
            "shifts" => self.shifts.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
            "eval_seed" => self.eval_seed.to_string(),
            _ => return None,
        })
    }

    /// Every key in canonical order; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    /// The model configuration with data dimensions filled in.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.num_concepts = self.data.observed_concepts();
        m.num_classes = self.data.num_classes;
        m.input_dim = self.data.input_dim;
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config("ratios must lie in [0, 1]"));
        }
        if self.beta_values.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::config("beta_values must lie in [0, 1]"));
        }
        Ok(())
    }

    /// One-line summary of the optimizer and data settings for report headers.
    pub fn header(&self) -> String {
        format!(
            "lr={} momentum={} batch_size={} epochs={} grad_clip={} seeds={} data={}",
            self.train.lr,
            self.train.momentum,
            self.train.batch_size,
            self.train.epochs,
            opt_str(self.train.grad_clip, "none"),
            join(&self.seeds),
            self.data.fingerprint()
        )
    }
}
