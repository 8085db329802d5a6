//! Run configuration and its text-file representation.
//!
//! The on-disk format is UTF-8 text with one `key = value` per line and `#`
//! comments. Unknown keys are rejected. The same representation is embedded
//! in checkpoints so a model can be rebuilt from its file alone.

use crate::error::{Error, Result};

/// Activation used inside projector / encoder / decoder feedforward layers.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Gelu,
    Identity,
}

/// Which reconstruction loss drives training.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LossKind {
    Contrastive,
    Mse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub modality_count: usize,
    /// Input embedding dimension, shared by all modalities.
    pub d_in: usize,
    pub encoder_dim: usize,
    /// Number of encoder blocks.
    pub depth: usize,
    /// Number of learned register tokens.
    pub registers: usize,
    pub activation: Activation,
    /// Draw one latent noise vector per record and reuse it for every target
    /// modality, instead of one per (record, target).
    pub shared_epsilon: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the KL regularizer in the total loss.
    pub lambda: f64,
    pub alpha_init: f64,
    pub beta_init: f64,
    pub alpha_beta_learnable: bool,
    pub loss_kind: LossKind,
    /// Use the raw softmax-ratio form of the contrastive objective
    /// (no logarithm). Inspection only; not a sensible training target.
    pub verbatim_softmax_ratio: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    /// Reconstruct only masked modalities instead of all of them.
    pub masked_only_targets: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub modality_count: usize,
    pub d_in: usize,
    pub species_count: usize,
    pub records: usize,
    pub latent_factor_dim: usize,
    /// Per-modality embedding-space noise, one value per modality.
    pub noise_std: Vec<f64>,
    /// Spread of the per-record factor around its species factor. This is
    /// what makes the modalities of one record carry shared instance detail.
    pub record_jitter_std: f64,
    /// Seed of the fixed random modality maps, independent of serving rng.
    pub map_seed: u64,
    /// Skew species sampling so diversity rises with longitude, and derive
    /// the location modality from coordinates instead of the record factor.
    pub diversity_gradient: bool,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

/// Everything a run needs: dimensions, loss, optimizer, generator, seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Default retrieval mixing coefficient when not tuned.
    pub delta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig {
                modality_count: 6,
                d_in: 32,
                encoder_dim: 64,
                depth: 1,
                registers: 4,
                activation: Activation::Gelu,
                shared_epsilon: false,
            },
            loss: LossConfig {
                lambda: 0.001,
                alpha_init: -5.0,
                beta_init: 5.0,
                alpha_beta_learnable: true,
                loss_kind: LossKind::Contrastive,
                verbatim_softmax_ratio: false,
            },
            train: TrainConfig {
                batch_size: 128,
                max_epochs: 200,
                learning_rate: 1e-4,
                adam_beta1: 0.9,
                adam_beta2: 0.98,
                weight_decay: 0.01,
                masked_only_targets: false,
                grad_clip: 0.0,
            },
            synth: SynthConfig {
                modality_count: 6,
                d_in: 32,
                species_count: 20,
                records: 2500,
                latent_factor_dim: 16,
                noise_std: vec![0.02; 6],
                record_jitter_std: 1.5,
                map_seed: 17,
                diversity_gradient: false,
                lat_min: 25.0,
                lat_max: 50.0,
                lon_min: -125.0,
                lon_max: -65.0,
            },
            delta: 0.5,
        }
    }
}

impl RunConfig {
    /// Canonical text form; reparsing it reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("modality_count", self.model.modality_count.to_string());
        kv("d_in", self.model.d_in.to_string());
        kv("encoder_dim", self.model.encoder_dim.to_string());
        kv("depth", self.model.depth.to_string());
        kv("registers", self.model.registers.to_string());
        kv(
            "activation",
            match self.model.activation {
                Activation::Gelu => "gelu".into(),
                Activation::Identity => "identity".into(),
            },
        );
        kv("shared_epsilon", self.model.shared_epsilon.to_string());
        kv("lambda", fmt_f64(self.loss.lambda));
        kv("alpha_init", fmt_f64(self.loss.alpha_init));
        kv("beta_init", fmt_f64(self.loss.beta_init));
        kv(
            "alpha_beta_learnable",
            self.loss.alpha_beta_learnable.to_string(),
        );
        kv(
            "loss_kind",
            match self.loss.loss_kind {
                LossKind::Contrastive => "contrastive".into(),
                LossKind::Mse => "mse".into(),
            },
        );
        kv(
            "verbatim_softmax_ratio",
            self.loss.verbatim_softmax_ratio.to_string(),
        );
        kv("batch_size", self.train.batch_size.to_string());
        kv("max_epochs", self.train.max_epochs.to_string());
        kv("learning_rate", fmt_f64(self.train.learning_rate));
        kv("adam_beta1", fmt_f64(self.train.adam_beta1));
        kv("adam_beta2", fmt_f64(self.train.adam_beta2));
        kv("weight_decay", fmt_f64(self.train.weight_decay));
        kv(
            "masked_only_targets",
            self.train.masked_only_targets.to_string(),
        );
        kv("grad_clip", fmt_f64(self.train.grad_clip));
        kv("species_count", self.synth.species_count.to_string());
        kv("records", self.synth.records.to_string());
        kv(
            "latent_factor_dim",
            self.synth.latent_factor_dim.to_string(),
        );
        kv(
            "noise_std",
            self.synth
                .noise_std
                .iter()
                .map(|v| fmt_f64(*v))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("record_jitter_std", fmt_f64(self.synth.record_jitter_std));
        kv("map_seed", self.synth.map_seed.to_string());
        kv(
            "diversity_gradient",
            self.synth.diversity_gradient.to_string(),
        );
        kv("lat_min", fmt_f64(self.synth.lat_min));
        kv("lat_max", fmt_f64(self.synth.lat_max));
        kv("lon_min", fmt_f64(self.synth.lon_min));
        kv("lon_max", fmt_f64(self.synth.lon_max));
        kv("delta", fmt_f64(self.delta));
        s
    }

    /// Parses `key = value` lines over the defaults. Unknown keys are errors.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one key. Used by both the file parser and CLI flag overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value for {key}: {v:?}")))
        }
        fn boolean(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(Error::Config(format!("invalid bool for {key}: {v:?}"))),
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "modality_count" => {
                let m: usize = num(key, value)?;
                if m < 2 {
                    return Err(Error::Config("modality_count must be >= 2".into()));
                }
                self.model.modality_count = m;
                self.synth.modality_count = m;
                self.synth.noise_std = normalize_noise(&self.synth.noise_std, m);
            }
            "d_in" => {
                self.model.d_in = num(key, value)?;
                self.synth.d_in = self.model.d_in;
            }
            "encoder_dim" => self.model.encoder_dim = num(key, value)?,
            "depth" => {
                let d: usize = num(key, value)?;
                if d < 1 {
                    return Err(Error::Config("depth must be >= 1".into()));
                }
                self.model.depth = d;
            }
            "registers" => self.model.registers = num(key, value)?,
            "activation" => {
                self.model.activation = match value {
                    "gelu" => Activation::Gelu,
                    "identity" => Activation::Identity,
                    _ => return Err(Error::Config(format!("unknown activation {value:?}"))),
                }
            }
            "shared_epsilon" => self.model.shared_epsilon = boolean(key, value)?,
            "lambda" => {
                let l: f64 = num(key, value)?;
                if l < 0.0 {
                    return Err(Error::Config("lambda must be >= 0".into()));
                }
                self.loss.lambda = l;
            }
            "alpha_init" => self.loss.alpha_init = num(key, value)?,
            "beta_init" => self.loss.beta_init = num(key, value)?,
            "alpha_beta_learnable" => self.loss.alpha_beta_learnable = boolean(key, value)?,
            "loss_kind" => {
                self.loss.loss_kind = match value {
                    "contrastive" => LossKind::Contrastive,
                    "mse" => LossKind::Mse,
                    _ => return Err(Error::Config(format!("unknown loss_kind {value:?}"))),
                }
            }
            "verbatim_softmax_ratio" => self.loss.verbatim_softmax_ratio = boolean(key, value)?,
            "batch_size" => {
                let b: usize = num(key, value)?;
                if b < 2 {
                    return Err(Error::Config(
                        "batch_size must be >= 2 (in-batch negatives)".into(),
                    ));
                }
                self.train.batch_size = b;
            }
            "max_epochs" => self.train.max_epochs = num(key, value)?,
            "learning_rate" => self.train.learning_rate = num(key, value)?,
            "adam_beta1" => self.train.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.train.adam_beta2 = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "masked_only_targets" => self.train.masked_only_targets = boolean(key, value)?,
            "grad_clip" => self.train.grad_clip = num(key, value)?,
            "species_count" => self.synth.species_count = num(key, value)?,
            "records" => self.synth.records = num(key, value)?,
            "latent_factor_dim" => self.synth.latent_factor_dim = num(key, value)?,
            "noise_std" => {
                let vals: Result<Vec<f64>> = value
                    .split(',')
                    .map(|v| num::<f64>(key, v.trim()))
                    .collect();
                let vals = vals?;
                if vals.iter().any(|v| *v < 0.0) {
                    return Err(Error::Config("noise_std must be >= 0".into()));
                }
                self.synth.noise_std = normalize_noise(&vals, self.synth.modality_count);
            }
            "record_jitter_std" => self.synth.record_jitter_std = num(key, value)?,
            "map_seed" => self.synth.map_seed = num(key, value)?,
            "diversity_gradient" => self.synth.diversity_gradient = boolean(key, value)?,
            "lat_min" => self.synth.lat_min = num(key, value)?,
            "lat_max" => self.synth.lat_max = num(key, value)?,
            "lon_min" => self.synth.lon_min = num(key, value)?,
            "lon_max" => self.synth.lon_max = num(key, value)?,
            "delta" => {
                let d: f64 = num(key, value)?;
                if !(0.0..=1.0).contains(&d) {
                    return Err(Error::Config("delta must be in [0, 1]".into()));
                }
                self.delta = d;
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

/// Expands a single noise value to all modalities, or checks the length.
fn normalize_noise(vals: &[f64], modality_count: usize) -> Vec<f64> {
    if vals.len() == 1 {
        vec![vals[0]; modality_count]
    } else if vals.len() == modality_count {
        vals.to_vec()
    } else {
        // Length fixed up when modality_count changes after noise_std was set.
        let mut out = vals.to_vec();
        out.resize(modality_count, *vals.last().unwrap_or(&0.05));
        out
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    format!("{v}")
}
