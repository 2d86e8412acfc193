//! Flat `key=value` configuration covering data generation, the model and
//! training.
//!
//! Blank lines and lines starting with `#` are skipped. Keys may come in any
//! order; an unknown key or a key given twice is an error.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::GenSpec;
use crate::error::{Error, Result};
use crate::model::{Activation, ModelConfig};
use crate::objectives::{Objective, RampFn};
use crate::trainer::TrainConfig;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(key: &'static str, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { key, default, doc }
}

/// Every accepted key with its default, in help-text order.
pub const KEYS: &[KeySpec] = &[
    key("n_samples", "4000", "samples to generate"),
    key("concept_dim", "8", "dimension of the shared concept vector"),
    key("seq_len", "32", "tokens per text sequence"),
    key("image_noise", "2", "std of the noise added to image features"),
    key("keyword_prob", "0.9", "probability a positive label's finding token is written"),
    key("data_seed", "0", "generator seed"),
    key("input_dim", "16", "image feature width (train takes it from the data)"),
    key("vocab", "256", "vocabulary size, token 0 is padding (train takes it from the data)"),
    key("n_classes", "6", "number of labels (train takes it from the data)"),
    key("embed_dim", "32", "token embedding width"),
    key("feature_dim", "64", "image and text feature width"),
    key("latent_dim", "32", "latent dimension"),
    key("hidden", "64", "hidden width of the prior, posterior and heads"),
    key("dropout", "0.5", "dropout rate in the prior, posterior and heads"),
    key("activation", "relu", "hidden activation: relu or tanh"),
    key("objective", "vkd", "vkd, vkd_no_mi or cvi"),
    key("lr", "0.001", "Adam step size"),
    key("adam_beta1", "0.9", "Adam first-moment decay"),
    key("adam_beta2", "0.999", "Adam second-moment decay"),
    key("adam_eps", "0.00000001", "Adam denominator offset"),
    key("batch_size", "64", "samples per batch"),
    key("max_epochs", "50", "epoch limit"),
    key("mc_m", "1", "image-branch latent samples per batch"),
    key("mc_l", "1", "text-branch latent samples per batch"),
    key("anneal_ramp", "0.5", "fraction of each annealing cycle spent ramping"),
    key("anneal_cycles", "4", "annealing cycles per epoch"),
    key("anneal_fn", "linear", "ramp shape: linear or cosine"),
    key("early_stop_tolerance", "0.01", "relative validation AUC gain that counts as improvement"),
    key("patience", "5", "epochs without improvement before stopping"),
    key("eval_samples", "8", "latent samples per input at validation"),
    key("seed", "0", "training seed (init, shuffling, noise, dropout)"),
    key("log_batches", "false", "also log one row per batch"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub gen: GenSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        let mut c = Config {
            gen: GenSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        };
        for k in KEYS {
            c.set(k.key, k.default).expect("defaults parse");
        }
        c
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn named<T>(key: &str, value: &str, parse: fn(&str) -> Option<T>) -> Result<T> {
    parse(value).ok_or_else(|| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Keys explicitly present in `text`, for callers that need to know
    /// whether a value was overridden.
    pub fn keys_in(text: &str) -> Vec<String> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter_map(|l| l.split_once('=').map(|(k, _)| k.trim().to_string()))
            .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (g, m, t) = (&mut self.gen, &mut self.model, &mut self.train);
        match key {
            "n_samples" => g.n_samples = num(key, value)?,
            "concept_dim" => g.concept_dim = num(key, value)?,
            "seq_len" => g.seq_len = num(key, value)?,
            "image_noise" => g.image_noise = num(key, value)?,
            "keyword_prob" => g.keyword_prob = num(key, value)?,
            "data_seed" => g.seed = num(key, value)?,
            "input_dim" => {
                g.input_dim = num(key, value)?;
                m.input_dim = g.input_dim;
            }
            "vocab" => {
                g.vocab = num(key, value)?;
                m.vocab = g.vocab;
            }
            "n_classes" => {
                g.n_classes = num(key, value)?;
                m.n_classes = g.n_classes;
            }
            "embed_dim" => m.embed_dim = num(key, value)?,
            "feature_dim" => m.feature_dim = num(key, value)?,
            "latent_dim" => m.latent_dim = num(key, value)?,
            "hidden" => m.hidden = num(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "activation" => m.activation = named(key, value, Activation::parse)?,
            "objective" => t.objective = named(key, value, Objective::parse)?,
            "lr" => t.adam.lr = num(key, value)?,
            "adam_beta1" => t.adam.beta1 = num(key, value)?,
            "adam_beta2" => t.adam.beta2 = num(key, value)?,
            "adam_eps" => t.adam.eps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "max_epochs" => t.max_epochs = num(key, value)?,
            "mc_m" => t.mc_m = num(key, value)?,
            "mc_l" => t.mc_l = num(key, value)?,
            "anneal_ramp" => t.anneal_ramp = num(key, value)?,
            "anneal_cycles" => t.anneal_cycles = num(key, value)?,
            "anneal_fn" => t.anneal_fn = named(key, value, RampFn::parse)?,
            "early_stop_tolerance" => t.early_stop_tolerance = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "eval_samples" => t.eval_samples = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "log_batches" => t.log_batches = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// All keys with their current values, in [`KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let (g, m, t) = (&self.gen, &self.model, &self.train);
        KEYS.iter()
            .map(|k| {
                let v = match k.key {
                    "n_samples" => g.n_samples.to_string(),
                    "concept_dim" => g.concept_dim.to_string(),
                    "seq_len" => g.seq_len.to_string(),
                    "image_noise" => g.image_noise.to_string(),
                    "keyword_prob" => g.keyword_prob.to_string(),
                    "data_seed" => g.seed.to_string(),
                    "input_dim" => m.input_dim.to_string(),
                    "vocab" => m.vocab.to_string(),
                    "n_classes" => m.n_classes.to_string(),
                    "embed_dim" => m.embed_dim.to_string(),
                    "feature_dim" => m.feature_dim.to_string(),
                    "latent_dim" => m.latent_dim.to_string(),
                    "hidden" => m.hidden.to_string(),
                    "dropout" => m.dropout.to_string(),
                    "activation" => m.activation.name().to_string(),
                    "objective" => t.objective.name().to_string(),
                    "lr" => t.adam.lr.to_string(),
                    "adam_beta1" => t.adam.beta1.to_string(),
                    "adam_beta2" => t.adam.beta2.to_string(),
                    "adam_eps" => t.adam.eps.to_string(),
                    "batch_size" => t.batch_size.to_string(),
                    "max_epochs" => t.max_epochs.to_string(),
                    "mc_m" => t.mc_m.to_string(),
                    "mc_l" => t.mc_l.to_string(),
                    "anneal_ramp" => t.anneal_ramp.to_string(),
                    "anneal_cycles" => t.anneal_cycles.to_string(),
                    "anneal_fn" => t.anneal_fn.name().to_string(),
                    "early_stop_tolerance" => t.early_stop_tolerance.to_string(),
                    "patience" => t.patience.to_string(),
                    "eval_samples" => t.eval_samples.to_string(),
                    "seed" => t.seed.to_string(),
                    "log_batches" => t.log_batches.to_string(),
                    other => unreachable!("key {other} missing from to_pairs"),
                };
                (k.key, v)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.gen.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }
}

/// One line per key: name, default and description.
pub fn help_text() -> String {
    let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (key=value, one per line, # starts a comment):\n");
    for k in KEYS {
        writeln!(s, "  {:width$}  {:>10}  {}", k.key, k.default, k.doc).unwrap();
    }
    s
}
