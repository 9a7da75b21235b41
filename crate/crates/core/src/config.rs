//! Run configuration: flat `section.key = value` text with every default
//! materialised on output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelConfig, PriorSpec};
use crate::objectives::{ObjectiveConfig, Technique};
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Ptb,
    Toy,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Ptb => "ptb",
            Preset::Toy => "toy",
        }
    }

    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Ptb => ModelConfig::ptb(),
            Preset::Toy => ModelConfig::toy(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ptb" => Ok(Preset::Ptb),
            "toy" => Ok(Preset::Toy),
            _ => Err(Error::Config(format!("unknown model preset {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Standard,
    Mog,
    Vamp,
}

impl PriorKind {
    pub fn name(self) -> &'static str {
        match self {
            PriorKind::Standard => "standard",
            PriorKind::Mog => "mog",
            PriorKind::Vamp => "vamp",
        }
    }
}

impl FromStr for PriorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" | "normal" => Ok(PriorKind::Standard),
            "mog" => Ok(PriorKind::Mog),
            "vamp" => Ok(PriorKind::Vamp),
            _ => Err(Error::Config(format!("unknown prior {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Maximum global gradient norm.
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Early stopping is not considered before this many epochs.
    pub min_epochs: usize,
    /// Monte-Carlo samples for the training rate under mixture priors.
    pub rate_samples: usize,
    /// Importance samples for the per-epoch validation NLL.
    pub valid_samples: usize,
    /// Stop after this many optimiser steps (0 = no limit).
    pub max_steps: usize,
    /// Write one metrics row per optimiser step.
    pub step_metrics: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub samples: usize,
    pub rate_samples: usize,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Training corpus; empty means a generated toy corpus split 80/10/10.
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub min_count: usize,
    pub toy_sentences: usize,
    pub toy_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub prior: PriorKind,
    /// Mixture components (MoG) or pseudo inputs (VampPrior).
    pub prior_components: usize,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Ptb,
            model: ModelConfig::ptb(),
            prior: PriorKind::Standard,
            prior_components: 100,
            objective: ObjectiveConfig::default(),
            optim: OptimConfig { adam: AdamConfig::default(), batch_size: 64, clip: 1.5 },
            train: TrainConfig {
                max_epochs: 100,
                patience: 5,
                min_epochs: 10,
                rate_samples: 16,
                valid_samples: 64,
                max_steps: 0,
                step_metrics: true,
            },
            eval: EvalConfig { samples: 1000, rate_samples: 1024, repeats: 10 },
            data: DataConfig {
                train: None,
                valid: None,
                test: None,
                min_count: 1,
                toy_sentences: 5000,
                toy_seed: 0,
            },
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn path_opt(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Desk-scale defaults: toy preset on a generated corpus.
    pub fn toy() -> Self {
        Self { preset: Preset::Toy, model: ModelConfig::toy(), ..Self::default() }
    }

    /// Prior layout; VampPrior lengths are drawn when the model is built.
    pub fn standard_or_mog_prior(&self) -> Option<PriorSpec> {
        match self.prior {
            PriorKind::Standard => Some(PriorSpec::Standard),
            PriorKind::Mog => Some(PriorSpec::Mog { components: self.prior_components }),
            PriorKind::Vamp => None,
        }
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let o = &self.objective;
        let a = &self.optim.adam;
        let t = &self.train;
        vec![
            ("model.preset", self.preset.name().into()),
            ("model.emb_dim", m.emb_dim.to_string()),
            ("model.dec_hidden", m.dec_hidden.to_string()),
            ("model.dec_layers", m.dec_layers.to_string()),
            ("model.enc_hidden", m.enc_hidden.to_string()),
            ("model.enc_layers", m.enc_layers.to_string()),
            ("model.latent_dim", m.latent_dim.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("prior.kind", self.prior.name().into()),
            ("prior.components", self.prior_components.to_string()),
            ("objective.technique", o.technique.name().into()),
            ("objective.r", o.rate.to_string()),
            ("objective.beta", o.beta.to_string()),
            ("objective.anneal_increment", o.anneal_increment.to_string()),
            ("objective.word_dropout_decrement", o.word_dropout_decrement.to_string()),
            ("objective.sfb_omega", o.sfb_omega.to_string()),
            ("objective.sfb_gamma", o.sfb_gamma.to_string()),
            ("objective.sfb_epsilon", o.sfb_epsilon.to_string()),
            ("objective.sfb_beta_min", o.sfb_beta_min.to_string()),
            ("objective.sfb_beta_max", o.sfb_beta_max.to_string()),
            ("objective.info_beta", o.info_beta.to_string()),
            ("objective.info_lambda", o.info_lambda.to_string()),
            ("objective.lag_alpha", o.lag_alpha.to_string()),
            ("objective.lag_target_elbo", o.lag_target_elbo.to_string()),
            ("objective.lag_target_mmd", o.lag_target_mmd.to_string()),
            ("objective.dual_lr", o.dual_lr.to_string()),
            ("optim.lr", a.lr.to_string()),
            ("optim.beta1", a.beta1.to_string()),
            ("optim.beta2", a.beta2.to_string()),
            ("optim.eps", a.eps.to_string()),
            ("optim.batch_size", self.optim.batch_size.to_string()),
            ("optim.clip", self.optim.clip.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.min_epochs", t.min_epochs.to_string()),
            ("train.rate_samples", t.rate_samples.to_string()),
            ("train.valid_samples", t.valid_samples.to_string()),
            ("train.max_steps", t.max_steps.to_string()),
            ("train.step_metrics", t.step_metrics.to_string()),
            ("eval.samples", self.eval.samples.to_string()),
            ("eval.rate_samples", self.eval.rate_samples.to_string()),
            ("eval.repeats", self.eval.repeats.to_string()),
            ("data.train", show_path(&self.data.train)),
            ("data.valid", show_path(&self.data.valid)),
            ("data.test", show_path(&self.data.test)),
            ("data.min_count", self.data.min_count.to_string()),
            ("data.toy_sentences", self.data.toy_sentences.to_string()),
            ("data.toy_seed", self.data.toy_seed.to_string()),
            ("run.seed", self.seed.to_string()),
            ("run.out", self.out.display().to_string()),
        ]
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    /// Set one key. `model.preset` and `objective.technique` reset the
    /// values they govern, so [`RunConfig::parse`] applies them first.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let m = &mut self.model;
        let o = &mut self.objective;
        let a = &mut self.optim.adam;
        let t = &mut self.train;
        match key {
            "model.preset" => {
                self.preset = v.parse()?;
                self.model = self.preset.model();
            }
            "model.emb_dim" => m.emb_dim = parse(key, v)?,
            "model.dec_hidden" => m.dec_hidden = parse(key, v)?,
            "model.dec_layers" => m.dec_layers = parse(key, v)?,
            "model.enc_hidden" => m.enc_hidden = parse(key, v)?,
            "model.enc_layers" => m.enc_layers = parse(key, v)?,
            "model.latent_dim" => m.latent_dim = parse(key, v)?,
            "model.dropout" => m.dropout = parse(key, v)?,
            "prior.kind" => self.prior = v.parse()?,
            "prior.components" => self.prior_components = parse(key, v)?,
            "objective.technique" => self.objective = ObjectiveConfig::new(Technique::parse(v)?),
            "objective.r" | "objective.rate" => o.rate = parse(key, v)?,
            "objective.beta" => o.beta = parse(key, v)?,
            "objective.anneal_increment" => o.anneal_increment = parse(key, v)?,
            "objective.word_dropout_decrement" => o.word_dropout_decrement = parse(key, v)?,
            "objective.sfb_omega" => o.sfb_omega = parse(key, v)?,
            "objective.sfb_gamma" => o.sfb_gamma = parse(key, v)?,
            "objective.sfb_epsilon" => o.sfb_epsilon = parse(key, v)?,
            "objective.sfb_beta_min" => o.sfb_beta_min = parse(key, v)?,
            "objective.sfb_beta_max" => o.sfb_beta_max = parse(key, v)?,
            "objective.info_beta" => o.info_beta = parse(key, v)?,
            "objective.info_lambda" => o.info_lambda = parse(key, v)?,
            "objective.lag_alpha" => o.lag_alpha = parse(key, v)?,
            "objective.lag_target_elbo" => o.lag_target_elbo = parse(key, v)?,
            "objective.lag_target_mmd" => o.lag_target_mmd = parse(key, v)?,
            "objective.dual_lr" => o.dual_lr = parse(key, v)?,
            "optim.lr" => a.lr = parse(key, v)?,
            "optim.beta1" => a.beta1 = parse(key, v)?,
            "optim.beta2" => a.beta2 = parse(key, v)?,
            "optim.eps" => a.eps = parse(key, v)?,
            "optim.batch_size" => self.optim.batch_size = parse(key, v)?,
            "optim.clip" => self.optim.clip = parse(key, v)?,
            "train.max_epochs" => t.max_epochs = parse(key, v)?,
            "train.patience" => t.patience = parse(key, v)?,
            "train.min_epochs" => t.min_epochs = parse(key, v)?,
            "train.rate_samples" => t.rate_samples = parse(key, v)?,
            "train.valid_samples" => t.valid_samples = parse(key, v)?,
            "train.max_steps" => t.max_steps = parse(key, v)?,
            "train.step_metrics" => t.step_metrics = parse(key, v)?,
            "eval.samples" => self.eval.samples = parse(key, v)?,
            "eval.rate_samples" => self.eval.rate_samples = parse(key, v)?,
            "eval.repeats" => self.eval.repeats = parse(key, v)?,
            "data.train" => self.data.train = path_opt(v),
            "data.valid" => self.data.valid = path_opt(v),
            "data.test" => self.data.test = path_opt(v),
            "data.min_count" => self.data.min_count = parse(key, v)?,
            "data.toy_sentences" => self.data.toy_sentences = parse(key, v)?,
            "data.toy_seed" => self.data.toy_seed = parse(key, v)?,
            "run.seed" => self.seed = parse(key, v)?,
            "run.out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines on top of the defaults. `#` starts a
    /// comment; `[section]` headers prefix the keys that follow.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_owned();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') { k.to_owned() } else { format!("{section}.{k}") };
            pairs.push((key, v.trim().to_owned()));
        }
        let mut cfg = Self::default();
        let first = ["model.preset", "objective.technique"];
        for f in first {
            for (k, v) in pairs.iter().filter(|(k, _)| k == f) {
                cfg.set(k, v)?;
            }
        }
        for (k, v) in pairs.iter().filter(|(k, _)| !first.contains(&k.as_str())) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut last = "";
        for (k, v) in self.entries() {
            let section = k.split('.').next().unwrap_or("");
            if section != last {
                if !last.is_empty() {
                    out.push('\n');
                }
                last = section;
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Make relative data and output paths absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.data.train, &mut self.data.valid, &mut self.data.test].into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.out);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad("model.dropout must lie in [0, 1)");
        }
        if self.prior != PriorKind::Standard && self.prior_components == 0 {
            return bad("prior.components must be >= 1");
        }
        let a = &self.optim.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("optim: need lr > 0, betas in [0, 1), eps > 0");
        }
        if self.optim.batch_size == 0 || !(self.optim.clip > 0.0) {
            return bad("optim: need batch_size >= 1 and clip > 0");
        }
        if self.train.max_epochs == 0 || self.train.valid_samples == 0 || self.train.rate_samples == 0 {
            return bad("train: max_epochs, valid_samples and rate_samples must be >= 1");
        }
        if self.eval.samples == 0 || self.eval.rate_samples == 0 || self.eval.repeats == 0 {
            return bad("eval: samples, rate_samples and repeats must be >= 1");
        }
        if self.data.train.is_none() && self.data.toy_sentences < 10 {
            return bad("data.toy_sentences must be >= 10");
        }
        if self.data.train.is_some() && self.data.valid.is_none() {
            return bad("data.valid is required with data.train");
        }
        Ok(())
    }
}
