//! Training hyperparameters and the `key = value` config file format shared
//! by the CLI commands. Every run directory gets the fully resolved config
//! written back out, sufficient to replay the run.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::SyntheticSpec;
use crate::error::{MarError, Result};

/// How the per-batch positive/hard-negative partition is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningMode {
    /// Soft multilabel agreement splits the similar pairs.
    Guided,
    /// Ablation: feature similarity median-split.
    Baseline,
}

impl MiningMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MiningMode::Guided => "guided",
            MiningMode::Baseline => "baseline",
        }
    }
}

/// Every scalar hyperparameter of the objective and the two-phase schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub p: f64,
    pub m: f64,
    pub batch_size: usize,
    pub lr_pretrain: f64,
    pub lr_train: f64,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub seed: u64,
    pub d_in: usize,
    pub d_h: usize,
    pub d_out: usize,
    pub depth: usize,
    pub clip_grad: bool,
    pub clip_norm: f64,
    pub mining: MiningMode,
    /// Explicit logit rescaling factor; required when pretrain_epochs is 0.
    pub scale_override: Option<f64>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0002,
            lambda2: 50.0,
            beta: 0.2,
            p: 0.005,
            m: 1.0,
            batch_size: 368,
            lr_pretrain: 4.0,
            lr_train: 0.1,
            pretrain_epochs: 200,
            train_epochs: 300,
            seed: 7,
            d_in: 32,
            d_h: 48,
            d_out: 16,
            depth: 1,
            clip_grad: true,
            clip_norm: 10.0,
            mining: MiningMode::Guided,
            scale_override: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(MarError::Config(msg.to_string()));
        if self.batch_size < 4 || self.batch_size % 2 != 0 {
            return bad("batch_size must be even and at least 4");
        }
        if self.lr_pretrain <= 0.0 || self.lr_train <= 0.0 {
            return bad("learning rates must be positive");
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.beta < 0.0 {
            return bad("lambda1, lambda2 and beta must be nonnegative");
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad("mining ratio p must lie in (0, 1]");
        }
        if self.m <= 0.0 {
            return bad("margin m must be positive");
        }
        if self.depth != 1 && self.depth != 2 {
            return bad("depth must be 1 or 2");
        }
        if self.depth == 2 && self.d_h == 0 {
            return bad("depth 2 requires d_h > 0");
        }
        if self.d_in < 2 || self.d_out < 2 {
            return bad("d_in and d_out must be at least 2");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if let Some(s) = self.scale_override {
            if !(s > 0.0 && s.is_finite()) {
                return bad("scale_override must be positive and finite");
            }
        }
        Ok(())
    }
}

/// Train plus synthetic-data settings, as held by one config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FullConfig {
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
}

impl FullConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let err = |what: &str| MarError::Config(format!("bad value `{value}` for `{what}`"));
        macro_rules! parse {
            ($field:expr, $key:expr) => {
                $field = value.trim().parse().map_err(|_| err($key))?
            };
        }
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "lambda1" => parse!(t.lambda1, key),
            "lambda2" => parse!(t.lambda2, key),
            "beta" => parse!(t.beta, key),
            "p" => parse!(t.p, key),
            "m" => parse!(t.m, key),
            "batch_size" => parse!(t.batch_size, key),
            "lr_pretrain" => parse!(t.lr_pretrain, key),
            "lr_train" => parse!(t.lr_train, key),
            "pretrain_epochs" => parse!(t.pretrain_epochs, key),
            "train_epochs" => parse!(t.train_epochs, key),
            "seed" => {
                parse!(t.seed, key);
                s.seed = t.seed;
            }
            "d_in" => {
                parse!(t.d_in, key);
                s.d_in = t.d_in;
            }
            "d_h" => parse!(t.d_h, key),
            "d_out" => parse!(t.d_out, key),
            "depth" => parse!(t.depth, key),
            "clip_grad" => parse!(t.clip_grad, key),
            "clip_norm" => parse!(t.clip_norm, key),
            "threads" => parse!(t.threads, key),
            "mining" => {
                t.mining = match value.trim() {
                    "guided" => MiningMode::Guided,
                    "baseline" => MiningMode::Baseline,
                    _ => return Err(err(key)),
                }
            }
            "scale_override" => {
                t.scale_override = if value.trim() == "none" {
                    None
                } else {
                    Some(value.trim().parse().map_err(|_| err(key))?)
                }
            }
            "n_persons_target" => parse!(s.n_persons_target, key),
            "n_persons_aux" => parse!(s.n_persons_aux, key),
            "views_target" => parse!(s.views_target, key),
            "views_aux" => parse!(s.views_aux, key),
            "images_per_person_per_view" => parse!(s.images_per_person_per_view, key),
            "view_transform_scale" => parse!(s.view_transform_scale, key),
            "noise_sigma" => parse!(s.noise_sigma, key),
            "confuser_fraction" => parse!(s.confuser_fraction, key),
            "reference_affinity" => parse!(s.reference_affinity, key),
            _ => return Err(MarError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let t = line.split('#').next().unwrap_or("").trim();
            if t.is_empty() {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| MarError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The fully resolved config, one `key = value` per line.
    pub fn resolved_text(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("lambda1", t.lambda1.to_string());
        kv("lambda2", t.lambda2.to_string());
        kv("beta", t.beta.to_string());
        kv("p", t.p.to_string());
        kv("m", t.m.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr_pretrain", t.lr_pretrain.to_string());
        kv("lr_train", t.lr_train.to_string());
        kv("pretrain_epochs", t.pretrain_epochs.to_string());
        kv("train_epochs", t.train_epochs.to_string());
        kv("seed", t.seed.to_string());
        kv("d_in", t.d_in.to_string());
        kv("d_h", t.d_h.to_string());
        kv("d_out", t.d_out.to_string());
        kv("depth", t.depth.to_string());
        kv("clip_grad", t.clip_grad.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("mining", t.mining.as_str().to_string());
        kv(
            "scale_override",
            t.scale_override.map(|v| v.to_string()).unwrap_or_else(|| "none".into()),
        );
        kv("threads", t.threads.to_string());
        kv("n_persons_target", s.n_persons_target.to_string());
        kv("n_persons_aux", s.n_persons_aux.to_string());
        kv("views_target", s.views_target.to_string());
        kv("views_aux", s.views_aux.to_string());
        kv("images_per_person_per_view", s.images_per_person_per_view.to_string());
        kv("view_transform_scale", s.view_transform_scale.to_string());
        kv("noise_sigma", s.noise_sigma.to_string());
        kv("confuser_fraction", s.confuser_fraction.to_string());
        kv("reference_affinity", s.reference_affinity.to_string());
        out
    }
}
