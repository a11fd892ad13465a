//! Run configuration: defaults, key=value files, and overrides.
//!
//! A configuration file is plain lines of `dotted.key = value`; `#` starts
//! a comment. Every key must be recognized — a typo fails the run instead
//! of silently training with defaults. Values given on the command line
//! via `--set key=value` are applied after the file, in order.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use locgen::dpo::DpoConfig;
use locgen::model::ModelConfig;
use locgen::pretrain::PretrainConfig;
use locgen::sampler::SamplerConfig;
use locgen::scene::DatasetConfig;
use locgen::{Error, Result};

/// Everything a command might need, echoed verbatim into each run's
/// output directory.
#[derive(Debug, Clone, Serialize)]
pub struct AppConfig {
    pub seed: u64,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub dpo: DpoConfig,
    pub sampler: SamplerConfig,
    pub eval_k: u32,
    pub iou_threshold: f64,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 42,
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            dpo: DpoConfig::default(),
            sampler: SamplerConfig::default(),
            eval_k: 100,
            iou_threshold: 0.7,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Parse(format!("invalid value '{value}' for {key}: {e}")))
}

fn apply(cfg: &mut AppConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "seed" => cfg.seed = parse_value(key, value)?,

        "data.n_train" => cfg.data.n_train = parse_value(key, value)?,
        "data.n_test" => cfg.data.n_test = parse_value(key, value)?,
        "data.image_size" => cfg.data.scene.image_size = parse_value(key, value)?,
        "data.num_classes" => cfg.data.scene.num_classes = parse_value(key, value)?,
        "data.min_surfaces" => cfg.data.scene.min_surfaces = parse_value(key, value)?,
        "data.max_surfaces" => cfg.data.scene.max_surfaces = parse_value(key, value)?,
        "data.min_objects" => cfg.data.scene.min_objects = parse_value(key, value)?,
        "data.max_objects" => cfg.data.scene.max_objects = parse_value(key, value)?,
        "data.max_pos" => cfg.data.annotation.max_pos = parse_value(key, value)?,
        "data.max_neg" => cfg.data.annotation.max_neg = parse_value(key, value)?,
        "data.target_pos_min" => cfg.data.annotation.target_pos.0 = parse_value(key, value)?,
        "data.target_pos_max" => cfg.data.annotation.target_pos.1 = parse_value(key, value)?,
        "data.target_neg_min" => cfg.data.annotation.target_neg.0 = parse_value(key, value)?,
        "data.target_neg_max" => cfg.data.annotation.target_neg.1 = parse_value(key, value)?,
        "data.proposal_budget" => cfg.data.annotation.proposal_budget = parse_value(key, value)?,
        "data.anchor_stride" => cfg.data.annotation.anchor_stride = parse_value(key, value)?,

        "model.image_size" => cfg.model.image_size = parse_value(key, value)?,
        "model.patch_size" => cfg.model.patch_size = parse_value(key, value)?,
        "model.d_model" => cfg.model.d_model = parse_value(key, value)?,
        "model.n_layers" => cfg.model.n_layers = parse_value(key, value)?,
        "model.n_heads" => cfg.model.n_heads = parse_value(key, value)?,
        "model.num_bins" => cfg.model.num_bins = parse_value(key, value)?,
        "model.num_classes" => cfg.model.num_classes = parse_value(key, value)?,

        "pretrain.steps" => cfg.pretrain.steps = parse_value(key, value)?,
        "pretrain.batch_size" => cfg.pretrain.batch_size = parse_value(key, value)?,
        "pretrain.lr" => cfg.pretrain.lr = parse_value(key, value)?,
        "pretrain.warmup_steps" => cfg.pretrain.warmup_steps = parse_value(key, value)?,
        "pretrain.beta1" => cfg.pretrain.beta1 = parse_value(key, value)?,
        "pretrain.beta2" => cfg.pretrain.beta2 = parse_value(key, value)?,
        "pretrain.eps" => cfg.pretrain.eps = parse_value(key, value)?,
        "pretrain.eval_every" => cfg.pretrain.eval_every = parse_value(key, value)?,
        "pretrain.heldout_cap" => cfg.pretrain.heldout_cap = parse_value(key, value)?,

        "dpo.steps" => cfg.dpo.steps = parse_value(key, value)?,
        "dpo.batch_size" => cfg.dpo.batch_size = parse_value(key, value)?,
        "dpo.lr" => cfg.dpo.lr = parse_value(key, value)?,
        "dpo.beta" => cfg.dpo.beta = parse_value(key, value)?,

        "sampler.top_k" => cfg.sampler.top_k = parse_value(key, value)?,
        "sampler.temperature" => cfg.sampler.temperature = parse_value(key, value)?,
        "sampler.min_box_bins" => cfg.sampler.min_box_bins = parse_value(key, value)?,

        "eval.k" => cfg.eval_k = parse_value(key, value)?,
        "eval.iou_threshold" => cfg.iou_threshold = parse_value(key, value)?,

        _ => return Err(Error::InvalidConfig(format!("unknown configuration key '{key}'"))),
    }
    Ok(())
}

fn split_pair(line: &str) -> Result<(&str, &str)> {
    line.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Parse(format!("expected key=value, got '{line}'")))
}

/// Builds the effective configuration: defaults, then the file, then each
/// `--set` override in order.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<AppConfig> {
    let mut cfg = AppConfig::default();
    if let Some(path) = file {
        let text = fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = split_pair(line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            apply(&mut cfg, key, value)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
    }
    for pair in overrides {
        let (key, value) = split_pair(pair)?;
        apply(&mut cfg, key, value)?;
    }
    Ok(cfg)
}
