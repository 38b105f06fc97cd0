use std::path::Path;

use anyhow::{anyhow, bail, Context};
use clap::Args;
use elnet_core::lqe::LqeConfig;
use elnet_core::model::ModelConfig;
use elnet_core::pipeline::{PipelineConfig, PipelineOptions};
use elnet_core::synth::RefNetConfig;
use elnet_core::train::{LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Everything a subcommand may read. Sections mirror the core crate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pipeline: PipelineOptions,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub lqe: LqeConfig,
    pub model: ModelConfig,
    pub refnet: RefNetConfig,
}

impl Config {
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            pipeline: self.pipeline.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            lqe: self.lqe.clone(),
            model: self.model.clone(),
        }
    }

    pub fn validate(&self) -> elnet_core::Result<()> {
        self.pipeline_config().validate()?;
        if self.refnet.hidden == 0 || self.refnet.epochs == 0 || self.refnet.batch_size == 0 {
            return Err(elnet_core::Error::Config("refnet sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Flags shared by every configurable subcommand. Precedence: defaults, then
/// the file, then `--set`, then the named flags.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML or JSON configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<std::path::PathBuf>,
    /// Override any key, e.g. `--set loss.lambda=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// train.epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// train.batch_size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// train.learning_rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// train.weight_decay
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// loss.lambda
    #[arg(long)]
    pub lambda: Option<f64>,
    /// loss.alpha as three comma-separated weights.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub alpha: Option<Vec<f64>>,
    /// lqe.beta as three comma-separated weights.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub beta: Option<Vec<f64>>,
    /// pipeline.loop_count
    #[arg(long)]
    pub loop_count: Option<usize>,
    /// Resolve and print the configuration, then stop.
    #[arg(long)]
    pub dry_run: bool,
}

/// A configuration problem; reported as a usage error.
#[derive(Debug)]
pub struct ConfigError(pub anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn read_file(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim().is_empty() {
        return Ok(Value::Object(Default::default()));
    }
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        let t: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(serde_json::to_value(t)?)
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> anyhow::Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        if p.is_empty() {
            bail!("malformed key {key:?}");
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("{key}: {} is not a table", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), v);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl ConfigArgs {
    fn overrides(&self, seed: Option<u64>) -> anyhow::Result<Vec<(String, Value)>> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {s:?}"))?;
            out.push((k.trim().to_string(), parse_value(v.trim())));
        }
        let mut push = |k: &str, v: Value| out.push((k.to_string(), v));
        if let Some(v) = self.epochs {
            push("train.epochs", v.into());
        }
        if let Some(v) = self.batch_size {
            push("train.batch_size", v.into());
        }
        if let Some(v) = self.lr {
            push("train.learning_rate", v.into());
        }
        if let Some(v) = self.weight_decay {
            push("train.weight_decay", v.into());
        }
        if let Some(v) = self.lambda {
            push("loss.lambda", v.into());
        }
        if let Some(v) = &self.alpha {
            push("loss.alpha", v.clone().into());
        }
        if let Some(v) = &self.beta {
            push("lqe.beta", v.clone().into());
        }
        if let Some(v) = self.loop_count {
            push("pipeline.loop_count", v.into());
        }
        if let Some(s) = seed {
            for k in ["pipeline.seed", "train.seed", "refnet.seed"] {
                push(k, s.into());
            }
        }
        Ok(out)
    }

    /// Defaults, file, overrides; then typed decoding and validation.
    pub fn resolve(&self, seed: Option<u64>) -> Result<Config, ConfigError> {
        self.resolve_inner(seed).map_err(ConfigError)
    }

    fn resolve_inner(&self, seed: Option<u64>) -> anyhow::Result<Config> {
        let mut root = match &self.config {
            Some(p) => read_file(p)?,
            None => Value::Object(Default::default()),
        };
        if !root.is_object() {
            bail!("configuration must be a table");
        }
        for (k, v) in self.overrides(seed)? {
            set_path(&mut root, &k, v)?;
        }
        let cfg: Config = serde_path_to_error::deserialize(root).map_err(|e| {
            let path = e.path().to_string();
            anyhow!("invalid configuration at {path}: {}", e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
