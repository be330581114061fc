//! Run configuration: a TOML file, then `--set key=value` pairs, then the
//! dedicated flags, in increasing precedence.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use ulsad_core::distance::LossConfig;
use ulsad_core::features::BackboneConfig;
use ulsad_core::global::GlobalAeConfig;
use ulsad_core::inference::InferenceConfig;
use ulsad_core::local::FrnConfig;
use ulsad_core::model::ModelConfig;
use ulsad_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// MVTec-style category folder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Fraction of training images held out for calibration when the
    /// dataset has no validation folder.
    pub validation_holdout: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            validation_holdout: 0.1,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Checkpoint path; `<output_dir>/model.safetensors` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    /// Derived from the backbone when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frn: Option<FrnConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_ae: Option<GlobalAeConfig>,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/ulsad"),
            checkpoint: None,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            frn: None,
            global_ae: None,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("model.safetensors"))
    }

    pub fn data_root(&self) -> Result<&Path> {
        match &self.data.root {
            Some(p) => Ok(p),
            None => {
                Err(ulsad_core::Error::Config("no dataset given: pass --data or set data.root".into()).into())
            }
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::from_backbone(self.backbone.clone())?;
        if let Some(frn) = &self.frn {
            cfg.frn = frn.clone();
        }
        if let Some(g) = &self.global_ae {
            cfg.global = g.clone();
        }
        cfg.loss = self.loss;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The same run with every derived section written out.
    pub fn resolved(&self) -> Result<Self> {
        let model = self.model_config()?;
        Ok(Self {
            frn: Some(model.frn),
            global_ae: Some(model.global),
            checkpoint: Some(self.checkpoint_path()),
            ..self.clone()
        })
    }

    /// Write the resolved configuration next to the outputs.
    pub fn dump(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let text = toml::to_string(&self.resolved()?).context("serializing the resolved config")?;
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Configuration flags shared by every pipeline command.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=30` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Dataset category folder [data.root].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [output_dir].
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Checkpoint file [checkpoint].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Validation holdout fraction [data.validation_holdout].
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Backbone architecture, e.g. wide_resnet50_2 [backbone.architecture].
    #[arg(long)]
    pub architecture: Option<String>,
    /// Projection width c* [backbone.feature_width].
    #[arg(long)]
    pub feature_width: Option<usize>,
    /// Square input resolution [backbone.image_size].
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Backbone weights file (torchvision-layout safetensors) [backbone.weights].
    #[arg(long, value_name = "FILE", conflicts_with = "random_weights")]
    pub weights: Option<PathBuf>,
    /// Use seeded random backbone weights instead of a file [backbone.weights].
    #[arg(long, value_name = "SEED")]
    pub random_weights: Option<u64>,
    /// Weight of the cosine term in the local loss [loss.lambda_l].
    #[arg(long)]
    pub lambda_l: Option<f64>,
    /// Weight of the cosine term in the global losses [loss.lambda_g].
    #[arg(long)]
    pub lambda_g: Option<f64>,
    /// Training epochs [train.epochs].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [train.learning_rate].
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Adam weight decay [train.weight_decay].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Training batch size [train.batch_size].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training seed [train.seed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train the global branch [train.use_global].
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    pub use_global: Option<bool>,
    /// Include the coupling loss [train.use_lg].
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    pub use_lg: Option<bool>,
    /// Global-branch objective [train.global_loss].
    #[arg(long, value_enum)]
    pub global_loss: Option<GlobalLossArg>,
    /// Lower calibration quantile [inference.alpha].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Upper calibration quantile [inference.beta].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Gaussian smoothing of upsampled maps, in pixels [inference.smoothing_sigma].
    #[arg(long)]
    pub smoothing_sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GlobalLossArg {
    Attention,
    Direct,
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

/// Parse the right-hand side of `--set` as a TOML value, falling back to a
/// bare string (`--set data.root=/tmp/x`).
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_key(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(ulsad_core::Error::Config(format!("malformed config key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!(ulsad_core::Error::Config(format!(
                "`{p}` in `{key}` is not a table"
            ))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, Value)>> {
        let mut out = Vec::new();
        for s in &self.set {
            let Some((k, v)) = s.split_once('=') else {
                bail!(ulsad_core::Error::Config(format!(
                    "--set expects KEY=VALUE, got `{s}`"
                )));
            };
            out.push((k.trim().to_string(), parse_value(v.trim())));
        }
        let mut push = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("data.root", self.data.as_deref().map(path_value));
        push("output_dir", self.output.as_deref().map(path_value));
        push("checkpoint", self.checkpoint.as_deref().map(path_value));
        push("data.validation_holdout", self.holdout.map(Value::Float));
        push(
            "backbone.architecture",
            self.architecture.clone().map(Value::String),
        );
        push(
            "backbone.feature_width",
            self.feature_width.map(|v| Value::Integer(v as i64)),
        );
        push(
            "backbone.image_size",
            self.image_size.map(|v| Value::Integer(v as i64)),
        );
        push(
            "backbone.weights",
            self.weights.as_deref().map(|p| {
                let mut t = Table::new();
                t.insert("kind".into(), "file".into());
                t.insert("path".into(), path_value(p));
                Value::Table(t)
            }),
        );
        push(
            "backbone.weights",
            self.random_weights.map(|seed| {
                let mut t = Table::new();
                t.insert("kind".into(), "random".into());
                t.insert("seed".into(), Value::Integer(seed as i64));
                Value::Table(t)
            }),
        );
        push("loss.lambda_l", self.lambda_l.map(Value::Float));
        push("loss.lambda_g", self.lambda_g.map(Value::Float));
        push("train.epochs", self.epochs.map(|v| Value::Integer(v as i64)));
        push("train.learning_rate", self.learning_rate.map(Value::Float));
        push("train.weight_decay", self.weight_decay.map(Value::Float));
        push(
            "train.batch_size",
            self.batch_size.map(|v| Value::Integer(v as i64)),
        );
        push("train.seed", self.seed.map(|v| Value::Integer(v as i64)));
        push("train.use_global", self.use_global.map(Value::Boolean));
        push("train.use_lg", self.use_lg.map(Value::Boolean));
        push(
            "train.global_loss",
            self.global_loss.map(|g| match g {
                GlobalLossArg::Attention => "attention".into(),
                GlobalLossArg::Direct => "direct".into(),
            }),
        );
        push("inference.alpha", self.alpha.map(Value::Float));
        push("inference.beta", self.beta.map(Value::Float));
        push(
            "inference.smoothing_sigma",
            self.smoothing_sigma.map(Value::Float),
        );
        Ok(out)
    }

    /// Load the file (if any), apply overrides and deserialize. Unknown keys
    /// anywhere are rejected.
    pub fn load(&self) -> Result<RunConfig> {
        let mut table = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ulsad_core::Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                toml::from_str::<Table>(&text)
                    .map_err(|e| ulsad_core::Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (k, v) in self.overrides()? {
            set_key(&mut table, &k, v)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ulsad_core::Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }
}
