use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{generate_synthetic_dataset, load_image_folder, Sample, SyntheticSpec, TrainOptions};
use crate::vit::ModelConfig;

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSource),
    Folder(PathBuf),
}

/// Generated glyph images. The class count comes from the model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub seed: u64,
    pub per_class: usize,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self { seed: 0, per_class: 64 }
    }
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSource::default())
    }
}

impl DatasetSource {
    /// `synthetic[:seed=S,per_class=N]` or a directory path.
    pub fn parse_arg(arg: &str) -> Result<Self> {
        let Some(rest) = arg.strip_prefix("synthetic") else {
            return Ok(DatasetSource::Folder(PathBuf::from(arg)));
        };
        let mut spec = SyntheticSource::default();
        let rest = rest.strip_prefix(':').unwrap_or(rest);
        for pair in rest.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("`{pair}` is not key=value in dataset spec `{arg}`")))?;
            let num = || {
                value
                    .parse::<u64>()
                    .map_err(|_| Error::Input(format!("`{value}` is not a whole number in dataset spec `{arg}`")))
            };
            match key {
                "seed" => spec.seed = num()?,
                "per_class" => spec.per_class = num()? as usize,
                _ => return Err(Error::Input(format!("unknown key `{key}` in dataset spec `{arg}`"))),
            }
        }
        Ok(DatasetSource::Synthetic(spec))
    }

    pub fn load(&self, cfg: &ModelConfig) -> Result<Vec<Sample>> {
        match self {
            DatasetSource::Synthetic(s) => {
                if s.per_class == 0 {
                    return Err(Error::config("dataset.synthetic.per_class", "must be at least 1"));
                }
                let spec = SyntheticSpec {
                    seed: s.seed,
                    num_classes: cfg.num_classes,
                    per_class: s.per_class,
                };
                generate_synthetic_dataset(&spec, cfg)
            }
            DatasetSource::Folder(path) => Ok(load_image_folder(path, cfg)?.samples),
        }
    }
}

/// Everything `train` needs, read from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub momentum: f64,
    pub stop_at_train_acc: Option<f64>,
    pub dataset: DatasetSource,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            model: ModelConfig::default(),
            seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            warmup_steps: t.warmup_steps,
            momentum: t.momentum,
            stop_at_train_acc: t.stop_at_train_acc,
            dataset: DatasetSource::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let message = e.inner().to_string();
            if e.inner().is_syntax() || e.inner().is_eof() {
                Error::Parse {
                    path: path.to_path_buf(),
                    message,
                }
            } else {
                Error::Config { field, message }
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, path)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            momentum: self.momentum,
            stop_at_train_acc: self.stop_at_train_acc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field: format!("model.{field}"),
                message,
            },
            other => other,
        })?;
        self.train_options().validate()
    }
}
