//! Run configuration as flat `section.key = value` text.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{parse_pooling, ModelConfig, VggConfig, DEFAULT_CHANNELS};
use crate::train::{LossKind, TrainConfig, ValMetric};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Verification,
    Classification,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Verification => "verification",
            Task::Classification => "classification",
        }
    }

    pub fn val_metric(self) -> ValMetric {
        match self {
            Task::Verification => ValMetric::Eer,
            Task::Classification => ValMetric::Accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub manifest: PathBuf,
    pub min_duration: Option<f64>,
    pub out_dir: PathBuf,
    pub blocks: usize,
    /// `None` uses the default widths truncated to `blocks`.
    pub channels: Option<Vec<usize>>,
    pub pooling: String,
    pub heads: usize,
    /// `None` picks 0.3 for 16 or more heads and 0.01 below that.
    pub head_drop: Option<f64>,
    pub fc1: usize,
    pub embed_dim: usize,
    pub fc3: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Verification,
            manifest: PathBuf::from("manifest.csv"),
            min_duration: None,
            out_dir: PathBuf::from("runs"),
            blocks: 4,
            channels: None,
            pooling: "dmhsa".into(),
            heads: 16,
            head_drop: None,
            fc1: 2048,
            embed_dim: 512,
            fc3: 512,
            train: TrainConfig {
                weight_decay: 0.01,
                ..TrainConfig::default()
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: invalid value '{value}'")))
}

fn parse_optional(key: &str, value: &str, none: &str) -> Result<Option<f64>> {
    if value == none {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 20] = [
        "task",
        "data.manifest",
        "data.min_duration",
        "output.dir",
        "model.blocks",
        "model.channels",
        "model.pooling",
        "model.heads",
        "model.head_drop",
        "model.fc1",
        "model.embed_dim",
        "model.fc3",
        "train.lr",
        "train.weight_decay",
        "train.batch_size",
        "train.patience",
        "train.crop_seconds",
        "train.loss",
        "train.seed",
        "train.max_epochs",
    ];

    /// Sets one key; values are parsed but cross-field checks wait for
    /// [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "task" => {
                self.task = match v {
                    "verification" => Task::Verification,
                    "classification" => Task::Classification,
                    _ => return Err(Error::Config(format!("task must be verification or classification, got '{v}'"))),
                }
            }
            "data.manifest" => self.manifest = PathBuf::from(v),
            "data.min_duration" => self.min_duration = parse_optional(key, v, "none")?,
            "output.dir" => self.out_dir = PathBuf::from(v),
            "model.blocks" => self.blocks = parse_num(key, v)?,
            "model.channels" => {
                self.channels = if v == "default" {
                    None
                } else {
                    Some(
                        v.split(',')
                            .map(|c| parse_num(key, c.trim()))
                            .collect::<Result<Vec<usize>>>()?,
                    )
                }
            }
            "model.pooling" => self.pooling = v.to_string(),
            "model.heads" => self.heads = parse_num(key, v)?,
            "model.head_drop" => self.head_drop = parse_optional(key, v, "auto")?,
            "model.fc1" => self.fc1 = parse_num(key, v)?,
            "model.embed_dim" => self.embed_dim = parse_num(key, v)?,
            "model.fc3" => self.fc3 = parse_num(key, v)?,
            "train.lr" => self.train.lr = parse_num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.patience" => self.train.patience = parse_num(key, v)?,
            "train.crop_seconds" => self.train.crop_seconds = parse_optional(key, v, "full")?,
            "train.loss" => self.train.loss = LossKind::parse(v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => err(m),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        put("task", self.task.name().into());
        put("data.manifest", self.manifest.display().to_string());
        put("data.min_duration", self.min_duration.map_or("none".into(), |d| d.to_string()));
        put("output.dir", self.out_dir.display().to_string());
        put("model.blocks", self.blocks.to_string());
        put(
            "model.channels",
            self.channels.as_ref().map_or("default".into(), |c| {
                c.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            }),
        );
        put("model.pooling", self.pooling.clone());
        put("model.heads", self.heads.to_string());
        put("model.head_drop", self.head_drop.map_or("auto".into(), |p| p.to_string()));
        put("model.fc1", self.fc1.to_string());
        put("model.embed_dim", self.embed_dim.to_string());
        put("model.fc3", self.fc3.to_string());
        put("train.lr", self.train.lr.to_string());
        put("train.weight_decay", self.train.weight_decay.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.patience", self.train.patience.to_string());
        put("train.crop_seconds", self.train.crop_seconds.map_or("full".into(), |c| c.to_string()));
        put("train.loss", self.train.loss.name().into());
        put("train.seed", self.train.seed.to_string());
        put("train.max_epochs", self.train.max_epochs.to_string());
        out
    }

    pub fn head_drop(&self) -> f64 {
        self.head_drop.unwrap_or(if self.heads >= 16 { 0.3 } else { 0.01 })
    }

    pub fn model_config(&self, n_classes: usize) -> Result<ModelConfig> {
        let channels = match &self.channels {
            Some(c) => c.clone(),
            None => DEFAULT_CHANNELS.iter().take(self.blocks).copied().collect(),
        };
        if channels.len() != self.blocks {
            return Err(Error::Config(format!(
                "model.channels has {} entries for {} blocks",
                channels.len(),
                self.blocks
            )));
        }
        let cfg = ModelConfig {
            vgg: VggConfig { channels },
            pooling: parse_pooling(&self.pooling, self.heads, self.head_drop())?,
            fc1: self.fc1,
            embed_dim: self.embed_dim,
            fc3: self.fc3,
            n_classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(d) = self.min_duration {
            if !(d >= 0.0) {
                return Err(Error::Config(format!("data.min_duration must be >= 0, got {d}")));
            }
        }
        let model = self.model_config(2)?;
        if let Some(c) = self.train.crop_frames()? {
            model.vgg.time_steps(c)?;
        }
        Ok(())
    }
}
