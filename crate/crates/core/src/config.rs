//! Flat `key = value` run configuration.
//!
//! Keys are dotted: `model.*`, `data.*`, `train.*`, `paths.*`, plus a
//! top-level `seed`. Blank lines and `#` comments are ignored. Lists are
//! comma-separated; per-class lists (`data.class_bands`,
//! `data.active_channels`) separate classes with `;`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{SyntheticSpec, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub positions: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for Config {
    fn default() -> Self {
        let data = SyntheticSpec::default();
        let model = ModelConfig {
            channels: data.channels,
            length: data.length,
            rate: data.rate,
            classes: data.classes,
            ..ModelConfig::default()
        };
        Self {
            model,
            data,
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s)).collect()
}

fn per_class<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<Vec<T>>> {
    v.split(';').map(|s| list(key, s)).collect()
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true/false, got `{v}`"))),
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses and validates. Data-shape keys also set the model's input
    /// shape, so `data.channels` and friends need not be repeated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        let mut class_bands_set = false;
        let mut active_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given more than once"));
            }
            let m = &mut cfg.model;
            let d = &mut cfg.data;
            let t = &mut cfg.train;
            match key {
                "seed" => t.seed = parse(key, value)?,
                "model.patch" => m.patch = parse(key, value)?,
                "model.d_model" => m.d_model = parse(key, value)?,
                "model.blocks" => m.blocks = parse(key, value)?,
                "model.heads" => m.heads = parse(key, value)?,
                "model.band_centers" => m.band_centers = list(key, value)?,
                "model.band_sigma" => m.band_sigma = parse(key, value)?,
                "model.kernel_sizes" => m.kernel_sizes = list(key, value)?,
                "model.top_k" => m.top_k = parse(key, value)?,
                "model.state_dim" => m.state_dim = parse(key, value)?,
                "model.ffn_hidden" => m.ffn_hidden = parse(key, value)?,
                "model.head_hidden" => m.head_hidden = parse(key, value)?,
                "model.radius" => m.radius = parse(key, value)?,
                "model.dropout" => m.dropout = parse(key, value)?,
                "model.drop_path" => m.drop_path = parse(key, value)?,
                "model.drop_edge" => m.drop_edge = parse(key, value)?,
                "model.fusion_weights" => {
                    let w: Vec<f64> = list(key, value)?;
                    if w.len() != 3 {
                        return Err(Error::config(key, "expects three weights"));
                    }
                    m.fusion_weights = Some([w[0], w[1], w[2]]);
                }
                "data.channels" => d.channels = parse(key, value)?,
                "data.length" => d.length = parse(key, value)?,
                "data.rate" => d.rate = parse(key, value)?,
                "data.classes" => d.classes = parse(key, value)?,
                "data.noise_sigma" => d.noise_sigma = parse(key, value)?,
                "data.trials_per_class" => d.trials_per_class = parse(key, value)?,
                "data.class_bands" => {
                    d.band_centers = per_class(key, value)?;
                    class_bands_set = true;
                }
                "data.active_channels" => {
                    d.active_channels = per_class(key, value)?;
                    active_set = true;
                }
                "train.lr" => t.lr = parse(key, value)?,
                "train.weight_decay" => t.weight_decay = parse(key, value)?,
                "train.beta1" => t.beta1 = parse(key, value)?,
                "train.beta2" => t.beta2 = parse(key, value)?,
                "train.epochs" => t.epochs = parse(key, value)?,
                "train.batch_size" => t.batch_size = parse(key, value)?,
                "train.warmup_fraction" => t.warmup_fraction = parse(key, value)?,
                "train.final_lr" => t.final_lr = parse(key, value)?,
                "train.label_smoothing" => t.label_smoothing = parse(key, value)?,
                "train.patience" => t.patience = parse(key, value)?,
                "train.grad_clip" => t.grad_clip = parse(key, value)?,
                "train.val_fraction" => t.val_fraction = parse(key, value)?,
                "train.augment" => t.augment = boolean(key, value)?,
                "paths.positions" => cfg.paths.positions = Some(value.into()),
                "paths.data" => cfg.paths.data = Some(value.into()),
                "paths.checkpoint" => cfg.paths.checkpoint = Some(value.into()),
                _ => return Err(Error::config(key, "unknown key")),
            }
        }
        // Shape changes re-derive the planted layout unless it was given.
        let default_layout = SyntheticSpec::with_shape(cfg.data.classes, cfg.data.channels, cfg.data.length, cfg.data.rate);
        if !class_bands_set {
            cfg.data.band_centers = default_layout.band_centers;
        }
        if !active_set {
            cfg.data.active_channels = default_layout.active_channels;
        }
        cfg.model.channels = cfg.data.channels;
        cfg.model.length = cfg.data.length;
        cfg.model.rate = cfg.data.rate;
        cfg.model.classes = cfg.data.classes;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validation errors carry the dotted key.
    pub fn validate(&self) -> Result<()> {
        let prefix = |section: &str, e: Error| match e {
            Error::Config { key, msg } if !key.contains('.') => {
                let key = match (section, key.as_str()) {
                    ("data", "band_centers") => "class_bands".to_string(),
                    ("model", "channels" | "length" | "rate" | "classes") => {
                        return Error::config(format!("data.{key}"), msg);
                    }
                    _ => key,
                };
                Error::config(format!("{section}.{key}"), msg)
            }
            other => other,
        };
        self.data.validate().map_err(|e| prefix("data", e))?;
        self.model.validate().map_err(|e| prefix("model", e))?;
        self.train.validate().map_err(|e| prefix("train", e))?;
        Ok(())
    }

    /// `key = value` lines for the data section and seed, as written to a
    /// dataset manifest.
    pub fn data_manifest(&self) -> String {
        let d = &self.data;
        let join = |v: &[Vec<String>]| v.iter().map(|c| c.join(",")).collect::<Vec<_>>().join(";");
        let bands: Vec<Vec<String>> = d.band_centers.iter().map(|c| c.iter().map(f64::to_string).collect()).collect();
        let active: Vec<Vec<String>> = d
            .active_channels
            .iter()
            .map(|c| c.iter().map(usize::to_string).collect())
            .collect();
        format!(
            "seed = {}\ndata.classes = {}\ndata.channels = {}\ndata.length = {}\ndata.rate = {}\n\
             data.noise_sigma = {}\ndata.trials_per_class = {}\ndata.class_bands = {}\ndata.active_channels = {}\n",
            self.train.seed,
            d.classes,
            d.channels,
            d.length,
            d.rate,
            d.noise_sigma,
            d.trials_per_class,
            join(&bands),
            join(&active),
        )
    }
}
