use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::SourceSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::Modality;
use crate::train::{EvalConfig, TrainConfig, TrainMode};

/// Parameters of the two synthetic sources. Extents, channels and clip length
/// come from `[model]` so data and network always agree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_weight: f64,
    pub video_weight: f64,
    pub shapes: usize,
    /// 2 or 4.
    pub directions: usize,
    /// Pixels per frame.
    pub speed: f64,
    pub noise: f64,
    /// Mask half-size; 0 picks `max(2, min(H, W) / 8)`.
    pub radius: usize,
    /// Frames per evaluation video; 0 picks twice the clip length.
    pub full_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_weight: 1.0,
            video_weight: 1.0,
            shapes: 4,
            directions: 4,
            speed: 1.0,
            noise: 0.05,
            radius: 0,
            full_len: 0,
        }
    }
}

impl DataConfig {
    /// Image source 0 and video source 1 at the model's input geometry.
    pub fn sources(&self, model: &ModelConfig) -> Result<Vec<SourceSpec>> {
        let (c, h, w, l) = (model.in_channels, model.height, model.width, model.clip_len);
        let tune = |mut s: SourceSpec, weight: f64| {
            s.shapes = self.shapes;
            s.directions = self.directions;
            s.speed = self.speed;
            s.noise = self.noise;
            if self.radius > 0 {
                s.radius = self.radius;
            }
            s.weight = weight;
            s
        };
        let image = tune(SourceSpec::image(0, c, h, w), self.image_weight);
        let mut video = tune(SourceSpec::video(1, c, h, w, l), self.video_weight);
        if self.full_len > 0 {
            video.full_len = self.full_len;
        }
        image.validate()?;
        video.validate()?;
        Ok(vec![image, video])
    }

    /// The sources a training mode may draw from.
    pub fn sources_for(&self, model: &ModelConfig, mode: TrainMode) -> Result<Vec<SourceSpec>> {
        let mut s = self.sources(model)?;
        s.retain(|s| mode.accepts(s.modality));
        Ok(s)
    }

    pub fn source(&self, model: &ModelConfig, modality: Modality) -> Result<SourceSpec> {
        Ok(self.sources(model)?.into_iter().find(|s| s.modality == modality).expect("both modalities built"))
    }
}

/// Everything a CLI invocation reads from `--config` and `--set`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn defaults_table() -> Table {
    Table::try_from(RunConfig::default()).expect("defaults serialize")
}

/// Parses the right-hand side of `--set key=value`: any TOML value, else a
/// bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn insert(table: &mut Table, path: &[&str], value: Value, key: &str) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = slot.as_table_mut().ok_or_else(|| Error::BadValue {
            key: key.into(),
            detail: format!("`{p}` is not a section"),
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Rejects any key of `user` absent from `defaults`, naming it by full path.
fn check_keys(user: &Table, defaults: &Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(d) = defaults.get(k) else {
            return Err(Error::UnknownKey(path));
        };
        if let (Value::Table(u), Value::Table(d)) = (v, d) {
            check_keys(u, d, &path)?;
        }
    }
    Ok(())
}

fn deserialize(table: Table) -> std::result::Result<RunConfig, String> {
    RunConfig::deserialize(Value::Table(table)).map_err(|e| e.to_string().trim().to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::resolve(text, &[])
    }

    /// Reads the optional config file and applies `section.key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::resolve(&text, sets)
    }

    fn resolve(text: &str, sets: &[String]) -> Result<Self> {
        let mut table: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        let defaults = defaults_table();
        check_keys(&table, &defaults, "")?;
        for set in sets {
            let Some((key, raw)) = set.split_once('=') else {
                return Err(Error::BadValue {
                    key: set.clone(),
                    detail: "expected section.key=value".into(),
                });
            };
            let key = key.trim();
            let path: Vec<&str> = key.split('.').collect();
            if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
                return Err(Error::BadValue {
                    key: key.into(),
                    detail: "expected section.key".into(),
                });
            }
            let value = parse_value(raw.trim());
            let mut probe = Table::new();
            insert(&mut probe, &path, value.clone(), key)?;
            check_keys(&probe, &defaults, "")?;
            // Type-check the override alone so the error names its key.
            let mut alone = defaults.clone();
            insert(&mut alone, &path, value.clone(), key)?;
            deserialize(alone).map_err(|detail| Error::BadValue { key: key.into(), detail })?;
            insert(&mut table, &path, value, key)?;
        }
        let cfg = deserialize(table).map_err(Error::Config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Network config of the configured variant: `[model]` with the
    /// variant's architecture and heads.
    pub fn variant_model(&self) -> ModelConfig {
        self.train.variant.model_config(&self.model)
    }

    pub fn validate(&self) -> Result<()> {
        self.variant_model().validate()?;
        self.train.validate()?;
        self.data.sources(&self.model)?;
        if self.eval.clips == 0 || self.eval.batch == 0 {
            return Err(Error::Config("eval.clips and eval.batch must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

fn inline(v: &Value) -> String {
    match v {
        Value::Array(items) => format!("[{}]", items.iter().map(inline).collect::<Vec<_>>().join(", ")),
        Value::Table(t) => {
            let fields: Vec<String> = t.iter().map(|(k, v)| format!("{k} = {}", inline(v))).collect();
            format!("{{ {} }}", fields.join(", "))
        }
        other => other.to_string(),
    }
}

fn flatten(table: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = format!("{prefix}.{k}");
        match v {
            Value::Table(t) => flatten(t, &path, out),
            other => out.push(format!("  {path} = {}", inline(other))),
        }
    }
}

/// Every config key with its default, one per line, grouped by section.
pub fn documented_defaults() -> String {
    let defaults = defaults_table();
    let mut out = vec!["Config keys (file sections or --set section.key=value) and defaults:".to_string()];
    for section in ["model", "data", "train", "eval"] {
        out.push(format!("  [{section}]"));
        flatten(defaults[section].as_table().expect("section table"), section, &mut out);
    }
    out.join("\n")
}
