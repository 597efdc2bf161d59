//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comment
//! seed = 7
//! model.dim = 64
//! stage1.weights.lambda_clap = 0.01
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::trainer::{StageConfig, StageId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub classes: usize,
    pub per_class: usize,
    pub heldout_per_class: usize,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Share of the training manifest held out for early stopping.
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Caption template task for zero-shot class captions.
    pub task: String,
    /// `manifest`: class captions as written in the training manifest;
    /// `template`: built from labels with the task template.
    pub zeroshot_captions: String,
    pub attention_clips: usize,
    /// Pixels per patch side in exported attention images.
    pub attention_scale: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage1: StageConfig,
    pub stage1_1: StageConfig,
    pub stage2: StageConfig,
    pub stage2_1: StageConfig,
    pub probe: ProbeSettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    /// Desk-scale preset: the desk model, the synthetic corpus and
    /// shortened schedules. Stage 2 trains its text encoder from scratch,
    /// so its learning rate is raised.
    fn default() -> Self {
        let small = |s: StageConfig, epochs, warmup, lr| StageConfig {
            epochs,
            warmup_epochs: warmup,
            batch_size: 32,
            base_lr: lr,
            ..s
        };
        Self {
            seed: 0,
            model: ModelConfig::desk(),
            data: DataConfig {
                classes: 4,
                per_class: 50,
                heldout_per_class: 10,
                duration_s: 2.0,
            },
            stage1: small(StageConfig::stage1(), 30, 2, 3e-4),
            stage1_1: small(StageConfig::stage1_1(), 10, 1, 1e-4),
            stage2: small(StageConfig::stage2(), 10, 1, 3e-4),
            stage2_1: small(StageConfig::stage2_1(), 5, 1, 1e-4),
            probe: ProbeSettings {
                lr: 3e-5,
                max_epochs: 200,
                patience: 20,
                batch_size: 128,
                val_fraction: 0.2,
            },
            eval: EvalSettings {
                task: "esc50".into(),
                zeroshot_captions: "manifest".into(),
                attention_clips: 4,
                attention_scale: 8,
            },
        }
    }
}

impl RunConfig {
    /// Full-scale model and stage settings.
    pub fn full_scale() -> Self {
        Self {
            model: ModelConfig::full_scale(),
            stage1: StageConfig::stage1(),
            stage1_1: StageConfig::stage1_1(),
            stage2: StageConfig::stage2(),
            stage2_1: StageConfig::stage2_1(),
            ..Self::default()
        }
    }

    pub fn stage(&self, id: StageId) -> &StageConfig {
        match id {
            StageId::Stage1 => &self.stage1,
            StageId::Stage1_1 => &self.stage1_1,
            StageId::Stage2 => &self.stage2,
            StageId::Stage2_1 => &self.stage2_1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (key, id) in [
            ("stage1", StageId::Stage1),
            ("stage1_1", StageId::Stage1_1),
            ("stage2", StageId::Stage2),
            ("stage2_1", StageId::Stage2_1),
        ] {
            let s = self.stage(id);
            if s.stage != id {
                return Err(Error::InvalidConfig(format!("{key}.stage must be {id}")));
            }
            s.validate()?;
        }
        if self.data.classes < 2 {
            return Err(Error::InvalidConfig("data.classes must be at least 2".into()));
        }
        if !(self.data.duration_s > 0.0) {
            return Err(Error::InvalidConfig("data.duration_s must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.probe.val_fraction) {
            return Err(Error::InvalidConfig("probe.val_fraction must lie in [0, 1)".into()));
        }
        if !matches!(self.eval.zeroshot_captions.as_str(), "manifest" | "template") {
            return Err(Error::InvalidConfig(
                "eval.zeroshot_captions must be manifest or template".into(),
            ));
        }
        Ok(())
    }

    /// Every key with its current value, sorted.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten("", &self.to_value(), &mut out);
        out.sort();
        out
    }

    /// `key = value` lines that [`RunConfig::parse`] reads back to `self`.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies assignments on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut value = self.to_value();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            set_key(&mut value, k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        *self = Self::from_value(value)?;
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not key=value")))?;
        let mut value = self.to_value();
        set_key(&mut value, k.trim(), v.trim())?;
        *self = Self::from_value(value)?;
        Ok(())
    }

    fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn set_key(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let unknown = || Error::InvalidConfig(format!("unknown config key {key:?}"));
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(part))
            .ok_or_else(unknown)?;
    }
    let bad = |what: &str| Error::InvalidConfig(format!("{key}: {raw:?} is not {what}"));
    *node = match node {
        Value::Object(_) => return Err(unknown()),
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("a boolean"))?),
        Value::Number(n) if n.is_u64() => {
            Value::from(raw.parse::<u64>().map_err(|_| bad("a nonnegative integer"))?)
        }
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad("a number"))?;
            Value::from(serde_json::Number::from_f64(x).ok_or_else(|| bad("a finite number"))?)
        }
        _ => Value::String(raw.trim_matches('"').to_string()),
    };
    Ok(())
}
