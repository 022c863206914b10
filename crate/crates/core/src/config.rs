//! Run configuration for the command-line tool: one JSON document holding
//! the model, training, imbalance and synthetic-data sections, with dotted
//! `key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ClassPalette, SyntheticConfig};
use crate::error::{Error, Result};
use crate::imbalance::WorkflowConfig;
use crate::model::EfpnConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed. Every random stream of a run derives from it; the `seed`
    /// fields of the sections below are overwritten with it.
    pub seed: u64,
    pub model: EfpnConfig,
    pub train: TrainConfig,
    pub imbalance: WorkflowConfig,
    pub synthetic: SyntheticConfig,
    /// Palette JSON; the default palette (first `num_classes` entries) when
    /// absent.
    pub palette: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: EfpnConfig::default(),
            train: TrainConfig::default(),
            imbalance: WorkflowConfig::default(),
            synthetic: SyntheticConfig::long_tail(0.5, 200, 64, 0),
            palette: None,
            dataset: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Parses `text`, applies `overrides` (`a.b.c=value`, value parsed as
    /// JSON or taken as a string), propagates the root seed and validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::config(format!("config JSON: {e}")))?;
        if !doc.is_object() {
            return Err(Error::config("config must be a JSON object"));
        }
        // fill defaults so overrides can target nested keys that were omitted
        let mut full = serde_json::to_value(RunConfig::default()).expect("default serializes");
        merge(&mut full, doc.take());
        for o in overrides {
            apply_override(&mut full, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(full).map_err(|e| Error::config(e.to_string()))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?,
            None => "{}".to_string(),
        };
        Self::from_json(&text, overrides)
    }

    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.imbalance.augmentation.seed = self.seed;
        self.synthetic.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.imbalance.augmentation.validate()?;
        self.synthetic.validate()?;
        if self.imbalance.group_size == 0 {
            return Err(Error::config("imbalance.group_size must be positive"));
        }
        if self.imbalance.cap == 0 {
            return Err(Error::config("imbalance.cap must be positive"));
        }
        if self.synthetic.num_classes() != self.model.num_classes {
            return Err(Error::config(format!(
                "synthetic data has {} classes but the model has {}",
                self.synthetic.num_classes(),
                self.model.num_classes
            )));
        }
        Ok(())
    }

    /// The configured palette, checked against the model's class count.
    pub fn palette(&self) -> Result<ClassPalette> {
        let p = match &self.palette {
            Some(path) => ClassPalette::load(path)?,
            None => ClassPalette::default_prefix(self.model.num_classes)?,
        };
        if p.len() != self.model.num_classes {
            return Err(Error::config(format!(
                "palette has {} classes but the model has {}",
                p.len(),
                self.model.num_classes
            )));
        }
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override {path}: {key} is not inside an object")))?
            .entry(key.to_string())
            .or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}
