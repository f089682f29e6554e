//! TOML run configuration with `--set section.key=value` overrides.
//!
//! ```toml
//! preset = "desk"          # or "full"
//! [train]
//! learning_rate = 1e-3
//! [train.model]
//! base_width = 16
//! [sr]
//! widths = [64, 64]
//! ```

use std::path::Path;

use cosimgen_core::superres::SrConfig;
use cosimgen_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{format_err, io_err, usage, Result};

/// Super-resolution settings not already carried by [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrSection {
    pub widths: [usize; 2],
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for SrSection {
    fn default() -> Self {
        let d = SrConfig::default();
        Self { widths: d.widths, learning_rate: d.learning_rate, batch_size: d.batch_size }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub train: TrainConfig,
    pub sr: SrSection,
}

impl RunConfig {
    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        let train = match name {
            "desk" => TrainConfig::desk(num_classes),
            "full" => TrainConfig::full(num_classes),
            other => return Err(usage(format!("unknown preset {other:?}; expected desk or full"))),
        };
        Ok(Self { preset: name.into(), train, sr: SrSection::default() })
    }

    pub fn sr_config(&self) -> SrConfig {
        SrConfig {
            widths: self.sr.widths,
            learning_rate: self.sr.learning_rate,
            lambda_perc: self.train.lambda_perc,
            noise_sigma: self.train.sr_noise_sigma,
            batch_size: self.sr.batch_size,
            seed: self.train.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override; the value `none` removes an optional key.
pub fn apply_override(root: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| usage(format!("override {spec:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut cur = root;
    for k in parents {
        cur = match cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(usage(format!("override {path}: {k} is not a section"))),
        };
    }
    let raw = raw.trim();
    if raw == "none" {
        cur.remove(*last);
    } else {
        cur.insert(last.to_string(), parse_scalar(raw));
    }
    Ok(())
}

/// Preset defaults, then the file, then overrides; `num_classes` always comes
/// from the palette.
pub fn resolve(file: Option<&Path>, num_classes: usize, overrides: &[String]) -> Result<RunConfig> {
    let mut user = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            toml::from_str::<Table>(&text).map_err(|e| format_err(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut user, o)?;
    }
    let preset = user.get("preset").and_then(Value::as_str).unwrap_or("desk").to_string();
    let mut base = Table::try_from(RunConfig::preset(&preset, num_classes)?).map_err(format_err)?;
    let removed_freeze = matches!(
        user.get("train").and_then(Value::as_table),
        Some(t) if !t.contains_key("freeze_at") && overrides.iter().any(|o| o.replace(' ', "") == "train.freeze_at=none")
    );
    merge(&mut base, user);
    if removed_freeze {
        if let Some(Value::Table(t)) = base.get_mut("train") {
            t.remove("freeze_at");
        }
    }
    let mut cfg: RunConfig = Value::Table(base).try_into().map_err(|e| usage(format!("config: {e}")))?;
    if cfg.train.model.num_classes != num_classes {
        log::warn!("config num_classes {} replaced by palette size {num_classes}", cfg.train.model.num_classes);
        cfg.train.model.num_classes = num_classes;
    }
    cfg.train.validate()?;
    Ok(cfg)
}
