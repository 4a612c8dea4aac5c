//! Run configuration: one TOML document with `[model]`, `[train]`,
//! `[degradation]` and `[paths]` tables, overridden by `section.key=value`
//! arguments. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serpent_core::arch::SerpentConfig;
use serpent_core::harness::{DegradationSpec, TrainConfig};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of PNG images.
    pub data_dir: PathBuf,
    /// Directory receiving logs, checkpoints, reports and images.
    pub out_dir: PathBuf,
    /// Checkpoint to evaluate, or to resume training from.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: SerpentConfig,
    pub train: TrainConfig,
    pub degradation: DegradationSpec,
    pub paths: Paths,
}

/// Every accepted key with its unit and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.patch_size", "pixels", "patch side P (Serpent-B 4, L 2, H 1)"),
    ("model.embed_dim", "channels", "embedding width D at the finest scale"),
    ("model.depth", "blocks", "VSS blocks per Serpent block"),
    (
        "model.num_scales",
        "levels",
        "resolution levels including the bottleneck",
    ),
    ("model.state_ratio", "ratio", "SSM state size per channel count"),
    ("model.in_channels", "channels", "image channels (1 or 3)"),
    ("model.global_residual", "bool", "add the input image to the output"),
    ("train.epochs", "epochs", "training epochs"),
    ("train.learning_rate", "per step", "Adam step size"),
    ("train.batch_size", "images", "images per optimizer step"),
    (
        "train.seed",
        "integer",
        "seed for crops, flips, order and training noise",
    ),
    (
        "train.crop_size",
        "pixels",
        "square random crop; unset trains on whole images",
    ),
    ("train.flip", "bool", "random horizontal flips"),
    ("train.iters_per_epoch", "images", "images per epoch; unset is one pass"),
    ("degradation.kernel_size", "pixels", "odd Gaussian blur kernel extent"),
    (
        "degradation.blur_sigma",
        "pixels",
        "blur standard deviation; unset is kernel_size/6",
    ),
    (
        "degradation.noise_sigma",
        "intensity",
        "additive noise std on the [0, 1] scale",
    ),
    ("degradation.seed", "integer", "base seed of per-image evaluation noise"),
    ("degradation.clamp", "bool", "clamp degraded images to [0, 1]"),
    ("paths.data_dir", "path", "directory of PNG images"),
    ("paths.out_dir", "path", "output directory"),
    (
        "paths.checkpoint",
        "path",
        "checkpoint to evaluate or resume; eval defaults to out_dir/best.ckpt",
    ),
];

fn to_table(cfg: &RunConfig) -> Table {
    Table::try_from(cfg).expect("config serializes to a table")
}

fn lookup<'a>(table: &'a Table, key: &str) -> Option<&'a Value> {
    let (section, field) = key.split_once('.')?;
    table.get(section)?.as_table()?.get(field)
}

/// Help text listing every key with its default and unit.
pub fn keys_help() -> String {
    let defaults = to_table(&RunConfig::default());
    let mut out = String::from("Configuration keys (set in the config file or as KEY=VALUE):\n");
    for (key, unit, what) in KEYS {
        let default = lookup(&defaults, key).map_or_else(|| "unset".to_string(), Value::to_string);
        let _ = writeln!(out, "  {key:<26} default {default:<20} [{unit}] {what}");
    }
    out
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

/// Parses the right-hand side of an override as a TOML value, falling back to
/// a bare string so paths need no quoting.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(table: &mut Table, arg: &str) -> Result<(), CliError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{arg}` is not KEY=VALUE")))?;
    let key = key.trim();
    let (section, field) = key
        .split_once('.')
        .filter(|(s, f)| !s.is_empty() && !f.is_empty() && !f.contains('.'))
        .ok_or_else(|| CliError::config(format!("override key `{key}` must look like section.key")))?;
    if !KEYS.iter().any(|(k, _, _)| *k == key) {
        return Err(CliError::config(format!("unknown configuration key `{key}`")));
    }
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(t) = entry else {
        return Err(CliError::config(format!("`{section}` is not a table")));
    };
    t.insert(field.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file, then the overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = to_table(&RunConfig::default());
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
            let parsed: Table =
                toml::from_str(&text).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
            Self::check_keys(&parsed)?;
            merge(&mut table, parsed);
        }
        for arg in overrides {
            apply_override(&mut table, arg)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn check_keys(parsed: &Table) -> Result<(), CliError> {
        for (section, v) in parsed {
            let Some(t) = v.as_table() else {
                return Err(CliError::config(format!("unknown configuration key `{section}`")));
            };
            for field in t.keys() {
                let key = format!("{section}.{field}");
                if !KEYS.iter().any(|(k, _, _)| *k == key) {
                    return Err(CliError::config(format!("unknown configuration key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.degradation.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
