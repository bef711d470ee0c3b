use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use fsdetr_core::evaltool::EvalConfig;
use fsdetr_core::model::ModelConfig;
use fsdetr_core::synthworld::{ClassSplit, WorldConfig};
use fsdetr_core::trainpipe::TrainConfig;

use crate::error::CliError;

pub const SEED_ENV: &str = "FSDETR_SEED";

/// Scene counts and class partition for `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub classes: ClassSplit,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            train_scenes: w.train_scenes,
            val_scenes: w.val_scenes,
            test_scenes: w.test_scenes,
            classes: w.classes,
        }
    }
}

/// Everything a command may need. `seed` drives world generation, training
/// and evaluation alike; the nested `train.seed` and `eval.seed` are
/// overwritten with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub world: WorldSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            data_dir: "data".into(),
            out_dir: "runs/default".into(),
            world: WorldSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// File (or defaults), then dotted overrides, then seed resolution:
    /// `--seed`, the config's `seed`, `$FSDETR_SEED`, 0.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)], seed_flag: Option<u64>) -> Result<Self, CliError> {
        let mut v = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let parsed: RunConfig =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::to_value(parsed).expect("config serializes")
            }
            None => serde_json::to_value(RunConfig::default()).expect("config serializes"),
        };
        for (key, raw) in overrides {
            apply_override(&mut v, key, raw)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))?;
        let env = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let seed = seed_flag.or(cfg.seed).or(env).unwrap_or(0);
        cfg.seed = Some(seed);
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.world.classes.validate().map_err(CliError::Config)?;
        if self.eval.k == 0 || self.eval.m == 0 || self.eval.episodes == 0 {
            return Err(CliError::Config("eval.k, eval.m and eval.episodes must be positive".into()));
        }
        Ok(())
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed(),
            train_scenes: self.world.train_scenes,
            val_scenes: self.world.val_scenes,
            test_scenes: self.world.test_scenes,
            classes: self.world.classes.clone(),
        }
    }
}

/// Set `a.b.c` inside `root`. The value is parsed as JSON when possible and
/// taken as a string otherwise. Every path segment must already exist.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("unknown config key {key:?}")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::Config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(CliError::Config(format!("empty config key {key:?}")))
}

/// Dotted `(key, raw value)` pairs.
pub type Overrides = Vec<(String, String)>;

/// Pull `--a.b value` and `--a.b=value` pairs out of `args`; keys without a
/// dot are left for the regular parser.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|n| n.contains('.')));
        match key {
            Some(k) => match k.split_once('=') {
                Some((n, v)) => overrides.push((n.to_string(), v.to_string())),
                None => {
                    let v = it.next().ok_or_else(|| CliError::Config(format!("--{k} needs a value")))?;
                    overrides.push((k.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}
