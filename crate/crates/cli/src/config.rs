//! Run configuration: one TOML file, overridable per key with
//! `--section.key=value` flags and `METAQUANT_OUTPUT_DIR`.

use std::fs;
use std::path::{Path, PathBuf};

use metaquant::datasets::SplitFractions;
use metaquant::hypernet::HypernetConfig;
use metaquant::policy_search::{CompressionConstraint, SearchConfig};
use metaquant::target_net::builtin_spec;
use metaquant::trainer::{TrainConfig, TrainMode};
use metaquant::{BitRange, BitwidthPolicy};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

pub const OUTPUT_DIR_ENV: &str = "METAQUANT_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Train,
    Search,
    Retrain,
    UniformSweep,
    FullPipeline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Spirals,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub samples: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
    /// Renders 2-D points as square images of this side length.
    pub raster: Option<usize>,
    pub raster_sigma: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub splits: SplitFractions,
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Blobs,
            samples: 2000,
            classes: 3,
            noise: 0.05,
            seed: 0,
            raster: None,
            raster_sigma: 1.0,
            images: None,
            labels: None,
            splits: SplitFractions::default(),
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    pub target: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Meta-trained checkpoint read by the search and retrain stages;
    /// defaults to the one the train stage writes into `output_dir`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Policy for the retrain stage; defaults to the search report's best.
    #[serde(default)]
    pub policy: Option<BitwidthPolicy>,
    #[serde(default = "default_sweep_bits")]
    pub sweep_bits: Vec<u8>,
    /// Adds a wall-clock column to the training CSV.
    #[serde(default)]
    pub report_timing: bool,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub hypernet: HypernetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub constraint: Option<CompressionConstraint>,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default = "default_retrain")]
    pub retrain: TrainConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_sweep_bits() -> Vec<u8> {
    vec![1, 2, 4, 8]
}

fn default_retrain() -> TrainConfig {
    TrainConfig { mode: TrainMode::Retrain, ..TrainConfig::default() }
}

fn section<T>(name: &str, r: metaquant::Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Config(format!("{name}: {e}")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        builtin_spec(&self.target, &[1, 8, 8], 2)
            .map_err(|_| CliError::Config(format!("target: unknown network {:?}", self.target)))?;
        section("hypernet", self.hypernet.validate())?;
        section("train", self.train.validate())?;
        section("retrain", self.retrain.validate())?;
        section("search", self.search.validate())?;
        section("dataset.splits", self.dataset.splits.validate())?;
        if self.train.mode != TrainMode::Train {
            return Err(CliError::Config("train.mode must be \"train\"".into()));
        }
        if self.retrain.mode == TrainMode::Train {
            return Err(CliError::Config("retrain.mode must be \"retrain\" or \"finetune\"".into()));
        }
        if let Some(c) = &self.constraint {
            section("constraint", c.validate())?;
        } else if matches!(self.stage, Stage::Search | Stage::FullPipeline) {
            return Err(CliError::Config("constraint.target_ratio is required for this stage".into()));
        }
        if self.stage == Stage::UniformSweep
            && (self.sweep_bits.is_empty() || self.sweep_bits.iter().any(|&q| !(1..=8).contains(&q)))
        {
            return Err(CliError::Config(format!("sweep_bits must be a nonempty list in [1, 8], got {:?}", self.sweep_bits)));
        }
        if self.dataset.kind == DatasetKind::Idx && (self.dataset.images.is_none() || self.dataset.labels.is_none()) {
            return Err(CliError::Config("dataset.images and dataset.labels are required for idx data".into()));
        }
        if self.dataset.raster == Some(0) {
            return Err(CliError::Config("dataset.raster must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Splits `--a.b=v` and `--a.b v` arguments into key/value pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::Config(format!("expected --key=value, got {arg:?}")))?;
        match flag.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| CliError::Config(format!("--{flag} needs a value")))?;
                out.push((flag.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// A flag value as TOML when it parses as one, otherwise as a bare string.
fn flag_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key {key:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {part} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn sub_table<'a>(root: &'a mut Table, name: &str) -> Option<&'a mut Table> {
    root.get_mut(name).and_then(Value::as_table_mut)
}

/// Builds a validated config from TOML text, an optional output-directory
/// override and `--key=value` overrides, applied in that order.
pub fn resolve(text: &str, output_dir: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut root: Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(dir) = output_dir {
        root.insert("output_dir".into(), Value::String(dir.into()));
    }
    for (k, v) in overrides {
        set_dotted(&mut root, k, flag_value(v))?;
    }
    // a partial [retrain] section still defaults to retraining
    if let Some(t) = sub_table(&mut root, "retrain") {
        t.entry("mode").or_insert_with(|| Value::String("retrain".into()));
    }
    // the search range narrows with the target ratio unless set
    let ratio = sub_table(&mut root, "constraint").and_then(|c| c.get("target_ratio")).and_then(|v| match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    });
    if let Some(ratio) = ratio {
        let preset = BitRange::preset_for_ratio(ratio);
        let search = root.entry("search").or_insert_with(|| Value::Table(Table::new()));
        if let Some(t) = search.as_table_mut() {
            t.entry("bit_range").or_insert_with(|| {
                Value::Array(vec![Value::Integer(preset.min() as i64), Value::Integer(preset.max() as i64)])
            });
        }
    }
    let config: RunConfig = Value::Table(root).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Reads `path` and resolves it, taking the output directory from the
/// environment when set.
pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let env = std::env::var(OUTPUT_DIR_ENV).ok();
    resolve(&text, env.as_deref(), overrides)
}
