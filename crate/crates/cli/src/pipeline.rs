//! Stage runners. Each stage writes its artifacts into the output directory;
//! a failing stage leaves a `<stage>.failed` marker holding the error.

use std::fs;
use std::path::{Path, PathBuf};

use metaquant::datasets::{load_idx, make_synthetic, DataView, Dataset, Split, SyntheticKind};
use metaquant::hypernet::MetaQuantNet;
use metaquant::policy_search::{
    compression_ratio, evaluate_policy, genetic_search, normalized_bitwidth_csv, CompressionConstraint, SearchReport,
};
use metaquant::target_net::{builtin_spec, LayerKind, TargetNetSpec};
use metaquant::trainer::{run_training, EpochRow, TrainConfig, TrainMode, TrainReport};
use metaquant::BitwidthPolicy;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, RunConfig, Stage};
use crate::error::{CliError, Result};

pub const META_CHECKPOINT: &str = "meta_checkpoint.mqck";
pub const TRAIN_REPORT: &str = "train_report.csv";
pub const SEARCH_REPORT: &str = "search_report.json";
pub const BITWIDTHS: &str = "bitwidths.csv";
pub const RETRAIN_CHECKPOINT: &str = "retrain_checkpoint.mqck";
pub const FINAL_REPORT: &str = "final_report.json";
pub const UNIFORM_SWEEP: &str = "uniform_sweep.csv";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

pub struct Prepared {
    pub spec: TargetNetSpec,
    pub train: DataView,
    pub val: DataView,
    pub test: DataView,
}

/// Outcome of the retrain stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub target: String,
    pub policy: BitwidthPolicy,
    pub mode: TrainMode,
    pub ratio: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: Option<f64>,
    pub epochs: Vec<EpochRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bits: u8,
    pub ratio: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("bits,ratio,val_accuracy,test_accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.bits, r.ratio, r.val_accuracy, r.test_accuracy));
    }
    out
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(CliError::io(path))
}

fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    let base = match d.kind {
        DatasetKind::Idx => {
            let (images, labels) = (d.images.as_ref().expect("validated"), d.labels.as_ref().expect("validated"));
            load_idx(images, labels)?
        }
        kind => {
            let kind = if kind == DatasetKind::Blobs { SyntheticKind::Blobs } else { SyntheticKind::Spirals };
            make_synthetic(kind, d.samples, d.classes, d.noise, d.seed)?
        }
    };
    let ds = base.with_splits(d.splits, d.split_seed)?;
    Ok(match d.raster {
        Some(side) if d.kind != DatasetKind::Idx => ds.rasterize(side, d.raster_sigma)?,
        _ => ds,
    })
}

/// Builds the dataset splits and the target spec for it. Image inputs are
/// flattened when the target starts with a dense layer.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let mut ds = build_dataset(cfg)?;
    let probe = builtin_spec(&cfg.target, &[1, 8, 8], ds.class_count)?;
    if probe.layers[0].kind == LayerKind::Dense && ds.features.shape().len() > 2 {
        let n = ds.len();
        let width = ds.features.len() / n.max(1);
        ds.features = ds.features.clone().reshape(vec![n, width])?;
    }
    let spec = builtin_spec(&cfg.target, &ds.features.shape()[1..], ds.class_count)?;
    let view = |s| ds.view(s);
    let (train, val, test) = (view(Split::Train)?, view(Split::Val)?, view(Split::Test)?);
    for (name, v) in [("train", &train), ("val", &val), ("test", &test)] {
        if v.is_empty() {
            return Err(CliError::Config(format!("dataset.splits leave the {name} split empty")));
        }
    }
    Ok(Prepared { spec, train, val, test })
}

fn meta_checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join(META_CHECKPOINT))
}

fn load_meta_checkpoint(cfg: &RunConfig, data: &Prepared, stage: &str) -> Result<Checkpoint> {
    let path = meta_checkpoint_path(cfg);
    if !path.exists() {
        return Err(CliError::Precondition(format!(
            "{stage} needs a meta-trained checkpoint at {}; run the train stage first or set checkpoint",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.spec()? != data.spec {
        return Err(CliError::Precondition(format!(
            "checkpoint {} was trained for {} on input {:?} with {} classes, not this dataset",
            path.display(),
            ckpt.target,
            ckpt.input_shape,
            ckpt.class_count
        )));
    }
    Ok(ckpt)
}

/// Runs training; on abort the partial report and a marker are written
/// before the error is returned.
fn train_with_report(
    cfg: &RunConfig,
    net: &mut MetaQuantNet,
    data: &Prepared,
    config: &TrainConfig,
    policy: Option<&BitwidthPolicy>,
    csv_name: Option<&str>,
) -> Result<TrainReport> {
    match run_training(net, &data.spec, &data.train, &data.val, config, policy) {
        Ok(report) => {
            if let Some(name) = csv_name {
                write(&cfg.output_dir.join(name), report.to_csv(cfg.report_timing))?;
            }
            Ok(report)
        }
        Err(abort) => {
            if let Some(name) = csv_name {
                let path = cfg.output_dir.join(name);
                write(&path, abort.partial.to_csv(cfg.report_timing))?;
                write(&cfg.output_dir.join(format!("{name}.failed")), format!("{}\n", abort.error))?;
            }
            Err(abort.error.into())
        }
    }
}

pub fn stage_train(cfg: &RunConfig, data: &Prepared) -> Result<Checkpoint> {
    let mut net = MetaQuantNet::new(&data.spec, cfg.hypernet, cfg.train.seed)?;
    let report = train_with_report(cfg, &mut net, data, &cfg.train, None, Some(TRAIN_REPORT))?;
    let ckpt = Checkpoint {
        target: cfg.target.clone(),
        input_shape: data.spec.input_shape.clone(),
        class_count: data.spec.class_count,
        bit_range: cfg.train.bit_range,
        policy: None,
        final_loss: report.final_loss,
        net,
    };
    ckpt.save(&cfg.output_dir.join(META_CHECKPOINT))?;
    Ok(ckpt)
}

pub fn stage_search(cfg: &RunConfig, data: &Prepared, ckpt: &Checkpoint) -> Result<SearchReport> {
    let constraint = cfg.constraint.as_ref().expect("validated");
    let report = genetic_search(&ckpt.net, &data.spec, constraint, &cfg.search, &data.val)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&cfg.output_dir.join(SEARCH_REPORT), json + "\n")?;
    write(&cfg.output_dir.join(BITWIDTHS), normalized_bitwidth_csv(&report.best_policy, cfg.search.bit_range.max()))?;
    Ok(report)
}

fn size_constraint(cfg: &RunConfig) -> CompressionConstraint {
    let side = cfg.constraint.is_some_and(|c| c.include_side_params);
    // only the side-parameter switch matters for measuring a ratio
    CompressionConstraint { target_ratio: 2.0, include_side_params: side }
}

fn retrain_policy(cfg: &RunConfig) -> Result<BitwidthPolicy> {
    if let Some(p) = &cfg.policy {
        return Ok(p.clone());
    }
    let path = cfg.output_dir.join(SEARCH_REPORT);
    if !path.exists() {
        return Err(CliError::Precondition(format!(
            "retrain needs a policy: set policy or run the search stage to write {}",
            path.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let report: SearchReport = serde_json::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))?;
    Ok(report.best_policy)
}

pub fn stage_retrain(cfg: &RunConfig, data: &Prepared, ckpt: &Checkpoint, policy: &BitwidthPolicy) -> Result<FinalReport> {
    let mut net = ckpt.net.clone();
    let report = train_with_report(cfg, &mut net, data, &cfg.retrain, Some(policy), None)?;
    let retrained = Checkpoint {
        bit_range: cfg.retrain.bit_range,
        policy: Some(policy.clone()),
        final_loss: report.final_loss,
        net,
        ..ckpt.clone()
    };
    retrained.save(&cfg.output_dir.join(RETRAIN_CHECKPOINT))?;
    let net = &retrained.net;
    let summary = FinalReport {
        target: cfg.target.clone(),
        policy: policy.clone(),
        mode: cfg.retrain.mode,
        ratio: compression_ratio(policy, &data.spec, &size_constraint(cfg))?,
        val_accuracy: evaluate_policy(net, &data.spec, policy, &data.val)?,
        test_accuracy: evaluate_policy(net, &data.spec, policy, &data.test)?,
        final_loss: report.final_loss,
        epochs: report.rows,
    };
    let json = serde_json::to_string_pretty(&summary).expect("report serializes");
    write(&cfg.output_dir.join(FINAL_REPORT), json + "\n")?;
    Ok(summary)
}

/// Retrains under each uniform bitwidth in `sweep_bits`.
pub fn stage_uniform_sweep(cfg: &RunConfig, data: &Prepared) -> Result<Vec<SweepRow>> {
    let start = if cfg.retrain.mode == TrainMode::Finetune {
        load_meta_checkpoint(cfg, data, "finetune sweep")?.net
    } else {
        MetaQuantNet::new(&data.spec, cfg.hypernet, cfg.retrain.seed)?
    };
    let layers = data.spec.quantizable_count();
    let mut rows = Vec::new();
    for &q in &cfg.sweep_bits {
        let policy = BitwidthPolicy::uniform(layers, q)?;
        let mut net = start.clone();
        train_with_report(cfg, &mut net, data, &cfg.retrain, Some(&policy), None)?;
        rows.push(SweepRow {
            bits: q,
            ratio: compression_ratio(&policy, &data.spec, &size_constraint(cfg))?,
            val_accuracy: evaluate_policy(&net, &data.spec, &policy, &data.val)?,
            test_accuracy: evaluate_policy(&net, &data.spec, &policy, &data.test)?,
        });
    }
    write(&cfg.output_dir.join(UNIFORM_SWEEP), sweep_csv(&rows))?;
    Ok(rows)
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Train => "train",
        Stage::Search => "search",
        Stage::Retrain => "retrain",
        Stage::UniformSweep => "uniform-sweep",
        Stage::FullPipeline => "full-pipeline",
    }
}

fn run_stage(cfg: &RunConfig) -> Result<()> {
    let data = prepare(cfg)?;
    match cfg.stage {
        Stage::Train => {
            stage_train(cfg, &data)?;
        }
        Stage::Search => {
            let ckpt = load_meta_checkpoint(cfg, &data, "search")?;
            stage_search(cfg, &data, &ckpt)?;
        }
        Stage::Retrain => {
            let ckpt = load_meta_checkpoint(cfg, &data, "retrain")?;
            stage_retrain(cfg, &data, &ckpt, &retrain_policy(cfg)?)?;
        }
        Stage::UniformSweep => {
            stage_uniform_sweep(cfg, &data)?;
        }
        Stage::FullPipeline => {
            let ckpt = stage_train(cfg, &data)?;
            let report = stage_search(cfg, &data, &ckpt)?;
            stage_retrain(cfg, &data, &ckpt, &report.best_policy)?;
        }
    }
    Ok(())
}

/// Runs the configured stage. The resolved config is written first; stale
/// failure markers from earlier runs are removed.
pub fn run(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    for entry in fs::read_dir(dir).map_err(CliError::io(dir))? {
        let path = entry.map_err(CliError::io(dir))?.path();
        if path.extension().is_some_and(|e| e == "failed") {
            fs::remove_file(&path).map_err(CliError::io(&path))?;
        }
    }
    write(&dir.join(RESOLVED_CONFIG), cfg.to_toml())?;
    let outcome = run_stage(cfg);
    if let Err(e) = &outcome {
        write(&dir.join(format!("{}.failed", stage_name(cfg.stage))), format!("{e}\n"))?;
    }
    outcome
}
