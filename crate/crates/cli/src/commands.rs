//! Command implementations behind the `batclip` binary. Each command is
//! deterministic under a fixed seed and embeds the config fingerprint in
//! everything it writes.

use crate::config::{DatasetConfig, ExperimentConfig};
use batclip_core::adapt::{run_baseline, zero_shot_accuracy, Method};
use batclip_core::corrupt::{corrupt, make_task, CorruptionSpec};
use batclip_core::data::{gen_shapes, load_cifar10, splitmix64, ImageSet};
use batclip_core::error::{Error, Result};
use batclip_core::gradcheck::{audit_gradients, GradCheckReport};
use batclip_core::model::checkpoint::{read_container, write_container, Checkpoint, NamedTensor};
use batclip_core::model::pretrain::pretrain_contrastive;
use batclip_core::model::tokenizer::{PromptTemplate, Vocab, DEFAULT_TEMPLATES};
use batclip_core::model::{ArchConfig, DualEncoder};
use batclip_core::report::{AdaptationReport, BenchCell, BenchmarkTable};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Worker-pool cap; the sweep is cell-parallel and order-stable.
pub const THREADS_ENV: &str = "BATTTA_THREADS";

/// Materialize the evaluation dataset named by the config.
pub fn eval_set(cfg: &ExperimentConfig) -> Result<ImageSet> {
    match &cfg.dataset {
        DatasetConfig::Shapes { n_per_class, classes, image_size, seed } => {
            gen_shapes(*n_per_class, *classes, *image_size, *seed)
        }
        DatasetConfig::Cifar10 { dir, max_images } => {
            let mut set = load_cifar10(dir)?;
            if let Some(max) = max_images {
                if *max < set.n {
                    let per = set.pixels_per_image();
                    set.pixels.truncate(max * per);
                    set.labels.truncate(*max);
                    set.n = *max;
                }
            }
            Ok(set)
        }
    }
}

fn build_vocab(cfg: &ExperimentConfig, class_names: &[String]) -> Vocab {
    let mut texts: Vec<String> = DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect();
    texts.push(cfg.prompt_template.clone());
    texts.extend(class_names.iter().cloned());
    Vocab::build(&texts)
}

fn prompt_for(cfg: &ExperimentConfig, class_names: &[String]) -> Result<PromptTemplate> {
    PromptTemplate::new(cfg.prompt_template.clone(), class_names.to_vec())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value).expect("serializable"))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub holdout_accuracy: f64,
    pub tau: f64,
    pub epoch_losses: Vec<f64>,
    pub config_fingerprint: String,
}

/// Train the dual encoder on clean shapes data and write the checkpoint
/// plus a training log.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainOutcome> {
    let (classes, image_size) = match &cfg.dataset {
        DatasetConfig::Shapes { classes, image_size, .. } => (*classes, *image_size),
        DatasetConfig::Cifar10 { .. } => {
            return Err(Error::Config(
                "pretraining is defined for the shapes dataset; CIFAR-10 evaluation requires \
                 a checkpoint trained on matching classes"
                    .into(),
            ));
        }
    };
    let pre = &cfg.pretrain;
    let train = gen_shapes(pre.n_per_class, classes, image_size, pre.data_seed)?;
    let holdout = gen_shapes(pre.holdout_per_class, classes, image_size, pre.holdout_seed)?;
    let prompt = prompt_for(cfg, &train.class_names)?;
    let vocab = build_vocab(cfg, &train.class_names);
    let arch = ArchConfig { image_size, ..ArchConfig::default_arch(vocab) };
    let mut model = DualEncoder::new(arch, pre.seed)?;

    let (checkpoint, log) = pretrain_contrastive(&mut model, &train, &prompt, &pre.optimizer_config())?;
    let holdout_accuracy = zero_shot_accuracy(&model, &holdout, &prompt)?;

    std::fs::create_dir_all(out)?;
    let checkpoint_path = out.join("checkpoint.btc");
    checkpoint.save(&checkpoint_path)?;
    let outcome = PretrainOutcome {
        checkpoint_path,
        log_path: out.join("pretrain_log.json"),
        holdout_accuracy,
        tau: log.tau,
        epoch_losses: log.epoch_losses,
        config_fingerprint: cfg.fingerprint(),
    };
    write_json(&outcome.log_path, &outcome)?;
    Ok(outcome)
}

fn load_model(checkpoint: &Path) -> Result<DualEncoder> {
    Checkpoint::load(checkpoint)?.build_model()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroShotRow {
    pub corruption: String,
    pub severity: u8,
    pub accuracy: f64,
    pub n: usize,
}

/// Zero-shot accuracy per (corruption, severity) plus the clean reference
/// row, written as CSV.
pub fn cmd_zeroshot(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<Vec<ZeroShotRow>> {
    let model = load_model(checkpoint)?;
    let set = eval_set(cfg)?;
    let prompt = prompt_for(cfg, &set.class_names)?;
    let seed = cfg.seeds[0];

    let mut rows = vec![ZeroShotRow {
        corruption: "none".into(),
        severity: 0,
        accuracy: zero_shot_accuracy(&model, &set, &prompt)?,
        n: set.n,
    }];
    for &kind in &cfg.corruptions {
        for &severity in &cfg.severities {
            let spec = CorruptionSpec::new(kind, severity)?;
            let corrupted = corrupt(&set, &spec, seed)?;
            rows.push(ZeroShotRow {
                corruption: kind.name().into(),
                severity,
                accuracy: zero_shot_accuracy(&model, &corrupted, &prompt)?,
                n: corrupted.n,
            });
        }
    }

    std::fs::create_dir_all(out)?;
    let mut csv = format!("# config_fingerprint={}\n", cfg.fingerprint());
    csv.push_str("corruption,severity,accuracy,n\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.corruption, r.severity, r.accuracy, r.n));
    }
    std::fs::write(out.join("zeroshot.csv"), csv)?;
    Ok(rows)
}

struct CellSpec {
    method: Method,
    spec: CorruptionSpec,
    seed: u64,
}

fn task_seed(sweep_seed: u64, spec: &CorruptionSpec) -> u64 {
    // same task stream for every method at a given (corruption, severity,
    // seed) so method columns are comparable
    splitmix64(sweep_seed ^ splitmix64((spec.kind.name().len() as u64) << 8 | spec.severity as u64)
        ^ fxhash(spec.kind.name()))
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// The full benchmark sweep: every (method x corruption x severity x seed)
/// cell with per-task reset. Failed cells are recorded and the sweep
/// continues.
pub fn cmd_adapt(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<BenchmarkTable> {
    let model = load_model(checkpoint)?;
    let set = eval_set(cfg)?;
    let prompt = prompt_for(cfg, &set.class_names)?;
    let fingerprint = cfg.fingerprint();

    let mut cells = Vec::new();
    for method in &cfg.methods {
        for &kind in &cfg.corruptions {
            for &severity in &cfg.severities {
                for &seed in &cfg.seeds {
                    cells.push(CellSpec {
                        method: method.clone(),
                        spec: CorruptionSpec::new(kind, severity)?,
                        seed,
                    });
                }
            }
        }
    }

    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
        .min(cells.len().max(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let results: Vec<std::result::Result<AdaptationReport, String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let mut m = model.clone();
                let mut adapt_cfg = cfg.adapt.clone();
                adapt_cfg.seed = cell.seed;
                let task = make_task(&set, &cell.spec, adapt_cfg.batch_size, task_seed(cell.seed, &cell.spec))
                    .map_err(|e| e.to_string())?;
                let source = if cfg.eval_source_after { Some(&set) } else { None };
                run_baseline(&mut m, &task, &prompt, &cell.method, &adapt_cfg, source)
                    .map_err(|e| e.to_string())
            })
            .collect()
    });

    std::fs::create_dir_all(out.join("reports"))?;
    let mut table = BenchmarkTable { cells: Vec::new(), fingerprint: fingerprint.clone() };
    for (cell, result) in cells.iter().zip(results) {
        match result {
            Ok(mut report) => {
                report.config_fingerprint = fingerprint.clone();
                let name = format!(
                    "{}_{}_s{}_seed{}.json",
                    cell.method.label(),
                    cell.spec.kind.name(),
                    cell.spec.severity,
                    cell.seed
                );
                write_json(&out.join("reports").join(name), &report)?;
                table.cells.push(BenchCell {
                    method: cell.method.label(),
                    corruption: cell.spec.kind.name().into(),
                    severity: cell.spec.severity,
                    seed: cell.seed,
                    accuracy: Some(report.summary.task_accuracy),
                    zero_shot: Some(report.summary.zero_shot_accuracy),
                    gain: Some(report.summary.gain),
                    source_after_drop: report.summary.source_after.as_ref().map(|s| s.drop),
                    error: None,
                });
            }
            Err(message) => table.cells.push(BenchCell {
                method: cell.method.label(),
                corruption: cell.spec.kind.name().into(),
                severity: cell.spec.severity,
                seed: cell.seed,
                accuracy: None,
                zero_shot: None,
                gain: None,
                source_after_drop: None,
                error: Some(message),
            }),
        }
    }

    std::fs::write(out.join("benchmark.csv"), table.to_csv())?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "config_fingerprint": fingerprint,
            "method_means": table.method_means(),
            "failed_cells": table.cells.iter().filter(|c| c.failed()).count(),
        }),
    )?;
    Ok(table)
}

/// Finite-difference audit of every loss and encoder path.
pub fn cmd_gradcheck(width: usize, seed: u64, out: Option<&Path>) -> Result<GradCheckReport> {
    let report = audit_gradients(width, seed, None)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("gradcheck.json"), report.to_json())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptRow {
    pub corruption: String,
    pub severity: u8,
    pub mean_abs_delta: f64,
    pub min: f64,
    pub max: f64,
    pub file: String,
}

fn archive_tensors(set: &ImageSet) -> BTreeMap<String, NamedTensor> {
    let mut tensors = BTreeMap::new();
    tensors.insert(
        "images".to_string(),
        NamedTensor {
            shape: vec![set.n, set.h, set.w, 3],
            is_layernorm: false,
            data: set.pixels.clone(),
        },
    );
    tensors.insert(
        "labels".to_string(),
        NamedTensor {
            shape: vec![set.n],
            is_layernorm: false,
            data: set.labels.iter().map(|&l| l as f64).collect(),
        },
    );
    tensors
}

/// Read an image-set archive written by [`cmd_corrupt`].
pub fn read_image_archive(path: &Path) -> Result<ImageSet> {
    let (tensors, meta) = read_container(path)?;
    let images = tensors.get("images").ok_or_else(|| Error::Parse("archive missing images".into()))?;
    let labels = tensors.get("labels").ok_or_else(|| Error::Parse("archive missing labels".into()))?;
    let class_names: Vec<String> = serde_json::from_value(
        meta.get("class_names").cloned().unwrap_or(serde_json::Value::Null),
    )
    .map_err(|e| Error::Parse(format!("archive class names: {e}")))?;
    let (n, h, w) = (images.shape[0], images.shape[1], images.shape[2]);
    let set = ImageSet {
        n,
        h,
        w,
        pixels: images.data.clone(),
        labels: labels.data.iter().map(|&v| v as usize).collect(),
        class_names,
    };
    set.validate()?;
    Ok(set)
}

/// Cache corrupted datasets as named-tensor archives plus a numeric
/// preview grid. A severity-0 archive is byte-identical to `source.btc`.
pub fn cmd_corrupt(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CorruptRow>> {
    let set = eval_set(cfg)?;
    let seed = cfg.seeds[0];
    std::fs::create_dir_all(out)?;
    let meta = serde_json::json!({
        "class_names": set.class_names,
        "config_fingerprint": cfg.fingerprint(),
    });
    write_container(&out.join("source.btc"), &archive_tensors(&set), &meta)?;

    let mut rows = Vec::new();
    for &kind in &cfg.corruptions {
        for &severity in &cfg.severities {
            let spec = CorruptionSpec::new(kind, severity)?;
            let corrupted = corrupt(&set, &spec, seed)?;
            let file = format!("corrupted_{}_s{}.btc", kind.name(), severity);
            write_container(&out.join(&file), &archive_tensors(&corrupted), &meta)?;
            let mean_abs_delta = corrupted
                .pixels
                .iter()
                .zip(&set.pixels)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / set.pixels.len() as f64;
            let min = corrupted.pixels.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = corrupted.pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            rows.push(CorruptRow {
                corruption: kind.name().into(),
                severity,
                mean_abs_delta,
                min,
                max,
                file,
            });
        }
    }

    let mut csv = format!("# config_fingerprint={}\n", cfg.fingerprint());
    csv.push_str("corruption,severity,mean_abs_delta,min,max,file\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.corruption, r.severity, r.mean_abs_delta, r.min, r.max, r.file
        ));
    }
    std::fs::write(out.join("preview.csv"), csv)?;
    Ok(rows)
}
