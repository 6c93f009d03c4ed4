//! Online test-time adaptation: per-batch forward, objective, a single
//! optimizer step over the scoped LayerNorm parameters, and per-task reset.
//!
//! Accuracy is recorded on each batch before that batch's update
//! (predict-then-adapt). Ground-truth labels are used only for accuracy
//! accounting and never enter a gradient. Optimizer state is created fresh
//! per task and discarded with the reset.

pub mod optim;

pub use optim::{OptimKind, Optimizer, ParamStore};

use crate::corrupt::Task;
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::losses::{
    accuracy_percent, likelihood, objective, prototypes, pseudo_label, PmDivisor,
};
use crate::model::tokenizer::PromptTemplate;
use crate::model::{DualEncoder, ScopeSelector};
use crate::report::{AdaptationReport, BatchRecord, ReportSummary, SourceAfter};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Images per graph when evaluating whole sets.
const EVAL_CHUNK: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub scope: ScopeSelector,
    pub optimizer: OptimKind,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub iterations_per_batch: usize,
    pub lambda_pm: f64,
    pub lambda_sp: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub reset_per_task: bool,
    pub pm_divisor: PmDivisor,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            scope: ScopeSelector::LnBoth,
            optimizer: OptimKind::AdamW,
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            iterations_per_batch: 1,
            lambda_pm: 1.0,
            lambda_sp: 1.0,
            batch_size: 200,
            seed: 0,
            reset_per_task: true,
            pm_divisor: PmDivisor::FixedClassCount,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::Config(format!("betas must lie in [0,1), got {:?}", self.betas)));
        }
        if self.iterations_per_batch < 1 {
            return Err(Error::Config("iterations_per_batch must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lambda_pm < 0.0 || self.lambda_sp < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Benchmark methods. `entropy_only` is the TENT adoption: entropy alone,
/// vision-encoder LayerNorms only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroShot,
    EntropyOnly,
    Batclip,
    Ablation { lambda_pm: f64, lambda_sp: f64, scope: ScopeSelector },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::ZeroShot => "zero_shot".into(),
            Method::EntropyOnly => "entropy_only".into(),
            Method::Batclip => "batclip".into(),
            Method::Ablation { lambda_pm, lambda_sp, scope } => {
                format!("ablation_pm{lambda_pm}_sp{lambda_sp}_{scope}")
            }
        }
    }

    /// Derive the effective config for this method from a base config.
    pub fn configure(&self, base: &AdaptConfig) -> AdaptConfig {
        let mut cfg = base.clone();
        match self {
            Method::ZeroShot => {
                cfg.scope = ScopeSelector::None;
            }
            Method::EntropyOnly => {
                cfg.scope = ScopeSelector::LnVision;
                cfg.lambda_pm = 0.0;
                cfg.lambda_sp = 0.0;
            }
            Method::Batclip => {}
            Method::Ablation { lambda_pm, lambda_sp, scope } => {
                cfg.lambda_pm = *lambda_pm;
                cfg.lambda_sp = *lambda_sp;
                cfg.scope = *scope;
            }
        }
        cfg
    }
}

/// Predictions for one pixel batch under the current parameters, via the
/// same likelihood path the adaptation loop uses.
fn batch_predictions(
    model: &DualEncoder,
    pixels: &[f64],
    n: usize,
    prompt: &PromptTemplate,
) -> Result<Vec<usize>> {
    let mut pass = model.begin(&[]);
    let feats = pass.encode_images(pixels, n)?;
    let text = pass.encode_text(prompt)?;
    let lm = likelihood(&mut pass.graph, feats, text, model.tau)?;
    Ok(pseudo_label(&pass.graph, &lm).labels)
}

/// Whole-set zero-shot accuracy (percent), evaluated in chunks.
pub fn zero_shot_accuracy(model: &DualEncoder, set: &ImageSet, prompt: &PromptTemplate) -> Result<f64> {
    let per = set.pixels_per_image();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < set.n {
        let n = (set.n - start).min(EVAL_CHUNK);
        let pixels = &set.pixels[start * per..(start + n) * per];
        let preds = batch_predictions(model, pixels, n, prompt)?;
        correct += preds
            .iter()
            .zip(&set.labels[start..start + n])
            .filter(|(p, l)| p == l)
            .count();
        start += n;
    }
    Ok(100.0 * correct as f64 / set.n as f64)
}

/// Clean-set accuracy of the adapted parameters next to the pretrained
/// zero-shot reference. Call before any reset.
pub fn eval_source_after(
    model: &DualEncoder,
    clean: &ImageSet,
    prompt: &PromptTemplate,
    pretrained_zero_shot: f64,
) -> Result<SourceAfter> {
    let adapted = zero_shot_accuracy(model, clean, prompt)?;
    Ok(SourceAfter {
        adapted_accuracy: adapted,
        zero_shot_accuracy: pretrained_zero_shot,
        drop: pretrained_zero_shot - adapted,
    })
}

fn tower_grad_norms(grads: &BTreeMap<String, Vec<f64>>) -> (f64, f64) {
    let mut vision = 0.0;
    let mut text = 0.0;
    for (name, g) in grads {
        let sq: f64 = g.iter().map(|v| v * v).sum();
        if name.starts_with("vision.") {
            vision += sq;
        } else if name.starts_with("text.") {
            text += sq;
        }
    }
    (vision.sqrt(), text.sqrt())
}

/// Run the online adaptation loop over one task stream.
///
/// For each batch in order: forward, record predictions and loss
/// components on the current parameters, then run
/// `iterations_per_batch` optimizer steps on the scoped parameters.
/// After the final batch the clean source set is evaluated (when given),
/// and the pre-task snapshot is restored when `reset_per_task` is set.
pub fn adapt_task(
    model: &mut DualEncoder,
    task: &Task,
    prompt: &PromptTemplate,
    cfg: &AdaptConfig,
    source_eval: Option<&ImageSet>,
) -> Result<AdaptationReport> {
    cfg.validate()?;
    if task.batches.is_empty() {
        return Err(Error::Config("task has no batches".into()));
    }
    let classes = prompt.class_count();
    if task.class_names.len() != classes {
        return Err(Error::Config(format!(
            "task has {} classes but prompt has {classes}",
            task.class_names.len()
        )));
    }
    let scope = model.resolve_scope(cfg.scope);
    let updating = !matches!(cfg.scope, ScopeSelector::None);
    if updating && scope.resolved.is_empty() {
        return Err(Error::Config(format!("scope {} resolved to an empty set", cfg.scope)));
    }

    let snapshot = model.snapshot();

    // Frozen reference: the same stream scored with pre-task parameters.
    let reference: Option<Vec<f64>> = if updating {
        let mut accs = Vec::with_capacity(task.batches.len());
        for b in &task.batches {
            let preds = batch_predictions(model, &b.pixels, b.size(), prompt)?;
            accs.push(accuracy_percent(&preds, &b.labels));
        }
        Some(accs)
    } else {
        None
    };

    let source_before = match source_eval {
        Some(s) => Some(zero_shot_accuracy(model, s, prompt)?),
        None => None,
    };

    let mut optimizer = Optimizer::new(
        cfg.optimizer,
        cfg.lr,
        cfg.betas,
        cfg.eps,
        cfg.weight_decay,
        &scope.resolved,
    )?;

    let mut records: Vec<BatchRecord> = Vec::with_capacity(task.batches.len());
    for (bi, batch) in task.batches.iter().enumerate() {
        let mut record: Option<BatchRecord> = None;
        let iterations = if updating { cfg.iterations_per_batch } else { 1 };
        for it in 0..iterations {
            let trainable = if updating { scope.resolved.clone() } else { Vec::new() };
            let mut pass = model.begin(&trainable);
            let feats = pass.encode_images(&batch.pixels, batch.size())?;
            let text = pass.encode_text(prompt)?;
            let lm = likelihood(&mut pass.graph, feats, text, model.tau)?;
            let plabels = pseudo_label(&pass.graph, &lm);
            let protos = prototypes(&mut pass.graph, feats, &plabels, classes)?;
            let parts = objective(
                &mut pass.graph,
                &lm,
                &protos,
                text,
                cfg.lambda_pm,
                cfg.lambda_sp,
                cfg.pm_divisor,
            )?;
            let total = pass.graph.scalar_value(parts.total);
            if !total.is_finite() {
                return Err(Error::Adaptation {
                    batch: bi,
                    message: format!("objective is not finite ({total})"),
                });
            }
            if it == 0 {
                record = Some(BatchRecord {
                    index: bi,
                    size: batch.size(),
                    accuracy: accuracy_percent(&plabels.labels, &batch.labels),
                    loss_ent: pass.graph.scalar_value(parts.ent),
                    loss_pm: pass.graph.scalar_value(parts.pm),
                    loss_sp: pass.graph.scalar_value(parts.sp),
                    loss_total: total,
                    grad_norm_vision: 0.0,
                    grad_norm_text: 0.0,
                });
            }
            if updating {
                pass.graph.backward(parts.total)?;
                let grads = pass.grads()?;
                drop(pass);
                if it == 0 {
                    let (gv, gt) = tower_grad_norms(&grads);
                    let r = record.as_mut().expect("first-iteration record exists");
                    r.grad_norm_vision = gv;
                    r.grad_norm_text = gt;
                }
                optimizer.step(model, &grads)?;
            }
        }
        records.push(record.expect("record created on first iteration"));
    }

    let task_accuracy =
        records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64;
    let zero_shot = match &reference {
        Some(accs) => accs.iter().sum::<f64>() / accs.len() as f64,
        None => task_accuracy,
    };

    let source_after = match (source_eval, source_before) {
        (Some(s), Some(before)) => Some(eval_source_after(model, s, prompt, before)?),
        _ => None,
    };

    if cfg.reset_per_task {
        model.restore(&snapshot)?;
    }

    let samples = task.total_samples();
    let fingerprint = crate::report::fingerprint(&serde_json::json!({
        "adapt": cfg,
        "corruption": task.spec.kind.name(),
        "severity": task.spec.severity,
        "task_seed": task.seed,
    }));
    Ok(AdaptationReport {
        task: task.id(),
        corruption: task.spec.kind.name().to_string(),
        severity: task.spec.severity,
        method: format!("adapt_{}", cfg.scope),
        seed: cfg.seed,
        per_batch: records,
        summary: ReportSummary {
            task_accuracy,
            zero_shot_accuracy: zero_shot,
            gain: task_accuracy - zero_shot,
            batches: task.batches.len(),
            samples,
            source_after,
        },
        config_fingerprint: fingerprint,
    })
}

/// Run one benchmark method: the identical loop with the method's
/// objective and scope. `zero_shot` performs no updates.
pub fn run_baseline(
    model: &mut DualEncoder,
    task: &Task,
    prompt: &PromptTemplate,
    method: &Method,
    base: &AdaptConfig,
    source_eval: Option<&ImageSet>,
) -> Result<AdaptationReport> {
    let cfg = method.configure(base);
    let mut report = adapt_task(model, task, prompt, &cfg, source_eval)?;
    report.method = method.label();
    Ok(report)
}
