//! Adaptation reports, the benchmark table, and config fingerprinting.
//!
//! Reports serialize to JSON; tables to CSV with one row per
//! (method, corruption, severity, seed) cell plus per-method mean rows.
//! Every emitted artifact embeds the config fingerprint so outputs are
//! traceable to the exact configuration that produced them.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Accuracy and loss components of one test batch, recorded at prediction
/// time (before that batch's update).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub index: usize,
    pub size: usize,
    pub accuracy: f64,
    pub loss_ent: f64,
    pub loss_pm: f64,
    pub loss_sp: f64,
    pub loss_total: f64,
    /// L2 norm of the objective gradient into each tower's scoped
    /// parameters at the first iteration (0 when nothing updates).
    pub grad_norm_vision: f64,
    pub grad_norm_text: f64,
}

/// Post-adaptation accuracy back on the clean source set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceAfter {
    pub adapted_accuracy: f64,
    pub zero_shot_accuracy: f64,
    /// Signed drop: zero-shot minus adapted (positive = forgetting).
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    /// Mean over batches of predict-then-adapt batch accuracy (percent).
    pub task_accuracy: f64,
    /// Same stream scored with the frozen pre-task parameters.
    pub zero_shot_accuracy: f64,
    /// task_accuracy - zero_shot_accuracy.
    pub gain: f64,
    pub batches: usize,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_after: Option<SourceAfter>,
}

/// Full record of one adaptation run over one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub task: String,
    pub corruption: String,
    pub severity: u8,
    pub method: String,
    pub seed: u64,
    pub per_batch: Vec<BatchRecord>,
    pub summary: ReportSummary,
    pub config_fingerprint: String,
}

impl AdaptationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub const CSV_HEADER: &'static str =
        "method,corruption,severity,seed,accuracy,zero_shot,gain,batches,samples,fingerprint";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.corruption,
            self.severity,
            self.seed,
            self.summary.task_accuracy,
            self.summary.zero_shot_accuracy,
            self.summary.gain,
            self.summary.batches,
            self.summary.samples,
            self.config_fingerprint
        )
    }
}

/// One cell of the benchmark sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub method: String,
    pub corruption: String,
    pub severity: u8,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub zero_shot: Option<f64>,
    pub gain: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_after_drop: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl BenchCell {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Sweep results keyed by (method, corruption, severity, seed) with
/// per-method marginal means.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub cells: Vec<BenchCell>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMean {
    pub method: String,
    pub mean_accuracy: f64,
    pub mean_zero_shot: f64,
    pub mean_gain: f64,
    pub cells: usize,
}

impl BenchmarkTable {
    /// Per-method arithmetic means over successful cells, in first-seen
    /// method order.
    pub fn method_means(&self) -> Vec<MethodMean> {
        let mut order: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !order.contains(&c.method.as_str()) {
                order.push(&c.method);
            }
        }
        order
            .into_iter()
            .map(|m| {
                let ok: Vec<&BenchCell> = self
                    .cells
                    .iter()
                    .filter(|c| c.method == m && !c.failed())
                    .collect();
                let n = ok.len().max(1) as f64;
                MethodMean {
                    method: m.to_string(),
                    mean_accuracy: ok.iter().filter_map(|c| c.accuracy).sum::<f64>() / n,
                    mean_zero_shot: ok.iter().filter_map(|c| c.zero_shot).sum::<f64>() / n,
                    mean_gain: ok.iter().filter_map(|c| c.gain).sum::<f64>() / n,
                    cells: ok.len(),
                }
            })
            .collect()
    }

    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| c.failed())
    }

    /// CSV: cell rows then `mean` rows per method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,corruption,severity,seed,accuracy,zero_shot,gain,source_after_drop,status\n",
        );
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.method,
                c.corruption,
                c.severity,
                c.seed,
                fmt_opt(c.accuracy),
                fmt_opt(c.zero_shot),
                fmt_opt(c.gain),
                fmt_opt(c.source_after_drop),
                if c.failed() { "failed" } else { "ok" },
            ));
        }
        for m in self.method_means() {
            out.push_str(&format!(
                "{},mean,,,{},{},{},,{} cells\n",
                m.method, m.mean_accuracy, m.mean_zero_shot, m.mean_gain, m.cells
            ));
        }
        out.push_str(&format!("# fingerprint,{}\n", self.fingerprint));
        out
    }
}

/// SHA-256 hex digest of a canonical JSON value.
pub fn fingerprint(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hex_string(&hasher.finalize())
}

/// SHA-256 hex digest of a file's bytes.
pub fn file_digest(path: &std::path::Path) -> crate::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
