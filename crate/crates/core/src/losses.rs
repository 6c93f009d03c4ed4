//! Zero-shot likelihood, pseudo-labels, class prototypes, and the three
//! adaptation loss terms.
//!
//! All functions build nodes on a caller-owned [`Graph`] so gradients flow
//! back into whichever encoder parameters produced the features. Pseudo-
//! labels are argmax-derived constants: the label indicator never carries
//! gradient, only the features behind the prototypes do.

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};
use serde::{Deserialize, Serialize};

/// Per-batch likelihood: row-softmax of cosine similarities over
/// temperature. `logits` are the raw similarities in `[-1, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct LikelihoodMatrix {
    pub probs: TensorId,
    pub logits: TensorId,
    pub batch: usize,
    pub classes: usize,
}

/// Argmax class per row; ties break toward the lowest class index.
/// Detached from the graph by construction.
#[derive(Debug, Clone)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
}

/// Mean visual feature per pseudo-labeled class. Absent classes are
/// omitted: `class_indices[r]` is the class of prototype row `r`.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub rows: TensorId,
    pub class_indices: Vec<usize>,
    pub support_counts: Vec<usize>,
    pub total_classes: usize,
}

impl PrototypeSet {
    pub fn present(&self) -> usize {
        self.class_indices.len()
    }

    pub fn support_of(&self, class: usize) -> Option<usize> {
        self.class_indices
            .iter()
            .position(|&c| c == class)
            .map(|r| self.support_counts[r])
    }
}

/// Divisor convention for the projection-matching loss when classes are
/// absent from the batch: keep the fixed class count (the default) or
/// average over present classes only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmDivisor {
    FixedClassCount,
    PresentClassMean,
}

/// `probs[k][c] = softmax_c(cos(v_k, z_c) / tau)`.
pub fn likelihood(
    g: &mut Graph,
    features: TensorId,
    text_features: TensorId,
    tau: f64,
) -> Result<LikelihoodMatrix> {
    if tau <= 0.0 {
        return Err(Error::Parameter(format!("likelihood temperature must be > 0, got {tau}")));
    }
    let fshape = g.shape(features).to_vec();
    let tshape = g.shape(text_features).to_vec();
    if fshape.len() != 2 || tshape.len() != 2 || fshape[1] != tshape[1] {
        return Err(Error::Dimension(format!(
            "likelihood expects [B,d] and [C,d], got {fshape:?} and {tshape:?}"
        )));
    }
    let vhat = g
        .normalize_rows(features)
        .map_err(|e| Error::DegenerateInput(format!("image feature: {e}")))?;
    let zhat = g
        .normalize_rows(text_features)
        .map_err(|e| Error::DegenerateInput(format!("text feature: {e}")))?;
    let zt = g.transpose(zhat)?;
    let logits = g.matmul(vhat, zt)?;
    let probs = g.softmax(logits, tau)?;
    Ok(LikelihoodMatrix { probs, logits, batch: fshape[0], classes: tshape[0] })
}

/// Row argmax with ties broken toward the lowest index.
pub fn argmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}

pub fn pseudo_label(g: &Graph, lm: &LikelihoodMatrix) -> PseudoLabels {
    PseudoLabels { labels: argmax_rows(g.data(lm.probs), lm.batch, lm.classes) }
}

/// Class prototypes: `v_bar_c = mean of features pseudo-labeled c`.
/// Implemented as a constant indicator matmul so the features stay
/// differentiable while the label selection does not.
pub fn prototypes(
    g: &mut Graph,
    features: TensorId,
    labels: &PseudoLabels,
    classes: usize,
) -> Result<PrototypeSet> {
    let fshape = g.shape(features).to_vec();
    let batch = fshape[0];
    if labels.labels.len() != batch {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {batch}",
            labels.labels.len()
        )));
    }
    if let Some(&bad) = labels.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Parameter(format!("pseudo-label {bad} out of {classes} classes")));
    }
    let mut counts = vec![0usize; classes];
    for &l in &labels.labels {
        counts[l] += 1;
    }
    let class_indices: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    let present = class_indices.len();
    let mut indicator = vec![0.0; present * batch];
    for (row, &c) in class_indices.iter().enumerate() {
        let inv = 1.0 / counts[c] as f64;
        for (k, &l) in labels.labels.iter().enumerate() {
            if l == c {
                indicator[row * batch + k] = inv;
            }
        }
    }
    let m = g.constant(indicator, vec![present, batch])?;
    let rows = g.matmul(m, features)?;
    Ok(PrototypeSet {
        rows,
        support_counts: class_indices.iter().map(|&c| counts[c]).collect(),
        class_indices,
        total_classes: classes,
    })
}

/// Projection matching: mean scalar projection of each present prototype
/// onto its unit-normalized class text feature. Gradients reach both the
/// vision side (through the prototype) and the text side (through z_hat).
pub fn loss_pm(
    g: &mut Graph,
    protos: &PrototypeSet,
    text_features: TensorId,
    divisor: PmDivisor,
) -> Result<TensorId> {
    let zhat = g
        .normalize_rows(text_features)
        .map_err(|e| Error::DegenerateInput(format!("text feature: {e}")))?;
    let mut acc: Option<TensorId> = None;
    for (r, &c) in protos.class_indices.iter().enumerate() {
        let proto = g.slice_rows(protos.rows, r, 1)?;
        let z = g.slice_rows(zhat, c, 1)?;
        let prod = g.mul(proto, z)?;
        let dot = g.sum_all(prod);
        acc = Some(match acc {
            Some(a) => g.add(a, dot)?,
            None => dot,
        });
    }
    let total = acc.ok_or_else(|| Error::DegenerateInput("no present classes".into()))?;
    let div = match divisor {
        PmDivisor::FixedClassCount => protos.total_classes as f64,
        PmDivisor::PresentClassMean => protos.present() as f64,
    };
    Ok(g.scale(total, 1.0 / div))
}

/// Inter-class separability: sum of cosine distances over ordered pairs of
/// distinct present prototypes (each unordered pair counted twice). Returns
/// zero when fewer than two classes are present.
pub fn loss_sp(g: &mut Graph, protos: &PrototypeSet) -> Result<TensorId> {
    let p = protos.present();
    if p < 2 {
        return Ok(g.scalar(0.0));
    }
    let rows: Vec<TensorId> = (0..p)
        .map(|r| g.slice_rows(protos.rows, r, 1))
        .collect::<Result<_>>()?;
    let mut acc: Option<TensorId> = None;
    for l in 0..p {
        for c in 0..p {
            if l == c {
                continue;
            }
            let cos = g
                .cosine_sim(rows[c], rows[l])
                .map_err(|e| Error::DegenerateInput(format!("prototype: {e}")))?;
            let one = g.scalar(1.0);
            let dist = g.sub(one, cos)?;
            acc = Some(match acc {
                Some(a) => g.add(a, dist)?,
                None => dist,
            });
        }
    }
    Ok(acc.expect("at least one ordered pair"))
}

/// Batch-mean prediction entropy with the 0·log 0 = 0 convention.
pub fn loss_ent(g: &mut Graph, lm: &LikelihoodMatrix) -> Result<TensorId> {
    g.entropy_rows_mean(lm.probs)
}

/// The three loss values plus the combined objective
/// `L_ent - lambda_pm * L_pm - lambda_sp * L_sp`.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveParts {
    pub ent: TensorId,
    pub pm: TensorId,
    pub sp: TensorId,
    pub total: TensorId,
}

pub fn objective(
    g: &mut Graph,
    lm: &LikelihoodMatrix,
    protos: &PrototypeSet,
    text_features: TensorId,
    lambda_pm: f64,
    lambda_sp: f64,
    divisor: PmDivisor,
) -> Result<ObjectiveParts> {
    if lambda_pm < 0.0 || lambda_sp < 0.0 {
        return Err(Error::Parameter(format!(
            "loss weights must be nonnegative, got ({lambda_pm}, {lambda_sp})"
        )));
    }
    let ent = loss_ent(g, lm)?;
    let pm = loss_pm(g, protos, text_features, divisor)?;
    let sp = loss_sp(g, protos)?;
    let mut total = ent;
    if lambda_pm > 0.0 {
        let w = g.scale(pm, lambda_pm);
        total = g.sub(total, w)?;
    }
    if lambda_sp > 0.0 {
        let w = g.scale(sp, lambda_sp);
        total = g.sub(total, w)?;
    }
    Ok(ObjectiveParts { ent, pm, sp, total })
}

/// Classification accuracy in percent.
pub fn accuracy_percent(predictions: &[usize], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * correct as f64 / predictions.len() as f64
}

/// Eval-path predictions from raw feature matrices (no graph): cosine
/// argmax, which is temperature-invariant.
pub fn predict_classes(
    features: &[f64],
    batch: usize,
    text_features: &[f64],
    classes: usize,
    dim: usize,
) -> Result<Vec<usize>> {
    let mut sims = vec![0.0; batch * classes];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tnorms: Vec<f64> = (0..classes).map(|c| norm(&text_features[c * dim..(c + 1) * dim])).collect();
    if let Some(c) = tnorms.iter().position(|&n| n == 0.0) {
        return Err(Error::DegenerateInput(format!("zero-norm text feature row {c}")));
    }
    for k in 0..batch {
        let v = &features[k * dim..(k + 1) * dim];
        let vn = norm(v);
        if vn == 0.0 {
            return Err(Error::DegenerateInput(format!("zero-norm image feature row {k}")));
        }
        for c in 0..classes {
            let z = &text_features[c * dim..(c + 1) * dim];
            let dot: f64 = v.iter().zip(z).map(|(a, b)| a * b).sum();
            sims[k * classes + c] = dot / (vn * tnorms[c]);
        }
    }
    Ok(argmax_rows(&sims, batch, classes))
}
