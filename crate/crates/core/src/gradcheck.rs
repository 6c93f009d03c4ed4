//! Finite-difference audit of every loss and encoder gradient path.
//!
//! The audit freezes the pseudo-labels computed at the base parameters
//! (they are detached constants in the objective, so the differentiable
//! function under test holds them fixed) and compares analytic gradients
//! of every LayerNorm parameter in both towers against central finite
//! differences at step 1e-5. Relative error uses an absolute floor of
//! 1e-3 in the denominator so near-zero gradients do not inflate it.

use crate::data::gen_shapes;
use crate::error::Result;
use crate::losses::{likelihood, objective, prototypes, pseudo_label, PmDivisor, PseudoLabels};
use crate::model::tokenizer::{PromptTemplate, Vocab};
use crate::model::{ArchConfig, DualEncoder, ScopeSelector};
use serde::{Deserialize, Serialize};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub width: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
    pub max_rel_err: f64,
    pub all_pass: bool,
}

impl GradCheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Copy, PartialEq)]
enum LossKind {
    Ent,
    Pm,
    Sp,
    Objective,
    VisionFeatureMean,
    TextFeatureMean,
}

impl LossKind {
    fn name(&self) -> &'static str {
        match self {
            LossKind::Ent => "loss_ent",
            LossKind::Pm => "loss_pm",
            LossKind::Sp => "loss_sp",
            LossKind::Objective => "objective",
            LossKind::VisionFeatureMean => "vision_encoder_path",
            LossKind::TextFeatureMean => "text_encoder_path",
        }
    }
}

const ALL_LOSSES: [LossKind; 6] = [
    LossKind::Ent,
    LossKind::Pm,
    LossKind::Sp,
    LossKind::Objective,
    LossKind::VisionFeatureMean,
    LossKind::TextFeatureMean,
];

struct Audit {
    model: DualEncoder,
    prompt: PromptTemplate,
    pixels: Vec<f64>,
    batch: usize,
    frozen_labels: PseudoLabels,
    ln_params: Vec<String>,
}

impl Audit {
    fn new(width: usize, seed: u64) -> Result<Audit> {
        let data = gen_shapes(1, 5, 16, seed ^ 0xDA7A)?;
        let prompt = PromptTemplate::new("a photo of a <CLS>.", data.class_names.clone())?;
        let mut texts = vec![prompt.template.clone()];
        texts.extend(data.class_names.iter().cloned());
        let model = DualEncoder::new(ArchConfig::scaled(width, Vocab::build(&texts)), seed)?;
        let batch = 4usize;
        let pixels = data.pixels[..batch * data.pixels_per_image()].to_vec();

        // freeze pseudo-labels at the base parameters
        let mut pass = model.begin(&[]);
        let feats = pass.encode_images(&pixels, batch)?;
        let text = pass.encode_text(&prompt)?;
        let lm = likelihood(&mut pass.graph, feats, text, model.tau)?;
        let frozen_labels = pseudo_label(&pass.graph, &lm);

        let ln_params = model.resolve_scope(ScopeSelector::LnBoth).resolved;
        Ok(Audit { model, prompt, pixels, batch, frozen_labels, ln_params })
    }

    fn loss_value(&self, model: &DualEncoder, kind: LossKind) -> Result<f64> {
        let mut pass = model.begin(&[]);
        let v = self.build_loss(&mut pass, kind)?;
        Ok(pass.graph.scalar_value(v))
    }

    fn build_loss(
        &self,
        pass: &mut crate::model::ForwardPass<'_>,
        kind: LossKind,
    ) -> Result<crate::tensor::TensorId> {
        let feats = pass.encode_images(&self.pixels, self.batch)?;
        if kind == LossKind::VisionFeatureMean {
            return Ok(pass.graph.mean_all(feats));
        }
        let text = pass.encode_text(&self.prompt)?;
        if kind == LossKind::TextFeatureMean {
            return Ok(pass.graph.mean_all(text));
        }
        let g = &mut pass.graph;
        let lm = likelihood(g, feats, text, self.model.tau)?;
        let protos = prototypes(g, feats, &self.frozen_labels, self.prompt.class_count())?;
        let parts = objective(g, &lm, &protos, text, 1.0, 1.0, PmDivisor::FixedClassCount)?;
        Ok(match kind {
            LossKind::Ent => parts.ent,
            LossKind::Pm => parts.pm,
            LossKind::Sp => parts.sp,
            LossKind::Objective => parts.total,
            _ => unreachable!(),
        })
    }

    fn check(&self, kind: LossKind, sabotage: bool) -> Result<CheckResult> {
        // analytic gradients for every LayerNorm parameter
        let mut pass = self.model.begin(&self.ln_params);
        let loss = self.build_loss(&mut pass, kind)?;
        pass.graph.backward(loss)?;
        let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
        for name in &self.ln_params {
            let id = pass.param_id(name);
            let n = self.model.param(name).unwrap().data.len();
            let g = pass.graph.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
            analytic.push((name.clone(), g));
        }
        drop(pass);

        let mut max_rel_err: f64 = 0.0;
        let mut worst_param = String::new();
        for (name, grad) in &analytic {
            for i in 0..grad.len() {
                let mut plus = self.model.clone();
                plus.param_data_mut(name).unwrap()[i] += FD_STEP;
                let mut minus = self.model.clone();
                minus.param_data_mut(name).unwrap()[i] -= FD_STEP;
                let numeric =
                    (self.loss_value(&plus, kind)? - self.loss_value(&minus, kind)?) / (2.0 * FD_STEP);
                let mut a = grad[i];
                if sabotage {
                    a = a * 1.01 + 1e-3;
                }
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                if err > max_rel_err {
                    max_rel_err = err;
                    worst_param = name.clone();
                }
            }
        }
        Ok(CheckResult {
            name: kind.name().to_string(),
            max_rel_err,
            worst_param,
            pass: max_rel_err < TOLERANCE,
        })
    }
}

/// Audit every loss and encoder path on a width-`width` model.
/// `sabotage` deliberately corrupts the named check's analytic gradient so
/// the negative-control path is testable end to end.
pub fn audit_gradients(width: usize, seed: u64, sabotage: Option<&str>) -> Result<GradCheckReport> {
    let audit = Audit::new(width, seed)?;
    let mut checks = Vec::new();
    for kind in ALL_LOSSES {
        let corrupt = sabotage == Some(kind.name());
        checks.push(audit.check(kind, corrupt)?);
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let all_pass = checks.iter().all(|c| c.pass);
    Ok(GradCheckReport { width, seed, tolerance: TOLERANCE, checks, max_rel_err, all_pass })
}
