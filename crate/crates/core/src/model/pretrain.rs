//! Contrastive pretraining: symmetric InfoNCE over the in-batch
//! image/class-text similarity matrix with a learnable temperature. This
//! produces the zero-shot starting point the adaptation loop assumes.

use crate::adapt::optim::{OptimKind, Optimizer, ParamStore};
use crate::data::{splitmix64, ImageSet};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::tokenizer::PromptTemplate;
use crate::model::DualEncoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 30, lr: 1e-3, batch_size: 64, weight_decay: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch_losses: Vec<f64>,
    pub tau: f64,
}

/// The learnable log logit-scale rides along with the model parameters
/// during pretraining only.
struct WithLogitScale<'a> {
    model: &'a mut DualEncoder,
    logit_scale: &'a mut Vec<f64>,
}

const LOGIT_SCALE_NAME: &str = "logit_scale";
// CLIP-style clamp: the similarity multiplier stays in [1, 100].
const MAX_LOG_SCALE: f64 = 4.605170185988092; // ln(100)

impl ParamStore for WithLogitScale<'_> {
    fn param_data_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        if name == LOGIT_SCALE_NAME {
            Some(self.logit_scale)
        } else {
            self.model.param_data_mut(name)
        }
    }
}

/// Train both encoders plus the temperature on clean labeled data.
/// Returns the resulting checkpoint and the loss trace. Deterministic for
/// a fixed seed.
pub fn pretrain_contrastive(
    model: &mut DualEncoder,
    data: &ImageSet,
    prompt: &PromptTemplate,
    cfg: &PretrainConfig,
) -> Result<(Checkpoint, PretrainLog)> {
    data.validate()?;
    let classes = prompt.class_count();
    if data.class_names.len() != classes {
        return Err(Error::Config(format!(
            "data has {} classes but prompt has {classes}",
            data.class_names.len()
        )));
    }
    {
        let mut seen = vec![false; classes];
        for &l in &data.labels {
            seen[l] = true;
        }
        if seen.iter().filter(|s| **s).count() < 2 {
            return Err(Error::Parameter(
                "contrastive pretraining needs at least 2 classes present".into(),
            ));
        }
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }

    let all_names: Vec<String> = model.param_names().cloned().collect();
    let mut scoped = all_names.clone();
    scoped.push(LOGIT_SCALE_NAME.to_string());
    let mut optimizer = Optimizer::new(
        OptimKind::AdamW,
        cfg.lr,
        (0.9, 0.999),
        1e-8,
        cfg.weight_decay,
        &scoped,
    )?;

    let mut logit_scale = vec![(1.0 / model.tau).ln()];
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x9E37_79B9));
    let per = data.pixels_per_image();
    let mut order: Vec<usize> = (0..data.n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut pixels = Vec::with_capacity(b * per);
            let mut labels = Vec::with_capacity(b);
            for &i in chunk {
                pixels.extend_from_slice(data.image(i));
                labels.push(data.labels[i]);
            }

            let mut pass = model.begin(&all_names);
            let feats = pass.encode_images(&pixels, b)?;
            let text = pass.encode_text(prompt)?;
            let g = &mut pass.graph;
            let vhat = g.normalize_rows(feats)?;
            let zhat = g.normalize_rows(text)?;
            let zt = g.transpose(zhat)?;
            let sims = g.matmul(vhat, zt)?;
            let ls = g.leaf(logit_scale.clone(), vec![1], true)?;
            let scale = g.exp(ls);
            let logits = g.scale_by_scalar(sims, scale)?;

            // image -> class: one-hot targets
            let mut t_i2t = vec![0.0; b * classes];
            for (k, &l) in labels.iter().enumerate() {
                t_i2t[k * classes + l] = 1.0;
            }
            let ce_i = g.cross_entropy_rows(logits, &t_i2t)?;
            let sum_i = g.sum_all(ce_i);
            let mean_i = g.scale(sum_i, 1.0 / b as f64);

            // class -> image: uniform over the class members present
            let mut counts = vec![0usize; classes];
            for &l in &labels {
                counts[l] += 1;
            }
            let present = counts.iter().filter(|&&c| c > 0).count();
            let logits_t = g.transpose(logits)?;
            let mut t_t2i = vec![0.0; classes * b];
            for c in 0..classes {
                if counts[c] == 0 {
                    continue;
                }
                let inv = 1.0 / counts[c] as f64;
                for (k, &l) in labels.iter().enumerate() {
                    if l == c {
                        t_t2i[c * b + k] = inv;
                    }
                }
            }
            let ce_t = g.cross_entropy_rows(logits_t, &t_t2i)?;
            let sum_t = g.sum_all(ce_t);
            let mean_t = g.scale(sum_t, 1.0 / present as f64);

            let both = g.add(mean_i, mean_t)?;
            let loss = g.scale(both, 0.5);

            let loss_val = g.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("contrastive loss is not finite ({loss_val})"),
                });
            }
            epoch_loss += loss_val;
            batches += 1;

            pass.graph.backward(loss)?;
            let mut grads = pass.grads()?;
            let ls_grad = pass.graph.grad(ls).expect("logit scale participates").to_vec();
            grads.insert(LOGIT_SCALE_NAME.to_string(), ls_grad);
            drop(pass);

            let mut store = WithLogitScale { model, logit_scale: &mut logit_scale };
            optimizer.step(&mut store, &grads)?;
            logit_scale[0] = logit_scale[0].clamp(0.0, MAX_LOG_SCALE);
            model.tau = (-logit_scale[0]).exp();
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }

    let log = PretrainLog { epoch_losses, tau: model.tau };
    Ok((Checkpoint::from_model(model), log))
}
