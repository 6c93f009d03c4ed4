//! Adam and AdamW over named parameters.
//!
//! State (first/second moments + step counter) exists exactly for the
//! scoped parameter names handed to the constructor. AdamW applies
//! decoupled weight decay `p -= lr * wd * p` before the moment update;
//! Adam forces the decay to zero.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Adam,
    AdamW,
}

/// Mutable access to named parameter buffers.
pub trait ParamStore {
    fn param_data_mut(&mut self, name: &str) -> Option<&mut Vec<f64>>;
}

impl ParamStore for crate::model::DualEncoder {
    fn param_data_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        crate::model::DualEncoder::param_data_mut(self, name)
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(
        kind: OptimKind,
        lr: f64,
        betas: (f64, f64),
        eps: f64,
        weight_decay: f64,
        scoped: &[String],
    ) -> Result<Optimizer> {
        if lr <= 0.0 {
            return Err(Error::Parameter(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&betas.0) || !(0.0..1.0).contains(&betas.1) {
            return Err(Error::Parameter(format!("betas must lie in [0,1), got {betas:?}")));
        }
        let weight_decay = match kind {
            OptimKind::Adam => 0.0,
            OptimKind::AdamW => weight_decay,
        };
        let moments = scoped
            .iter()
            .map(|n| (n.clone(), (Vec::new(), Vec::new())))
            .collect();
        Ok(Optimizer { kind, lr, beta1: betas.0, beta2: betas.1, eps, weight_decay, step_count: 0, moments })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn state_names(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }

    /// One bias-corrected update over every scoped parameter. Every scoped
    /// name must have a gradient.
    pub fn step(&mut self, store: &mut dyn ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, (m, v)) in self.moments.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing gradient for parameter {name}")))?;
            let p = store
                .param_data_mut(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
            if p.len() != g.len() {
                return Err(Error::Dimension(format!(
                    "parameter {name}: gradient length {} vs {}",
                    g.len(),
                    p.len()
                )));
            }
            if m.is_empty() {
                m.resize(p.len(), 0.0);
                v.resize(p.len(), 0.0);
            }
            if self.weight_decay > 0.0 {
                let shrink = 1.0 - self.lr * self.weight_decay;
                for pv in p.iter_mut() {
                    *pv *= shrink;
                }
            }
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flat(BTreeMap<String, Vec<f64>>);

    impl ParamStore for Flat {
        fn param_data_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
            self.0.get_mut(name)
        }
    }

    fn single(name: &str, value: f64) -> Flat {
        Flat(BTreeMap::from([(name.to_string(), vec![value])]))
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // bias correction makes m_hat = v_hat = 1, so delta ~= lr
        let mut store = single("p", 1.0);
        let mut opt = Optimizer::new(
            OptimKind::AdamW,
            0.1,
            (0.9, 0.999),
            1e-8,
            0.0,
            &["p".to_string()],
        )
        .unwrap();
        let grads = BTreeMap::from([("p".to_string(), vec![1.0])]);
        opt.step(&mut store, &grads).unwrap();
        assert!((store.0["p"][0] - 0.9).abs() < 1e-7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut store = single("p", 0.37);
        let mut opt =
            Optimizer::new(OptimKind::Adam, 0.1, (0.9, 0.999), 1e-8, 0.5, &["p".to_string()])
                .unwrap();
        // Adam forces weight decay to zero
        assert_eq!(opt.weight_decay, 0.0);
        let grads = BTreeMap::from([("p".to_string(), vec![0.0])]);
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.0["p"][0], 0.37);
    }

    #[test]
    fn decoupled_decay_shrinks_with_zero_gradient() {
        let mut store = single("p", 2.0);
        let lr = 0.1;
        let wd = 0.01;
        let mut opt =
            Optimizer::new(OptimKind::AdamW, lr, (0.9, 0.999), 1e-8, wd, &["p".to_string()])
                .unwrap();
        let grads = BTreeMap::from([("p".to_string(), vec![0.0])]);
        opt.step(&mut store, &grads).unwrap();
        assert!((store.0["p"][0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
        opt.step(&mut store, &grads).unwrap();
        assert!((store.0["p"][0] - 2.0 * (1.0 - lr * wd).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut store = single("needle", 1.0);
        let mut opt = Optimizer::new(
            OptimKind::AdamW,
            0.1,
            (0.9, 0.999),
            1e-8,
            0.0,
            &["needle".to_string()],
        )
        .unwrap();
        let err = opt.step(&mut store, &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("needle"), "{err}");
    }

    #[test]
    fn state_exists_exactly_for_scoped_names() {
        let opt = Optimizer::new(
            OptimKind::Adam,
            0.1,
            (0.9, 0.999),
            1e-8,
            0.0,
            &["a".to_string(), "b".to_string()],
        )
        .unwrap();
        let names: Vec<&String> = opt.state_names().collect();
        assert_eq!(names, vec!["a", "b"]);
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(Optimizer::new(OptimKind::Adam, 0.0, (0.9, 0.999), 1e-8, 0.0, &[]).is_err());
        assert!(Optimizer::new(OptimKind::Adam, 0.1, (1.0, 0.999), 1e-8, 0.0, &[]).is_err());
        assert!(Optimizer::new(OptimKind::Adam, 0.1, (0.9, -0.1), 1e-8, 0.0, &[]).is_err());
    }
}
