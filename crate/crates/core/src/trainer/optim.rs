use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::posemodel::STEM_PREFIX;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Rate for parameters under the stem prefix.
    pub lr_stem: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Fraction of the run after which both rates drop by 10×; 1 disables.
    pub lr_drop_at: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_stem: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
            lr_drop_at: 1.0,
        }
    }
}

/// Adaptive-moment optimizer with a separate rate for the stem.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: OptimConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
    /// Multiplier applied to both rates.
    pub lr_scale: f64,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            lr_scale: 1.0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        let base = if name.starts_with(STEM_PREFIX) {
            self.cfg.lr_stem
        } else {
            self.cfg.lr
        };
        base * self.lr_scale
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let mut sq = 0.0;
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Training(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            sq += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let lr = self.lr_for(name);
            let p = params.get_mut(name).expect("checked above");
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("head.x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(OptimConfig {
            lr: 0.05,
            clip_norm: 0.0,
            ..Default::default()
        });
        for _ in 0..2000 {
            let x = p.get("head.x").unwrap().clone();
            let g = x.map(|v| 2.0 * (v - 1.0));
            opt.step(&mut p, &BTreeMap::from([("head.x".to_string(), g)]))
                .unwrap();
        }
        for v in p.get("head.x").unwrap().data() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn stem_parameters_move_ten_times_slower() {
        let mut p = ParamStore::new();
        p.insert("stem.w", Tensor::vector(vec![0.0]));
        p.insert("head.w", Tensor::vector(vec![0.0]));
        let mut opt = Adam::new(OptimConfig::default());
        let g = BTreeMap::from([
            ("stem.w".to_string(), Tensor::vector(vec![0.5])),
            ("head.w".to_string(), Tensor::vector(vec![0.5])),
        ]);
        opt.step(&mut p, &g).unwrap();
        let s = p.get("stem.w").unwrap().item();
        let h = p.get("head.w").unwrap().item();
        assert!((h / s - 10.0).abs() < 1e-6);
    }

    #[test]
    fn first_step_has_size_lr() {
        let mut p = ParamStore::new();
        p.insert("head.w", Tensor::vector(vec![1.0]));
        let mut opt = Adam::new(OptimConfig::default());
        let g = BTreeMap::from([("head.w".to_string(), Tensor::vector(vec![0.3]))]);
        opt.step(&mut p, &g).unwrap();
        assert!((p.get("head.w").unwrap().item() - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn unknown_gradient_is_an_error() {
        let mut p = ParamStore::new();
        let mut opt = Adam::new(OptimConfig::default());
        let g = BTreeMap::from([("nope".to_string(), Tensor::vector(vec![1.0]))]);
        assert!(opt.step(&mut p, &g).is_err());
    }
}
