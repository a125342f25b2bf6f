//! Decoupled-weight-decay Adam.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::params::{GradMap, ParamStore};
use crate::schedule::OptimConfig;

const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
    steps: i32,
}

/// AdamW keeping per-tensor step counts. Only tensors present in the
/// gradient map move, weight decay included, so a gated group stays
/// bit-identical across the step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Apply one update. `lr_for` maps a tensor name to its learning rate.
    /// Gradients for tensors missing from `store` are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap, lr_for: impl Fn(&str) -> f64) {
        let (b1, b2, wd) = (self.config.beta1, self.config.beta2, self.config.weight_decay);
        for (name, grad) in grads.iter() {
            let Some(param) = store.get_mut(name) else {
                continue;
            };
            let lr = lr_for(name);
            let moments = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: Array2::zeros(param.dim()),
                v: Array2::zeros(param.dim()),
                steps: 0,
            });
            moments.steps += 1;
            let c1 = 1.0 - b1.powi(moments.steps);
            let c2 = 1.0 - b2.powi(moments.steps);
            ndarray::Zip::from(param)
                .and(&mut moments.m)
                .and(&mut moments.v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + EPS);
                    *p -= lr * (update + wd * *p);
                });
        }
    }

    /// Number of updates applied to `name` so far.
    pub fn steps_taken(&self, name: &str) -> usize {
        self.state.get(name).map_or(0, |m| m.steps as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        store.insert("audio/w", array![[1.0, -2.0]]);
        store.insert("video/w", array![[3.0]]);
        let grads: GradMap = [("audio/w".to_string(), array![[0.5, -4.0]])].into_iter().collect();
        let config = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(config);
        opt.step(&mut store, &grads, |_| 0.1);
        let w = store.get("audio/w").unwrap();
        approx::assert_abs_diff_eq!(w[[0, 0]], 0.9, epsilon = 1e-6);
        approx::assert_abs_diff_eq!(w[[0, 1]], -1.9, epsilon = 1e-6);
        assert_eq!(store.get("video/w").unwrap(), &array![[3.0]]);
        assert_eq!(opt.steps_taken("audio/w"), 1);
        assert_eq!(opt.steps_taken("video/w"), 0);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut store = ParamStore::new();
        store.insert("ocf/w", array![[2.0]]);
        let grads: GradMap = [("ocf/w".to_string(), array![[0.0]])].into_iter().collect();
        let mut opt = AdamW::new(OptimConfig {
            weight_decay: 0.5,
            ..OptimConfig::default()
        });
        opt.step(&mut store, &grads, |_| 0.1);
        assert_eq!(store.get("ocf/w").unwrap()[[0, 0]], 2.0 - 0.1 * 0.5 * 2.0);
    }
}
