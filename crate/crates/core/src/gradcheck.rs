//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::params::{GradMap, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is zero are judged on absolute error.
    pub floor: f64,
    /// Entries probed per tensor; smaller tensors are checked in full.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_entries: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn entries(&self) -> usize {
        self.tensors.iter().map(|t| t.entries).sum()
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `analytic` against central differences of `loss` for every tensor
/// in `store`. A tensor missing from `analytic` is expected to have a zero
/// numeric gradient.
pub fn check_gradients(
    store: &ParamStore,
    analytic: &GradMap,
    loss: impl Fn(&ParamStore) -> f64,
    config: &GradCheckConfig,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut tensors = Vec::with_capacity(names.len());
    for name in names {
        let len = store.get(&name).map_or(0, |t| t.len());
        let picks: Vec<usize> = if len <= config.max_entries {
            (0..len).collect()
        } else {
            sample(&mut rng, len, config.max_entries).into_vec()
        };
        let ncols = store.get(&name).map_or(1, |t| t.ncols().max(1));
        let grad = analytic.get(&name);
        let mut report = TensorCheck {
            name: name.clone(),
            entries: picks.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for flat in picks {
            let idx = [flat / ncols, flat % ncols];
            let orig = store.get(&name).expect("name from store")[idx];
            let mut eval = |x: f64| {
                probe.get_mut(&name).expect("name from store")[idx] = x;
                loss(&probe)
            };
            let plus = eval(orig + config.step);
            let minus = eval(orig - config.step);
            eval(orig);
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = grad.map_or(0.0, |g| g[idx]);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric, config.floor));
        }
        tensors.push(report);
    }
    GradCheckReport { tensors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let mut store = ParamStore::new();
        store.insert("ocf/w", array![[1.0, -2.0], [0.5, 3.0]]);
        let loss = |s: &ParamStore| s.get("ocf/w").unwrap().mapv(|x| x * x * x).sum();
        let good: GradMap = [("ocf/w".to_string(), store.get("ocf/w").unwrap().mapv(|x| 3.0 * x * x))]
            .into_iter()
            .collect();
        let cfg = GradCheckConfig::default();
        let report = check_gradients(&store, &good, loss, &cfg);
        assert_eq!(report.entries(), 4);
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
        let bad: GradMap = [("ocf/w".to_string(), array![[3.0, 12.0], [0.75, 0.0]])]
            .into_iter()
            .collect();
        assert!(check_gradients(&store, &bad, loss, &cfg).max_rel_error() > 0.5);
        assert!(check_gradients(&store, &GradMap::default(), loss, &cfg).max_rel_error() > 0.5);
    }

    #[test]
    fn sampling_caps_entries() {
        let mut store = ParamStore::new();
        store.insert("ocf/w", ndarray::Array2::zeros((10, 10)));
        let cfg = GradCheckConfig {
            max_entries: 7,
            ..GradCheckConfig::default()
        };
        let report = check_gradients(&store, &GradMap::default(), |_| 1.0, &cfg);
        assert_eq!(report.entries(), 7);
        assert_eq!(report.max_rel_error(), 0.0);
    }
}
