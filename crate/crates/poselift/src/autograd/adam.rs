//! Adam with bias correction, an optional decoupled L2 term and
//! externally driven learning-rate decay.

use indexmap::IndexMap;
use ndarray::Array2;

use super::{AutogradError, ParamSet, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyperparams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to gradients before the moment updates.
    /// Defaults to zero.
    pub weight_decay: f64,
}

impl AdamHyperparams {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyperparams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    hp: AdamHyperparams,
    step: u64,
    m: IndexMap<String, Array2<f64>>,
    v: IndexMap<String, Array2<f64>>,
}

impl AdamState {
    pub fn new(hp: AdamHyperparams) -> Self {
        AdamState {
            hp,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.hp.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.hp.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn hyperparams(&self) -> AdamHyperparams {
        self.hp
    }

    /// One Adam update. `grads` must contain an entry for every parameter
    /// in `params` (zeros are fine; absence is an error).
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &IndexMap<String, Array2<f64>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.hp.beta1.powi(t);
        let bias2 = 1.0 - self.hp.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| AutogradError::MissingGradient {
                    name: name.to_string(),
                })?;
            let g = if self.hp.weight_decay > 0.0 {
                g + &(&*p * self.hp.weight_decay)
            } else {
                g.clone()
            };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(p.dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(p.dim()));
            *m *= self.hp.beta1;
            *m += &(&g * (1.0 - self.hp.beta1));
            *v *= self.hp.beta2;
            *v += &(&g.mapv(|x| x * x) * (1.0 - self.hp.beta2));
            let lr = self.hp.lr;
            let eps = self.hp.eps;
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / bias1;
                    let vhat = vv / bias2;
                    *pv -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }

    /// Moment arrays for checkpointing, keyed `m.<param>` / `v.<param>`.
    pub fn moments(&self) -> impl Iterator<Item = (String, &Array2<f64>)> {
        self.m
            .iter()
            .map(|(k, a)| (format!("m.{k}"), a))
            .chain(self.v.iter().map(|(k, a)| (format!("v.{k}"), a)))
    }

    /// Restore a moment array saved by [`AdamState::moments`].
    pub fn restore_moment(&mut self, key: &str, value: Array2<f64>) -> Result<()> {
        if let Some(name) = key.strip_prefix("m.") {
            self.m.insert(name.to_string(), value);
            Ok(())
        } else if let Some(name) = key.strip_prefix("v.") {
            self.v.insert(name.to_string(), value);
            Ok(())
        } else {
            Err(AutogradError::UnknownParam {
                name: key.to_string(),
            })
        }
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    let norm: f64 = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            *g *= scale;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = ParamSet::new();
        p.insert("w", array![[1.5, -2.0]]).unwrap();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Array2::zeros((1, 2)));
        let mut adam = AdamState::new(AdamHyperparams::with_lr(0.1));
        adam.step(&mut p, &grads).unwrap();
        assert_eq!(p.get("w").unwrap(), &array![[1.5, -2.0]]);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = ParamSet::new();
        p.insert("w", array![[0.0]]).unwrap();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), array![[0.5]]);
        let mut adam = AdamState::new(AdamHyperparams::with_lr(0.01));
        for _ in 0..50 {
            adam.step(&mut p, &grads).unwrap();
        }
        assert!(p.get("w").unwrap()[[0, 0]] < -0.1);
    }

    #[test]
    fn single_step_matches_hand_computed_update() {
        let mut p = ParamSet::new();
        p.insert("w", array![[1.0]]).unwrap();
        let mut grads = IndexMap::new();
        let g = 0.5;
        grads.insert("w".to_string(), array![[g]]);
        let hp = AdamHyperparams::with_lr(0.1);
        let mut adam = AdamState::new(hp);
        adam.step(&mut p, &grads).unwrap();
        // t = 1: m = (1-b1) g, v = (1-b2) g^2, mhat = g, vhat = g^2.
        let expected = 1.0 - hp.lr * g / (g.abs() + hp.eps);
        assert_abs_diff_eq!(p.get("w").unwrap()[[0, 0]], expected, epsilon = 1e-15);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = ParamSet::new();
        p.insert("w", array![[1.0]]).unwrap();
        p.insert("b", array![[0.0]]).unwrap();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), array![[0.1]]);
        let mut adam = AdamState::new(AdamHyperparams::with_lr(0.1));
        match adam.step(&mut p, &grads) {
            Err(AutogradError::MissingGradient { name }) => assert_eq!(name, "b"),
            other => panic!("expected MissingGradient, got {other:?}"),
        }
    }

    #[test]
    fn determinism_across_runs() {
        let run = || {
            let mut p = ParamSet::new();
            p.insert("w", array![[0.3, -0.2], [0.1, 0.9]]).unwrap();
            let mut adam = AdamState::new(AdamHyperparams::with_lr(0.05));
            for step in 0..10 {
                let mut grads = IndexMap::new();
                grads.insert("w".to_string(), array![[0.1 * step as f64, -0.2], [0.3, 0.01]]);
                adam.step(&mut p, &grads).unwrap();
            }
            p.get("w").unwrap().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_grad_norm_scales_large_gradients() {
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), array![[3.0, 4.0]]);
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert_abs_diff_eq!(norm, 5.0, epsilon = 1e-12);
        let g = &grads["w"];
        let new_norm = (g[[0, 0]] * g[[0, 0]] + g[[0, 1]] * g[[0, 1]]).sqrt();
        assert_abs_diff_eq!(new_norm, 1.0, epsilon = 1e-12);
    }
}
