use super::params::ParamStore;
use crate::error::{arg_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter store.
///
/// Parameters missing from a gradient store are left alone and their
/// moments are not decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        for (name, g) in grads.iter() {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(alloc::format!(
                    "non-finite gradient for `{name}`"
                )));
            }
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(arg_err!(
                    "gradient shape {:?} for `{}` of shape {:?}",
                    g.shape(),
                    name,
                    p.shape()
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - libm::pow(beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (name, g) in grads.iter() {
            if !self.m.contains(name) {
                let zeros = super::params::Tensor::zeros(g.shape().to_vec());
                self.m.set(name, zeros.clone());
                self.v.set(name, zeros);
            }
            let m = self.m.get_mut(name).expect("moment present").data_mut();
            let v = self.v.get_mut(name).expect("moment present").data_mut();
            let p = params.get_mut(name).expect("checked above").data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (libm::sqrt(vh) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::Tensor;
    use alloc::vec;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1], vec![v]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.5);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.001));
        adam.step(&mut p, &single(1.0)).unwrap();
        let delta = 0.5 - p.get("w").unwrap().data()[0];
        assert!((0.000999..=0.001).contains(&delta), "{delta}");
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = single(0.5);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut p, &single(0.0)).unwrap();
        assert_eq!(p, single(0.5));
    }

    #[test]
    fn steps_accumulate() {
        let mut p = single(0.5);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut p, &single(1.0)).unwrap();
        let after_one = p.clone();
        adam.step(&mut p, &single(1.0)).unwrap();
        assert_eq!(adam.step, 2);
        assert_ne!(p, after_one);
    }

    #[test]
    fn nan_gradient_surfaces_training_error() {
        let mut p = single(0.5);
        let mut g = ParamStore::new();
        g.set("w", Tensor::zeros(vec![1]));
        g.get_mut("w").unwrap().data_mut()[0] = f64::NAN;
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut p, &g), Err(Error::Training(_))));
        assert_eq!(p, single(0.5));
        assert_eq!(adam.step, 0);
    }
}
