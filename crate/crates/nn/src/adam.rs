use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config(format!("adam constants out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Moment estimates for one parameter set, kept in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { cfg, t: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update; a missing gradient counts as zero.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} tensors", grads.len(), params.len())));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_ref();
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
                }
            }
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j].f64());
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *w = T::lit(w.f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet<f64> {
        ParamSet::from_parts(vec!["p".into()], vec![Tensor::full(&[3], v)]).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = one_param(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam.step(&mut p, &[Some(Tensor::zeros(&[3]))], 0.1).unwrap();
            adam.step(&mut p, &[None], 0.1).unwrap();
        }
        assert_eq!(p, one_param(0.7));
        assert!(adam.moments().0.iter().chain(adam.moments().1).flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_gradient_moves_by_lr_per_step() {
        let lr = 1e-3;
        for g in [1e-4, 0.3, -5.0] {
            let mut p = one_param(0.0);
            let mut adam = Adam::new(AdamConfig::default(), &p);
            let mut prev = 0.0;
            for _ in 0..200 {
                adam.step(&mut p, &[Some(Tensor::full(&[3], g))], lr).unwrap();
                let now = p.tensors()[0].data()[0];
                let step = (now - prev).abs();
                assert!((step - lr).abs() <= 0.01 * lr, "g={g} step={step}");
                assert_eq!(now.signum(), -g.signum());
                prev = now;
            }
        }
    }

    #[test]
    fn scalar_simulation_oracle() {
        // Independent scalar Adam recurrence.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
        let (mut m, mut v, mut x) = (0.0, 0.0, 1.5);
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = one_param(1.5);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for g in grads {
            adam.step(&mut p, &[Some(Tensor::full(&[3], g))], lr).unwrap();
        }
        assert!((p.tensors()[0].data()[1] - x).abs() < 1e-14);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p, &[], 0.1).is_err());
        assert!(adam.step(&mut p, &[Some(Tensor::zeros(&[2]))], 0.1).is_err());
    }
}
