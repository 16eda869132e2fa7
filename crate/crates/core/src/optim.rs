use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros: BTreeMap<String, Tensor<T>> = params
            .iter()
            .map(|(k, p)| (String::from(k), Tensor::zeros(p.shape())))
            .collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }

    /// One bias-corrected update. All gradients are checked before any
    /// parameter changes, so a rejected step leaves `params` and the state as
    /// they were.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Params(format!("no gradient for `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    layer: String::from(name),
                });
            }
            if !self.m.contains_key(name) {
                return Err(Error::Params(format!("optimizer state has no slot for `{name}`")));
            }
        }
        if let Some(extra) = grads.keys().find(|k| params.get(k).is_none()) {
            return Err(Error::Params(format!("gradient for unknown tensor `{extra}`")));
        }

        self.t += 1;
        let c = self.config;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("checked");
            let v = self.v.get_mut(name).expect("checked");
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((theta, &g), (m, v)) in it {
                let g = g.as_f64();
                let mn = c.beta1 * m.as_f64() + (1.0 - c.beta1) * g;
                let vn = c.beta2 * v.as_f64() + (1.0 - c.beta2) * g * g;
                *m = T::from_f64_lossy(mn);
                *v = T::from_f64_lossy(vn);
                let update = c.lr * (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                *theta = T::from_f64_lossy(theta.as_f64() - update);
            }
        }
        Ok(())
    }
}
