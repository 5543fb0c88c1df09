use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Gradients, Graph, Tensor, Var};

/// A trainable tensor with its Adam moment accumulators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    /// Number of optimizer updates applied to this parameter.
    pub steps: u64,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param {
            first_moment: value.same_shape_zeros(),
            second_moment: value.same_shape_zeros(),
            value,
            steps: 0,
        }
    }
}

/// Named parameters in a deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradSet {
    grads: BTreeMap<String, Tensor>,
}

impl GradSet {
    pub fn new() -> Self {
        GradSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Graph leaves created for every parameter of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// One gradient per bound parameter; parameters the loss never reached
    /// get zeros of the right shape.
    pub fn collect(&self, graph: &Graph, grads: &Gradients) -> GradSet {
        let grads = self
            .vars
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| graph.value(v).same_shape_zeros());
                (name.clone(), g)
            })
            .collect();
        GradSet { grads }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn size(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Largest per-parameter update count.
    pub fn steps(&self) -> u64 {
        self.params.values().map(|p| p.steps).max().unwrap_or(0)
    }

    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), graph.leaf(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Applies one Adam update.
    ///
    /// A parameter whose gradient is identically zero (or absent) is left
    /// untouched, moments and step count included, so an all-zero gradient
    /// set is the identity.
    pub fn adam_step(&mut self, grads: &GradSet, cfg: &AdamConfig) -> Result<()> {
        cfg.validate()?;
        for (name, g) in grads.iter() {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if p.value.shape() != g.shape() {
                return Err(Error::shape(format!("gradient of `{name}`"), p.value.shape(), g.shape()));
            }
        }
        for (name, p) in self.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.values().iter().all(|&x| x == 0.0) {
                continue;
            }
            p.steps += 1;
            let t = p.steps as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let m = p.first_moment.values_mut();
            let v = p.second_moment.values_mut();
            let w = p.value.values_mut();
            for i in 0..w.len() {
                let gi = g.values()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`ParamSet::adam_step`].
pub fn optimizer_step(params: &mut ParamSet, grads: &GradSet, cfg: &AdamConfig) -> Result<()> {
    params.adam_step(grads, cfg)
}
