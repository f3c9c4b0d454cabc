//! Named parameters and the Adam optimizer state that travels with them.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to one parameter inside a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Hyperparameters of one Adam update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the whole gradient when its global L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(10_000.0),
        }
    }
}

/// Ordered map from parameter name to tensor, plus first/second moments and
/// the step counter used by [`ParameterSet::adam_step`].
///
/// Insertion order is preserved; it is also the checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.first_moment
            .push(Tensor::zeros(value.shape().to_vec()));
        self.second_moment
            .push(Tensor::zeros(value.shape().to_vec()));
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> + '_ {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Copies values (not optimizer state) from `other` for every name the
    /// two sets share with matching shapes.
    pub fn load_values_from(&mut self, other: &ParameterSet) -> Result<()> {
        for (name, value) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_values_from",
                    lhs: self.values[id.0].shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            self.values[id.0] = value.clone();
        }
        Ok(())
    }

    /// One Adam update with bias correction.
    ///
    /// The step is rejected as a whole (no parameter or moment changes) if any
    /// gradient is non-finite; the error names the first offending parameter.
    pub fn adam_step(&mut self, grads: &Gradients, config: &AdamConfig) -> Result<()> {
        for id in self.ids() {
            let g = grads.get(id);
            if g.shape() != self.values[id.0].shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: self.values[id.0].shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(self.names[id.0].clone()));
            }
        }
        let scale = match config.max_grad_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        for i in 0..self.values.len() {
            let g = grads.get(ParamId(i)).data();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = self.values[i].data_mut();
            for j in 0..p.len() {
                let gj = g[j] * scale;
                m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
                v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by a backward pass.
///
/// Parameters the loss does not reach have an all-zero gradient.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            grads: params
                .values
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        for (acc, g) in self.grads[id.0].data_mut().iter_mut().zip(grad) {
            *acc += g;
        }
    }

    /// Adds `other` elementwise, e.g. to combine losses from separate tapes.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn by_name<'a>(&'a self, params: &ParameterSet, name: &str) -> Option<&'a Tensor> {
        params.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
