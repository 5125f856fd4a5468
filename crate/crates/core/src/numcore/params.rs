use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor2,
    pub grad: Tensor2,
}

/// Named parameters with gradient accumulators of matching shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.params.insert(name.into(), Param { value, grad });
    }

    /// Inserts a `rows × cols` tensor drawn uniformly from `[-bound, bound]`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) {
        let t = Tensor2::from_fn(rows, cols, |_, _| {
            if bound > 0.0 {
                rng.gen_range(-bound..=bound)
            } else {
                0.0
            }
        });
        self.insert(name, t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Parameter value by name. Panics if absent: names are fixed by the model layout.
    pub fn value(&self, name: &str) -> &Tensor2 {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor2 {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor2 {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .grad
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    /// Adds `g` into the gradient accumulator of `name`.
    pub fn accumulate(&mut self, name: &str, g: &Tensor2) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        p.grad.same_shape(g, "accumulate")?;
        p.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
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

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.data().len()).sum()
    }
}

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

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor2>,
    pub v: BTreeMap<String, Tensor2>,
}

/// One bias-corrected Adam update over every parameter in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in store.params.iter_mut() {
        let (r, c) = p.value.shape();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor2::zeros(r, c));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor2::zeros(r, c));
        let g = p.grad.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}
