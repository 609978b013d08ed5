use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Named collection of trainable parameters plus AdamW moment state.
pub struct ParameterStore<S: Scalar> {
    order: Vec<String>,
    params: HashMap<String, Param<S>>,
    /// Optimizer step counter.
    pub step: u64,
}

struct Param<S> {
    value: Tensor<S>,
    m: Vec<S>,
    v: Vec<S>,
    grad: Option<Vec<S>>,
    trainable: bool,
}

/// Maps parameter names to the graph nodes they were bound to for one
/// forward/backward pass.
pub struct Binding {
    ids: HashMap<String, NodeId>,
}

impl Binding {
    pub fn get(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }
}

/// AdamW hyperparameters. Weight decay is decoupled from the moment
/// update.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        AdamW {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must be in [0,1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must be in [0,1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            order: Vec::new(),
            params: HashMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) {
        let name = name.into();
        assert!(
            !self.params.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let n = value.numel();
        self.order.push(name.clone());
        self.params.insert(
            name,
            Param {
                value,
                m: vec![S::zero(); n],
                v: vec![S::zero(); n],
                grad: None,
                trainable: true,
            },
        );
    }

    /// Truncated-normal init (resample outside two standard deviations).
    pub fn add_trunc_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            // Box-Muller
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                data.push(S::of_f64(z * std));
            }
        }
        self.add(name, Tensor::new(shape, data));
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        self.add(name, Tensor::zeros(shape));
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn n_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        &self.params.get(name).unwrap_or_else(|| panic!("no parameter `{name}`")).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
            .value
    }

    pub fn moments(&self, name: &str) -> (&[S], &[S]) {
        let p = &self.params[name];
        (&p.m, &p.v)
    }

    pub fn set_moments(&mut self, name: &str, m: Vec<S>, v: Vec<S>) {
        let p = self.params.get_mut(name).unwrap();
        assert_eq!(m.len(), p.value.numel());
        assert_eq!(v.len(), p.value.numel());
        p.m = m;
        p.v = v;
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        self.params.get_mut(name).unwrap().trainable = trainable;
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for name in &self.order {
            if name.starts_with(prefix) {
                self.params.get_mut(name).unwrap().trainable = trainable;
            }
        }
    }

    pub fn grad_of(&self, name: &str) -> Option<&[S]> {
        self.params[name].grad.as_deref()
    }

    /// Insert every parameter into a graph as a trainable leaf.
    pub fn bind_all(&self, g: &mut Graph<S>) -> Binding {
        let mut ids = HashMap::new();
        for name in &self.order {
            ids.insert(name.clone(), g.param(self.params[name].value.clone()));
        }
        Binding { ids }
    }

    /// Insert the parameters selected by `filter` into a graph.
    pub fn bind_filtered(&self, g: &mut Graph<S>, filter: impl Fn(&str) -> bool) -> Binding {
        let mut ids = HashMap::new();
        for name in &self.order {
            if filter(name) {
                ids.insert(name.clone(), g.param(self.params[name].value.clone()));
            }
        }
        Binding { ids }
    }

    /// Pull gradients out of a graph after backward. Bound parameters
    /// that did not reach the loss get zero gradients.
    pub fn collect_grads(&mut self, g: &Graph<S>, binding: &Binding) {
        for (name, &id) in &binding.ids {
            let p = self.params.get_mut(name).unwrap();
            let grad = match g.grad(id) {
                Some(gr) => gr.to_vec(),
                None => vec![S::zero(); p.value.numel()],
            };
            match &mut p.grad {
                Some(existing) => {
                    for (x, gv) in existing.iter_mut().zip(grad) {
                        *x = *x + gv;
                    }
                }
                None => p.grad = Some(grad),
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// One AdamW update: bias-corrected moment step plus decoupled
    /// weight decay, both computed from the pre-step value. Clears
    /// gradients and advances the step counter.
    pub fn adamw_step(&mut self, hp: &AdamW) -> Result<()> {
        hp.validate()?;
        if self
            .params
            .values()
            .all(|p| p.grad.is_none() || !p.trainable)
        {
            return Err(Error::Contract(
                "adamw_step called with no populated gradients".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::of_f64(hp.beta1);
        let b2 = S::of_f64(hp.beta2);
        let one = S::one();
        let lr = S::of_f64(hp.lr);
        let eps = S::of_f64(hp.eps);
        let wd = S::of_f64(hp.weight_decay);
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for name in &self.order {
            let p = self.params.get_mut(name).unwrap();
            if !p.trainable {
                p.grad = None;
                continue;
            }
            let Some(grad) = p.grad.take() else { continue };
            for i in 0..grad.len() {
                let g = grad[i];
                p.m[i] = b1 * p.m[i] + (one - b1) * g;
                p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                let prev = p.value.data[i];
                p.value.data[i] = prev - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * prev;
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for ParameterStore<S> {
    fn default() -> Self {
        Self::new()
    }
}
