//! Named parameters, their gradients, and the Adam update.
//!
//! A [`ParamStore`] owns every learnable tensor of a model in registration
//! order. Each forward pass binds the store onto a fresh tape
//! ([`ParamStore::bind`]), and after `backward` the gradients are pulled back
//! into the store ([`ParamStore::absorb_grads`]) where the optimizer reads
//! them.

use std::collections::HashMap;

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Index of a parameter inside its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A learnable tensor with Adam state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let n = value.numel();
        Parameter {
            name,
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Ordered collection of parameters with unique names.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

/// Tape leaves for every parameter of a store, in registration order.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam { name });
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Pushes every parameter value onto the tape as a grad-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        Binding { vars }
    }

    /// Accumulates tape gradients into the parameters (`+=` semantics, so
    /// multiple micro-batches can be absorbed before one optimizer step).
    pub fn absorb_grads(&mut self, tape: &Tape, binding: &Binding) {
        for (param, &var) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = tape.grad(var) {
                match &mut param.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    None => {
                        param.grad =
                            Some(Tensor::new(param.value.shape().to_vec(), g.to_vec()).expect(
                                "tape gradient matches parameter shape by construction",
                            ));
                    }
                }
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// One bias-corrected Adam step over all parameters, then clears grads.
    /// A parameter without a gradient is an error naming the parameter.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        for p in &self.params {
            if p.grad.is_none() {
                return Err(TensorError::MissingGrad {
                    param: p.name.clone(),
                });
            }
        }
        for p in &mut self.params {
            let g = p.grad.take().expect("checked above");
            p.step += 1;
            let t = p.step as f64;
            let bc1 = 1.0 - beta1.powf(t);
            let bc2 = 1.0 - beta2.powf(t);
            for (((value, m), v), &gv) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.m.iter_mut())
                .zip(p.v.iter_mut())
                .zip(g.data())
            {
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *value -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            store.add("w", Tensor::zeros(&[2])),
            Err(TensorError::DuplicateParam { .. })
        ));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With g = 1 everywhere, the bias-corrected first step is
        // lr * 1 / (1 + eps) ~ lr.
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[4], 3.0)).unwrap();
        store.get_mut(id).grad = Some(Tensor::ones(&[4]));
        store.adam_step(0.1, 0.9, 0.999, 1e-8).unwrap();
        for &v in store.get(id).value.data() {
            assert!((v - 2.9).abs() < 1e-6, "got {v}");
        }
        assert_eq!(store.get(id).step, 1);
        assert!(store.get(id).grad.is_none(), "grads cleared after step");
    }

    #[test]
    fn adam_zero_grad_advances_step_only() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[3], 1.5)).unwrap();
        store.get_mut(id).grad = Some(Tensor::zeros(&[3]));
        store.adam_step(0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(store.get(id).value.data(), &[1.5, 1.5, 1.5]);
        assert_eq!(store.get(id).step, 1);
    }

    #[test]
    fn adam_missing_grad_names_parameter() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[1])).unwrap();
        let id_b = store.add("b.weight", Tensor::zeros(&[1])).unwrap();
        store.get_mut(ParamId(0)).grad = Some(Tensor::zeros(&[1]));
        let _ = id_b;
        match store.adam_step(0.1, 0.9, 0.999, 1e-8).unwrap_err() {
            TensorError::MissingGrad { param } => assert_eq!(param, "b.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn adam_constant_gradient_keeps_update_near_lr() {
        // Independent scalar recurrence evaluated in the test.
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let g = 2.5;
        let (mut m, mut v) = (0.0, 0.0);
        let mut expect = Vec::new();
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - f64::powi(b1, t));
            let vhat = v / (1.0 - f64::powi(b2, t));
            expect.push(lr * mhat / (vhat.sqrt() + eps));
        }

        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0)).unwrap();
        let mut prev = 0.0;
        for step_expect in expect {
            store.get_mut(id).grad = Some(Tensor::scalar(g));
            store.adam_step(lr, b1, b2, eps).unwrap();
            let now = store.get(id).value.data()[0];
            let delta = prev - now;
            assert!((delta - step_expect).abs() < 1e-12);
            // Update magnitude stays ~ lr for a constant gradient.
            assert!((delta - lr).abs() < 0.01 * lr, "delta {delta} vs lr {lr}");
            prev = now;
        }
    }
}
