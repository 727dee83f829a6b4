//! SGD and Adam over a [`ParamStore`].
//!
//! An optimizer step updates every parameter of the store it is given and
//! clears the gradients afterwards. All gradients are checked before any
//! value changes, so a missing gradient leaves the store untouched.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

fn check_grads(store: &ParamStore) -> Result<()> {
    match store.iter().find(|(_, t)| t.grad().is_none()) {
        Some((name, _)) => Err(Error::MissingGradient(name.to_string())),
        None => Ok(()),
    }
}

pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        check_grads(store)?;
        for (_, p) in store.iter_mut() {
            let g = p.take_grad().expect("checked above");
            p.data_mut().iter_mut().zip(&g).for_each(|(v, g)| *v -= self.lr * g);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        check_grads(store)?;
        let (b1, b2) = (self.beta1, self.beta2);
        for (name, p) in store.iter_mut() {
            let g = p.take_grad().expect("checked above");
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - b1.powi(st.t);
            let c2 = 1.0 - b2.powi(st.t);
            for ((x, g), (m, v)) in p
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(st.m.iter_mut().zip(st.v.iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
