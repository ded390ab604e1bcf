//! Parameter updates: SGD and Adam, plus global gradient-norm clipping.

use crate::model::ParamStore;
use crate::scalar::{cast, Real};

#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Sgd { lr: T },
    Adam(Adam<T>),
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u64,
    m: Option<ParamStore<T>>,
    v: Option<ParamStore<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: cast(lr),
            beta1: cast(0.9),
            beta2: cast(0.999),
            eps: cast(1e-8),
            t: 0,
            m: None,
            v: None,
        }
    }
}

impl<T: Real> Optimizer<T> {
    pub fn sgd(lr: f64) -> Self {
        Self::Sgd { lr: cast(lr) }
    }

    pub fn adam(lr: f64) -> Self {
        Self::Adam(Adam::new(lr))
    }

    /// Apply one update in place. Callers are expected to have checked the
    /// gradients for finiteness (skip-step policy lives in the trainer).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) {
        match self {
            Optimizer::Sgd { lr } => {
                params.add_scaled(grads, -*lr);
            }
            Optimizer::Adam(a) => {
                if a.m.is_none() {
                    a.m = Some(grads.zeros_like());
                    a.v = Some(grads.zeros_like());
                }
                a.t += 1;
                let (b1, b2) = (a.beta1, a.beta2);
                let bc1 = T::one() - b1.powi(a.t as i32);
                let bc2 = T::one() - b2.powi(a.t as i32);
                let m = a.m.as_mut().unwrap();
                let v = a.v.as_mut().unwrap();
                for ((name, p), (mn, mt)) in params.iter_mut().zip(m.iter_mut()) {
                    debug_assert_eq!(name, mn);
                    let vt = v.get_mut(name);
                    let g = grads.get(name);
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        let mi = b1 * mt.data()[i] + (T::one() - b1) * gi;
                        let vi = b2 * vt.data()[i] + (T::one() - b2) * gi * gi;
                        mt.data_mut()[i] = mi;
                        vt.data_mut()[i] = vi;
                        let mhat = mi / bc1;
                        let vhat = vi / bc2;
                        p.data_mut()[i] -= a.lr * mhat / (vhat.sqrt() + a.eps);
                    }
                }
            }
        }
    }
}

/// Scale gradients so the global L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamStore<T>, max_norm: T) -> T {
    let norm = grads.global_norm();
    if norm > max_norm && norm > T::zero() {
        grads.scale(max_norm / norm);
    }
    norm
}
