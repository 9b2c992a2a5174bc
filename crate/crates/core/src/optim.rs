//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub weight_decay: S,
    step: u64,
    m: Vec<TensorBase<S>>,
    v: Vec<TensorBase<S>>,
}

impl<S: Scalar> Adam<S> {
    /// Moment buffers are allocated to match `store`; the store's layout
    /// must not change between steps.
    pub fn new(store: &ParamStore<S>, lr: S, weight_decay: S) -> Self {
        let m = store.iter().map(|(_, t)| TensorBase::zeros(t.shape())).collect();
        let v = store.iter().map(|(_, t)| TensorBase::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is indexed by parameter id; `None`
    /// entries are treated as zero gradient (decay still applies).
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<TensorBase<S>>]) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "optimizer tracks {} parameters, got store {} / grads {}",
                    self.m.len(),
                    store.len(),
                    grads.len()
                ),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        let one = S::one();

        for (idx, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let zero;
            let g: &TensorBase<S> = match &grads[idx] {
                Some(g) => {
                    if g.shape() != store.get(id).shape() {
                        return Err(Error::shape(
                            "adam_step",
                            format!(
                                "gradient shape {:?} does not match parameter {:?}",
                                g.shape(),
                                store.get(id).shape()
                            ),
                        ));
                    }
                    g
                }
                None => {
                    zero = TensorBase::zeros(store.get(id).shape());
                    &zero
                }
            };
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (one - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (one - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}
