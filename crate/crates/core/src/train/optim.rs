//! Adam and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Scales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; `grads` is indexed like the store.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::dim(format!(
                    "gradient {:?} for parameter `{}` of shape {:?}",
                    g.shape(),
                    params.name(id),
                    params.get(id).shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of_f64(self.beta1), T::of_f64(self.beta2));
        let c1 = T::of_f64(1.0 - self.beta1.powi(t));
        let c2 = T::of_f64(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of_f64(self.lr), T::of_f64(self.eps));
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
