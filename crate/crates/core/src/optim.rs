//! Adam over a [`ParamStore`]. Moments are kept in f64.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        Adam {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `grads[i]` belongs to the i-th parameter in store order.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam", &[self.m.len()], &[grads.len()]));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = params.by_index_mut(i);
            if g.len() != p.data.len() {
                return Err(Error::shape("adam", &[p.data.len()], &[g.len()]));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPS);
                p.data[j] = T::from_f64(p.data[j].to_f64() - update);
            }
        }
        Ok(())
    }
}
