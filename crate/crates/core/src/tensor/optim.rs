//! First-order optimizers over flat lists of parameter tensors.

use super::Tensor;
use crate::{Error, Result};

/// L2 norm over every entry of every tensor.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite gradient norm".into()));
    }
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

fn check<P: AsMut<Tensor>>(params: &mut [P], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("optimizer", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        let p = p.as_mut();
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
    }
    Ok(())
}

/// Plain stochastic gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step<P: AsMut<Tensor>>(&mut self, params: &mut [P], grads: &[Tensor]) -> Result<()> {
        check(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            for (x, d) in p.as_mut().data_mut().iter_mut().zip(g.data()) {
                *x -= self.lr * d;
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `self.lr`.
    pub fn step<P: AsMut<Tensor>>(&mut self, params: &mut [P], grads: &[Tensor]) -> Result<()> {
        check(params, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::shape("optimizer state", &[self.m.len()], &[params.len()]));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, md, vd) = (p.as_mut().data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] = pd[i] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment tensors as named records, plus the step count.
    pub fn state(&self) -> (u64, Vec<(String, Tensor)>) {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("adam.m.{i}"), m.clone()));
            out.push((format!("adam.v.{i}"), v.clone()));
        }
        (self.t, out)
    }

    pub fn load_state(&mut self, t: u64, records: &[(String, Tensor)]) -> Result<()> {
        if !records.len().is_multiple_of(2) {
            return Err(Error::Integrity("odd number of optimizer records".into()));
        }
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (i, pair) in records.chunks(2).enumerate() {
            if pair[0].0 != format!("adam.m.{i}") || pair[1].0 != format!("adam.v.{i}") {
                return Err(Error::Integrity(format!("unexpected optimizer record {}", pair[0].0)));
            }
            m.push(pair[0].1.clone());
            v.push(pair[1].1.clone());
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }
}
