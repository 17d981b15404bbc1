//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParameterSet<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = params
            .iter()
            .map(|(_, t)| vec![T::zero(); t.len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.v[i]
    }

    /// Restores moments saved alongside a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<()> {
        let same = |a: &[Vec<T>], b: &[Vec<T>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
        };
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::Checkpoint(
                "optimizer moments do not match parameters".into(),
            ));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn moments_as_tensors(
        &self,
        params: &ParameterSet<T>,
    ) -> Vec<(String, Tensor<T>, Tensor<T>)> {
        params
            .iter()
            .enumerate()
            .map(|(i, (name, p))| {
                let m = Tensor::new(p.shape(), self.m[i].clone()).expect("moment shape");
                let v = Tensor::new(p.shape(), self.v[i].clone()).expect("moment shape");
                (name.to_string(), m, v)
            })
            .collect()
    }
}

/// One Adam update over every parameter; gradients are zeroed afterwards.
pub fn adam_step<T: Scalar>(params: &mut ParameterSet<T>, state: &mut AdamState<T>) -> Result<()> {
    if let Some(id) = params.ids().find(|&id| params.grad(id).is_none()) {
        return Err(Error::MissingGradient(params.name(id).to_string()));
    }
    if state.m.len() != params.len() {
        return Err(Error::Config(
            "optimizer state built for a different parameter set".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let bc1 = T::of(1.0 - state.beta1.powi(t));
    let bc2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of(state.lr), T::of(state.eps));
    let one = T::one();
    for (i, (_, value, grad)) in params.values_and_grads_mut().enumerate() {
        let g = grad.as_mut().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((p, gi), mi), vi) in value.data_mut().iter_mut().zip(g.iter_mut()).zip(m).zip(v) {
            *mi = b1 * *mi + (one - b1) * *gi;
            *vi = b2 * *vi + (one - b2) * *gi * *gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            *gi = T::zero();
        }
    }
    Ok(())
}
