use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn for_params(params: &[Tensor<F>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub state: AdamState<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &[Tensor<F>], config: AdamConfig) -> Self {
        Adam {
            config,
            state: AdamState::for_params(params),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != grads.len() || params.len() != self.state.m.len() {
            return Err(Error::shape(format!(
                "{} params, {} grads, {} optimizer slots",
                params.len(),
                grads.len(),
                self.state.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.state.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "param {:?} grad {:?} state {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = self.config;
        let b1 = F::from_f64_lossy(c.beta1);
        let b2 = F::from_f64_lossy(c.beta2);
        let one = F::one();
        let bc1 = F::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = F::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = F::from_f64_lossy(lr);
        let eps = F::from_f64_lossy(c.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.state.m)
            .zip(&mut self.state.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
