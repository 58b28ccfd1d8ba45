//! SGD with momentum and weight decay.
//!
//! Update per parameter:  g = grad + weight_decay * w
//!                        v = momentum * v + g
//!                        w = w - lr * v
//! Velocity persists inside the optimizer across steps; one optimizer drives
//! one parameter vector for its whole life.

use crate::error::{Error, Result};
use crate::net::Network;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Sgd> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !weight_decay.is_finite() || weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(Sgd { lr, momentum, weight_decay, velocity: Vec::new() })
    }

    /// Core update on a raw parameter vector.
    pub fn step_vec(&mut self, w: &mut [f64], grads: &[f64]) -> Result<()> {
        if grads.len() != w.len() {
            return Err(Error::Dimension(format!(
                "gradient has {} entries, parameters have {}",
                grads.len(),
                w.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("refusing step: non-finite gradient".into()));
        }
        if self.velocity.is_empty() {
            self.velocity = vec![0.0; w.len()];
        } else if self.velocity.len() != w.len() {
            return Err(Error::Dimension("optimizer bound to a different parameter count".into()));
        }
        for i in 0..w.len() {
            let g = grads[i] + self.weight_decay * w[i];
            self.velocity[i] = self.momentum * self.velocity[i] + g;
            w[i] -= self.lr * self.velocity[i];
        }
        Ok(())
    }

    pub fn step(&mut self, net: &mut Network, grads: &[f64]) -> Result<()> {
        let mut w = net.param_vector();
        self.step_vec(&mut w, grads)?;
        net.set_param_vector(&w)
    }
}
