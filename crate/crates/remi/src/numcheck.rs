//! Numerical gradient checking.
//!
//! Central differences over the flat parameter vector, touching only
//! `param_vector` / `set_param_vector` and the caller's scalar function, so
//! the result is an oracle that shares no code with the backward pass.

use crate::error::Result;
use crate::net::Network;

/// d f / d w_i  ~=  (f(w + h e_i) - f(w - h e_i)) / 2h  for every parameter.
pub fn fd_gradient<F>(net: &Network, h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&Network) -> Result<f64>,
{
    let base = net.param_vector();
    let mut probe = net.clone();
    let mut grad = vec![0.0; base.len()];
    let mut w = base.clone();
    for i in 0..base.len() {
        w[i] = base[i] + h;
        probe.set_param_vector(&w)?;
        let up = f(&probe)?;
        w[i] = base[i] - h;
        probe.set_param_vector(&w)?;
        let down = f(&probe)?;
        w[i] = base[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Central differences of a plain vector function.
pub fn fd_gradient_vec<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Worst-coordinate comparison of an analytic gradient against a numeric one.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error per coordinate: |a - n| / max(floor, |a|, |n|).
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], floor: f64) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut check = GradCheck { max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(floor);
        let rel = (a - n).abs() / denom;
        if rel > check.max_rel_err {
            check = GradCheck { max_rel_err: rel, worst_index: i, analytic: a, numeric: n };
        }
    }
    check
}
