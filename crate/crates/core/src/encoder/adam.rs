//! Adam with bias correction.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// One Adam update of `params` in place. `step` is the 1-based count after
/// this update. Moments are accumulated in `f64` and stored back as `f32`.
pub fn adam_update(params: &mut [f32], m: &mut [f32], v: &mut [f32], grad: &[f32], step: u64, lr: f64) -> Result<()> {
    if grad.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::shape("Adam state and gradient lengths differ"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    let t = step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for i in 0..params.len() {
        let g = grad[i] as f64;
        let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * g;
        let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let update = lr * (mi / c1) / ((vi / c2).sqrt() + EPSILON);
        params[i] = (params[i] as f64 - update) as f32;
    }
    Ok(())
}
