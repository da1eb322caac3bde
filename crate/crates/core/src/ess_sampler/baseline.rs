//! Gradient-ascent baseline on `log g(T(z))` with finite-difference gradients.

use crate::potentials::SourceTarget;

use super::SamplerError;

/// Central-difference stencil.
pub const BASELINE_STENCIL: f64 = 1e-4;

/// Central-difference gradient of `log g(T(z))`; `2d` pullback evaluations.
pub fn fd_gradient<T: SourceTarget + ?Sized>(
    target: &T,
    z: &[f64],
    h: f64,
) -> Result<Vec<f64>, SamplerError> {
    let mut zp = z.to_vec();
    let mut grad = vec![0.0; z.len()];
    for i in 0..z.len() {
        zp[i] = z[i] + h;
        let up = target.evaluate(&zp)?.log_g;
        let hi = zp[i];
        zp[i] = z[i] - h;
        let down = target.evaluate(&zp)?.log_g;
        grad[i] = (up - down) / (hi - zp[i]);
        zp[i] = z[i];
    }
    Ok(grad)
}

/// Iterates `z ← z + η ∇̂ log g(T(z))` and returns every iterate, the
/// starting point first.
pub fn baseline_gradient_ascent<T: SourceTarget + ?Sized>(
    target: &T,
    init: &[f64],
    step_size: f64,
    iterations: usize,
) -> Result<Vec<Vec<f64>>, SamplerError> {
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(SamplerError::InvalidConfig(format!(
            "step size must be positive, got {step_size}"
        )));
    }
    let mut trace = Vec::with_capacity(iterations + 1);
    let mut z = init.to_vec();
    trace.push(z.clone());
    for iteration in 0..iterations {
        let grad = fd_gradient(target, &z, BASELINE_STENCIL)
            .map_err(|_| SamplerError::BaselineDiverged { iteration })?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(SamplerError::BaselineDiverged { iteration });
        }
        for (zi, g) in z.iter_mut().zip(&grad) {
            *zi += step_size * g;
        }
        trace.push(z.clone());
    }
    Ok(trace)
}
