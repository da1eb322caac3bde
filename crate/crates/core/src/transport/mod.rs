//! Velocity fields and deterministic fixed-step transport maps.
//!
//! A transport map pushes a source point `z` to a data point `x = T(z)` by
//! integrating `dx/dt = u(t, x)` from `t = 0` to `t = 1` on the uniform grid
//! `t_k = k / N`. Only explicit fixed-step schemes are provided, so a map with
//! `N` steps has discretization level exactly `1 / N` and is bit-reproducible.

mod gaussianize;
mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow_training::MlpVelocityField;

pub use gaussianize::{normal_cdf, normal_quantile, Marginal, SourceTransform};
pub use io::{load_field, read_field, save_field, write_field, FieldFormatError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite entry in input at index {index}")]
    NonFiniteInput { index: usize },
    #[error("integration diverged at step {step}")]
    Diverged { step: usize },
    #[error("{0}")]
    Domain(String),
}

/// Affine path `x_t = (1 + t(σ - 1)) z + t μ`, whose exact transport map is
/// `T(z) = μ + σ z`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField {
    mean: Vec<f64>,
    scale: f64,
}

impl AffineField {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Closed-form state of the path at time `t`.
    pub fn path_at(&self, t: f64, z: &[f64]) -> Vec<f64> {
        let a = 1.0 + t * (self.scale - 1.0);
        z.iter()
            .zip(&self.mean)
            .map(|(zi, mi)| a * zi + t * mi)
            .collect()
    }

    /// Closed-form transport map `μ + σ z`.
    pub fn exact_map(&self, z: &[f64]) -> Vec<f64> {
        self.path_at(1.0, z)
    }
}

/// Rigid rotation of consecutive coordinate pairs at a constant angular rate.
///
/// `u(t, x) = ω (-x₂, x₁, -x₄, x₃, ...)`; with odd dimension the last
/// coordinate is left at rest. The exact map rotates each pair by `ω` radians.
/// Trajectories are circular arcs, so this field exercises the integrators'
/// truncation error, which straight-line affine paths do not.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationField {
    dim: usize,
    rate: f64,
}

impl RotationField {
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn exact_map(&self, z: &[f64]) -> Vec<f64> {
        let (s, c) = self.rate.sin_cos();
        let mut out = z.to_vec();
        for pair in out.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = c * a - s * b;
            pair[1] = s * a + c * b;
        }
        out
    }
}

/// The velocity field `u(t, x)` driving a transport map.
#[derive(Debug, Clone, PartialEq)]
pub enum VelocityField {
    Affine(AffineField),
    Rotation(RotationField),
    Mlp(MlpVelocityField),
}

/// Scratch buffers reused across velocity evaluations.
#[derive(Debug, Default)]
pub struct Scratch {
    pub(crate) a: Vec<f64>,
    pub(crate) b: Vec<f64>,
}

impl VelocityField {
    /// Affine field transporting `N(0, I)` to `N(μ, σ² I)`.
    pub fn affine(mean: Vec<f64>, scale: f64) -> Result<Self, TransportError> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(TransportError::InvalidParameter(format!(
                "affine scale must be positive and finite, got {scale}"
            )));
        }
        if mean.is_empty() {
            return Err(TransportError::InvalidParameter(
                "affine mean must have at least one entry".into(),
            ));
        }
        if let Some(i) = mean.iter().position(|m| !m.is_finite()) {
            return Err(TransportError::NonFiniteInput { index: i });
        }
        Ok(Self::Affine(AffineField { mean, scale }))
    }

    /// The zero field: the transport map is the identity.
    pub fn zero(dim: usize) -> Self {
        Self::Affine(AffineField {
            mean: vec![0.0; dim.max(1)],
            scale: 1.0,
        })
    }

    pub fn rotation(dim: usize, rate: f64) -> Result<Self, TransportError> {
        if dim < 2 {
            return Err(TransportError::InvalidParameter(
                "rotation field needs dimension >= 2".into(),
            ));
        }
        if !rate.is_finite() {
            return Err(TransportError::InvalidParameter(format!(
                "rotation rate must be finite, got {rate}"
            )));
        }
        Ok(Self::Rotation(RotationField { dim, rate }))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Affine(f) => f.mean.len(),
            Self::Rotation(f) => f.dim,
            Self::Mlp(m) => m.dim(),
        }
    }

    /// Evaluates `u(t, x)` into `out`.
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64], scratch: &mut Scratch) {
        match self {
            Self::Affine(f) => {
                let s1 = f.scale - 1.0;
                let denom = 1.0 + t * s1;
                for ((o, xi), mi) in out.iter_mut().zip(x).zip(&f.mean) {
                    *o = s1 * (xi - t * mi) / denom + mi;
                }
            }
            Self::Rotation(f) => {
                for (o, pair) in out.chunks_exact_mut(2).zip(x.chunks_exact(2)) {
                    o[0] = -f.rate * pair[1];
                    o[1] = f.rate * pair[0];
                }
                if f.dim % 2 == 1 {
                    out[f.dim - 1] = 0.0;
                }
            }
            Self::Mlp(m) => m.forward_into(t, x, out, scratch),
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, x, &mut out, &mut Scratch::default());
        out
    }

    /// Divergence `tr ∂u/∂x` at `(t, x)`, computed exactly.
    pub fn divergence(&self, t: f64, x: &[f64], scratch: &mut Scratch) -> f64 {
        match self {
            Self::Affine(f) => {
                let s1 = f.scale - 1.0;
                f.mean.len() as f64 * s1 / (1.0 + t * s1)
            }
            Self::Rotation(_) => 0.0,
            Self::Mlp(m) => m.divergence(t, x, scratch),
        }
    }
}

/// Fixed-step explicit integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Midpoint,
    #[default]
    Rk4,
}

impl Scheme {
    pub fn evals_per_step(self) -> usize {
        match self {
            Scheme::Euler => 1,
            Scheme::Midpoint => 2,
            Scheme::Rk4 => 4,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Euler => "euler",
            Scheme::Midpoint => "midpoint",
            Scheme::Rk4 => "rk4",
        })
    }
}

pub const DEFAULT_STEPS: usize = 50;

/// A velocity field together with the scheme and step count used to integrate it.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportMap {
    field: VelocityField,
    scheme: Scheme,
    steps: usize,
}

struct Stages {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    scratch: Scratch,
}

impl Stages {
    fn new(d: usize) -> Self {
        Self {
            k1: vec![0.0; d],
            k2: vec![0.0; d],
            k3: vec![0.0; d],
            k4: vec![0.0; d],
            tmp: vec![0.0; d],
            scratch: Scratch::default(),
        }
    }
}

impl TransportMap {
    pub fn new(field: VelocityField, scheme: Scheme, steps: usize) -> Result<Self, TransportError> {
        if steps == 0 {
            return Err(TransportError::InvalidParameter(
                "transport map needs at least one step".into(),
            ));
        }
        Ok(Self {
            field,
            scheme,
            steps,
        })
    }

    /// Default sampling configuration: rk4 with 50 steps.
    pub fn with_defaults(field: VelocityField) -> Self {
        Self {
            field,
            scheme: Scheme::Rk4,
            steps: DEFAULT_STEPS,
        }
    }

    pub fn field(&self) -> &VelocityField {
        &self.field
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    /// Same field and scheme with a different step count.
    pub fn with_steps(&self, steps: usize) -> Result<Self, TransportError> {
        Self::new(self.field.clone(), self.scheme, steps)
    }

    /// Velocity evaluations needed by one call to [`integrate`](Self::integrate).
    pub fn evals_per_map(&self) -> usize {
        self.steps * self.scheme.evals_per_step()
    }

    fn check_input(&self, z: &[f64]) -> Result<(), TransportError> {
        if z.len() != self.dim() {
            return Err(TransportError::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        if let Some(index) = z.iter().position(|v| !v.is_finite()) {
            return Err(TransportError::NonFiniteInput { index });
        }
        Ok(())
    }

    /// One step of the scheme from `(t, x)` with step `h`, in place.
    fn step(&self, t: f64, h: f64, x: &mut [f64], st: &mut Stages) {
        let f = &self.field;
        match self.scheme {
            Scheme::Euler => {
                f.eval_into(t, x, &mut st.k1, &mut st.scratch);
                for (xi, k) in x.iter_mut().zip(&st.k1) {
                    *xi += h * k;
                }
            }
            Scheme::Midpoint => {
                f.eval_into(t, x, &mut st.k1, &mut st.scratch);
                for ((m, xi), k) in st.tmp.iter_mut().zip(x.iter()).zip(&st.k1) {
                    *m = xi + 0.5 * h * k;
                }
                f.eval_into(t + 0.5 * h, &st.tmp, &mut st.k2, &mut st.scratch);
                for (xi, k) in x.iter_mut().zip(&st.k2) {
                    *xi += h * k;
                }
            }
            Scheme::Rk4 => {
                let half = 0.5 * h;
                f.eval_into(t, x, &mut st.k1, &mut st.scratch);
                for ((m, xi), k) in st.tmp.iter_mut().zip(x.iter()).zip(&st.k1) {
                    *m = xi + half * k;
                }
                f.eval_into(t + half, &st.tmp, &mut st.k2, &mut st.scratch);
                for ((m, xi), k) in st.tmp.iter_mut().zip(x.iter()).zip(&st.k2) {
                    *m = xi + half * k;
                }
                f.eval_into(t + half, &st.tmp, &mut st.k3, &mut st.scratch);
                for ((m, xi), k) in st.tmp.iter_mut().zip(x.iter()).zip(&st.k3) {
                    *m = xi + h * k;
                }
                f.eval_into(t + h, &st.tmp, &mut st.k4, &mut st.scratch);
                let sixth = h / 6.0;
                for i in 0..x.len() {
                    x[i] += sixth * (st.k1[i] + 2.0 * st.k2[i] + 2.0 * st.k3[i] + st.k4[i]);
                }
            }
        }
    }

    fn run(
        &self,
        z: &[f64],
        mut visit: impl FnMut(usize, &[f64]),
    ) -> Result<Vec<f64>, TransportError> {
        self.check_input(z)?;
        let n = self.steps;
        let h = 1.0 / n as f64;
        let mut x = z.to_vec();
        let mut st = Stages::new(x.len());
        visit(0, &x);
        for k in 0..n {
            let t = k as f64 / n as f64;
            self.step(t, h, &mut x, &mut st);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(TransportError::Diverged { step: k });
            }
            visit(k + 1, &x);
        }
        Ok(x)
    }

    /// Pushes a source point through the map: `x₁ = T(z)`.
    pub fn integrate(&self, z: &[f64]) -> Result<Vec<f64>, TransportError> {
        self.run(z, |_, _| {})
    }

    /// All `N + 1` grid states `(t_k, x_{t_k})`, endpoints included.
    pub fn integrate_trajectory(&self, z: &[f64]) -> Result<Vec<(f64, Vec<f64>)>, TransportError> {
        let n = self.steps;
        let mut traj = Vec::with_capacity(n + 1);
        self.run(z, |k, x| traj.push((k as f64 / n as f64, x.to_vec())))?;
        Ok(traj)
    }

    /// Integrates the state jointly with `ℓ(t) = ∫₀ᵗ tr ∂u/∂x ds` using the same
    /// scheme and grid; returns `(T(z), ℓ(1))`.
    ///
    /// `ℓ(1)` approximates `log |det ∂T/∂z|` through the instantaneous
    /// change-of-variables formula, independently of any differencing of `T`.
    pub fn integrate_with_log_det(&self, z: &[f64]) -> Result<(Vec<f64>, f64), TransportError> {
        self.check_input(z)?;
        let n = self.steps;
        let h = 1.0 / n as f64;
        let d = z.len();
        let f = &self.field;
        let mut st = Stages::new(d);
        let mut x = z.to_vec();
        let mut log_det = 0.0;
        for k in 0..n {
            let t = k as f64 / n as f64;
            let dl = match self.scheme {
                Scheme::Euler => h * f.divergence(t, &x, &mut st.scratch),
                Scheme::Midpoint => {
                    f.eval_into(t, &x, &mut st.k1, &mut st.scratch);
                    for i in 0..d {
                        st.tmp[i] = x[i] + 0.5 * h * st.k1[i];
                    }
                    h * f.divergence(t + 0.5 * h, &st.tmp, &mut st.scratch)
                }
                Scheme::Rk4 => {
                    let half = 0.5 * h;
                    let d1 = f.divergence(t, &x, &mut st.scratch);
                    f.eval_into(t, &x, &mut st.k1, &mut st.scratch);
                    for i in 0..d {
                        st.tmp[i] = x[i] + half * st.k1[i];
                    }
                    let d2 = f.divergence(t + half, &st.tmp, &mut st.scratch);
                    f.eval_into(t + half, &st.tmp, &mut st.k2, &mut st.scratch);
                    for i in 0..d {
                        st.tmp[i] = x[i] + half * st.k2[i];
                    }
                    let d3 = f.divergence(t + half, &st.tmp, &mut st.scratch);
                    f.eval_into(t + half, &st.tmp, &mut st.k3, &mut st.scratch);
                    for i in 0..d {
                        st.tmp[i] = x[i] + h * st.k3[i];
                    }
                    let d4 = f.divergence(t + h, &st.tmp, &mut st.scratch);
                    h / 6.0 * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
                }
            };
            self.step(t, h, &mut x, &mut st);
            log_det += dl;
            if x.iter().any(|v| !v.is_finite()) || !log_det.is_finite() {
                return Err(TransportError::Diverged { step: k });
            }
        }
        Ok((x, log_det))
    }
}
