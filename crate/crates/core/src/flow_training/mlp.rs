use rand::Rng;
use rand_distr::StandardNormal;

use crate::transport::Scratch;

use super::TrainError;

/// Fully connected tanh network `u(t, x)` with time appended as the last input.
///
/// Layer sizes run `[d + 1, h₁, …, h_k, d]`. Parameters are stored flat, layer
/// by layer: the weight matrix (row-major, `out × in`) followed by the bias.
/// Hidden layers use `tanh`; the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpVelocityField {
    sizes: Vec<usize>,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Per-layer activations recorded during a forward pass.
#[derive(Debug, Default, Clone)]
pub(crate) struct Activations {
    layers: Vec<Vec<f64>>,
}

impl MlpVelocityField {
    pub fn param_count_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn offsets_for(sizes: &[usize]) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        offsets.push(0);
        for w in sizes.windows(2) {
            acc += w[1] * w[0] + w[1];
            offsets.push(acc);
        }
        offsets
    }

    pub fn validate_sizes(sizes: &[usize]) -> Result<(), TrainError> {
        if sizes.len() < 2 {
            return Err(TrainError::InvalidConfig(
                "network needs input and output layers".into(),
            ));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(TrainError::InvalidConfig(format!(
                "layer widths must be positive, got {sizes:?}"
            )));
        }
        let d = sizes[sizes.len() - 1];
        if sizes[0] != d + 1 {
            return Err(TrainError::InvalidConfig(format!(
                "input width {} must equal output width {d} plus one time coordinate",
                sizes[0]
            )));
        }
        Ok(())
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self, TrainError> {
        Self::validate_sizes(&sizes)?;
        let expected = Self::param_count_for(&sizes);
        if params.len() != expected {
            return Err(TrainError::InvalidConfig(format!(
                "expected {expected} parameters for layers {sizes:?}, got {}",
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("parameter {i} is not finite")));
        }
        let offsets = Self::offsets_for(&sizes);
        Ok(Self {
            sizes,
            params,
            offsets,
        })
    }

    /// Random initialization: weights `N(0, 1/fan_in)`, zero biases.
    pub fn init_with_rng<R: Rng + ?Sized>(dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(dim + 1);
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let mut params = Vec::with_capacity(Self::param_count_for(&sizes));
        for w in sizes.windows(2) {
            let std = (1.0 / w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] {
                params.push(std * rng.sample::<f64, _>(StandardNormal));
            }
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        let offsets = Self::offsets_for(&sizes);
        Self {
            sizes,
            params,
            offsets,
        }
    }

    /// Seeded initialization, for tests and fixtures.
    pub fn init(dim: usize, hidden: &[usize], seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(dim, hidden, &mut rng)
    }

    pub fn dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let start = self.offsets[l];
        let w = &self.params[start..start + n_in * n_out];
        let b = &self.params[start + n_in * n_out..self.offsets[l + 1]];
        (w, b)
    }

    /// `out = W a + b`.
    fn affine(w: &[f64], b: &[f64], a: &[f64], out: &mut [f64]) {
        let n_in = a.len();
        let mut rows = w.chunks_exact(4 * n_in);
        let mut j = 0;
        // Four rows per pass share each load of `a`; every row still sums in
        // input order, so results match the one-row loop bit for bit.
        for block in rows.by_ref() {
            let (r0, rest) = block.split_at(n_in);
            let (r1, rest) = rest.split_at(n_in);
            let (r2, r3) = rest.split_at(n_in);
            let mut s = [b[j], b[j + 1], b[j + 2], b[j + 3]];
            for ((((ai, w0), w1), w2), w3) in a.iter().zip(r0).zip(r1).zip(r2).zip(r3) {
                s[0] += w0 * ai;
                s[1] += w1 * ai;
                s[2] += w2 * ai;
                s[3] += w3 * ai;
            }
            out[j..j + 4].copy_from_slice(&s);
            j += 4;
        }
        for row in rows.remainder().chunks_exact(n_in) {
            let mut s = b[j];
            for (wi, ai) in row.iter().zip(a) {
                s += wi * ai;
            }
            out[j] = s;
            j += 1;
        }
    }

    /// Evaluates `u(t, x)` into `out` using `scratch` for intermediate layers.
    pub fn forward_into(&self, t: f64, x: &[f64], out: &mut [f64], scratch: &mut Scratch) {
        let Scratch { a, b } = scratch;
        a.clear();
        a.extend_from_slice(x);
        a.push(t);
        let last = self.num_layers() - 1;
        for l in 0..last {
            let (w, bias) = self.layer(l);
            b.resize(self.sizes[l + 1], 0.0);
            Self::affine(w, bias, a, b);
            for v in b.iter_mut() {
                *v = tanh(*v);
            }
            std::mem::swap(a, b);
        }
        let (w, bias) = self.layer(last);
        Self::affine(w, bias, a, out);
    }

    /// Exact `tr ∂u/∂x` by forward-mode propagation of the `d` spatial tangents.
    pub fn divergence(&self, t: f64, x: &[f64], scratch: &mut Scratch) -> f64 {
        let d = self.dim();
        let Scratch { a, b } = scratch;
        let mut act = Vec::with_capacity(self.sizes[0]);
        act.extend_from_slice(x);
        act.push(t);
        // a holds the tangent matrix, row-major (width × d).
        a.clear();
        for i in 0..self.sizes[0] {
            for j in 0..d {
                a.push(if i == j { 1.0 } else { 0.0 });
            }
        }
        let last = self.num_layers() - 1;
        let mut next = Vec::new();
        for l in 0..=last {
            let (w, bias) = self.layer(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            next.resize(n_out, 0.0);
            Self::affine(w, bias, &act, &mut next);
            b.clear();
            b.resize(n_out * d, 0.0);
            for r in 0..n_out {
                let row = &w[r * n_in..(r + 1) * n_in];
                for (k, wk) in row.iter().enumerate() {
                    if *wk == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        b[r * d + j] += wk * a[k * d + j];
                    }
                }
            }
            if l < last {
                for (r, v) in next.iter_mut().enumerate() {
                    *v = tanh(*v);
                    let g = 1.0 - *v * *v;
                    for j in 0..d {
                        b[r * d + j] *= g;
                    }
                }
            }
            std::mem::swap(a, b);
            std::mem::swap(&mut act, &mut next);
        }
        (0..d).map(|i| a[i * d + i]).sum()
    }

    /// Forward pass recording every layer's output, for backpropagation.
    pub(crate) fn forward_recorded(&self, input: &[f64], acts: &mut Activations) {
        let n = self.num_layers();
        acts.layers.resize(n + 1, Vec::new());
        acts.layers[0].clear();
        acts.layers[0].extend_from_slice(input);
        for l in 0..n {
            let (w, bias) = self.layer(l);
            let (prev, rest) = acts.layers.split_at_mut(l + 1);
            let out = &mut rest[0];
            out.resize(self.sizes[l + 1], 0.0);
            Self::affine(w, bias, &prev[l], out);
            if l + 1 < n {
                for v in out.iter_mut() {
                    *v = tanh(*v);
                }
            }
        }
    }

    pub(crate) fn output<'a>(&self, acts: &'a Activations) -> &'a [f64] {
        &acts.layers[self.num_layers()]
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output` and a recorded pass.
    pub(crate) fn backward(&self, acts: &Activations, d_out: &[f64], grad: &mut [f64]) {
        let n = self.num_layers();
        let mut delta = d_out.to_vec();
        let mut prev_delta = Vec::new();
        for l in (0..n).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &acts.layers[l];
            let start = self.offsets[l];
            {
                let (gw, gb) = grad[start..self.offsets[l + 1]].split_at_mut(n_in * n_out);
                for j in 0..n_out {
                    let dj = delta[j];
                    gb[j] += dj;
                    let row = &mut gw[j * n_in..(j + 1) * n_in];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += dj * a;
                    }
                }
            }
            if l > 0 {
                let (w, _) = self.layer(l);
                prev_delta.clear();
                prev_delta.resize(n_in, 0.0);
                for j in 0..n_out {
                    let dj = delta[j];
                    let row = &w[j * n_in..(j + 1) * n_in];
                    for (p, wk) in prev_delta.iter_mut().zip(row) {
                        *p += dj * wk;
                    }
                }
                for (p, a) in prev_delta.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                std::mem::swap(&mut delta, &mut prev_delta);
            }
        }
    }
}

/// `tanh` from a single `exp`.
#[inline]
fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}
