//! Conditional flow matching for small velocity-field networks.
//!
//! The objective regresses `u(t, x_t)` onto the straight-line target
//! `x₁ - z` at `x_t = (1 - t) z + t x₁`, with `z ~ N(0, I)` drawn
//! independently of the data point `x₁` and `t ~ U(0, 1)`. Gradients come
//! from a hand-written backward pass through the network; no ODE is solved
//! during training.

mod datasets;
mod mlp;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::{TransportError, TransportMap};

pub use datasets::{
    moon_arc_distance, nearest_moon_branch, sample_checkerboard, sample_dataset,
    sample_gaussian_ring, sample_two_moons, DatasetKind, MoonBranch, ToyDataset,
};
pub use mlp::MlpVelocityField;

use mlp::Activations;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged {
        iteration: usize,
        loss: f64,
        trace: Vec<f64>,
    },
}

/// One training example: source draw, data point and interpolation time.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmSample {
    pub z: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            batch_size: 256,
            iterations: 20_000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths must be non-empty and positive, got {:?}", self.hidden));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return bad("batch size and iteration count must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.beta1 <= 0.0 || self.beta2 <= 0.0 {
            return bad("moment decay rates must lie in (0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Loss value with its parameter gradient.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Mean over the batch of `‖u(t, x_t) - (x₁ - z)‖²`, and its gradient with
/// respect to the network parameters.
pub fn cfm_loss(field: &MlpVelocityField, batch: &[CfmSample]) -> Result<LossAndGrad, TrainError> {
    let mut grad = vec![0.0; field.params().len()];
    let loss = cfm_loss_into(field, batch, &mut grad, &mut Activations::default());
    if !loss.is_finite() {
        return Err(TrainError::Diverged {
            iteration: 0,
            loss,
            trace: Vec::new(),
        });
    }
    Ok(LossAndGrad { loss, grad })
}

fn cfm_loss_into(
    field: &MlpVelocityField,
    batch: &[CfmSample],
    grad: &mut [f64],
    acts: &mut Activations,
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let d = field.dim();
    let scale = 1.0 / batch.len() as f64;
    let mut input = vec![0.0; d + 1];
    let mut d_out = vec![0.0; d];
    let mut total = 0.0;
    for s in batch {
        for i in 0..d {
            input[i] = (1.0 - s.t) * s.z[i] + s.t * s.x1[i];
        }
        input[d] = s.t;
        field.forward_recorded(&input, acts);
        let out = field.output(acts);
        for i in 0..d {
            let r = out[i] - (s.x1[i] - s.z[i]);
            total += r * r;
            d_out[i] = 2.0 * r * scale;
        }
        field.backward(acts, &d_out, grad);
    }
    total * scale
}

/// Adaptive-moment optimizer state.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedField {
    pub field: MlpVelocityField,
    /// Minibatch loss before each parameter update.
    pub loss_trace: Vec<f64>,
}

/// Trains a velocity field on `dataset` by minibatch flow matching with Adam.
///
/// Stream 0 of the seeded generator initializes the network; stream 1 draws
/// minibatches. The whole run is a deterministic function of the config.
pub fn train(dataset: &ToyDataset, config: &TrainConfig) -> Result<TrainedField, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::InvalidConfig("dataset is empty".into()));
    }
    let d = 2;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(0);
    let mut field = MlpVelocityField::init_with_rng(d, &config.hidden, &mut init_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut adam = Adam::new(field.params().len());
    let mut grad = vec![0.0; field.params().len()];
    let mut acts = Activations::default();
    let mut trace = Vec::with_capacity(config.iterations);
    let mut batch: Vec<CfmSample> = (0..config.batch_size)
        .map(|_| CfmSample {
            z: vec![0.0; d],
            x1: vec![0.0; d],
            t: 0.0,
        })
        .collect();

    for it in 0..config.iterations {
        for s in batch.iter_mut() {
            let p = dataset.points[rng.random_range(0..dataset.len())];
            s.x1.copy_from_slice(&p);
            for zi in s.z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            s.t = rng.random::<f64>();
        }
        let loss = cfm_loss_into(&field, &batch, &mut grad, &mut acts);
        trace.push(loss);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged {
                iteration: it,
                loss,
                trace,
            });
        }
        adam.update(field.params_mut(), &grad, config);
    }
    Ok(TrainedField {
        field,
        loss_trace: trace,
    })
}

/// Histogram TV between `n` prior samples pushed through `map` and the
/// dataset's kernel density estimate, on a `res × res` grid over the dataset
/// bounding box inflated by 0.5. Mass outside the grid counts as discrepancy
/// on both sides.
pub fn transported_prior_tv(
    map: &TransportMap,
    dataset: &ToyDataset,
    n: usize,
    res: usize,
    seed: u64,
) -> Result<f64, TransportError> {
    let (mut lo, mut hi) = dataset.bounding_box();
    for k in 0..2 {
        lo[k] -= 0.5;
        hi[k] += 0.5;
    }
    let kde = dataset.kde_cell_masses(lo, hi, res);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hist = vec![0.0; res * res];
    let mut outside = 0.0;
    let w = 1.0 / n as f64;
    for _ in 0..n {
        let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let x = map.integrate(&z)?;
        let cell = |k: usize| -> Option<usize> {
            let f = (x[k] - lo[k]) / (hi[k] - lo[k]);
            (0.0..1.0).contains(&f).then(|| ((f * res as f64) as usize).min(res - 1))
        };
        match (cell(0), cell(1)) {
            (Some(i), Some(j)) => hist[i * res + j] += w,
            _ => outside += w,
        }
    }
    let kde_outside = 1.0 - kde.iter().sum::<f64>();
    let inside: f64 = hist.iter().zip(&kde).map(|(a, b)| (a - b).abs()).sum();
    Ok(0.5 * (inside + outside + kde_outside.max(0.0)))
}

/// Writes `iteration,loss` rows.
pub fn write_loss_trace<W: Write>(trace: &[f64], mut w: W) -> std::io::Result<()> {
    writeln!(w, "iteration,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(w, "{i},{l:e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, seed: u64) -> Vec<CfmSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = sample_two_moons(64, 0.05, seed);
        (0..n)
            .map(|i| CfmSample {
                z: (0..2).map(|_| rng.sample(StandardNormal)).collect(),
                x1: ds.points[i % ds.len()].to_vec(),
                t: rng.random(),
            })
            .collect()
    }

    #[test]
    fn zero_loss_for_exact_fit() {
        // A zero-weight network outputs its last bias; match it to the target.
        let mut f = MlpVelocityField::init(2, &[4], 0);
        for p in f.params_mut() {
            *p = 0.0;
        }
        let n = f.params().len();
        f.params_mut()[n - 2] = 0.75;
        f.params_mut()[n - 1] = -0.5;
        let b = vec![CfmSample {
            z: vec![0.25, 0.5],
            x1: vec![1.0, 0.0],
            t: 0.3,
        }];
        assert_eq!(cfm_loss(&f, &b).unwrap().loss, 0.0);
    }

    #[test]
    fn loss_is_invariant_to_batch_order() {
        let f = MlpVelocityField::init(2, &[8, 8], 1);
        let b = batch(16, 2);
        let mut r = b.clone();
        r.reverse();
        r.swap(3, 9);
        let (l1, l2) = (cfm_loss(&f, &b).unwrap().loss, cfm_loss(&f, &r).unwrap().loss);
        assert!((l1 - l2).abs() <= 1e-14 * l1);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let f = MlpVelocityField::init(2, &[16, 16], 3);
        let b = batch(8, 4);
        let analytic = cfm_loss(&f, &b).unwrap().grad;
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..f.params().len() {
            let mut fp = f.clone();
            fp.params_mut()[i] += h;
            let mut fm = f.clone();
            fm.params_mut()[i] -= h;
            let num = (cfm_loss(&fp, &b).unwrap().loss - cfm_loss(&fm, &b).unwrap().loss) / (2.0 * h);
            let rel = (analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            hidden: vec![64, 0],
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(TrainError::InvalidConfig(_))));
        let c = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn short_training_is_deterministic() {
        let ds = sample_two_moons(1000, 0.05, 0);
        let cfg = TrainConfig {
            hidden: vec![16, 16],
            iterations: 50,
            batch_size: 32,
            seed: 9,
            ..Default::default()
        };
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.field, b.field);
        assert_eq!(a.loss_trace, b.loss_trace);
        let c = train(&ds, &TrainConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.field, c.field);
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let ds = sample_two_moons(1000, 0.05, 0);
        let cfg = TrainConfig {
            hidden: vec![8],
            iterations: 200,
            batch_size: 8,
            learning_rate: 1e300,
            ..Default::default()
        };
        match train(&ds, &cfg) {
            Err(TrainError::Diverged { trace, iteration, .. }) => {
                assert_eq!(trace.len(), iteration + 1)
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn loss_trace_csv() {
        let mut buf = Vec::new();
        write_loss_trace(&[1.5, 0.25], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,loss\n0,1.5e0\n1,2.5e-1\n");
    }
}
