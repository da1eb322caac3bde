//! Importance reweighting of samples drawn under a coarse transport
//! discretization so that estimates target a finer one.
//!
//! For a chain targeting `π^Δ(z) ∝ g(T^Δ(z)) p(z)`, the self-normalized weights
//! `w_i ∝ g(T^δ(z_i)) / g(T^Δ(z_i))` correct expectations to `π^δ`. The fine map
//! is only evaluated on retained samples.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ess_sampler::SampleSet;
use crate::oracle::Grid;
use crate::potentials::{Potential, PotentialError};
use crate::transport::{Scheme, TransportError, TransportMap, VelocityField};

/// Kish ESS fraction below which reweighted runs carry a warning.
pub const ESS_WARNING_FRACTION: f64 = 0.01;
pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultifidelityError {
    #[error("invalid fidelity pair: {0}")]
    InvalidPair(String),
    #[error("every importance weight is zero")]
    DegenerateWeights,
    #[error("empty weight vector")]
    Empty,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Coarse and fine discretizations of one velocity field.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityPair {
    coarse: TransportMap,
    fine: TransportMap,
}

impl FidelityPair {
    /// `fine_steps` may equal `coarse_steps`, which makes every weight equal.
    pub fn new(
        field: VelocityField,
        scheme: Scheme,
        coarse_steps: usize,
        fine_steps: usize,
    ) -> Result<Self, MultifidelityError> {
        if coarse_steps == 0 {
            return Err(MultifidelityError::InvalidPair("coarse steps must be at least 1".into()));
        }
        if fine_steps < coarse_steps {
            return Err(MultifidelityError::InvalidPair(format!(
                "fine steps {fine_steps} are fewer than coarse steps {coarse_steps}"
            )));
        }
        Ok(Self {
            coarse: TransportMap::new(field.clone(), scheme, coarse_steps)?,
            fine: TransportMap::new(field, scheme, fine_steps)?,
        })
    }

    pub fn coarse(&self) -> &TransportMap {
        &self.coarse
    }

    pub fn fine(&self) -> &TransportMap {
        &self.fine
    }
}

/// Retained samples with fine-map images and importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSampleSet {
    pub chain: Vec<usize>,
    pub steps: Vec<usize>,
    pub z: Vec<Vec<f64>>,
    pub x_coarse: Vec<Vec<f64>>,
    pub x_fine: Vec<Vec<f64>>,
    pub log_g_coarse: Vec<f64>,
    pub log_g_fine: Vec<f64>,
    /// `log g(T^δ(z)) − log g(T^Δ(z))`.
    pub log_weights: Vec<f64>,
    /// Self-normalized weights.
    pub weights: Vec<f64>,
    pub meta: ReweightMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweightMeta {
    pub coarse_steps: usize,
    pub fine_steps: usize,
    pub scheme: Scheme,
    /// Fine transport evaluations performed; one per retained sample.
    pub fine_evaluations: u64,
    /// Kish effective sample size as a fraction of the sample count.
    pub kish_ess: f64,
    pub warning: Option<String>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights to weights summing to one.
pub fn normalize_log_weights(log_w: &[f64]) -> Result<Vec<f64>, MultifidelityError> {
    if log_w.is_empty() {
        return Err(MultifidelityError::Empty);
    }
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return Err(MultifidelityError::DegenerateWeights);
    }
    Ok(log_w.iter().map(|l| (l - lse).exp()).collect())
}

/// Kish effective sample size `(Σw)² / Σw²` divided by `n`.
pub fn kish_ess(weights: &[f64]) -> Result<f64, MultifidelityError> {
    if weights.is_empty() {
        return Err(MultifidelityError::Empty);
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(MultifidelityError::InvalidInput("weights must be finite and nonnegative".into()));
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(MultifidelityError::DegenerateWeights);
    }
    // scaling by the maximum makes equal weights give exactly 1
    let (s, s2) = weights
        .iter()
        .map(|w| w / max)
        .fold((0.0, 0.0), |(s, s2), w| (s + w, s2 + w * w));
    // Cauchy-Schwarz bounds this by 1; rounding can overshoot by an ulp or two
    Ok((s * s / s2 / weights.len() as f64).min(1.0))
}

/// Evaluates the fine map on every retained sample of `chains` and weights it.
pub fn reweight(
    chains: &[SampleSet],
    pair: &FidelityPair,
    potential: &Potential,
) -> Result<WeightedSampleSet, MultifidelityError> {
    potential.validate(pair.fine.dim())?;
    let mut rows: Vec<(usize, usize, &Vec<f64>, &Vec<f64>, f64)> = Vec::new();
    for c in chains {
        for i in 0..c.len() {
            rows.push((c.meta.chain, c.steps[i], &c.z[i], &c.x[i], c.log_g[i]));
        }
    }
    if rows.is_empty() {
        return Err(MultifidelityError::Empty);
    }
    let fine_evaluations = AtomicU64::new(0);
    let fine: Vec<(Vec<f64>, f64)> = rows
        .par_iter()
        .map(|(_, _, z, _, _)| {
            fine_evaluations.fetch_add(1, Ordering::Relaxed);
            match pair.fine.integrate(z) {
                Ok(x) => {
                    let l = potential.log_potential(&x).unwrap_or(f64::NEG_INFINITY);
                    (x, l)
                }
                Err(_) => (vec![f64::NAN; z.len()], f64::NEG_INFINITY),
            }
        })
        .collect();
    let log_weights: Vec<f64> = rows
        .iter()
        .zip(&fine)
        .map(|(r, (_, lf))| if lf.is_finite() { lf - r.4 } else { f64::NEG_INFINITY })
        .collect();
    let weights = normalize_log_weights(&log_weights)?;
    let ess = kish_ess(&weights)?;
    let warning = (ess < ESS_WARNING_FRACTION).then(|| {
        format!(
            "Kish effective sample size {:.3}% is below {}%; weights are degenerate",
            100.0 * ess,
            100.0 * ESS_WARNING_FRACTION
        )
    });
    let (x_fine, log_g_fine): (Vec<_>, Vec<_>) = fine.into_iter().unzip();
    Ok(WeightedSampleSet {
        chain: rows.iter().map(|r| r.0).collect(),
        steps: rows.iter().map(|r| r.1).collect(),
        z: rows.iter().map(|r| r.2.clone()).collect(),
        x_coarse: rows.iter().map(|r| r.3.clone()).collect(),
        log_g_coarse: rows.iter().map(|r| r.4).collect(),
        x_fine,
        log_g_fine,
        log_weights,
        weights,
        meta: ReweightMeta {
            coarse_steps: pair.coarse.steps(),
            fine_steps: pair.fine.steps(),
            scheme: pair.fine.scheme(),
            fine_evaluations: fine_evaluations.into_inner(),
            kish_ess: ess,
            warning,
        },
    })
}

impl WeightedSampleSet {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// CSV with header
    /// `chain,step,z1..zd,x1..xd,log_g,xf1..xfd,log_g_fine,log_weight,weight`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.z.first().map_or(0, Vec::len);
        let mut header = vec!["chain".to_string(), "step".to_string()];
        header.extend((1..=d).map(|i| format!("z{i}")));
        header.extend((1..=d).map(|i| format!("x{i}")));
        header.push("log_g".into());
        header.extend((1..=d).map(|i| format!("xf{i}")));
        header.extend(["log_g_fine".into(), "log_weight".into(), "weight".into()]);
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            write!(w, "{},{}", self.chain[i], self.steps[i])?;
            for v in self.z[i].iter().chain(&self.x_coarse[i]) {
                write!(w, ",{v}")?;
            }
            write!(w, ",{}", self.log_g_coarse[i])?;
            for v in &self.x_fine[i] {
                write!(w, ",{v}")?;
            }
            writeln!(
                w,
                ",{},{},{}",
                self.log_g_fine[i], self.log_weights[i], self.weights[i]
            )?;
        }
        Ok(())
    }
}

/// Statistic computed by [`weighted_estimate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Statistic {
    /// Per-dimension mean.
    Mean,
    /// Per-dimension variance about the weighted mean.
    Variance,
    /// Cell masses of the first two coordinates on a grid; points outside
    /// contribute to no cell.
    Histogram(Grid),
}

/// Estimate with bootstrap standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: Vec<f64>,
    pub standard_error: Vec<f64>,
    pub replicates: usize,
    /// Replicates in which every resampled weight was zero; they are left
    /// out of the standard error.
    pub degenerate_replicates: usize,
}

fn evaluate_statistic(points: &[&[f64]], weights: &[f64], stat: Statistic) -> Option<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let d = points[0].len();
    let mean = |pts: &[&[f64]]| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for (p, w) in pts.iter().zip(weights) {
            for (mi, v) in m.iter_mut().zip(p.iter()) {
                *mi += w / total * v;
            }
        }
        m
    };
    Some(match stat {
        Statistic::Mean => mean(points),
        Statistic::Variance => {
            let m = mean(points);
            let mut v = vec![0.0; d];
            for (p, w) in points.iter().zip(weights) {
                for k in 0..d {
                    v[k] += w / total * (p[k] - m[k]) * (p[k] - m[k]);
                }
            }
            v
        }
        Statistic::Histogram(grid) => {
            let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
            grid.weighted_histogram(points, &norm).0
        }
    })
}

/// Self-normalized estimate of `stat` with a nonparametric bootstrap over
/// samples (`replicates` resamples of size `n`, seeded).
pub fn weighted_estimate<P: AsRef<[f64]> + Sync>(
    points: &[P],
    weights: &[f64],
    stat: Statistic,
    replicates: usize,
    seed: u64,
) -> Result<Estimate, MultifidelityError> {
    let n = points.len();
    if n == 0 || weights.is_empty() {
        return Err(MultifidelityError::Empty);
    }
    if weights.len() != n {
        return Err(MultifidelityError::InvalidInput(format!(
            "{} weights for {n} points",
            weights.len()
        )));
    }
    kish_ess(weights)?;
    let pts: Vec<&[f64]> = points.iter().map(AsRef::as_ref).collect();
    let value = evaluate_statistic(&pts, weights, stat).ok_or(MultifidelityError::DegenerateWeights)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reps: Vec<Vec<f64>> = Vec::with_capacity(replicates);
    let mut degenerate = 0;
    let mut rp: Vec<&[f64]> = Vec::with_capacity(n);
    let mut rw = Vec::with_capacity(n);
    for _ in 0..replicates {
        rp.clear();
        rw.clear();
        for _ in 0..n {
            let i = rng.random_range(0..n);
            rp.push(pts[i]);
            rw.push(weights[i]);
        }
        match evaluate_statistic(&rp, &rw, stat) {
            Some(v) => reps.push(v),
            None => degenerate += 1,
        }
    }
    let standard_error = (0..value.len())
        .map(|k| {
            if reps.len() < 2 {
                return f64::NAN;
            }
            let m = reps.iter().map(|r| r[k]).sum::<f64>() / reps.len() as f64;
            (reps.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / (reps.len() - 1) as f64).sqrt()
        })
        .collect();
    Ok(Estimate {
        value,
        standard_error,
        replicates,
        degenerate_replicates: degenerate,
    })
}
