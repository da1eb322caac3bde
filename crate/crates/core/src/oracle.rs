//! Reference computations for two-dimensional problems: the source posterior
//! `π(z) ∝ g(T(z)) N(z; 0, I)` on a grid, exact samples from that grid,
//! finite-difference Jacobians of a transport map, and histogram metrics.

use std::io::Write;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::potentials::{Potential, PotentialError, SourceTarget};
use crate::transport::{TransportError, TransportMap};

pub const MIN_RESOLUTION: usize = 32;
pub const DEFAULT_RANGE: [f64; 2] = [-5.0, 5.0];
pub const DEFAULT_STENCIL: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("grid oracles need a 2-dimensional source space, got {0}")]
    NotTwoDimensional(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("posterior is zero on every grid cell")]
    EmptyPosterior,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// `log N(z; 0, I)`.
pub fn log_standard_normal(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * sq - 0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// Square cell grid over `[lo, hi]²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, resolution: usize) -> Result<Self, OracleError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(OracleError::InvalidGrid(format!("bad range [{lo}, {hi}]")));
        }
        if resolution == 0 {
            return Err(OracleError::InvalidGrid("resolution must be positive".into()));
        }
        Ok(Self { lo, hi, resolution })
    }

    pub fn cell_width(&self) -> f64 {
        (self.hi - self.lo) / self.resolution as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_width() * self.cell_width()
    }

    pub fn cells(&self) -> usize {
        self.resolution * self.resolution
    }

    /// Cell `k = i·res + j` spans column `i` along the first axis and row `j`
    /// along the second.
    pub fn cell_center(&self, k: usize) -> [f64; 2] {
        let (i, j) = (k / self.resolution, k % self.resolution);
        let w = self.cell_width();
        [
            self.lo + (i as f64 + 0.5) * w,
            self.lo + (j as f64 + 0.5) * w,
        ]
    }

    fn axis_index(&self, v: f64) -> Option<usize> {
        if !(v >= self.lo && v < self.hi) {
            return None;
        }
        let i = ((v - self.lo) / self.cell_width()) as usize;
        Some(i.min(self.resolution - 1))
    }

    /// Cell containing `z`, or `None` outside the grid.
    pub fn cell_index(&self, z: &[f64]) -> Option<usize> {
        Some(self.axis_index(z[0])? * self.resolution + self.axis_index(z[1])?)
    }

    /// Normalized histogram of points, and the fraction falling outside.
    pub fn histogram<P: AsRef<[f64]>>(&self, points: &[P]) -> (Vec<f64>, f64) {
        let w = vec![1.0 / points.len() as f64; points.len()];
        self.weighted_histogram(points, &w)
    }

    /// Histogram of weighted points (weights summing to 1).
    pub fn weighted_histogram<P: AsRef<[f64]>>(&self, points: &[P], weights: &[f64]) -> (Vec<f64>, f64) {
        let mut h = vec![0.0; self.cells()];
        let mut out = 0.0;
        for (p, w) in points.iter().zip(weights) {
            match self.cell_index(p.as_ref()) {
                Some(k) => h[k] += w,
                None => out += w,
            }
        }
        (h, out)
    }
}

/// Normalized source posterior evaluated at cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPosterior {
    grid: Grid,
    /// Normalized log-density at each cell center.
    log_density: Vec<f64>,
    /// Log normalizing constant of the unnormalized density on the grid.
    log_norm: f64,
    /// Data image `T(z)` of each cell center.
    images: Vec<Vec<f64>>,
    /// Cells whose pullback evaluation failed and were given zero density.
    failed_cells: usize,
}

/// Evaluates `log g(T(z)) + log p(z)` at every cell center and normalizes.
pub fn grid_posterior<T: SourceTarget + ?Sized>(target: &T, grid: Grid) -> Result<GridPosterior, OracleError> {
    if target.dim() != 2 {
        return Err(OracleError::NotTwoDimensional(target.dim()));
    }
    if grid.resolution < MIN_RESOLUTION {
        return Err(OracleError::InvalidGrid(format!(
            "resolution {} is below the minimum {MIN_RESOLUTION}",
            grid.resolution
        )));
    }
    let evals: Vec<(f64, Vec<f64>, bool)> = (0..grid.cells())
        .into_par_iter()
        .map(|k| {
            let z = grid.cell_center(k);
            match target.evaluate(&z) {
                Ok(e) => (e.log_g + log_standard_normal(&z), e.x, false),
                Err(_) => (f64::NEG_INFINITY, vec![f64::NAN; 2], true),
            }
        })
        .collect();
    let failed_cells = evals.iter().filter(|e| e.2).count();
    let mut log_density: Vec<f64> = evals.iter().map(|e| e.0).collect();
    let images = evals.into_iter().map(|e| e.1).collect();
    let lse = log_sum_exp(&log_density);
    if !lse.is_finite() {
        return Err(OracleError::EmptyPosterior);
    }
    let log_norm = lse + grid.cell_area().ln();
    for v in log_density.iter_mut() {
        *v -= log_norm;
    }
    Ok(GridPosterior {
        grid,
        log_density,
        log_norm,
        images,
        failed_cells,
    })
}

impl GridPosterior {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn log_density(&self) -> &[f64] {
        &self.log_density
    }

    pub fn density(&self, k: usize) -> f64 {
        self.log_density[k].exp()
    }

    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    pub fn images(&self) -> &[Vec<f64>] {
        &self.images
    }

    pub fn failed_cells(&self) -> usize {
        self.failed_cells
    }

    /// Probability mass of each cell (density times area).
    pub fn cell_masses(&self) -> Vec<f64> {
        let a = self.grid.cell_area();
        self.log_density.iter().map(|l| l.exp() * a).collect()
    }

    /// `Σ f(z_k, T(z_k)) · mass_k`.
    pub fn expectation(&self, f: impl Fn(&[f64; 2], &[f64]) -> f64) -> f64 {
        self.cell_masses()
            .iter()
            .enumerate()
            .filter(|(_, m)| **m > 0.0)
            .map(|(k, m)| m * f(&self.grid.cell_center(k), &self.images[k]))
            .sum()
    }

    /// Sums blocks of `factor × factor` cells into a coarser grid.
    pub fn coarsen_masses(&self, factor: usize) -> Result<(Grid, Vec<f64>), OracleError> {
        let r = self.grid.resolution;
        if factor == 0 || r % factor != 0 {
            return Err(OracleError::InvalidGrid(format!(
                "resolution {r} is not divisible by {factor}"
            )));
        }
        let rc = r / factor;
        let coarse = Grid::new(self.grid.lo, self.grid.hi, rc)?;
        let mut out = vec![0.0; rc * rc];
        for (k, m) in self.cell_masses().into_iter().enumerate() {
            let (i, j) = (k / r, k % r);
            out[(i / factor) * rc + j / factor] += m;
        }
        Ok((coarse, out))
    }

    /// CSV with header `z1,z2,density`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "z1,z2,density")?;
        for k in 0..self.grid.cells() {
            let c = self.grid.cell_center(k);
            writeln!(w, "{},{},{}", c[0], c[1], self.density(k))?;
        }
        Ok(())
    }
}

/// Exact draws from the grid distribution: a cell by its mass, then a
/// uniform point inside it.
pub fn rejection_sample(post: &GridPosterior, n: usize, seed: u64) -> Result<Vec<[f64; 2]>, OracleError> {
    let masses = post.cell_masses();
    let index = WeightedIndex::new(&masses).map_err(|_| OracleError::EmptyPosterior)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = post.grid;
    let w = g.cell_width();
    Ok((0..n)
        .map(|_| {
            let c = g.cell_center(index.sample(&mut rng));
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            [c[0] + (u - 0.5) * w, c[1] + (v - 0.5) * w]
        })
        .collect())
}

/// Central-difference Jacobian of a transport map.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianEstimate {
    /// Row-major `d × d`, entry `(i, j) = ∂T_i/∂z_j`.
    pub matrix: Vec<f64>,
    pub dim: usize,
    pub stencil: f64,
    /// `log |det J|`, or `None` when the determinant is zero or not finite.
    pub log_abs_det: Option<f64>,
}

impl JacobianEstimate {
    pub fn is_singular(&self) -> bool {
        self.log_abs_det.is_none()
    }

    pub fn frobenius_distance(&self, other: &JacobianEstimate) -> f64 {
        self.matrix
            .iter()
            .zip(&other.matrix)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrix.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

pub fn fd_jacobian(map: &TransportMap, z: &[f64], stencil: f64) -> Result<JacobianEstimate, OracleError> {
    if !(stencil > 0.0 && stencil.is_finite()) {
        return Err(OracleError::InvalidInput(format!(
            "stencil must be positive, got {stencil}"
        )));
    }
    let d = map.dim();
    if z.len() != d {
        return Err(TransportError::DimensionMismatch {
            expected: d,
            got: z.len(),
        }
        .into());
    }
    let mut matrix = vec![0.0; d * d];
    let mut zp = z.to_vec();
    for j in 0..d {
        zp[j] = z[j] + stencil;
        let up = map.integrate(&zp)?;
        let hi = zp[j];
        zp[j] = z[j] - stencil;
        let down = map.integrate(&zp)?;
        let span = hi - zp[j];
        for i in 0..d {
            matrix[i * d + j] = (up[i] - down[i]) / span;
        }
        zp[j] = z[j];
    }
    let det = DMatrix::from_row_slice(d, d, &matrix).determinant();
    let log_abs_det = (det != 0.0 && det.is_finite()).then(|| det.abs().ln());
    Ok(JacobianEstimate {
        matrix,
        dim: d,
        stencil,
        log_abs_det,
    })
}

/// Outcome of comparing the two density routes over a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeOfVariablesReport {
    pub max_discrepancy: f64,
    pub checked: usize,
    /// Batch indices skipped because the finite-difference Jacobian was singular.
    pub skipped: Vec<usize>,
}

/// Compares two independent computations of the source log-density.
///
/// Route A is the direct pullback `log g(T(z)) + log p(z)`. Route B first forms
/// the data-space density `log g(x) + log p(z) − ℓ(z)`, with `ℓ` the integrated
/// divergence along the trajectory, then maps it back with the
/// finite-difference `log |det J|`.
pub fn verify_change_of_variables<Z: AsRef<[f64]>>(
    map: &TransportMap,
    potential: &Potential,
    batch: &[Z],
    stencil: f64,
) -> Result<ChangeOfVariablesReport, OracleError> {
    potential.validate(map.dim())?;
    let mut report = ChangeOfVariablesReport {
        max_discrepancy: 0.0,
        checked: 0,
        skipped: Vec::new(),
    };
    for (idx, z) in batch.iter().enumerate() {
        let z = z.as_ref();
        let log_prior = log_standard_normal(z);
        let direct = potential.log_potential(&map.integrate(z)?)? + log_prior;

        let (x, trace_integral) = map.integrate_with_log_det(z)?;
        let data_density = potential.log_potential(&x)? + log_prior - trace_integral;
        let jac = fd_jacobian(map, z, stencil)?;
        let Some(log_det) = jac.log_abs_det else {
            report.skipped.push(idx);
            continue;
        };
        let reconstructed = data_density + log_det;
        report.max_discrepancy = report.max_discrepancy.max((direct - reconstructed).abs());
        report.checked += 1;
    }
    Ok(report)
}

/// `½ Σ |p_k − q_k|` between two histograms on the same grid.
pub fn tv_between(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Histogram TV between samples and the grid oracle; mass outside the grid
/// counts fully as discrepancy.
pub fn tv_distance<P: AsRef<[f64]>>(samples: &[P], post: &GridPosterior) -> f64 {
    let (h, out) = post.grid.histogram(samples);
    tv_between(&h, &post.cell_masses()) + 0.5 * out
}

pub fn tv_distance_weighted<P: AsRef<[f64]>>(samples: &[P], weights: &[f64], post: &GridPosterior) -> f64 {
    let (h, out) = post.grid.weighted_histogram(samples, weights);
    tv_between(&h, &post.cell_masses()) + 0.5 * out
}

/// Per-dimension summaries with Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub n: usize,
    /// Sample size used for standard errors (Kish size when weighted).
    pub effective_n: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Row-major `d × d` covariance.
    pub covariance: Vec<f64>,
    pub mean_se: Vec<f64>,
}

/// Unweighted moments; `weights` switches to self-normalized estimates.
pub fn moment_report<P: AsRef<[f64]>>(samples: &[P], weights: Option<&[f64]>) -> Result<MomentReport, OracleError> {
    let n = samples.len();
    if n < 2 {
        return Err(OracleError::InvalidInput(format!("need at least 2 samples, got {n}")));
    }
    let d = samples[0].as_ref().len();
    let uniform;
    let w: &[f64] = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(OracleError::InvalidInput(format!(
                    "{} weights for {n} samples",
                    w.len()
                )));
            }
            w
        }
        None => {
            uniform = vec![1.0 / n as f64; n];
            &uniform
        }
    };
    let total: f64 = w.iter().sum();
    let mut mean = vec![0.0; d];
    for (s, wi) in samples.iter().zip(w) {
        for (m, v) in mean.iter_mut().zip(s.as_ref()) {
            *m += wi / total * v;
        }
    }
    let sum_sq: f64 = w.iter().map(|a| (a / total) * (a / total)).sum();
    // unbiased for both cases: reduces to 1/(n-1) with equal weights
    let correction = 1.0 / (1.0 - sum_sq);
    let mut covariance = vec![0.0; d * d];
    for (s, wi) in samples.iter().zip(w) {
        let s = s.as_ref();
        for a in 0..d {
            for b in 0..d {
                covariance[a * d + b] += wi / total * (s[a] - mean[a]) * (s[b] - mean[b]);
            }
        }
    }
    if sum_sq < 1.0 {
        for c in covariance.iter_mut() {
            *c *= correction;
        }
    }
    let variance: Vec<f64> = (0..d).map(|a| covariance[a * d + a]).collect();
    let effective_n = if weights.is_some() { 1.0 / sum_sq } else { n as f64 };
    let mean_se = variance.iter().map(|v| (v / effective_n).sqrt()).collect();
    Ok(MomentReport {
        n,
        effective_n,
        mean,
        variance,
        covariance,
        mean_se,
    })
}
