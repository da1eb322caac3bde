//! Synthetic 2D datasets used to train desk-scale priors.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    TwoMoons,
    GaussianMixtureRing,
    Checkerboard,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::TwoMoons => "two-moons",
            DatasetKind::GaussianMixtureRing => "gaussian-mixture-ring",
            DatasetKind::Checkerboard => "checkerboard",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub points: Vec<[f64; 2]>,
    pub noise: f64,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    pub fn mean(&self) -> [f64; 2] {
        let n = self.points.len() as f64;
        let mut m = [0.0; 2];
        for p in &self.points {
            m[0] += p[0];
            m[1] += p[1];
        }
        [m[0] / n, m[1] / n]
    }

    /// Isotropic Gaussian kernel bandwidth maximizing held-out likelihood.
    ///
    /// Every fifth point is held out; candidates halve in steps of √2
    /// downward from Scott's rule on the pooled standard deviation. Rule of
    /// thumb bandwidths oversmooth thin curved structure like the moons.
    pub fn kde_bandwidth(&self) -> f64 {
        let n = self.points.len();
        let mean = self.mean();
        let var: f64 = self
            .points
            .iter()
            .map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2))
            .sum::<f64>()
            / (2.0 * (n.max(2) - 1) as f64);
        let scott = var.sqrt() * (n as f64).powf(-1.0 / 6.0);
        if n < 10 || scott == 0.0 {
            return scott.max(f64::MIN_POSITIVE);
        }
        let (held, fit): (Vec<_>, Vec<_>) = self.points.iter().enumerate().partition(|(i, _)| i % 5 == 0);
        let score = |h: f64| -> f64 {
            let inv = 0.5 / (h * h);
            held.iter()
                .map(|(_, q)| {
                    let s: f64 = fit
                        .iter()
                        .map(|(_, p)| (-((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)) * inv).exp())
                        .sum();
                    (s / (fit.len() as f64 * 2.0 * PI * h * h)).ln()
                })
                .sum()
        };
        (0..=12)
            .map(|k| scott * 0.5f64.powf(k as f64 / 2.0))
            .map(|h| (h, score(h)))
            .fold((scott, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
            .0
    }

    /// Gaussian kernel density estimate integrated over the cells of a
    /// `res × res` grid on `[lo, hi]`, as cell probabilities (row-major in
    /// the first coordinate), with the bandwidth of [`Self::kde_bandwidth`].
    ///
    /// Mass falling outside the grid is dropped, so the result may sum to
    /// slightly less than one.
    pub fn kde_cell_masses(&self, lo: [f64; 2], hi: [f64; 2], res: usize) -> Vec<f64> {
        let n = self.points.len() as f64;
        let h = self.kde_bandwidth();
        let bw = [h, h];
        let edges = |k: usize| -> Vec<f64> {
            (0..=res)
                .map(|i| lo[k] + (hi[k] - lo[k]) * i as f64 / res as f64)
                .collect()
        };
        let (ex, ey) = (edges(0), edges(1));
        let mut masses = vec![0.0; res * res];
        let mut px = vec![0.0; res];
        let mut py = vec![0.0; res];
        let cdf = |v: f64| crate::transport::normal_cdf(v);
        for p in &self.points {
            // The product kernel factorizes, so cell mass is a product of 1D
            // interval masses.
            for i in 0..res {
                px[i] = cdf((ex[i + 1] - p[0]) / bw[0]) - cdf((ex[i] - p[0]) / bw[0]);
                py[i] = cdf((ey[i + 1] - p[1]) / bw[1]) - cdf((ey[i] - p[1]) / bw[1]);
            }
            for i in 0..res {
                if px[i] == 0.0 {
                    continue;
                }
                for j in 0..res {
                    masses[i * res + j] += px[i] * py[j];
                }
            }
        }
        for m in &mut masses {
            *m /= n;
        }
        masses
    }
}

/// Which half-circle of the two-moons construction a point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoonBranch {
    /// Upper half-circle centered at (0, 0).
    Upper,
    /// Lower half-circle centered at (1, 0.5).
    Lower,
}

impl MoonBranch {
    pub fn index(self) -> usize {
        match self {
            MoonBranch::Upper => 0,
            MoonBranch::Lower => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MoonBranch::Upper => "upper",
            MoonBranch::Lower => "lower",
        }
    }
}

/// Distance from `p` to the noiseless arc of `branch`.
pub fn moon_arc_distance(p: [f64; 2], branch: MoonBranch) -> f64 {
    let (center, ends, upper) = match branch {
        MoonBranch::Upper => ([0.0, 0.0], [[1.0, 0.0], [-1.0, 0.0]], true),
        MoonBranch::Lower => ([1.0, 0.5], [[0.0, 0.5], [2.0, 0.5]], false),
    };
    let rel = [p[0] - center[0], p[1] - center[1]];
    let on_arc_side = if upper { rel[1] >= 0.0 } else { rel[1] <= 0.0 };
    if on_arc_side {
        ((rel[0] * rel[0] + rel[1] * rel[1]).sqrt() - 1.0).abs()
    } else {
        ends.iter()
            .map(|e| ((p[0] - e[0]).powi(2) + (p[1] - e[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Nearest noiseless arc; ties go to the upper branch.
pub fn nearest_moon_branch(p: [f64; 2]) -> MoonBranch {
    if moon_arc_distance(p, MoonBranch::Lower) < moon_arc_distance(p, MoonBranch::Upper) {
        MoonBranch::Lower
    } else {
        MoonBranch::Upper
    }
}

/// Two interleaving half-circles with isotropic Gaussian noise.
///
/// The first `⌈n/2⌉` points lie on the upper arc `(cos φ, sin φ)` and the
/// rest on the lower arc `(1 - cos φ, 0.5 - sin φ)`, with `φ ~ U(0, π)`.
pub fn sample_two_moons(n: usize, noise: f64, seed: u64) -> ToyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_upper = n.div_ceil(2);
    let points = (0..n)
        .map(|i| {
            let phi = rng.random_range(0.0..PI);
            let (s, c) = phi.sin_cos();
            let base = if i < n_upper {
                [c, s]
            } else {
                [1.0 - c, 0.5 - s]
            };
            if noise > 0.0 {
                let e0: f64 = rng.sample(StandardNormal);
                let e1: f64 = rng.sample(StandardNormal);
                [base[0] + noise * e0, base[1] + noise * e1]
            } else {
                base
            }
        })
        .collect();
    ToyDataset {
        kind: DatasetKind::TwoMoons,
        points,
        noise,
    }
}

/// Eight Gaussian blobs of standard deviation `noise` evenly spaced on a
/// circle of radius 2.
pub fn sample_gaussian_ring(n: usize, noise: f64, seed: u64) -> ToyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let k = rng.random_range(0..8usize);
            let (s, c) = (2.0 * PI * k as f64 / 8.0).sin_cos();
            let e0: f64 = rng.sample(StandardNormal);
            let e1: f64 = rng.sample(StandardNormal);
            [2.0 * c + noise * e0, 2.0 * s + noise * e1]
        })
        .collect();
    ToyDataset {
        kind: DatasetKind::GaussianMixtureRing,
        points,
        noise,
    }
}

/// Uniform on the "black" cells of a 4×4 checkerboard over `[-2, 2]²`,
/// jittered by Gaussian noise of scale `noise`.
pub fn sample_checkerboard(n: usize, noise: f64, seed: u64) -> ToyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let col = rng.random_range(0..4usize);
            let row = 2 * rng.random_range(0..2usize) + (col % 2);
            let x = -2.0 + col as f64 + rng.random::<f64>();
            let y = -2.0 + row as f64 + rng.random::<f64>();
            if noise > 0.0 {
                let e0: f64 = rng.sample(StandardNormal);
                let e1: f64 = rng.sample(StandardNormal);
                [x + noise * e0, y + noise * e1]
            } else {
                [x, y]
            }
        })
        .collect();
    ToyDataset {
        kind: DatasetKind::Checkerboard,
        points,
        noise,
    }
}

pub fn sample_dataset(kind: DatasetKind, n: usize, noise: f64, seed: u64) -> ToyDataset {
    match kind {
        DatasetKind::TwoMoons => sample_two_moons(n, noise, seed),
        DatasetKind::GaussianMixtureRing => sample_gaussian_ring(n, noise, seed),
        DatasetKind::Checkerboard => sample_checkerboard(n, noise, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let ds = sample_two_moons(2000, 0.0, 3);
        for p in &ds.points {
            let d = moon_arc_distance(*p, MoonBranch::Upper)
                .min(moon_arc_distance(*p, MoonBranch::Lower));
            assert!(d < 1e-12, "{p:?} at distance {d}");
        }
        let upper = ds
            .points
            .iter()
            .filter(|p| nearest_moon_branch(**p) == MoonBranch::Upper)
            .count();
        assert_eq!(upper, 1000);
    }

    #[test]
    fn seeded_determinism() {
        assert_eq!(sample_two_moons(4, 0.1, 42), sample_two_moons(4, 0.1, 42));
        assert_ne!(sample_two_moons(4, 0.1, 42), sample_two_moons(4, 0.1, 43));
    }

    #[test]
    fn noisy_moons_mean_matches_arc_mixture() {
        // Oracle: midpoint quadrature of each arc's mean position.
        let m = 100_000;
        let (mut ux, mut uy, mut lx, mut ly) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..m {
            let phi = PI * (i as f64 + 0.5) / m as f64;
            ux += phi.cos();
            uy += phi.sin();
            lx += 1.0 - phi.cos();
            ly += 0.5 - phi.sin();
        }
        let m = m as f64;
        let oracle = [(ux + lx) / (2.0 * m), (uy + ly) / (2.0 * m)];
        assert!((oracle[0] - 0.5).abs() < 1e-9 && (oracle[1] - 0.25).abs() < 1e-9);

        let ds = sample_two_moons(10_000, 0.05, 7);
        let mean = ds.mean();
        assert!((mean[0] - oracle[0]).abs() < 0.03, "{mean:?}");
        assert!((mean[1] - oracle[1]).abs() < 0.03, "{mean:?}");
    }

    #[test]
    fn branch_classification() {
        assert_eq!(nearest_moon_branch([0.0, 1.0]), MoonBranch::Upper);
        assert_eq!(nearest_moon_branch([1.0, -0.5]), MoonBranch::Lower);
        assert_eq!(nearest_moon_branch([-1.0, 0.0]), MoonBranch::Upper);
        assert_eq!(nearest_moon_branch([2.0, 0.5]), MoonBranch::Lower);
        assert!((moon_arc_distance([3.0, 0.5], MoonBranch::Lower) - 1.0).abs() < 1e-15);
        assert!((moon_arc_distance([-1.0, -1.0], MoonBranch::Upper) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn other_datasets_are_finite_and_sized() {
        for kind in [DatasetKind::GaussianMixtureRing, DatasetKind::Checkerboard] {
            let ds = sample_dataset(kind, 1500, 0.05, 1);
            assert_eq!(ds.len(), 1500);
            assert!(ds.points.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
        }
        let cb = sample_checkerboard(1000, 0.0, 2);
        for p in &cb.points {
            let (c, r) = ((p[0] + 2.0).floor() as i64, (p[1] + 2.0).floor() as i64);
            assert_eq!((c + r) % 2, 0, "{p:?}");
        }
    }

    #[test]
    fn kde_masses_sum_to_about_one() {
        let ds = sample_two_moons(2000, 0.05, 4);
        let masses = ds.kde_cell_masses([-3.0, -2.5], [4.0, 3.0], 32);
        let total: f64 = masses.iter().sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn kde_bandwidth_tracks_structure() {
        let moons = sample_two_moons(3000, 0.05, 2);
        let h = moons.kde_bandwidth();
        assert!((0.015..0.08).contains(&h), "{h}");
        // For a single Gaussian blob the held-out optimum sits near Scott's rule.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points = (0..3000)
            .map(|_| [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)])
            .collect();
        let blob = ToyDataset {
            kind: DatasetKind::TwoMoons,
            points,
            noise: 0.0,
        };
        let scott = 3000f64.powf(-1.0 / 6.0);
        let h = blob.kde_bandwidth();
        assert!((0.4 * scott..1.05 * scott).contains(&h), "{h} vs {scott}");
    }
}
