//! Nonnegative potentials `g(x)` in log space, and their pullbacks `g(T(z))`
//! to the source space of a transport map.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::{TransportError, TransportMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PotentialError {
    #[error("invalid potential configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Fixed analytic scalar property of a data point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalarProperty {
    /// Euclidean norm `‖x‖`.
    Norm,
    /// `‖x‖²`.
    SquaredNorm,
    /// Sum of coordinates.
    Sum,
}

impl ScalarProperty {
    fn apply(self, x: &[f64]) -> f64 {
        match self {
            ScalarProperty::Norm => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
            ScalarProperty::SquaredNorm => x.iter().map(|v| v * v).sum(),
            ScalarProperty::Sum => x.iter().sum(),
        }
    }
}

/// Observation operator `h(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Observation {
    Identity,
    /// Selected coordinates, in the given order.
    Coordinates { indices: Vec<usize> },
    /// `h(x) = A x` with `A` given row by row.
    Linear { rows: Vec<Vec<f64>> },
    ScalarProperty { property: ScalarProperty },
    /// Euclidean distances between pairs of points, reading `x` as `points`
    /// stacked coordinate vectors of length `point_dim`.
    PairwiseDistances {
        pairs: Vec<[usize; 2]>,
        points: usize,
        point_dim: usize,
    },
}

/// Builds a pairwise-distance operator, checking every index against the
/// declared shape.
pub fn pairwise_distance_observation(
    pairs: Vec<[usize; 2]>,
    points: usize,
    point_dim: usize,
) -> Result<Observation, PotentialError> {
    let obs = Observation::PairwiseDistances {
        pairs,
        points,
        point_dim,
    };
    obs.validate(points * point_dim)?;
    Ok(obs)
}

impl Observation {
    /// Output dimension for inputs of dimension `d`, after validation.
    pub fn validate(&self, d: usize) -> Result<usize, PotentialError> {
        let cfg = |m: String| Err(PotentialError::Config(m));
        match self {
            Observation::Identity => Ok(d),
            Observation::Coordinates { indices } => {
                if indices.is_empty() {
                    return cfg("coordinate operator selects nothing".into());
                }
                if let Some(i) = indices.iter().find(|&&i| i >= d) {
                    return cfg(format!("coordinate index {i} out of range for dimension {d}"));
                }
                Ok(indices.len())
            }
            Observation::Linear { rows } => {
                if rows.is_empty() {
                    return cfg("linear operator has no rows".into());
                }
                if let Some(r) = rows.iter().position(|r| r.len() != d) {
                    return cfg(format!(
                        "linear operator row {r} has length {}, expected {d}",
                        rows[r].len()
                    ));
                }
                if rows.iter().flatten().any(|v| !v.is_finite()) {
                    return cfg("linear operator has non-finite entries".into());
                }
                Ok(rows.len())
            }
            Observation::ScalarProperty { .. } => Ok(1),
            Observation::PairwiseDistances {
                pairs,
                points,
                point_dim,
            } => {
                if *point_dim == 0 || points * point_dim != d {
                    return cfg(format!(
                        "{points} points of dimension {point_dim} do not fill a vector of length {d}"
                    ));
                }
                if pairs.is_empty() {
                    return cfg("pairwise-distance operator has no pairs".into());
                }
                if let Some(p) = pairs.iter().find(|p| p[0] >= *points || p[1] >= *points) {
                    return cfg(format!("pair {p:?} out of range for {points} points"));
                }
                Ok(pairs.len())
            }
        }
    }

    /// Writes `h(x)` into `out` (cleared first).
    pub fn apply_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            Observation::Identity => out.extend_from_slice(x),
            Observation::Coordinates { indices } => out.extend(indices.iter().map(|&i| x[i])),
            Observation::Linear { rows } => out.extend(
                rows.iter()
                    .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()),
            ),
            Observation::ScalarProperty { property } => out.push(property.apply(x)),
            Observation::PairwiseDistances {
                pairs, point_dim, ..
            } => {
                let k = *point_dim;
                out.extend(pairs.iter().map(|&[i, j]| {
                    let (a, b) = (&x[i * k..(i + 1) * k], &x[j * k..(j + 1) * k]);
                    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
                }));
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        self.apply_into(x, &mut out);
        out
    }
}

/// Functional form of the potential.
#[derive(Debug, Clone, PartialEq)]
pub enum PotentialKind {
    /// `log g = -‖h(x) - y‖² / (2σ²)`.
    GaussianObservation { y: Vec<f64>, sigma: f64 },
    /// `log g = -h(x) / σ` for a scalar `h`.
    ExponentialTilt { sigma: f64 },
    /// Gaussian observation of `h(x)` rounded to the nearest multiple of `grid`.
    QuantizedObservation { y: Vec<f64>, sigma: f64, grid: f64 },
    /// `g ≡ 1`.
    Constant,
}

/// A potential `g(x) = exp(log_potential(x))`.
///
/// Config form is flat: `kind`, then whichever of `y`, `sigma`, `grid` the
/// kind needs, plus an optional `observation` table (default identity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PotentialSpec", into = "PotentialSpec")]
pub struct Potential {
    pub kind: PotentialKind,
    pub observation: Observation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum KindTag {
    GaussianObservation,
    ExponentialTilt,
    QuantizedObservation,
    Constant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PotentialSpec {
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<f64>,
    #[serde(default)]
    observation: Option<Observation>,
}

impl TryFrom<PotentialSpec> for Potential {
    type Error = String;

    fn try_from(s: PotentialSpec) -> Result<Self, String> {
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| format!("missing field `{name}`"));
        let need_y = |v: Option<Vec<f64>>| v.ok_or_else(|| "missing field `y`".to_string());
        let reject = |present: bool, name: &str| {
            if present {
                Err(format!("field `{name}` does not apply to {:?}", s.kind))
            } else {
                Ok(())
            }
        };
        let kind = match s.kind {
            KindTag::GaussianObservation => {
                reject(s.grid.is_some(), "grid")?;
                PotentialKind::GaussianObservation {
                    y: need_y(s.y.clone())?,
                    sigma: need(s.sigma, "sigma")?,
                }
            }
            KindTag::ExponentialTilt => {
                reject(s.grid.is_some(), "grid")?;
                reject(s.y.is_some(), "y")?;
                PotentialKind::ExponentialTilt {
                    sigma: need(s.sigma, "sigma")?,
                }
            }
            KindTag::QuantizedObservation => PotentialKind::QuantizedObservation {
                y: need_y(s.y.clone())?,
                sigma: need(s.sigma, "sigma")?,
                grid: need(s.grid, "grid")?,
            },
            KindTag::Constant => {
                reject(s.grid.is_some(), "grid")?;
                reject(s.y.is_some(), "y")?;
                reject(s.sigma.is_some(), "sigma")?;
                PotentialKind::Constant
            }
        };
        Ok(Potential {
            kind,
            observation: s.observation.unwrap_or(Observation::Identity),
        })
    }
}

impl From<Potential> for PotentialSpec {
    fn from(p: Potential) -> Self {
        let (kind, y, sigma, grid) = match p.kind {
            PotentialKind::GaussianObservation { y, sigma } => {
                (KindTag::GaussianObservation, Some(y), Some(sigma), None)
            }
            PotentialKind::ExponentialTilt { sigma } => {
                (KindTag::ExponentialTilt, None, Some(sigma), None)
            }
            PotentialKind::QuantizedObservation { y, sigma, grid } => {
                (KindTag::QuantizedObservation, Some(y), Some(sigma), Some(grid))
            }
            PotentialKind::Constant => (KindTag::Constant, None, None, None),
        };
        PotentialSpec {
            kind,
            y,
            sigma,
            grid,
            observation: Some(p.observation),
        }
    }
}

impl Potential {
    pub fn constant() -> Self {
        Self {
            kind: PotentialKind::Constant,
            observation: Observation::Identity,
        }
    }

    pub fn gaussian(observation: Observation, y: Vec<f64>, sigma: f64) -> Self {
        Self {
            kind: PotentialKind::GaussianObservation { y, sigma },
            observation,
        }
    }

    pub fn exponential_tilt(observation: Observation, sigma: f64) -> Self {
        Self {
            kind: PotentialKind::ExponentialTilt { sigma },
            observation,
        }
    }

    pub fn quantized(observation: Observation, y: Vec<f64>, sigma: f64, grid: f64) -> Self {
        Self {
            kind: PotentialKind::QuantizedObservation { y, sigma, grid },
            observation,
        }
    }

    /// Checks the configuration against data dimension `d`.
    pub fn validate(&self, d: usize) -> Result<(), PotentialError> {
        let out_dim = self.observation.validate(d)?;
        let check_sigma = |sigma: f64| {
            if sigma > 0.0 && sigma.is_finite() {
                Ok(())
            } else {
                Err(PotentialError::Config(format!(
                    "scale must be positive and finite, got {sigma}"
                )))
            }
        };
        let check_y = |y: &[f64]| {
            if y.len() != out_dim {
                Err(PotentialError::Config(format!(
                    "observation has {} entries but the operator outputs {out_dim}",
                    y.len()
                )))
            } else if y.iter().any(|v| !v.is_finite()) {
                Err(PotentialError::Config("observation has non-finite entries".into()))
            } else {
                Ok(())
            }
        };
        match &self.kind {
            PotentialKind::GaussianObservation { y, sigma } => {
                check_sigma(*sigma)?;
                check_y(y)
            }
            PotentialKind::ExponentialTilt { sigma } => {
                check_sigma(*sigma)?;
                if out_dim != 1 {
                    return Err(PotentialError::Config(format!(
                        "exponential tilt needs a scalar operator, got output dimension {out_dim}"
                    )));
                }
                Ok(())
            }
            PotentialKind::QuantizedObservation { y, sigma, grid } => {
                check_sigma(*sigma)?;
                if !(*grid > 0.0 && grid.is_finite()) {
                    return Err(PotentialError::Config(format!(
                        "quantization grid must be positive, got {grid}"
                    )));
                }
                check_y(y)
            }
            PotentialKind::Constant => Ok(()),
        }
    }

    /// Returns a copy with every scale divided by `factor`.
    pub fn sharpened(&self, factor: f64) -> Self {
        let mut p = self.clone();
        match &mut p.kind {
            PotentialKind::GaussianObservation { sigma, .. }
            | PotentialKind::ExponentialTilt { sigma }
            | PotentialKind::QuantizedObservation { sigma, .. } => *sigma /= factor,
            PotentialKind::Constant => {}
        }
        p
    }

    /// `log g(x)`. Never `+∞`; none of the shipped kinds produce `-∞` for
    /// finite input either.
    pub fn log_potential(&self, x: &[f64]) -> Result<f64, PotentialError> {
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(PotentialError::Domain(format!("non-finite data point entry {i}")));
        }
        if let PotentialKind::Constant = self.kind {
            return Ok(0.0);
        }
        let mut h = Vec::new();
        self.observation.apply_into(x, &mut h);
        let sq = |h: &[f64], y: &[f64]| -> f64 {
            h.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let v = match &self.kind {
            PotentialKind::GaussianObservation { y, sigma } => -sq(&h, y) / (2.0 * sigma * sigma),
            PotentialKind::ExponentialTilt { sigma } => -h[0] / sigma,
            PotentialKind::QuantizedObservation { y, sigma, grid } => {
                for v in h.iter_mut() {
                    *v = (*v / grid).round() * grid;
                }
                -sq(&h, y) / (2.0 * sigma * sigma)
            }
            PotentialKind::Constant => unreachable!(),
        };
        Ok(v)
    }
}

/// A source point's data image and its log-potential.
#[derive(Debug, Clone, PartialEq)]
pub struct PullbackEval {
    pub x: Vec<f64>,
    pub log_g: f64,
}

/// Source-space target factor `z ↦ log g(T(z))`.
///
/// The sampler and oracles only see targets through this trait, so analytic
/// test targets can stand in for transport-map pullbacks.
pub trait SourceTarget: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, z: &[f64]) -> Result<PullbackEval, PotentialError>;
}

/// The composition `g ∘ T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PullbackPotential {
    potential: Potential,
    map: TransportMap,
}

impl PullbackPotential {
    pub fn new(potential: Potential, map: TransportMap) -> Result<Self, PotentialError> {
        potential.validate(map.dim())?;
        Ok(Self { potential, map })
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn map(&self) -> &TransportMap {
        &self.map
    }

    /// Same potential over a different map.
    pub fn with_map(&self, map: TransportMap) -> Result<Self, PotentialError> {
        Self::new(self.potential.clone(), map)
    }

    pub fn log_pullback(&self, z: &[f64]) -> Result<f64, PotentialError> {
        Ok(self.evaluate(z)?.log_g)
    }
}

impl SourceTarget for PullbackPotential {
    fn dim(&self) -> usize {
        self.map.dim()
    }

    fn evaluate(&self, z: &[f64]) -> Result<PullbackEval, PotentialError> {
        let x = self.map.integrate(z)?;
        let log_g = self.potential.log_potential(&x)?;
        Ok(PullbackEval { x, log_g })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{Scheme, VelocityField};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn coord(i: usize) -> Observation {
        Observation::Coordinates { indices: vec![i] }
    }

    #[test]
    fn exact_match_is_zero() {
        let p = Potential::gaussian(Observation::Identity, vec![0.3, -1.2], 0.5);
        assert_eq!(p.log_potential(&[0.3, -1.2]).unwrap(), 0.0);
    }

    #[test]
    fn bulk_modulus_table_value() {
        // property 310 against target 300 with σ = 10
        let p = Potential::gaussian(coord(0), vec![300.0], 10.0);
        assert_eq!(p.log_potential(&[310.0]).unwrap(), -0.5);
    }

    #[test]
    fn exponential_tilt_form() {
        let p = Potential::exponential_tilt(coord(0), 0.01);
        assert!((p.log_potential(&[0.05]).unwrap() + 5.0).abs() < 1e-12);
    }

    #[test]
    fn quantized_rounds_before_gaussian() {
        let p = Potential::quantized(coord(0), vec![0.25], 0.1, 0.25);
        assert_eq!(p.log_potential(&[0.30, 9.0]).unwrap(), 0.0);
        // 0.40 rounds to 0.5: -(0.25)^2 / (2 * 0.01)
        assert!((p.log_potential(&[0.40, 0.0]).unwrap() + 3.125).abs() < 1e-12);
    }

    #[test]
    fn zero_scale_is_a_validation_error() {
        for p in [
            Potential::gaussian(Observation::Identity, vec![0.0], 0.0),
            Potential::exponential_tilt(coord(0), -1.0),
            Potential::quantized(coord(0), vec![0.0], 1.0, 0.0),
        ] {
            assert!(matches!(p.validate(1), Err(PotentialError::Config(_))));
        }
        assert!(Potential::gaussian(Observation::Identity, vec![0.0], 1.0)
            .validate(2)
            .is_err());
        assert!(Potential::exponential_tilt(Observation::Identity, 1.0)
            .validate(2)
            .is_err());
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = Potential::constant();
        assert!(matches!(
            p.log_potential(&[f64::NAN]),
            Err(PotentialError::Domain(_))
        ));
    }

    #[test]
    fn pairwise_distances() {
        let h = pairwise_distance_observation(vec![[0, 1]], 2, 2).unwrap();
        assert_eq!(h.apply(&[0.0, 0.0, 3.0, 4.0]), vec![5.0]);
        assert_eq!(h.apply(&[1.5, -2.0, 1.5, -2.0]), vec![0.0]);
        assert!(pairwise_distance_observation(vec![[0, 2]], 2, 2).is_err());
    }

    #[test]
    fn pairwise_distances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<f64> = (0..15).map(|_| rng.sample(StandardNormal)).collect();
        let pairs = vec![[0, 4], [2, 3], [1, 1], [4, 1]];
        let h = pairwise_distance_observation(pairs.clone(), 5, 3).unwrap();
        let got = h.apply(&pts);
        // all pairs, then select
        let mut all = vec![vec![0.0; 5]; 5];
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (pts[3 * i + k] - pts[3 * j + k]).powi(2);
                }
                all[i][j] = s.sqrt();
            }
        }
        for (g, [i, j]) in got.iter().zip(pairs) {
            assert!((g - all[i][j]).abs() < 1e-14);
        }
    }

    #[test]
    fn pullback_of_identity_map() {
        let map = TransportMap::with_defaults(VelocityField::zero(2));
        let pp = PullbackPotential::new(
            Potential::gaussian(Observation::Identity, vec![1.0, -1.0], 0.7),
            map,
        )
        .unwrap();
        let z = [0.2, 0.9];
        let expected = -((0.2f64 - 1.0).powi(2) + (0.9f64 + 1.0).powi(2)) / (2.0 * 0.49);
        assert!((pp.log_pullback(&z).unwrap() - expected).abs() < 1e-15);

        let constant = PullbackPotential::new(Potential::constant(), pp.map().clone()).unwrap();
        assert_eq!(constant.log_pullback(&[5.0, -3.0]).unwrap(), 0.0);
    }

    #[test]
    fn pullback_is_composition() {
        let f = VelocityField::affine(vec![0.5, -0.25], 1.8).unwrap();
        let map = TransportMap::new(f, Scheme::Midpoint, 17).unwrap();
        let pot = Potential::gaussian(coord(1), vec![0.4], 0.3);
        let pp = PullbackPotential::new(pot.clone(), map.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let e = pp.evaluate(&z).unwrap();
            let x = map.integrate(&z).unwrap();
            assert_eq!(e.x, x);
            assert_eq!(e.log_g, pot.log_potential(&x).unwrap());
        }
    }

    #[test]
    fn config_from_toml() {
        let p: Potential = toml::from_str(
            r#"
            kind = "gaussian-observation"
            y = [0.25]
            sigma = 0.1
            observation = { kind = "coordinates", indices = [1] }
            "#,
        )
        .unwrap();
        assert_eq!(p, Potential::gaussian(coord(1), vec![0.25], 0.1));
        let bad: Result<Potential, _> = toml::from_str("kind = \"constant\"\nsigmaa = 1.0\n");
        assert!(bad.is_err());
        let missing: Result<Potential, _> = toml::from_str("kind = \"exponential-tilt\"\n");
        assert!(missing.is_err());
        let text = toml::to_string(&p).unwrap();
        assert_eq!(toml::from_str::<Potential>(&text).unwrap(), p);
    }

    proptest! {
        #[test]
        fn gaussian_is_monotone_in_residual(y in -3.0f64..3.0, a in -5.0f64..5.0, b in -5.0f64..5.0, s in 0.05f64..4.0) {
            let p = Potential::gaussian(coord(0), vec![y], s);
            let (la, lb) = (p.log_potential(&[a]).unwrap(), p.log_potential(&[b]).unwrap());
            if (a - y).abs() < (b - y).abs() {
                prop_assert!(la >= lb);
            }
            if la > lb {
                prop_assert!((a - y).abs() < (b - y).abs());
            }
        }

        #[test]
        fn halving_scale_quadruples_energy(x in -5.0f64..5.0, y in -5.0f64..5.0, s in 0.05f64..4.0) {
            let p = Potential::gaussian(coord(0), vec![y], s);
            let q = p.sharpened(2.0);
            let (lp, lq) = (p.log_potential(&[x]).unwrap(), q.log_potential(&[x]).unwrap());
            prop_assert!((lq - 4.0 * lp).abs() <= 1e-12 * lq.abs().max(1e-300));
        }

        #[test]
        fn quantized_is_constant_within_cells(cell in -20i32..20, u in 0.01f64..0.99, v in 0.01f64..0.99) {
            let q = 0.25;
            let p = Potential::quantized(coord(0), vec![0.3], 0.2, q);
            let a = (cell as f64 + u - 0.5) * q;
            let b = (cell as f64 + v - 0.5) * q;
            prop_assert_eq!(p.log_potential(&[a]).unwrap(), p.log_potential(&[b]).unwrap());
        }
    }
}
