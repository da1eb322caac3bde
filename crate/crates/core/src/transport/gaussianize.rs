//! Per-dimension change of variables between native marginals and the
//! standard normal source space.

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};
use std::f64::consts::SQRT_2;

use super::TransportError;

/// Standard normal CDF, accurate in both tails.
pub fn normal_cdf(z: f64) -> f64 {
    if z < 0.0 {
        0.5 * erfc(-z / SQRT_2)
    } else {
        1.0 - 0.5 * erfc(z / SQRT_2)
    }
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    if p < 0.5 {
        -SQRT_2 * erfc_inv(2.0 * p)
    } else {
        SQRT_2 * erfc_inv(2.0 * (1.0 - p))
    }
}

/// Native marginal of one source coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Marginal {
    StandardNormal,
    Uniform { low: f64, high: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl Marginal {
    fn validate(&self) -> Result<(), TransportError> {
        match *self {
            Marginal::StandardNormal => Ok(()),
            Marginal::Uniform { low, high } if low.is_finite() && high.is_finite() && low < high => {
                Ok(())
            }
            Marginal::LogNormal { mu, sigma } if mu.is_finite() && sigma > 0.0 && sigma.is_finite() => {
                Ok(())
            }
            m => Err(TransportError::InvalidParameter(format!(
                "invalid marginal {m:?}"
            ))),
        }
    }

    /// Native CDF.
    pub fn cdf(&self, v: f64) -> f64 {
        match *self {
            Marginal::StandardNormal => normal_cdf(v),
            Marginal::Uniform { low, high } => ((v - low) / (high - low)).clamp(0.0, 1.0),
            Marginal::LogNormal { mu, sigma } => {
                if v <= 0.0 {
                    0.0
                } else {
                    normal_cdf((v.ln() - mu) / sigma)
                }
            }
        }
    }

    fn in_support(&self, v: f64) -> bool {
        match *self {
            Marginal::StandardNormal => v.is_finite(),
            Marginal::Uniform { low, high } => v > low && v < high,
            Marginal::LogNormal { .. } => v > 0.0 && v.is_finite(),
        }
    }

    fn to_normal(&self, v: f64) -> f64 {
        match *self {
            Marginal::StandardNormal => v,
            Marginal::Uniform { low, high } => normal_quantile((v - low) / (high - low)),
            // Φ⁻¹(Φ(w)) = w, so skip the round trip through the CDF.
            Marginal::LogNormal { mu, sigma } => (v.ln() - mu) / sigma,
        }
    }

    fn from_normal(&self, z: f64) -> f64 {
        match *self {
            Marginal::StandardNormal => z,
            Marginal::Uniform { low, high } => low + (high - low) * normal_cdf(z),
            Marginal::LogNormal { mu, sigma } => (mu + sigma * z).exp(),
        }
    }
}

/// Elementwise map between a product of native marginals and `N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTransform {
    marginals: Vec<Marginal>,
}

impl SourceTransform {
    pub fn new(marginals: Vec<Marginal>) -> Result<Self, TransportError> {
        for m in &marginals {
            m.validate()?;
        }
        Ok(Self { marginals })
    }

    pub fn marginals(&self) -> &[Marginal] {
        &self.marginals
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    fn check_len(&self, n: usize) -> Result<(), TransportError> {
        if n != self.dim() {
            return Err(TransportError::DimensionMismatch {
                expected: self.dim(),
                got: n,
            });
        }
        Ok(())
    }

    /// `z_i = Φ⁻¹(F_i(v_i))`.
    pub fn gaussianize(&self, v: &[f64]) -> Result<Vec<f64>, TransportError> {
        self.check_len(v.len())?;
        self.marginals
            .iter()
            .zip(v)
            .enumerate()
            .map(|(i, (m, &vi))| {
                if m.in_support(vi) {
                    Ok(m.to_normal(vi))
                } else {
                    Err(TransportError::Domain(format!(
                        "dimension {i}: value {vi} outside the support of {m:?}"
                    )))
                }
            })
            .collect()
    }

    /// `v_i = F_i⁻¹(Φ(z_i))`.
    pub fn degaussianize(&self, z: &[f64]) -> Result<Vec<f64>, TransportError> {
        self.check_len(z.len())?;
        if let Some(index) = z.iter().position(|v| !v.is_finite()) {
            return Err(TransportError::NonFiniteInput { index });
        }
        Ok(self
            .marginals
            .iter()
            .zip(z)
            .map(|(m, &zi)| m.from_normal(zi))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn uniform01() -> Marginal {
        Marginal::Uniform { low: 0.0, high: 1.0 }
    }

    #[test]
    fn medians_map_to_zero() {
        let t = SourceTransform::new(vec![uniform01(), Marginal::LogNormal { mu: 0.0, sigma: 1.0 }])
            .unwrap();
        assert_eq!(t.gaussianize(&[0.5, 1.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(t.degaussianize(&[0.0, 0.0]).unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn standard_normal_marginal_is_identity() {
        let t = SourceTransform::new(vec![Marginal::StandardNormal; 3]).unwrap();
        let z = [-2.5, 0.0, 7.25];
        assert_eq!(t.degaussianize(&z).unwrap(), z.to_vec());
        assert_eq!(t.gaussianize(&z).unwrap(), z.to_vec());
    }

    #[test]
    fn outside_support_names_dimension() {
        let t = SourceTransform::new(vec![Marginal::StandardNormal, uniform01()]).unwrap();
        match t.gaussianize(&[0.0, 1.0]) {
            Err(TransportError::Domain(msg)) => assert!(msg.contains("dimension 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let ln = SourceTransform::new(vec![Marginal::LogNormal { mu: 0.0, sigma: 1.0 }]).unwrap();
        assert!(ln.gaussianize(&[0.0]).is_err());
        assert!(ln.gaussianize(&[-1.0]).is_err());
    }

    #[test]
    fn invalid_marginals_rejected() {
        assert!(SourceTransform::new(vec![Marginal::Uniform { low: 1.0, high: 1.0 }]).is_err());
        assert!(SourceTransform::new(vec![Marginal::LogNormal { mu: 0.0, sigma: 0.0 }]).is_err());
    }

    fn ks_distance(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn degaussianized_draws_follow_native_marginals() {
        let marginals = [
            Marginal::Uniform { low: -2.0, high: 3.0 },
            Marginal::LogNormal { mu: 0.4, sigma: 0.7 },
        ];
        let t = SourceTransform::new(marginals.to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut cols = vec![Vec::with_capacity(n), Vec::with_capacity(n)];
        for _ in 0..n {
            let z: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let v = t.degaussianize(&z).unwrap();
            cols[0].push(v[0]);
            cols[1].push(v[1]);
        }
        // Independent CDFs written out in closed form.
        let ks_u = ks_distance(cols[0].clone(), |v| ((v + 2.0) / 5.0).clamp(0.0, 1.0));
        let ks_ln = ks_distance(cols[1].clone(), |v| {
            0.5 * erfc(-(v.ln() - 0.4) / (0.7 * SQRT_2))
        });
        assert!(ks_u < 0.02, "{ks_u}");
        assert!(ks_ln < 0.02, "{ks_ln}");
    }

    proptest! {
        #[test]
        fn uniform_round_trip(low in -10.0f64..10.0, width in 0.1f64..20.0, frac in 1e-6f64..(1.0 - 1e-6)) {
            let m = Marginal::Uniform { low, high: low + width };
            let t = SourceTransform::new(vec![m]).unwrap();
            let v = low + frac * width;
            let back = t.degaussianize(&t.gaussianize(&[v]).unwrap()).unwrap()[0];
            prop_assert!((back - v).abs() < 1e-9, "{} vs {}", back, v);
        }

        #[test]
        fn lognormal_round_trip(mu in -2.0f64..2.0, sigma in 0.05f64..2.0, w in -6.0f64..6.0) {
            let m = Marginal::LogNormal { mu, sigma };
            let t = SourceTransform::new(vec![m]).unwrap();
            let v = (mu + sigma * w).exp();
            let back = t.degaussianize(&t.gaussianize(&[v]).unwrap()).unwrap()[0];
            prop_assert!((back - v).abs() <= 1e-9 * v.max(1.0));
        }

        #[test]
        fn quantile_inverts_cdf(z in -8.0f64..6.0) {
            prop_assert!((normal_quantile(normal_cdf(z)) - z).abs() < 1e-6);
        }
    }
}
