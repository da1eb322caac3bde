//! Between-chain and within-chain mixing summaries for scalar series.

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Split-R̂ of one scalar quantity over several chains.
///
/// Each chain is cut into two halves (a middle element of an odd-length chain
/// is dropped) and the classic potential scale reduction is computed over the
/// halves. Returns `NaN` when a half would hold fewer than two draws.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0) / 2;
    if n < 2 || chains.is_empty() {
        return f64::NAN;
    }
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let len = c.len();
        halves.push(&c[..n]);
        halves.push(&c[len - n..]);
    }
    let m = halves.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let grand = mean(&means);
    let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>();
    let w = halves.iter().map(|h| sample_var(h)).sum::<f64>() / m;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    (var_plus / w).sqrt()
}

/// Autocorrelation of `v` at lags `0..max_lag`, normalized by lag-zero.
fn autocorrelation(v: &[f64], max_lag: usize) -> Vec<f64> {
    let n = v.len();
    let m = mean(v);
    let c: Vec<f64> = v.iter().map(|a| a - m).collect();
    let c0 = c.iter().map(|a| a * a).sum::<f64>() / n as f64;
    (0..max_lag.min(n))
        .map(|lag| {
            if c0 == 0.0 {
                return if lag == 0 { 1.0 } else { 0.0 };
            }
            c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64 / c0
        })
        .collect()
}

/// Geyer's initial positive sequence estimate `τ = -1 + 2 Σ Γ_k` from an
/// autocorrelation sequence.
fn geyer_tau(rho: &[f64]) -> f64 {
    let mut tau = -1.0;
    let mut k = 0;
    while k + 1 < rho.len() {
        let pair = rho[k] + rho[k + 1];
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 2;
    }
    tau.max(1.0 / rho.len().max(1) as f64)
}

/// Integrated autocorrelation time of one series.
pub fn integrated_autocorrelation_time(v: &[f64]) -> f64 {
    geyer_tau(&autocorrelation(v, v.len()))
}

/// Integrated autocorrelation time with autocorrelations averaged across chains.
pub fn pooled_iat(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 2 {
        return f64::NAN;
    }
    let acs: Vec<Vec<f64>> = chains.iter().map(|c| autocorrelation(&c[..n], n)).collect();
    let rho: Vec<f64> = (0..n)
        .map(|k| acs.iter().map(|a| a[k]).sum::<f64>() / acs.len() as f64)
        .collect();
    geyer_tau(&rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = 0.0;
        let s = (1.0 - phi * phi).sqrt();
        (0..n)
            .map(|_| {
                x = phi * x + s * rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect()
    }

    #[test]
    fn iat_of_ar1_matches_closed_form() {
        // τ = (1 + φ) / (1 - φ)
        for (phi, tol) in [(0.0, 0.1), (0.5, 0.3), (0.8, 1.0)] {
            let chains: Vec<Vec<f64>> = (0..8).map(|s| ar1(phi, 20_000, s)).collect();
            let tau = pooled_iat(&chains);
            let expected = (1.0 + phi) / (1.0 - phi);
            assert!((tau - expected).abs() < tol, "φ {phi}: {tau} vs {expected}");
        }
    }

    #[test]
    fn rhat_detects_shifted_chain() {
        let mut chains: Vec<Vec<f64>> = (0..4).map(|s| ar1(0.3, 2000, s)).collect();
        assert!(split_rhat(&chains) < 1.01);
        for v in chains[0].iter_mut() {
            *v += 3.0;
        }
        assert!(split_rhat(&chains) > 1.5);
    }

    #[test]
    fn rhat_detects_trend_within_one_chain() {
        let c: Vec<f64> = (0..1000).map(|i| i as f64 / 100.0).collect();
        assert!(split_rhat(&[c]) > 2.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(split_rhat(&[vec![1.0, 2.0, 3.0]]).is_nan());
        assert_eq!(split_rhat(&[vec![2.0; 10], vec![2.0; 10]]), 1.0);
        assert!(integrated_autocorrelation_time(&[1.0; 50]) > 0.0);
    }
}
