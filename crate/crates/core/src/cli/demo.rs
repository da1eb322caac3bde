//! Paired comparison of gradient ascent and ESS-Flow on a two-moons prior.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::DemoSpec;
use super::CliError;
use crate::ess_sampler::{baseline_gradient_ascent, run_chain, ChainConfig};
use crate::flow_training::{nearest_moon_branch, transported_prior_tv, MoonBranch, ToyDataset};
use crate::oracle::{grid_posterior, tv_distance, Grid, DEFAULT_RANGE};
use crate::potentials::{PullbackPotential, SourceTarget};

/// Generator stream for trial initializations, clear of chain streams.
const INIT_STREAM: u64 = u64::MAX;
const PRIOR_STREAM: u64 = u64::MAX - 1;

fn branch_of(x: &[f64]) -> MoonBranch {
    nearest_moon_branch([x[0], x[1]])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    /// Fraction of completed trials whose final branch differs from the
    /// initial one.
    pub switch_fraction: f64,
    /// Final-state branch fractions (upper, lower).
    pub final_occupancy: [f64; 2],
    pub completed: usize,
    /// Mean log-potential of the final states of completed trials.
    pub mean_final_log_g: f64,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub trials: usize,
    /// Mean log-potential at the shared initial states.
    pub mean_initial_log_g: f64,
    pub baseline: MethodSummary,
    pub ess_flow: MethodSummary,
    /// Branch fractions (upper, lower) over all pooled post-burn-in ESS-Flow states.
    pub ess_pooled_occupancy: [f64; 2],
    pub pooled_samples: usize,
    /// Posterior branch masses (upper, lower) from the grid oracle.
    pub oracle_branch_mass: [f64; 2],
    pub oracle_resolution: usize,
    /// Source-space histogram TV between pooled ESS-Flow states and the oracle.
    pub tv_pooled: f64,
    /// TV between transported prior samples and the dataset density estimate.
    pub prior_kde_tv: Option<f64>,
    pub potential_evaluations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub method: &'static str,
    pub trial: usize,
    pub x: [f64; 2],
    pub branch: MoonBranch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoOutput {
    pub report: DemoReport,
    pub scatter: Vec<ScatterRow>,
    pub pooled_z: Vec<Vec<f64>>,
    pub pooled_x: Vec<Vec<f64>>,
}

/// Scatter CSV with header `method,trial,x1,x2,branch`.
pub fn write_scatter<W: Write>(rows: &[ScatterRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "method,trial,x1,x2,branch")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.method, r.trial, r.x[0], r.x[1], r.branch.name())?;
    }
    Ok(())
}

struct Trial {
    init_branch: MoonBranch,
    baseline: Result<(Vec<f64>, f64), String>,
    ess: Result<(Vec<f64>, f64, Vec<Vec<f64>>, Vec<Vec<f64>>, u64), String>,
}

fn summarize(outcomes: &[(MoonBranch, Result<(MoonBranch, f64), String>)]) -> MethodSummary {
    let mut completed = 0;
    let mut switched = 0;
    let mut occ = [0.0; 2];
    let mut log_g = 0.0;
    let mut failures = Vec::new();
    for (i, (init, fin)) in outcomes.iter().enumerate() {
        match fin {
            Ok((b, l)) => {
                completed += 1;
                log_g += l;
                occ[b.index()] += 1.0;
                if b != init {
                    switched += 1;
                }
            }
            Err(e) => failures.push(format!("trial {i}: {e}")),
        }
    }
    let c = completed.max(1) as f64;
    MethodSummary {
        switch_fraction: switched as f64 / c,
        final_occupancy: [occ[0] / c, occ[1] / c],
        completed,
        mean_final_log_g: log_g / c,
        failures,
    }
}

/// Runs the paired trials. Each trial draws one prior point, classifies its
/// image, then runs both methods from it.
pub fn moons_demo(
    target: &PullbackPotential,
    spec: &DemoSpec,
    seed: u64,
    dataset: Option<&ToyDataset>,
) -> Result<DemoOutput, CliError> {
    spec.validate()?;
    if target.dim() != 2 {
        return Err(CliError::Validation("moons-demo needs a 2-dimensional model".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(INIT_STREAM);
    let mut inits = Vec::with_capacity(spec.trials);
    let mut init_log_g = 0.0;
    while inits.len() < spec.trials {
        let z: Vec<f64> = (0..2).map(|_| init_rng.sample(StandardNormal)).collect();
        if let Ok(e) = target.evaluate(&z) {
            if e.log_g.is_finite() {
                init_log_g += e.log_g;
                inits.push((z, e.x));
            }
        }
    }

    let chain_cfg = ChainConfig {
        steps: spec.ess_steps,
        burn_in: spec.ess_burn_in,
        thin: 1,
        chains: 1,
        seed,
        ..ChainConfig::default()
    };
    let trials: Vec<Trial> = inits
        .par_iter()
        .enumerate()
        .map(|(t, (z0, x0))| {
            let baseline = baseline_gradient_ascent(target, z0, spec.baseline_step_size, spec.baseline_iterations)
                .map_err(|e| e.to_string())
                .and_then(|trace| {
                    let z = trace.last().expect("trace holds the start");
                    target.evaluate(z).map(|e| (e.x, e.log_g)).map_err(|e| e.to_string())
                });
            let cfg = ChainConfig {
                init: Some(z0.clone()),
                ..chain_cfg.clone()
            };
            let ess = run_chain(target, &cfg, t)
                .map(|s| {
                    let last = s.x.last().cloned().expect("chain retains samples");
                    let log_g = *s.log_g.last().expect("chain retains samples");
                    (last, log_g, s.z, s.x, s.meta.counters.potential_evals)
                })
                .map_err(|e| e.to_string());
            Trial {
                init_branch: branch_of(x0),
                baseline,
                ess,
            }
        })
        .collect();

    let mut scatter = Vec::new();
    let mut pooled_z = Vec::new();
    let mut pooled_x = Vec::new();
    let mut evals = 0;
    let mut base_out = Vec::with_capacity(trials.len());
    let mut ess_out = Vec::with_capacity(trials.len());
    for (t, tr) in trials.into_iter().enumerate() {
        base_out.push((
            tr.init_branch,
            tr.baseline.as_ref().map(|(x, l)| (branch_of(x), *l)).map_err(Clone::clone),
        ));
        if let Ok((x, _)) = &tr.baseline {
            scatter.push(ScatterRow {
                method: "baseline",
                trial: t,
                x: [x[0], x[1]],
                branch: branch_of(x),
            });
        }
        match tr.ess {
            Ok((last, log_g, zs, xs, n)) => {
                ess_out.push((tr.init_branch, Ok((branch_of(&last), log_g))));
                scatter.push(ScatterRow {
                    method: "ess-flow",
                    trial: t,
                    x: [last[0], last[1]],
                    branch: branch_of(&last),
                });
                pooled_z.extend(zs);
                pooled_x.extend(xs);
                evals += n;
            }
            Err(e) => ess_out.push((tr.init_branch, Err(e))),
        }
    }

    let mut prior_rng = ChaCha8Rng::seed_from_u64(seed);
    prior_rng.set_stream(PRIOR_STREAM);
    for i in 0..spec.prior_samples {
        let z: Vec<f64> = (0..2).map(|_| prior_rng.sample(StandardNormal)).collect();
        if let Ok(x) = target.map().integrate(&z) {
            scatter.push(ScatterRow {
                method: "prior",
                trial: i,
                x: [x[0], x[1]],
                branch: branch_of(&x),
            });
        }
    }

    let grid = Grid::new(DEFAULT_RANGE[0], DEFAULT_RANGE[1], spec.oracle_resolution)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let post = grid_posterior(target, grid).map_err(|e| CliError::Numeric(e.to_string()))?;
    let mut oracle_mass = [0.0; 2];
    for (m, x) in post.cell_masses().iter().zip(post.images()) {
        if *m > 0.0 {
            oracle_mass[branch_of(x).index()] += m;
        }
    }
    let mut pooled_occ = [0.0; 2];
    for x in &pooled_x {
        pooled_occ[branch_of(x).index()] += 1.0;
    }
    let np = pooled_x.len().max(1) as f64;
    let prior_kde_tv = match dataset {
        Some(ds) => Some(
            transported_prior_tv(target.map(), ds, spec.prior_samples.max(1), 64, seed)
                .map_err(|e| CliError::Numeric(e.to_string()))?,
        ),
        None => None,
    };
    let report = DemoReport {
        trials: spec.trials,
        mean_initial_log_g: init_log_g / spec.trials as f64,
        baseline: summarize(&base_out),
        ess_flow: summarize(&ess_out),
        ess_pooled_occupancy: [pooled_occ[0] / np, pooled_occ[1] / np],
        pooled_samples: pooled_x.len(),
        oracle_branch_mass: oracle_mass,
        oracle_resolution: spec.oracle_resolution,
        tv_pooled: tv_distance(&pooled_z, &post),
        prior_kde_tv,
        potential_evaluations: evals,
    };
    Ok(DemoOutput {
        report,
        scatter,
        pooled_z,
        pooled_x,
    })
}
