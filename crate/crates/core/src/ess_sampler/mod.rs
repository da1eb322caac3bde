//! Elliptical slice sampling in the source space of a transport map.
//!
//! The target is `π(z) ∝ g(T(z)) N(z; 0, I)`. Each step draws an auxiliary
//! Gaussian `ν` and a slice level `log u`, then searches angles on the
//! ellipse `z cos θ + ν sin θ` with a shrinking bracket until a point above
//! the slice is found.

mod baseline;
mod diagnostics;

use std::f64::consts::TAU;
use std::io::Write;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::potentials::{PotentialError, SourceTarget};

pub use baseline::{baseline_gradient_ascent, fd_gradient, BASELINE_STENCIL};
pub use diagnostics::{integrated_autocorrelation_time, pooled_iat, split_rhat};

pub const DEFAULT_MAX_SHRINKS: usize = 1000;
pub const MIN_MAX_SHRINKS: usize = 16;
/// Prior redraws allowed when the initial pullback is not finite.
pub const INIT_RETRIES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid chain configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot shrink the bracket at θ = 0")]
    InvalidShrink,
    #[error(
        "slice search stalled at step {step} after {shrinks} shrinks \
         (bracket width {bracket_width:e}, log-potential gap {log_gap:e})"
    )]
    Stalled {
        step: u64,
        shrinks: usize,
        bracket_width: f64,
        log_gap: f64,
    },
    #[error("current log-potential is not finite ({0})")]
    NonFiniteState(f64),
    #[error("no finite initial state after {0} prior draws")]
    InitFailed(usize),
    #[error("gradient-ascent baseline diverged at iteration {iteration}")]
    BaselineDiverged { iteration: usize },
    #[error("chain {chain}: {source}")]
    InChain {
        chain: usize,
        #[source]
        source: Box<SamplerError>,
    },
    #[error(transparent)]
    Potential(#[from] PotentialError),
}

/// Angular bracket `[lo, hi]` around the current state at `θ = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub lo: f64,
    pub hi: f64,
}

impl Bracket {
    /// `[θ − 2π, θ]`.
    pub fn around(theta: f64) -> Self {
        Self {
            lo: theta - TAU,
            hi: theta,
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Replaces the bracket end on the side of the rejected angle.
pub fn shrink_bracket(theta: f64, bracket: Bracket) -> Result<Bracket, SamplerError> {
    debug_assert!(bracket.lo <= theta && theta <= bracket.hi);
    if theta < 0.0 {
        Ok(Bracket {
            lo: theta,
            hi: bracket.hi,
        })
    } else if theta > 0.0 {
        Ok(Bracket {
            lo: bracket.lo,
            hi: theta,
        })
    } else {
        Err(SamplerError::InvalidShrink)
    }
}

/// Cumulative per-chain counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: u64,
    pub potential_evals: u64,
    pub shrinks: u64,
    /// Proposals whose transport or potential evaluation failed; each is
    /// treated as a rejection.
    pub failed_proposals: u64,
    pub max_shrinks_in_step: u64,
}

/// Current chain position with its cached pullback value and generator.
#[derive(Debug, Clone)]
pub struct ChainState {
    z: Vec<f64>,
    x: Vec<f64>,
    log_g: f64,
    rng: ChaCha8Rng,
    counters: Counters,
}

/// Generator for chain `chain` under root seed `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

impl ChainState {
    /// Starts at a given source point.
    pub fn at<T: SourceTarget + ?Sized>(
        target: &T,
        z: Vec<f64>,
        rng: ChaCha8Rng,
    ) -> Result<Self, SamplerError> {
        let e = target.evaluate(&z)?;
        if !e.log_g.is_finite() {
            return Err(SamplerError::NonFiniteState(e.log_g));
        }
        Ok(Self {
            z,
            x: e.x,
            log_g: e.log_g,
            rng,
            counters: Counters {
                potential_evals: 1,
                ..Counters::default()
            },
        })
    }

    /// Starts at a prior draw, redrawing while the pullback is not finite.
    pub fn from_prior<T: SourceTarget + ?Sized>(
        target: &T,
        mut rng: ChaCha8Rng,
    ) -> Result<Self, SamplerError> {
        let d = target.dim();
        let mut evals = 0;
        for _ in 0..INIT_RETRIES {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            evals += 1;
            match target.evaluate(&z) {
                Ok(e) if e.log_g.is_finite() => {
                    return Ok(Self {
                        z,
                        x: e.x,
                        log_g: e.log_g,
                        rng,
                        counters: Counters {
                            potential_evals: evals,
                            ..Counters::default()
                        },
                    })
                }
                Ok(_) | Err(PotentialError::Transport(_)) | Err(PotentialError::Domain(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Err(SamplerError::InitFailed(INIT_RETRIES))
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn log_g(&self) -> f64 {
        self.log_g
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    /// Recomputes the pullback at `z` and checks the cache against it.
    pub fn cache_is_consistent<T: SourceTarget + ?Sized>(&self, target: &T) -> bool {
        match target.evaluate(&self.z) {
            Ok(e) => e.x == self.x && e.log_g.to_bits() == self.log_g.to_bits(),
            Err(_) => false,
        }
    }
}

/// What happened during one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub shrinks: usize,
    pub potential_evals: usize,
    pub theta: f64,
    pub log_u: f64,
}

/// One elliptical slice sampling iteration, updating `state` in place.
pub fn ess_step<T: SourceTarget + ?Sized>(
    state: &mut ChainState,
    target: &T,
    max_shrinks: usize,
) -> Result<StepOutcome, SamplerError> {
    if !state.log_g.is_finite() {
        return Err(SamplerError::NonFiniteState(state.log_g));
    }
    let d = state.z.len();
    let rng = &mut state.rng;
    let nu: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let u: f64 = rng.sample(Open01);
    let log_u = u.ln();
    let threshold = state.log_g + log_u;

    let mut theta = rng.random::<f64>() * TAU;
    let mut bracket = Bracket::around(theta);
    let mut proposal = vec![0.0; d];
    let mut shrinks = 0;
    let mut evals = 0;
    loop {
        let (s, c) = theta.sin_cos();
        for ((p, z), n) in proposal.iter_mut().zip(&state.z).zip(&nu) {
            *p = z * c + n * s;
        }
        evals += 1;
        let mut last_log_g = f64::NEG_INFINITY;
        match target.evaluate(&proposal) {
            Ok(e) => {
                last_log_g = e.log_g;
                if e.log_g > threshold {
                    assert!(e.log_g > state.log_g + log_u, "slice condition violated");
                    state.z.copy_from_slice(&proposal);
                    state.x = e.x;
                    state.log_g = e.log_g;
                    break;
                }
            }
            Err(PotentialError::Transport(_)) | Err(PotentialError::Domain(_)) => {
                state.counters.failed_proposals += 1;
            }
            Err(e) => return Err(e.into()),
        }
        if shrinks >= max_shrinks {
            state.counters.potential_evals += evals as u64;
            state.counters.shrinks += shrinks as u64;
            return Err(SamplerError::Stalled {
                step: state.counters.steps,
                shrinks,
                bracket_width: bracket.width(),
                log_gap: threshold - last_log_g,
            });
        }
        bracket = shrink_bracket(theta, bracket)?;
        shrinks += 1;
        theta = state.rng.random_range(bracket.lo..bracket.hi);
    }
    let c = &mut state.counters;
    c.steps += 1;
    c.potential_evals += evals as u64;
    c.shrinks += shrinks as u64;
    c.max_shrinks_in_step = c.max_shrinks_in_step.max(shrinks as u64);
    Ok(StepOutcome {
        shrinks,
        potential_evals: evals,
        theta,
        log_u,
    })
}

/// Chain length, retention and parallelism settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub max_shrinks: usize,
    pub seed: u64,
    /// Fixed starting point for every chain; prior draws when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            burn_in: 200,
            thin: 10,
            chains: 1,
            max_shrinks: DEFAULT_MAX_SHRINKS,
            seed: 0,
            init: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidConfig(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.burn_in >= self.steps {
            return bad(format!(
                "burn-in {} must be less than steps {}",
                self.burn_in, self.steps
            ));
        }
        if self.thin == 0 {
            return bad("thinning factor must be at least 1".into());
        }
        if self.chains == 0 {
            return bad("chain count must be at least 1".into());
        }
        if self.max_shrinks < MIN_MAX_SHRINKS {
            return bad(format!(
                "max shrinks must be at least {MIN_MAX_SHRINKS}, got {}",
                self.max_shrinks
            ));
        }
        if let Some(z) = &self.init {
            if z.iter().any(|v| !v.is_finite()) {
                return bad("initial point has non-finite entries".into());
            }
        }
        Ok(())
    }

    /// Zero-based step indices whose post-step states are retained.
    pub fn retained_steps(&self) -> impl Iterator<Item = usize> {
        (self.burn_in..self.steps).step_by(self.thin.max(1))
    }

    pub fn retained_count(&self) -> usize {
        (self.steps - self.burn_in).div_ceil(self.thin)
    }
}

/// Run information stored next to a chain's samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub chain: usize,
    pub seed: u64,
    pub stream: u64,
    pub config: ChainConfig,
    pub counters: Counters,
    pub initial_z: Vec<f64>,
}

/// Retained states of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// Zero-based step index of each retained state.
    pub steps: Vec<usize>,
    pub z: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub log_g: Vec<f64>,
    pub meta: ChainMeta,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }

    /// CSV with header `step,z1..zd,x1..xd,log_g`. Floats use the shortest
    /// representation that round-trips.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.dim();
        let mut header = vec!["step".to_string()];
        header.extend((1..=d).map(|i| format!("z{i}")));
        header.extend((1..=d).map(|i| format!("x{i}")));
        header.push("log_g".into());
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            write!(w, "{}", self.steps[i])?;
            for v in self.z[i].iter().chain(&self.x[i]) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", self.log_g[i])?;
        }
        Ok(())
    }

    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.meta).expect("chain metadata serializes")
    }
}

/// Runs chain `chain` of `config` (generator stream = chain index).
pub fn run_chain<T: SourceTarget + ?Sized>(
    target: &T,
    config: &ChainConfig,
    chain: usize,
) -> Result<SampleSet, SamplerError> {
    config.validate()?;
    let rng = chain_rng(config.seed, chain);
    let mut state = match &config.init {
        Some(z) => ChainState::at(target, z.clone(), rng)?,
        None => ChainState::from_prior(target, rng)?,
    };
    let initial_z = state.z.clone();
    let n = config.retained_count();
    let mut set = SampleSet {
        steps: Vec::with_capacity(n),
        z: Vec::with_capacity(n),
        x: Vec::with_capacity(n),
        log_g: Vec::with_capacity(n),
        meta: ChainMeta {
            chain,
            seed: config.seed,
            stream: chain as u64,
            config: config.clone(),
            counters: Counters::default(),
            initial_z,
        },
    };
    for step in 0..config.steps {
        ess_step(&mut state, target, config.max_shrinks)?;
        if step >= config.burn_in && (step - config.burn_in) % config.thin == 0 {
            debug_assert!(state.cache_is_consistent(target));
            set.steps.push(step);
            set.z.push(state.z.clone());
            set.x.push(state.x.clone());
            set.log_g.push(state.log_g);
        }
    }
    set.meta.counters = state.counters;
    Ok(set)
}

/// Cross-chain convergence summaries over the retained data images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    /// Split-R̂ per dimension; absent for a single chain.
    pub split_rhat: Option<Vec<f64>>,
    /// Integrated autocorrelation time per dimension, pooled over chains,
    /// in units of retained samples.
    pub pooled_iat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelRun {
    pub chains: Vec<SampleSet>,
    pub diagnostics: ChainDiagnostics,
}

impl ParallelRun {
    pub fn pooled_x(&self) -> Vec<Vec<f64>> {
        self.chains.iter().flat_map(|c| c.x.iter().cloned()).collect()
    }

    pub fn pooled_z(&self) -> Vec<Vec<f64>> {
        self.chains.iter().flat_map(|c| c.z.iter().cloned()).collect()
    }

    pub fn total_counters(&self) -> Counters {
        self.chains.iter().fold(Counters::default(), |mut acc, c| {
            let k = c.meta.counters;
            acc.steps += k.steps;
            acc.potential_evals += k.potential_evals;
            acc.shrinks += k.shrinks;
            acc.failed_proposals += k.failed_proposals;
            acc.max_shrinks_in_step = acc.max_shrinks_in_step.max(k.max_shrinks_in_step);
            acc
        })
    }
}

/// Runs `config.chains` independent chains concurrently and summarizes them.
pub fn run_parallel_chains<T: SourceTarget + ?Sized>(
    target: &T,
    config: &ChainConfig,
) -> Result<ParallelRun, SamplerError> {
    config.validate()?;
    let chains = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            run_chain(target, config, c).map_err(|e| SamplerError::InChain {
                chain: c,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let diagnostics = diagnose(&chains);
    Ok(ParallelRun {
        chains,
        diagnostics,
    })
}

/// Split-R̂ and pooled autocorrelation time of each data-image dimension.
pub fn diagnose(chains: &[SampleSet]) -> ChainDiagnostics {
    let d = chains.first().map_or(0, SampleSet::dim);
    let series = |k: usize| -> Vec<Vec<f64>> {
        chains
            .iter()
            .map(|c| c.x.iter().map(|x| x[k]).collect())
            .collect()
    };
    let split_rhat = if chains.len() > 1 {
        Some((0..d).map(|k| split_rhat(&series(k))).collect())
    } else {
        None
    };
    let pooled_iat = (0..d).map(|k| pooled_iat(&series(k))).collect();
    ChainDiagnostics {
        split_rhat,
        pooled_iat,
    }
}
