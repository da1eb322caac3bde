//! Command-line experiment runner.
//!
//! Every command validates its whole configuration first, computes all
//! outputs in memory, then writes them and finally a manifest listing each
//! file with its SHA-256 digest.

pub mod config;
pub mod demo;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ess_sampler::{run_parallel_chains, ParallelRun, SampleSet, SamplerError};
use crate::flow_training::{sample_dataset, train, write_loss_trace, TrainError};
use crate::multifidelity::{reweight, weighted_estimate, FidelityPair, Statistic};
use crate::oracle::{grid_posterior, moment_report, tv_distance, Grid};
use crate::potentials::PullbackPotential;
use crate::transport::{write_field, VelocityField};

use config::{prepare, ExperimentConfig, ExperimentKind, Prepared};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::InvalidConfig(m) => CliError::Validation(m),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "essflow", version, about = "Elliptical slice sampling through flow transport maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a velocity field on a synthetic dataset.
    TrainPrior(CommonArgs),
    /// Run ESS-Flow chains on a pullback potential.
    Sample(CommonArgs),
    /// Compare chains against the grid oracle.
    OracleCompare(CommonArgs),
    /// Sample under a coarse map and reweight to a fine one.
    Multifidelity(CommonArgs),
    /// Gradient ascent versus ESS-Flow on a two-moons prior.
    MoonsDemo(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

impl Command {
    fn parts(&self) -> (ExperimentKind, &CommonArgs) {
        match self {
            Command::TrainPrior(a) => (ExperimentKind::TrainPrior, a),
            Command::Sample(a) => (ExperimentKind::Sample, a),
            Command::OracleCompare(a) => (ExperimentKind::OracleCompare, a),
            Command::Multifidelity(a) => (ExperimentKind::Multifidelity, a),
            Command::MoonsDemo(a) => (ExperimentKind::MoonsDemo, a),
        }
    }
}

/// In-memory results of a command, written out by [`execute`].
#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
    pub report: serde_json::Value,
    pub counters: BTreeMap<String, u64>,
    pub timings: BTreeMap<String, f64>,
}

impl Artifacts {
    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    fn add_json(&mut self, name: &str, v: &impl Serialize) {
        let mut bytes = serde_json::to_vec_pretty(v).expect("report serializes");
        bytes.push(b'\n');
        self.add(name, bytes);
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        *self.timings.entry(phase.into()).or_default() += t0.elapsed().as_secs_f64();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub timings_seconds: BTreeMap<String, f64>,
    pub counters: BTreeMap<String, u64>,
    pub outputs: Vec<OutputEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// `v<crate version>`, with a `-g<commit>` suffix when the build sets
/// `ESSFLOW_GIT_DESCRIBE`.
pub fn version_string() -> String {
    match option_env!("ESSFLOW_GIT_DESCRIBE") {
        Some(d) => d.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn chain_files(art: &mut Artifacts, chains: &[SampleSet], prefix: &str) -> Result<(), CliError> {
    for c in chains {
        let mut csv = Vec::new();
        c.write_csv(&mut csv).map_err(|e| CliError::Io(e.to_string()))?;
        art.add(format!("{prefix}{:03}.csv", c.meta.chain), csv);
        art.add_json(&format!("{prefix}{:03}.json", c.meta.chain), &c.metadata_json());
    }
    Ok(())
}

fn sampling_counters(art: &mut Artifacts, run: &ParallelRun, map_steps: usize) {
    let c = run.total_counters();
    art.counters.insert("mcmc_steps".into(), c.steps);
    art.counters.insert("potential_evaluations".into(), c.potential_evals);
    art.counters.insert("ode_steps".into(), c.potential_evals * map_steps as u64);
    art.counters.insert("bracket_shrinks".into(), c.shrinks);
    art.counters.insert("failed_proposals".into(), c.failed_proposals);
    art.counters.insert("max_shrinks_in_step".into(), c.max_shrinks_in_step);
}

fn cmd_train_prior(p: &Prepared) -> Result<Artifacts, CliError> {
    let mut art = Artifacts::default();
    let ds_spec = p.config.dataset.clone().expect("validated");
    let cfg = p.config.training.clone().expect("validated");
    let ds = art.time("dataset", || sample_dataset(ds_spec.kind, ds_spec.n, ds_spec.noise, ds_spec.seed));
    let trained = match art.time("training", || train(&ds, &cfg)) {
        Ok(t) => t,
        Err(TrainError::Diverged { iteration, loss, trace }) => {
            fs::create_dir_all(&p.out_dir).map_err(|e| io_err(&p.out_dir, e))?;
            let path = p.out_dir.join("loss_diverged.csv");
            let mut csv = Vec::new();
            write_loss_trace(&trace, &mut csv).map_err(|e| CliError::Io(e.to_string()))?;
            write_atomic(&path, &csv)?;
            return Err(CliError::Numeric(format!(
                "training diverged at iteration {iteration} (loss {loss}); trace written to {}",
                path.display()
            )));
        }
        Err(e) => return Err(CliError::Validation(e.to_string())),
    };
    let field = VelocityField::Mlp(trained.field);
    art.add("model.efvf", write_field(&field));
    let mut csv = Vec::new();
    write_loss_trace(&trained.loss_trace, &mut csv).map_err(|e| CliError::Io(e.to_string()))?;
    art.add("loss.csv", csv);
    let n = trained.loss_trace.len();
    let window = n.min(100);
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    art.report = serde_json::json!({
        "dataset": ds_spec,
        "iterations": n,
        "initial_loss": trained.loss_trace[0],
        "final_running_loss": avg(&trained.loss_trace[n - window..]),
        "parameters": match &field { VelocityField::Mlp(m) => m.params().len(), _ => 0 },
    });
    art.counters.insert("training_iterations".into(), n as u64);
    let report = art.report.clone();
    art.add_json("report.json", &report);
    Ok(art)
}

fn cmd_sample(p: &Prepared) -> Result<Artifacts, CliError> {
    let mut art = Artifacts::default();
    let target = p.target.as_ref().expect("validated");
    let chains = p.config.chains.clone().expect("validated");
    let run = art.time("sampling", || run_parallel_chains(target, &chains))?;
    chain_files(&mut art, &run.chains, "chain_")?;
    sampling_counters(&mut art, &run, target.map().steps());
    art.report = serde_json::json!({
        "chains": run.chains.len(),
        "retained_per_chain": chains.retained_count(),
        "diagnostics": run.diagnostics,
        "counters": run.total_counters(),
    });
    let report = art.report.clone();
    art.add_json("diagnostics.json", &report);
    Ok(art)
}

fn cmd_oracle_compare(p: &Prepared) -> Result<Artifacts, CliError> {
    let mut art = Artifacts::default();
    let target = p.target.as_ref().expect("validated");
    let chains = p.config.chains.clone().expect("validated");
    let spec = p.config.oracle.clone().unwrap_or_default();
    let grid = Grid::new(spec.lo, spec.hi, spec.resolution).map_err(|e| CliError::Validation(e.to_string()))?;
    let post = art
        .time("oracle", || grid_posterior(target, grid))
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let run = art.time("sampling", || run_parallel_chains(target, &chains))?;
    chain_files(&mut art, &run.chains, "chain_")?;
    sampling_counters(&mut art, &run, target.map().steps());

    let oracle_mean = [post.expectation(|_, x| x[0]), post.expectation(|_, x| x[1])];
    let oracle_var = [
        post.expectation(|_, x| (x[0] - oracle_mean[0]).powi(2)),
        post.expectation(|_, x| (x[1] - oracle_mean[1]).powi(2)),
    ];
    let mut lengths = spec.lengths.clone();
    if lengths.is_empty() {
        lengths.push(chains.retained_count());
    }
    lengths.sort_unstable();
    lengths.dedup();
    let mut rows = Vec::new();
    for &l in &lengths {
        let z: Vec<&Vec<f64>> = run.chains.iter().flat_map(|c| c.z.iter().take(l)).collect();
        let x: Vec<&Vec<f64>> = run.chains.iter().flat_map(|c| c.x.iter().take(l)).collect();
        let zs: Vec<&[f64]> = z.iter().map(|v| v.as_slice()).collect();
        let xs: Vec<&[f64]> = x.iter().map(|v| v.as_slice()).collect();
        let tv = tv_distance(&zs, &post);
        let m = moment_report(&xs, None).map_err(|e| CliError::Numeric(e.to_string()))?;
        rows.push(serde_json::json!({
            "length": l,
            "samples": xs.len(),
            "tv": tv,
            "mean": m.mean,
            "variance": m.variance,
            "mean_delta": [m.mean[0] - oracle_mean[0], m.mean[1] - oracle_mean[1]],
            "variance_delta": [m.variance[0] - oracle_var[0], m.variance[1] - oracle_var[1]],
            "mean_se": m.mean_se,
        }));
    }
    let mut grid_csv = Vec::new();
    post.write_csv(&mut grid_csv).map_err(|e| CliError::Io(e.to_string()))?;
    art.add("grid.csv", grid_csv);
    art.counters.insert("oracle_cells".into(), grid.cells() as u64);
    art.report = serde_json::json!({
        "grid": grid,
        "oracle_failed_cells": post.failed_cells(),
        "oracle_mean": oracle_mean,
        "oracle_variance": oracle_var,
        "diagnostics": run.diagnostics,
        "by_length": rows,
    });
    let report = art.report.clone();
    art.add_json("report.json", &report);
    Ok(art)
}

fn cmd_multifidelity(p: &Prepared) -> Result<Artifacts, CliError> {
    let mut art = Artifacts::default();
    let model = p.model.as_ref().expect("validated");
    let potential = p.config.potential.clone().expect("validated");
    let spec = p.config.multifidelity.clone().expect("validated");
    let scheme = p.config.transport.clone().unwrap_or_default().scheme;
    let chains = p.config.chains.clone().expect("validated");
    let num = |e: &dyn std::fmt::Display| CliError::Numeric(e.to_string());

    let pair = FidelityPair::new(model.field.clone(), scheme, spec.coarse_steps, spec.fine_steps)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let coarse = PullbackPotential::new(potential.clone(), pair.coarse().clone())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let run = art.time("sampling", || run_parallel_chains(&coarse, &chains))?;
    chain_files(&mut art, &run.chains, "chain_")?;
    sampling_counters(&mut art, &run, spec.coarse_steps);
    let w = art
        .time("reweighting", || reweight(&run.chains, &pair, &potential))
        .map_err(|e| num(&e))?;
    art.counters.insert("fine_evaluations".into(), w.meta.fine_evaluations);
    let est = weighted_estimate(&w.x_fine, &w.weights, Statistic::Mean, spec.bootstrap_replicates, p.seed)
        .map_err(|e| num(&e))?;
    let uniform = vec![1.0 / w.len() as f64; w.len()];
    let plain = weighted_estimate(&w.x_fine, &uniform, Statistic::Mean, spec.bootstrap_replicates, p.seed)
        .map_err(|e| num(&e))?;
    let oracle = match spec.oracle_resolution {
        Some(res) => {
            let fine = coarse.with_map(pair.fine().clone()).map_err(|e| num(&e))?;
            let grid = Grid::new(-5.0, 5.0, res).map_err(|e| CliError::Validation(e.to_string()))?;
            let post = art.time("oracle", || grid_posterior(&fine, grid)).map_err(|e| num(&e))?;
            let m = vec![post.expectation(|_, x| x[0]), post.expectation(|_, x| x[1])];
            let z: Vec<f64> = (0..2)
                .map(|k| (est.value[k] - m[k]) / est.standard_error[k])
                .collect();
            Some(serde_json::json!({ "resolution": res, "mean": m, "weighted_z_scores": z }))
        }
        None => None,
    };
    let mut csv = Vec::new();
    w.write_csv(&mut csv).map_err(|e| CliError::Io(e.to_string()))?;
    art.add("weighted.csv", csv);
    art.report = serde_json::json!({
        "reweighting": w.meta,
        "kish_ess_percent": 100.0 * w.meta.kish_ess,
        "weighted_mean": est,
        "unweighted_mean": plain,
        "fine_oracle": oracle,
        "diagnostics": run.diagnostics,
    });
    let report = art.report.clone();
    art.add_json("report.json", &report);
    Ok(art)
}

fn cmd_moons_demo(p: &Prepared) -> Result<Artifacts, CliError> {
    let mut art = Artifacts::default();
    let target = p.target.as_ref().expect("validated");
    let spec = p.config.demo.clone().unwrap_or_default();
    let dataset = p
        .config
        .dataset
        .as_ref()
        .map(|d| sample_dataset(d.kind, d.n, d.noise, d.seed));
    let out = art.time("demo", || demo::moons_demo(target, &spec, p.seed, dataset.as_ref()))?;
    let mut csv = Vec::new();
    demo::write_scatter(&out.scatter, &mut csv).map_err(|e| CliError::Io(e.to_string()))?;
    art.add("scatter.csv", csv);
    art.counters.insert("potential_evaluations".into(), out.report.potential_evaluations);
    art.report = serde_json::to_value(&out.report).expect("report serializes");
    art.add_json("report.json", &out.report);
    Ok(art)
}

/// Runs an already prepared experiment and writes its outputs.
pub fn execute(p: &Prepared) -> Result<RunManifest, CliError> {
    let t0 = Instant::now();
    let mut art = match p.kind {
        ExperimentKind::TrainPrior => cmd_train_prior(p)?,
        ExperimentKind::Sample => cmd_sample(p)?,
        ExperimentKind::OracleCompare => cmd_oracle_compare(p)?,
        ExperimentKind::Multifidelity => cmd_multifidelity(p)?,
        ExperimentKind::MoonsDemo => cmd_moons_demo(p)?,
    };
    let w0 = Instant::now();
    fs::create_dir_all(&p.out_dir).map_err(|e| io_err(&p.out_dir, e))?;
    let mut outputs = Vec::with_capacity(art.files.len());
    for (name, bytes) in &art.files {
        write_atomic(&p.out_dir.join(name), bytes)?;
        outputs.push(OutputEntry {
            path: name.clone(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }
    art.timings.insert("writing".into(), w0.elapsed().as_secs_f64());
    art.timings.insert("total".into(), t0.elapsed().as_secs_f64());
    let manifest = RunManifest {
        command: p.kind.name().into(),
        version: version_string(),
        seed: p.seed,
        config: serde_json::to_value(&p.config).expect("config serializes"),
        timings_seconds: art.timings,
        counters: art.counters,
        outputs,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(&p.out_dir.join(MANIFEST_NAME), &bytes)?;
    Ok(manifest)
}

/// Parses, validates and runs one command line invocation.
pub fn run(cli: Cli) -> Result<RunManifest, CliError> {
    let (kind, args) = cli.command.parts();
    let config = ExperimentConfig::load(&args.config)?;
    let base = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let prepared = prepare(kind, config, &base, args.seed, args.out.clone())?;
    let manifest = execute(&prepared)?;
    if !args.quiet {
        println!(
            "{} finished: {} files in {}",
            kind.name(),
            manifest.outputs.len(),
            prepared.out_dir.display()
        );
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prep(kind: ExperimentKind, text: &str) -> Result<Prepared, CliError> {
        let dir = tempfile::tempdir().unwrap();
        prepare(kind, ExperimentConfig::parse(text)?, dir.path(), None, None)
    }

    const CONJUGATE: &str = r#"
        [model]
        kind = "zero"
        dim = 2
        [potential]
        kind = "gaussian-observation"
        y = [1.0, 1.0]
        sigma = 1.0
        [chains]
        steps = 300
        burn_in = 100
        thin = 2
    "#;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Validation(String::new()).exit_code(), 2);
        assert_eq!(CliError::Numeric(String::new()).exit_code(), 3);
        assert_eq!(CliError::Io(String::new()).exit_code(), 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = ExperimentConfig::parse("[chains]\nstep = 10\n").unwrap_err();
        assert!(matches!(e, CliError::Validation(_)));
        assert!(ExperimentConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn validation_catches_bad_sections() {
        assert!(prep(ExperimentKind::Sample, CONJUGATE).is_ok());
        let missing_model = CONJUGATE.replace("[model]\n        kind = \"zero\"\n        dim = 2\n", "");
        assert!(matches!(prep(ExperimentKind::Sample, &missing_model), Err(CliError::Validation(_))));
        let file_model = CONJUGATE.replace("kind = \"zero\"\n        dim = 2", "kind = \"file\"\n        path = \"nope.efvf\"");
        assert!(matches!(prep(ExperimentKind::Sample, &file_model), Err(CliError::Validation(_))));
        let bad_sigma = CONJUGATE.replace("sigma = 1.0", "sigma = 0.0");
        assert!(matches!(prep(ExperimentKind::Sample, &bad_sigma), Err(CliError::Validation(_))));
        let bad_chain = CONJUGATE.replace("burn_in = 100", "burn_in = 300");
        assert!(matches!(prep(ExperimentKind::Sample, &bad_chain), Err(CliError::Validation(_))));
        let wrong_kind = format!("experiment = \"moons-demo\"\n{CONJUGATE}");
        assert!(matches!(prep(ExperimentKind::Sample, &wrong_kind), Err(CliError::Validation(_))));
        let train = "[dataset]\nkind = \"two-moons\"\n[training]\nhidden = [0]\n";
        assert!(matches!(prep(ExperimentKind::TrainPrior, train), Err(CliError::Validation(_))));
        let mf = format!("{CONJUGATE}\n[multifidelity]\ncoarse_steps = 10\nfine_steps = 5\n");
        assert!(matches!(prep(ExperimentKind::Multifidelity, &mf), Err(CliError::Validation(_))));
        let lengths = format!("{CONJUGATE}\n[oracle]\nlengths = [50, 101]\n");
        assert!(matches!(prep(ExperimentKind::OracleCompare, &lengths), Err(CliError::Validation(_))));
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::parse(&format!("seed = 3\n{CONJUGATE}")).unwrap();
        let p = prepare(ExperimentKind::Sample, cfg.clone(), dir.path(), Some(11), None).unwrap();
        assert_eq!(p.seed, 11);
        assert_eq!(p.config.chains.as_ref().unwrap().seed, 11);
        let p = prepare(ExperimentKind::Sample, cfg, dir.path(), None, None).unwrap();
        assert_eq!(p.config.chains.as_ref().unwrap().seed, 3);
        assert_eq!(p.out_dir, dir.path().join("out"));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
