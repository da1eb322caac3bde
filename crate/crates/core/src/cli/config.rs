//! Experiment configuration files (TOML, one section per component).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::ess_sampler::ChainConfig;
use crate::flow_training::{DatasetKind, TrainConfig};
use crate::oracle::{Grid, MIN_RESOLUTION};
use crate::potentials::{Potential, PullbackPotential};
use crate::transport::{load_field, Scheme, TransportMap, VelocityField, DEFAULT_STEPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    TrainPrior,
    Sample,
    OracleCompare,
    Multifidelity,
    MoonsDemo,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::TrainPrior => "train-prior",
            ExperimentKind::Sample => "sample",
            ExperimentKind::OracleCompare => "oracle-compare",
            ExperimentKind::Multifidelity => "multifidelity",
            ExperimentKind::MoonsDemo => "moons-demo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::TwoMoons,
            n: 5000,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Where the velocity field comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// A saved field file; relative paths resolve against the config file.
    File { path: PathBuf },
    Affine { mean: Vec<f64>, scale: f64 },
    Rotation { dim: usize, rate: f64 },
    Zero { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSpec {
    pub scheme: Scheme,
    pub steps: usize,
}

impl Default for TransportSpec {
    fn default() -> Self {
        Self {
            scheme: Scheme::Rk4,
            steps: DEFAULT_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
    /// Chain lengths (post burn-in steps per chain) at which to report TV.
    pub lengths: Vec<usize>,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            lo: -5.0,
            hi: 5.0,
            resolution: 64,
            lengths: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultifidelitySpec {
    pub coarse_steps: usize,
    pub fine_steps: usize,
    pub bootstrap_replicates: usize,
    /// Grid resolution of the fine-map oracle, for 2-dimensional problems.
    pub oracle_resolution: Option<usize>,
}

impl Default for MultifidelitySpec {
    fn default() -> Self {
        Self {
            coarse_steps: 50,
            fine_steps: 1000,
            bootstrap_replicates: 1000,
            oracle_resolution: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSpec {
    pub trials: usize,
    pub baseline_step_size: f64,
    pub baseline_iterations: usize,
    pub ess_steps: usize,
    pub ess_burn_in: usize,
    pub oracle_resolution: usize,
    pub prior_samples: usize,
}

impl Default for DemoSpec {
    fn default() -> Self {
        Self {
            trials: 200,
            baseline_step_size: 2e-3,
            baseline_iterations: 100,
            ess_steps: 300,
            ess_burn_in: 50,
            oracle_resolution: 64,
            prior_samples: 5000,
        }
    }
}

impl DemoSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Validation(format!("[demo] {m}")));
        if self.trials == 0 {
            return bad("trials must be positive");
        }
        if !(self.baseline_step_size > 0.0 && self.baseline_step_size.is_finite()) {
            return bad("baseline_step_size must be positive");
        }
        if self.ess_burn_in >= self.ess_steps {
            return bad("ess_burn_in must be less than ess_steps");
        }
        if self.oracle_resolution < MIN_RESOLUTION {
            return bad("oracle_resolution must be at least 32");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional guard: must match the subcommand when present.
    #[serde(default)]
    pub experiment: Option<ExperimentKind>,
    /// Root seed for training, chains and bootstraps; `--seed` overrides it.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub training: Option<TrainConfig>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub transport: Option<TransportSpec>,
    #[serde(default)]
    pub potential: Option<Potential>,
    #[serde(default)]
    pub chains: Option<ChainConfig>,
    #[serde(default)]
    pub oracle: Option<OracleSpec>,
    #[serde(default)]
    pub multifidelity: Option<MultifidelitySpec>,
    #[serde(default)]
    pub demo: Option<DemoSpec>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies a root seed to every seeded section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        if let Some(t) = &mut self.training {
            t.seed = seed;
        }
        if let Some(c) = &mut self.chains {
            c.seed = seed;
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.seed
            .or(self.chains.as_ref().map(|c| c.seed))
            .or(self.training.as_ref().map(|t| t.seed))
            .unwrap_or(0)
    }

    fn require<'a, T>(section: &'a Option<T>, name: &str, kind: ExperimentKind) -> Result<&'a T, CliError> {
        section.as_ref().ok_or_else(|| {
            CliError::Validation(format!("{} needs a [{name}] section", kind.name()))
        })
    }
}

/// Model and transport resolved against the filesystem.
#[derive(Debug, Clone)]
pub struct ResolvedModel {
    pub field: VelocityField,
    pub source: String,
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn resolve_model(spec: &ModelSpec, base: &Path) -> Result<ResolvedModel, CliError> {
    let invalid = |e: crate::transport::TransportError| CliError::Validation(format!("[model] {e}"));
    Ok(match spec {
        ModelSpec::File { path } => {
            let full = resolve_path(base, path);
            if !full.is_file() {
                return Err(CliError::Validation(format!(
                    "[model] file {} does not exist",
                    full.display()
                )));
            }
            let field = load_field(&full)
                .map_err(|e| CliError::Io(format!("loading model {}: {e}", full.display())))?;
            ResolvedModel {
                field,
                source: full.display().to_string(),
            }
        }
        ModelSpec::Affine { mean, scale } => ResolvedModel {
            field: VelocityField::affine(mean.clone(), *scale).map_err(invalid)?,
            source: "affine".into(),
        },
        ModelSpec::Rotation { dim, rate } => ResolvedModel {
            field: VelocityField::rotation(*dim, *rate).map_err(invalid)?,
            source: "rotation".into(),
        },
        ModelSpec::Zero { dim } => {
            if *dim == 0 {
                return Err(CliError::Validation("[model] dimension must be positive".into()));
            }
            ResolvedModel {
                field: VelocityField::zero(*dim),
                source: "zero".into(),
            }
        }
    })
}

/// Everything a command needs, checked before any computation starts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: Option<ResolvedModel>,
    pub map: Option<TransportMap>,
    pub target: Option<PullbackPotential>,
}

/// Validates `config` for `kind`; `base` is the directory of the config file.
pub fn prepare(
    kind: ExperimentKind,
    mut config: ExperimentConfig,
    base: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<Prepared, CliError> {
    if let Some(k) = config.experiment {
        if k != kind {
            return Err(CliError::Validation(format!(
                "config is for {} but the command is {}",
                k.name(),
                kind.name()
            )));
        }
    }
    if let Some(s) = seed_override.or(config.seed) {
        config.apply_seed(s);
    }
    let seed = config.root_seed();
    let out_dir = match (out_override, &config.out_dir) {
        (Some(o), _) => o,
        (None, Some(o)) => resolve_path(base, o),
        (None, None) => base.join("out"),
    };

    let mut prepared = Prepared {
        kind,
        config: config.clone(),
        seed,
        out_dir,
        model: None,
        map: None,
        target: None,
    };

    if kind == ExperimentKind::TrainPrior {
        let ds = ExperimentConfig::require(&config.dataset, "dataset", kind)?;
        if ds.n < 1000 {
            return Err(CliError::Validation(format!(
                "[dataset] training needs at least 1000 points, got {}",
                ds.n
            )));
        }
        if !(ds.noise >= 0.0 && ds.noise.is_finite()) {
            return Err(CliError::Validation("[dataset] noise must be nonnegative".into()));
        }
        let t = ExperimentConfig::require(&config.training, "training", kind)?;
        t.validate().map_err(|e| CliError::Validation(format!("[training] {e}")))?;
        return Ok(prepared);
    }

    let model = resolve_model(ExperimentConfig::require(&config.model, "model", kind)?, base)?;
    let ts = config.transport.clone().unwrap_or_default();
    let map = TransportMap::new(model.field.clone(), ts.scheme, ts.steps)
        .map_err(|e| CliError::Validation(format!("[transport] {e}")))?;
    let potential = ExperimentConfig::require(&config.potential, "potential", kind)?;
    let target = PullbackPotential::new(potential.clone(), map.clone())
        .map_err(|e| CliError::Validation(format!("[potential] {e}")))?;
    let dim = map.dim();

    match kind {
        ExperimentKind::Sample | ExperimentKind::OracleCompare | ExperimentKind::Multifidelity => {
            let chains = ExperimentConfig::require(&config.chains, "chains", kind)?;
            chains
                .validate()
                .map_err(|e| CliError::Validation(format!("[chains] {e}")))?;
            if let Some(z) = &chains.init {
                if z.len() != dim {
                    return Err(CliError::Validation(format!(
                        "[chains] init has {} entries, model dimension is {dim}",
                        z.len()
                    )));
                }
            }
        }
        _ => {}
    }
    match kind {
        ExperimentKind::OracleCompare => {
            if dim != 2 {
                return Err(CliError::Validation(format!(
                    "oracle-compare needs a 2-dimensional model, got {dim}"
                )));
            }
            let o = config.oracle.clone().unwrap_or_default();
            let grid = Grid::new(o.lo, o.hi, o.resolution)
                .map_err(|e| CliError::Validation(format!("[oracle] {e}")))?;
            if grid.resolution < MIN_RESOLUTION {
                return Err(CliError::Validation(format!(
                    "[oracle] resolution must be at least {MIN_RESOLUTION}"
                )));
            }
            let chains = config.chains.as_ref().expect("checked above");
            let available = chains.retained_count();
            if let Some(l) = o.lengths.iter().find(|&&l| l == 0 || l > available) {
                return Err(CliError::Validation(format!(
                    "[oracle] length {l} is outside 1..={available} retained samples per chain"
                )));
            }
        }
        ExperimentKind::Multifidelity => {
            let m = ExperimentConfig::require(&config.multifidelity, "multifidelity", kind)?;
            if m.coarse_steps == 0 || m.fine_steps < m.coarse_steps {
                return Err(CliError::Validation(format!(
                    "[multifidelity] need 1 <= coarse_steps <= fine_steps, got {} and {}",
                    m.coarse_steps, m.fine_steps
                )));
            }
            if m.bootstrap_replicates < 2 {
                return Err(CliError::Validation(
                    "[multifidelity] bootstrap_replicates must be at least 2".into(),
                ));
            }
            if let Some(r) = m.oracle_resolution {
                if dim != 2 || r < MIN_RESOLUTION {
                    return Err(CliError::Validation(format!(
                        "[multifidelity] oracle needs a 2-dimensional model and resolution >= {MIN_RESOLUTION}"
                    )));
                }
            }
        }
        ExperimentKind::MoonsDemo => {
            if dim != 2 {
                return Err(CliError::Validation(format!(
                    "moons-demo needs a 2-dimensional model, got {dim}"
                )));
            }
            config.demo.clone().unwrap_or_default().validate()?;
        }
        _ => {}
    }
    prepared.model = Some(model);
    prepared.map = Some(map);
    prepared.target = Some(target);
    Ok(prepared)
}
