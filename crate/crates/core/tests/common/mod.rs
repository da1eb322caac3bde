//! Shared fixtures: a two-moons velocity field trained once per build and
//! cached on disk, plus the conditional problem built on it.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};

use essflow::flow_training::{sample_two_moons, train, MlpVelocityField, ToyDataset, TrainConfig};
use essflow::potentials::{Observation, Potential, PullbackPotential};
use essflow::transport::{load_field, write_field, Scheme, TransportMap, VelocityField};

pub const MOONS_N: usize = 5000;
pub const MOONS_NOISE: f64 = 0.05;
pub const MOONS_SEED: u64 = 0;

/// Steps of the sampling map; rk4 error against N=1000 is about 2e-5.
pub const SAMPLING_STEPS: usize = 20;
pub const OBS_Y: f64 = 0.25;
pub const OBS_SIGMA: f64 = 0.1;

pub fn moons_training_config() -> TrainConfig {
    TrainConfig {
        hidden: vec![64, 64, 64],
        batch_size: 512,
        iterations: 40_000,
        learning_rate: 1e-3,
        seed: 0,
        ..TrainConfig::default()
    }
}

pub fn moons_dataset() -> ToyDataset {
    sample_two_moons(MOONS_N, MOONS_NOISE, MOONS_SEED)
}

pub struct Trained {
    pub field: VelocityField,
    pub loss_trace: Vec<f64>,
}

fn cache_path() -> PathBuf {
    let cfg = moons_training_config();
    let tag = format!(
        "moons_{}_{}_{}_{}_{}.efvf",
        cfg.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("x"),
        cfg.iterations,
        cfg.batch_size,
        cfg.seed,
        env!("CARGO_PKG_VERSION"),
    );
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(tag)
}

fn publish(path: &Path, bytes: &[u8]) {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).expect("write fixture");
    std::fs::rename(&tmp, path).expect("publish fixture");
}

fn load_cached() -> Option<Trained> {
    let path = cache_path();
    let field = load_field(&path).ok()?;
    let text = std::fs::read_to_string(path.with_extension("loss")).ok()?;
    let loss_trace = text.lines().map(|l| l.parse().ok()).collect::<Option<Vec<f64>>>()?;
    (loss_trace.len() == moons_training_config().iterations).then_some(Trained { field, loss_trace })
}

fn train_fresh() -> Trained {
    let trained = train(&moons_dataset(), &moons_training_config()).expect("fixture training");
    let field = VelocityField::Mlp(trained.field);
    let path = cache_path();
    let loss: String = trained.loss_trace.iter().map(|l| format!("{l:e}\n")).collect();
    publish(&path.with_extension("loss"), loss.as_bytes());
    publish(&path, &write_field(&field));
    Trained {
        field,
        loss_trace: trained.loss_trace,
    }
}

/// The trained two-moons field and its loss trace, cached on disk.
pub fn moons_trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| load_cached().unwrap_or_else(train_fresh))
}

pub fn moons_field() -> &'static VelocityField {
    &moons_trained().field
}

pub fn moons_mlp() -> &'static MlpVelocityField {
    match moons_field() {
        VelocityField::Mlp(m) => m,
        _ => unreachable!(),
    }
}

pub fn moons_map(steps: usize) -> TransportMap {
    TransportMap::new(moons_field().clone(), Scheme::Rk4, steps).unwrap()
}

/// Gaussian observation of the data y-coordinate at 0.25, which both
/// branches cross.
pub fn moons_potential() -> Potential {
    Potential::gaussian(Observation::Coordinates { indices: vec![1] }, vec![OBS_Y], OBS_SIGMA)
}

pub fn moons_target(steps: usize) -> PullbackPotential {
    PullbackPotential::new(moons_potential(), moons_map(steps)).unwrap()
}

/// Serializes heavy tests so each one gets the whole machine.
pub fn heavy() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}
