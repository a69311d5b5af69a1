//! LSTM tire-force estimator: IMU sequence in, eight wheel forces out.

pub mod data;
pub mod model;
pub mod train;

use std::collections::VecDeque;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{generate_dataset, Dataset, DatasetSpec};
pub use model::{Arch, LstmModel, Normalization, N_IN, N_OUT};
pub use train::{train, TrainConfig, TrainHistory, HYPERPARAMETER_NAMES};

use crate::domain::{ImuSample, TireForceSet, VehicleParams};
use crate::{Error, Result};

/// Samples the estimator should see before its output is trusted.
pub const WARMUP: usize = 200;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    param_count: usize,
    model: LstmModel,
}

impl LstmModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint { version: CHECKPOINT_VERSION, param_count: self.params.len(), model: self.clone() };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.model.arch.validate()?;
        if ck.model.params.len() != ck.model.arch.param_count() || ck.param_count != ck.model.params.len() {
            return Err(Error::Config("checkpoint parameter count does not match its shape".into()));
        }
        if ck.model.norm.in_std.iter().chain(&ck.model.norm.out_std).any(|&s| !(s > 0.0)) {
            return Err(Error::Config("checkpoint normalization has a non-positive std".into()));
        }
        Ok(ck.model)
    }
}

/// Generates the dataset and trains a fresh model on it. Initialization and
/// batch order are seeded by `seed`.
pub fn fit(
    spec: &DatasetSpec,
    arch: Arch,
    cfg: &TrainConfig,
    params: &VehicleParams,
    seed: u64,
) -> Result<(LstmModel, Dataset, TrainHistory)> {
    let data = generate_dataset(spec, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = LstmModel::init(arch, &mut rng);
    let history = train(&mut model, &data, cfg, &mut rng)?;
    Ok((model, data, history))
}

/// Small network on the desk dataset; a couple of minutes on a laptop.
pub fn fit_desk(params: &VehicleParams, seed: u64, threads: usize) -> Result<(LstmModel, Dataset, TrainHistory)> {
    let cfg = TrainConfig { threads, ..TrainConfig::desk() };
    fit(&DatasetSpec::desk(), Arch { hidden: 8, layers: 1 }, &cfg, params, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceEstimate {
    /// longitudinal and lateral forces; vertical loads are left at zero
    pub forces: TireForceSet,
    /// an input lay more than 10 std from the training mean
    pub out_of_range: bool,
    /// fewer than `WARMUP` real samples have been seen
    pub warming_up: bool,
}

/// Denormalized last-step forces for a raw IMU window.
pub fn estimate_forces(model: &LstmModel, window: &[[f64; N_IN]]) -> Result<ForceEstimate> {
    let (y, flag) = model.predict_last(window)?;
    Ok(ForceEstimate { forces: TireForceSet::from_channels(&y), out_of_range: flag, warming_up: window.len() < WARMUP })
}

/// Sliding IMU window for online estimation. Before it fills, the window
/// is padded with copies of the first sample.
#[derive(Debug, Clone)]
pub struct ImuWindow {
    len: usize,
    buf: VecDeque<[f64; N_IN]>,
    seen: usize,
}

impl ImuWindow {
    pub fn new(len: usize) -> Self {
        ImuWindow { len: len.max(1), buf: VecDeque::with_capacity(len.max(1)), seen: 0 }
    }

    pub fn push(&mut self, s: &ImuSample) {
        let a = s.to_array();
        if self.buf.is_empty() {
            self.buf.extend(std::iter::repeat_n(a, self.len));
        } else {
            self.buf.pop_front();
            self.buf.push_back(a);
        }
        self.seen += 1;
    }

    pub fn samples_seen(&self) -> usize {
        self.seen
    }

    pub fn estimate(&self, model: &LstmModel) -> Result<ForceEstimate> {
        if self.buf.is_empty() {
            return Err(Error::Config("IMU window is empty".into()));
        }
        let w: Vec<[f64; N_IN]> = self.buf.iter().copied().collect();
        let mut e = estimate_forces(model, &w)?;
        e.warming_up = self.seen < WARMUP;
        Ok(e)
    }
}
