//! Training data: IMU inputs and true tire forces recorded from the plant
//! under excitation driving at 1 kHz.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Normalization, N_IN, N_OUT};
use crate::domain::{deg, ControlCommand, PerWheel, VehicleParams, MAX_STEER};
use crate::noise::NoiseCase;
use crate::plant::{sample_imu, Plant, PlantState, RoadProfile};
use crate::{Error, Result};

/// Plant sampling period.
pub const SAMPLE_DT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excitation {
    /// total amplitude of the front-steer sinusoids, rad
    pub steer_amp: f64,
    /// peak lane-change steer, rad
    pub lane_change_amp: f64,
    /// mean time between lane changes, s
    pub lane_change_every: f64,
    /// amplitude of independent rear steering, rad
    pub rear_amp: f64,
    /// amplitude of the left/right differential torque, N m
    pub torque_amp: f64,
}

impl Default for Excitation {
    fn default() -> Self {
        Excitation {
            steer_amp: deg(1.2),
            lane_change_amp: deg(2.0),
            lane_change_every: 4.0,
            rear_amp: deg(0.6),
            torque_amp: 150.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub train: usize,
    pub test: usize,
    pub validation: usize,
    pub speed: f64,
    /// distance after which an episode restarts at X = 0
    pub road_length: f64,
    pub road: RoadProfile,
    pub noise: NoiseCase,
    pub seed: u64,
    pub excitation: Excitation,
}

impl DatasetSpec {
    /// 120k samples on the 1.8 km road with a low-friction section.
    pub fn paper() -> Self {
        DatasetSpec {
            train: 90_000,
            test: 20_000,
            validation: 10_000,
            speed: 22.22,
            road_length: 1800.0,
            road: RoadProfile::with_patch(600.0, 1000.0, 0.2, 0.85),
            noise: NoiseCase::None,
            seed: 7,
            excitation: Excitation::default(),
        }
    }

    pub fn desk() -> Self {
        DatasetSpec {
            train: 9_000,
            test: 2_000,
            validation: 1_000,
            road_length: 400.0,
            road: RoadProfile::with_patch(90.0, 170.0, 0.2, 0.85),
            ..Self::paper()
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.test + self.validation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: Option<DatasetSpec>,
    pub train: Range<usize>,
    pub test: Range<usize>,
    pub validation: Range<usize>,
    /// sample index at which each plant episode starts
    pub episode_starts: Vec<usize>,
}

/// Raw series plus contiguous, disjoint split ranges and the
/// normalization fitted on the training range.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<[f64; N_IN]>,
    pub targets: Vec<[f64; N_OUT]>,
    pub train: Range<usize>,
    pub test: Range<usize>,
    pub validation: Range<usize>,
    pub norm: Normalization,
    pub manifest: Manifest,
}

impl Dataset {
    /// Splits a series as train, then test, then validation.
    pub fn from_series(
        inputs: Vec<[f64; N_IN]>,
        targets: Vec<[f64; N_OUT]>,
        train: usize,
        test: usize,
        validation: usize,
    ) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::LengthMismatch(inputs.len(), targets.len()));
        }
        if train == 0 || train + test + validation > inputs.len() {
            return Err(Error::Config(format!(
                "split {train}/{test}/{validation} does not fit {} samples",
                inputs.len()
            )));
        }
        let tr = 0..train;
        let te = train..train + test;
        let va = train + test..train + test + validation;
        let norm = Normalization::fit(&inputs[tr.clone()], &targets[tr.clone()]);
        let manifest = Manifest { spec: None, train: tr.clone(), test: te.clone(), validation: va.clone(), episode_starts: vec![0] };
        Ok(Dataset { inputs, targets, train: tr, test: te, validation: va, norm, manifest })
    }

    pub fn normalized(&self, r: Range<usize>) -> (Vec<[f64; N_IN]>, Vec<[f64; N_OUT]>) {
        (
            self.inputs[r.clone()].iter().map(|x| self.norm.input(x)).collect(),
            self.targets[r].iter().map(|y| self.norm.target(y)).collect(),
        )
    }

    /// Writes `dataset.csv` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("dataset.csv"))?;
        let mut header = vec!["index".to_string()];
        header.extend(crate::domain::IMU_CHANNELS.iter().map(|s| s.to_string()));
        header.extend(crate::domain::FORCE_CHANNELS.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for (i, (x, y)) in self.inputs.iter().zip(&self.targets).enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(x.iter().chain(y.iter()).map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut r = csv::Reader::from_path(dir.join("dataset.csv"))?;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad dataset value {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != N_IN + N_OUT {
                return Err(Error::Config(format!("dataset row has {} values", vals.len())));
            }
            inputs.push(std::array::from_fn(|i| vals[i]));
            targets.push(std::array::from_fn(|i| vals[N_IN + i]));
        }
        let mut d = Dataset::from_series(inputs, targets, manifest.train.len(), manifest.test.len(), manifest.validation.len())?;
        if d.train != manifest.train || d.test != manifest.test || d.validation != manifest.validation {
            return Err(Error::Config("manifest split boundaries are not contiguous from 0".into()));
        }
        d.manifest = manifest;
        Ok(d)
    }
}

/// Open-loop excitation for one episode: a sum of sinusoids on the front
/// axle, single-sine lane changes, independent rear steering and a
/// left/right torque difference.
#[derive(Debug, Clone)]
struct EpisodeDriver {
    front: Vec<(f64, f64, f64)>,
    rear: (f64, f64, f64),
    torque: (f64, f64, f64),
    /// (start time, duration, amplitude)
    lane_changes: Vec<(f64, f64, f64)>,
}

impl EpisodeDriver {
    fn new<R: Rng + ?Sized>(ex: &Excitation, horizon: f64, rng: &mut R) -> Self {
        let n = 3;
        let front = (0..n)
            .map(|_| (ex.steer_amp / n as f64, rng.random_range(0.1..1.2), rng.random_range(0.0..2.0 * PI)))
            .collect();
        let rear = (ex.rear_amp, rng.random_range(0.1..1.0), rng.random_range(0.0..2.0 * PI));
        let torque = (ex.torque_amp, rng.random_range(0.2..1.5), rng.random_range(0.0..2.0 * PI));
        let mut lane_changes = Vec::new();
        let mut t = rng.random_range(0.5..ex.lane_change_every.max(1.0));
        while t < horizon {
            let dur = rng.random_range(2.0..4.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            lane_changes.push((t, dur, sign * rng.random_range(0.4..1.0) * ex.lane_change_amp));
            t += dur + rng.random_range(0.5..2.0 * ex.lane_change_every.max(1.0));
        }
        EpisodeDriver { front, rear, torque, lane_changes }
    }

    fn command(&self, plant: &Plant, s: &PlantState, speed: f64, mu: f64) -> ControlCommand {
        let t = s.t;
        let p = &plant.params;
        let mut df: f64 = self.front.iter().map(|(a, f, ph)| a * (2.0 * PI * f * t + ph).sin()).sum();
        for &(t0, dur, a) in &self.lane_changes {
            if t >= t0 && t < t0 + dur {
                df += a * (2.0 * PI * (t - t0) / dur).sin();
            }
        }
        // keep heading and position bounded, and back off when the yaw rate
        // approaches what the road can carry
        df -= 0.5 * s.yaw + 0.01 * s.y;
        let gamma_max = 0.85 * mu * p.g / s.vx.max(1.0);
        let over = s.yaw_rate.abs() - 0.8 * gamma_max;
        if over > 0.0 {
            df -= s.yaw_rate.signum() * 2.0 * over;
        }
        let dr = self.rear.0 * (2.0 * PI * self.rear.1 * t + self.rear.2).sin();
        let df = df.clamp(-MAX_STEER, MAX_STEER);
        let dr = dr.clamp(-MAX_STEER, MAX_STEER);
        let base = plant.cruise_torque(s, speed, 1.0);
        let dt = self.torque.0 * (2.0 * PI * self.torque.1 * t + self.torque.2).sin();
        let mut torque = base;
        for w in crate::domain::WheelId::ALL {
            torque[w] += if w.is_left() { -dt } else { dt };
        }
        ControlCommand { delta: PerWheel([df, df, dr, dr]), torque }
    }
}

/// Runs excitation episodes on the plant until the requested number of
/// samples is collected.
pub fn generate_dataset(spec: &DatasetSpec, params: &VehicleParams) -> Result<Dataset> {
    spec.road.validate()?;
    if spec.speed <= 1.0 || spec.road_length <= 0.0 {
        return Err(Error::Config("dataset speed and road length must be positive".into()));
    }
    let plant = Plant::new(*params);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.total();
    let mut inputs = Vec::with_capacity(total);
    let mut targets = Vec::with_capacity(total);
    let mut episode_starts = Vec::new();
    while inputs.len() < total {
        episode_starts.push(inputs.len());
        let horizon = spec.road_length / spec.speed + 5.0;
        let driver = EpisodeDriver::new(&spec.excitation, horizon, &mut rng);
        let mut s = PlantState::cruising(spec.speed, params);
        while inputs.len() < total && s.x < spec.road_length {
            let mu = spec.road.mu_at(s.x);
            let cmd = driver.command(&plant, &s, spec.speed, mu);
            let f = plant.forces_at(&s, &cmd, &spec.road)?;
            inputs.push(sample_imu(&s, spec.noise, &mut rng).to_array());
            targets.push(f.channels());
            s = plant.step(&s, &cmd, &spec.road, SAMPLE_DT)?;
        }
    }
    let mut d = Dataset::from_series(inputs, targets, spec.train, spec.test, spec.validation)?;
    d.manifest.spec = Some(spec.clone());
    d.manifest.episode_starts = episode_starts;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::default_params;

    fn small_spec() -> DatasetSpec {
        DatasetSpec { train: 1500, test: 300, validation: 200, road_length: 40.0, ..DatasetSpec::desk() }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let d = generate_dataset(&small_spec(), &default_params()).unwrap();
        assert_eq!(d.inputs.len(), 2000);
        assert_eq!(d.train.len(), 1500);
        assert_eq!(d.test.len(), 300);
        assert_eq!(d.validation.len(), 200);
        assert!(d.train.end <= d.test.start && d.test.end <= d.validation.start);
        // 2 s at 22 m/s covers 44 m, so a 40 m road needs a second episode
        assert_eq!(d.manifest.episode_starts.len(), 2);
    }

    #[test]
    fn train_split_normalizes_to_unit() {
        let d = generate_dataset(&small_spec(), &default_params()).unwrap();
        let (x, y) = d.normalized(d.train.clone());
        for i in 0..N_IN {
            let m = x.iter().map(|r| r[i]).sum::<f64>() / x.len() as f64;
            let v = x.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / x.len() as f64;
            assert!(m.abs() < 1e-9, "channel {i} mean {m}");
            assert!((v - 1.0).abs() < 1e-9, "channel {i} var {v}");
        }
        assert!(y.iter().all(|r| r.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn paper_preset_size() {
        assert_eq!(DatasetSpec::paper().total(), 120_000);
        assert_eq!(DatasetSpec::desk().total(), 12_000);
    }

    #[test]
    fn save_load_roundtrip() {
        let d = generate_dataset(&DatasetSpec { train: 300, test: 50, validation: 50, ..small_spec() }, &default_params()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let e = Dataset::load(dir.path()).unwrap();
        assert_eq!(e.train, d.train);
        assert_eq!(e.manifest, d.manifest);
        for (a, b) in d.targets.iter().zip(&e.targets) {
            for o in 0..N_OUT {
                assert!((a[o] - b[o]).abs() <= 1e-12 * a[o].abs().max(1.0));
            }
        }
    }

    #[test]
    fn excitation_covers_low_friction() {
        let d = generate_dataset(&DatasetSpec::desk(), &default_params()).unwrap();
        // lateral forces on the low-friction section stay within 0.2 Fz
        let max_fy = d.targets.iter().map(|r| r[4].abs()).fold(0.0, f64::max);
        assert!(max_fy > 500.0, "excitation too weak: {max_fy}");
    }
}
