//! Closed-loop executive: APF reference, LTV-MPC steering, sliding-mode
//! yaw moment and torque allocation around the plant, with a selectable
//! tire-force estimator.

pub mod io;
pub mod suite;
pub mod svg;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apf::{rollout_reference, FieldParams, ReferencePoint, RolloutStart};
use crate::domain::{default_params, ControlCommand, PerWheel, TireForceSet, VehicleParams};
use crate::dyc::{allocate_torques, desired_yaw_rate, yaw_moment, SmcConfig, YawRefState};
use crate::ekf::{sample_measurement, Ekf, EkfConfig, EkfInput, EkfMeasurement};
use crate::lstm::{ImuWindow, LstmModel};
use crate::ltv_model::{advance_sideslip, steering_perwheel, CtrlState, SideslipConfig, SideslipEstimate, Vec4};
use crate::metrics::{channel_rmse, path_departure, RunMetrics};
use crate::mpc::{MpcConfig, MpcController};
use crate::noise::NoiseCase;
use crate::plant::{sample_imu, vertical_loads, Plant, PlantState, RoadProfile};
use crate::{Error, Result};

/// Plant integration step inside one control period.
pub const PLANT_DT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Truth,
    Ekf,
    Lstm,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Truth => "truth",
            EstimatorKind::Ekf => "ekf",
            EstimatorKind::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truth" => Ok(EstimatorKind::Truth),
            "ekf" => Ok(EstimatorKind::Ekf),
            "lstm" => Ok(EstimatorKind::Lstm),
            _ => Err(Error::Config(format!("unknown estimator {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// initial and target speed, m/s
    pub speed: f64,
    /// simulated time, s
    pub duration: f64,
    pub road_length: f64,
    pub road: RoadProfile,
    pub field: FieldParams,
    pub estimator: EstimatorKind,
    /// checkpoint used when the estimator is the LSTM
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    /// IMU samples fed to the LSTM per estimate
    pub lstm_window: usize,
    pub noise: NoiseCase,
    pub seed: u64,
    pub mpc: MpcConfig,
    pub smc: SmcConfig,
    pub ekf: EkfConfig,
    pub sideslip: SideslipConfig,
    /// fixed friction level for the yaw-rate reference; the road value
    /// under the vehicle when unset
    #[serde(default)]
    pub mu_hat: Option<f64>,
    /// proportional speed-hold gain, 1/s
    pub cruise_gain: f64,
    /// per-wheel drive torque limit, N m
    pub torque_max: f64,
    /// disable the corrective yaw moment (steering-only control)
    #[serde(default)]
    pub dyc_off: bool,
    /// yaw rate at t = 0, rad/s; nonzero values start the yaw controller in
    /// its reaching phase
    #[serde(default)]
    pub initial_yaw_rate: f64,
    pub vehicle: VehicleParams,
}

impl Scenario {
    /// 10 s at 80 km/h on a 400 m road with a low-friction section under
    /// the avoidance manoeuvre.
    pub fn desk() -> Self {
        let speed = 22.22;
        Scenario {
            name: "desk".into(),
            speed,
            duration: 10.0,
            road_length: 400.0,
            road: RoadProfile::with_patch(60.0, 110.0, 0.2, 0.85),
            field: FieldParams::standard(0.0, speed, 50.0),
            estimator: EstimatorKind::Truth,
            model_path: None,
            lstm_window: 256,
            noise: NoiseCase::None,
            seed: 1,
            mpc: MpcConfig { n_p: 60, ..MpcConfig::default() },
            smc: SmcConfig { k1: 10_000.0, ..SmcConfig::default() },
            ekf: EkfConfig::default(),
            sideslip: SideslipConfig::default(),
            mu_hat: None,
            cruise_gain: 1.0,
            torque_max: 1500.0,
            dyc_off: false,
            initial_yaw_rate: 0.0,
            vehicle: default_params(),
        }
    }

    /// Full 1.8 km road; the evaluation still covers the first 10 s.
    pub fn paper() -> Self {
        Scenario { name: "paper".into(), road_length: 1800.0, lstm_window: 6553, ..Self::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected paper or desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.road.validate()?;
        self.field.validate()?;
        self.mpc.validate()?;
        self.smc.validate()?;
        if !(self.speed > 1.0 && self.duration > 0.0 && self.road_length > 0.0) {
            return Err(Error::Config("speed, duration and road length must be positive".into()));
        }
        if !(self.mu_hat.is_none_or(|m| m > 0.0) && self.cruise_gain >= 0.0 && self.torque_max > 0.0) {
            return Err(Error::Config("mu_hat and torque_max must be positive, cruise gain non-negative".into()));
        }
        if self.lstm_window == 0 {
            return Err(Error::Config("LSTM window must be positive".into()));
        }
        let ratio = self.vehicle.dt / PLANT_DT;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::Config(format!("control period {} is not a multiple of 1 ms", self.vehicle.dt)));
        }
        if self.estimator == EstimatorKind::Lstm {
            match &self.model_path {
                Some(p) if p.exists() => {}
                Some(p) => return Err(Error::Config(format!("LSTM checkpoint {} does not exist", p.display()))),
                None => return Err(Error::Config("LSTM estimator needs model_path".into())),
            }
        }
        Ok(())
    }
}

/// One control period's snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    pub beta: f64,
    pub beta_hat: f64,
    pub y_ref: f64,
    pub phi_ref: f64,
    pub mu: f64,
    pub delta: [f64; 4],
    pub torque: [f64; 4],
    pub m_z: f64,
    pub s: f64,
    pub gamma_des: f64,
    pub force_true: [f64; 8],
    /// plant vertical loads, N
    pub fz: [f64; 4],
    pub force_est: [f64; 8],
    pub mpc_cost: f64,
    pub qp_iters: usize,
    pub mpc_held: bool,
}

/// Sample variances of the noise actually injected during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub samples: usize,
    /// SI units, IMU channel order
    pub imu_var: [f64; 5],
    /// SI units, EKF measurement order
    pub ekf_var: [f64; 9],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub scenario: String,
    pub estimator: EstimatorKind,
    pub noise: NoiseCase,
    pub seed: u64,
    pub records: Vec<LoopRecord>,
    pub metrics: RunMetrics,
    pub noise_stats: NoiseStats,
    /// set when the run stopped early
    pub failure: Option<String>,
    /// slowest controller step, wall-clock seconds; not part of any report
    pub max_control_seconds: f64,
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

enum Estimator<'a> {
    Truth,
    Ekf(Box<Ekf>),
    Lstm { model: &'a LstmModel, window: ImuWindow },
}

/// Reference path from the start position along the field for the whole
/// run plus one prediction horizon.
pub fn global_reference(s: &Scenario) -> Result<Vec<ReferencePoint>> {
    let steps = ((s.duration + 2.0) / s.vehicle.dt).ceil() as usize + s.mpc.n_p + 1;
    let mut path = vec![ReferencePoint { x: 0.0, phi: 0.0, y: 0.0 }];
    path.extend(rollout_reference(RolloutStart { x: 0.0, y: 0.0, vx: s.speed, vy: 0.0 }, &s.field, steps, s.vehicle.dt)?);
    Ok(path)
}

/// Heading and lateral position of the path at `x`, linearly
/// interpolated; clamped outside.
pub fn reference_at(path: &[ReferencePoint], x: f64) -> (f64, f64) {
    let i = path.partition_point(|r| r.x < x);
    if i == 0 {
        return (path[0].phi, path[0].y);
    }
    if i >= path.len() {
        let r = path[path.len() - 1];
        return (r.phi, r.y);
    }
    let (a, b) = (path[i - 1], path[i]);
    let t = (x - a.x) / (b.x - a.x);
    (a.phi + t * (b.phi - a.phi), a.y + t * (b.y - a.y))
}

fn clamp_torque(t: PerWheel, max: f64) -> PerWheel {
    t.map(|v| v.clamp(-max, max))
}

/// Runs the scenario. The LSTM model must be supplied when the scenario
/// uses it; `model_path` is not read here.
pub fn run_closed_loop(sc: &Scenario, model: Option<&LstmModel>) -> Result<RunOutcome> {
    let mut checked = sc.clone();
    if checked.estimator == EstimatorKind::Lstm {
        if model.is_none() {
            return Err(Error::Config("LSTM estimator selected but no model supplied".into()));
        }
        checked.model_path = None;
        checked.estimator = EstimatorKind::Truth;
    }
    checked.validate()?;

    let p = sc.vehicle;
    let plant = Plant::new(p);
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let path = global_reference(sc)?;
    let mut mpc = MpcController::new(sc.mpc)?;
    let sub = (p.dt / PLANT_DT).round() as usize;
    let steps = (sc.duration / p.dt).round() as usize;

    let mut s = PlantState { yaw_rate: sc.initial_yaw_rate, ..PlantState::cruising(sc.speed, &p) };
    let mut cmd = ControlCommand { delta: PerWheel::ZERO, torque: plant.cruise_torque(&s, sc.speed, sc.cruise_gain) };
    let mut u_prev = Vec4::zeros();
    let mut yaw_ref = YawRefState::default();
    let mut slip = SideslipEstimate::default();

    let mut imu = sample_imu(&s, sc.noise, &mut rng);
    let (ax0, ay0) = plant.specific_force(&s, &cmd, &sc.road)?;
    let mut meas = sample_measurement(s.vx, s.vy, ax0, ay0, s.yaw_rate, &s.omega, sc.noise, p.g, &mut rng);
    let mut imu_noise = [Moments::default(); 5];
    let mut ekf_noise = [Moments::default(); 9];
    let mut record_noise = |s: &PlantState, imu: &crate::domain::ImuSample, meas: &EkfMeasurement, ax: f64, ay: f64| {
        let clean_imu = [s.roll_rate, s.pitch_rate, s.yaw_rate, s.roll, s.yaw];
        for (i, v) in imu.to_array().iter().enumerate() {
            imu_noise[i].push(v - clean_imu[i]);
        }
        let clean = [s.vx, s.vy, ax, ay, s.yaw_rate, s.omega.0[0], s.omega.0[1], s.omega.0[2], s.omega.0[3]];
        for i in 0..9 {
            ekf_noise[i].push(meas.y[i] - clean[i]);
        }
    };
    record_noise(&s, &imu, &meas, ax0, ay0);

    let mut est = match sc.estimator {
        EstimatorKind::Truth => Estimator::Truth,
        EstimatorKind::Ekf => Estimator::Ekf(Box::new(Ekf::new(&meas, sc.ekf)?)),
        EstimatorKind::Lstm => {
            let mut window = ImuWindow::new(sc.lstm_window);
            window.push(&imu);
            Estimator::Lstm { model: model.expect("checked above"), window }
        }
    };

    let mut records = Vec::with_capacity(steps);
    let mut max_control_seconds: f64 = 0.0;
    let mut failure = None;
    for k in 0..steps {
        let t = k as f64 * p.dt;
        let fz_hat = vertical_loads(&p, plant.config.cg_height, meas.y[2], meas.y[3]);
        let truth = plant.forces_at(&s, &cmd, &sc.road)?;
        let forces_hat: TireForceSet = match &est {
            Estimator::Truth => truth,
            Estimator::Ekf(f) => f.forces(&fz_hat),
            Estimator::Lstm { model, window } => {
                let e = window.estimate(model)?;
                if e.out_of_range {
                    log::debug!("LSTM input out of training range at t = {t:.2}");
                }
                TireForceSet { fz: fz_hat, ..e.forces }
            }
        };
        let vx_m = meas.y[0].max(1.0);
        let yaw_rate_m = imu.yaw_rate;
        let started = std::time::Instant::now();
        let step_result = (|| -> Result<(Vec4, crate::mpc::MpcDiagnostics, f64, f64, PerWheel)> {
            slip = advance_sideslip(slip, &forces_hat, &u_prev, vx_m, yaw_rate_m, &p, p.dt, &sc.sideslip)?;
            let refs: Vec<[f64; 2]> = (1..=sc.mpc.n_p)
                .map(|j| {
                    let (phi, y) = reference_at(&path, s.x + vx_m * j as f64 * p.dt);
                    [phi, y]
                })
                .collect();
            let x = CtrlState { vx: vx_m, vy: slip.vy_hat, yaw_rate: yaw_rate_m, yaw: imu.yaw_angle, y: s.y };
            let (u, diag) = mpc.control_step(&x, &u_prev, &forces_hat.fx, slip.vy_hat, &refs, &p)?;
            let delta = steering_perwheel(&u);
            let delta_f = 0.5 * (u[0] + u[1]);
            yaw_ref = desired_yaw_rate(yaw_ref, delta_f, vx_m, sc.mu_hat.unwrap_or_else(|| sc.road.mu_at(s.x)), &sc.smc, &p, p.dt)?;
            let smc = yaw_moment(yaw_rate_m, yaw_ref.gamma_des, slip.beta_hat, &forces_hat.fy, &delta, &sc.smc, &p);
            let m_z = if sc.dyc_off { 0.0 } else { smc.m_z };
            let t_dyc = allocate_torques(m_z, &delta, &fz_hat, &p, &sc.smc)?;
            let base = plant.cruise_torque(&s, sc.speed, sc.cruise_gain);
            let torque = clamp_torque(PerWheel::from_fn(|w| base[w] + t_dyc[w]), sc.torque_max);
            Ok((u, diag, m_z, smc.s, torque))
        })();
        let elapsed = started.elapsed().as_secs_f64();
        if elapsed > p.dt && elapsed > max_control_seconds {
            log::warn!("controller step at t = {t:.2} took {:.1} ms", elapsed * 1e3);
        }
        max_control_seconds = max_control_seconds.max(elapsed);
        let (u, diag, m_z, s_val, torque) = match step_result {
            Ok(v) => v,
            Err(e) => {
                failure = Some(format!("controller failed at t = {t:.2}: {e}"));
                break;
            }
        };
        let (phi_ref, y_ref) = reference_at(&path, s.x);
        records.push(LoopRecord {
            t,
            x: s.x,
            y: s.y,
            yaw: s.yaw,
            vx: s.vx,
            vy: s.vy,
            yaw_rate: s.yaw_rate,
            beta: s.sideslip(),
            beta_hat: slip.beta_hat,
            y_ref,
            phi_ref,
            mu: sc.road.mu_at(s.x),
            delta: [u[0], u[1], u[2], u[3]],
            torque: torque.0,
            m_z,
            s: s_val,
            gamma_des: yaw_ref.gamma_des,
            force_true: truth.channels(),
            fz: truth.fz.0,
            force_est: forces_hat.channels(),
            mpc_cost: diag.cost,
            qp_iters: diag.qp_iters,
            mpc_held: diag.held,
        });
        u_prev = u;
        cmd = ControlCommand { delta: steering_perwheel(&u), torque };

        let mut plant_failed = false;
        for _ in 0..sub {
            match plant.step(&s, &cmd, &sc.road, PLANT_DT) {
                Ok(next) => s = next,
                Err(e) => {
                    failure = Some(format!("plant failed at t = {:.3}: {e}", s.t));
                    plant_failed = true;
                    break;
                }
            }
            imu = sample_imu(&s, sc.noise, &mut rng);
            let (ax, ay) = match plant.specific_force(&s, &cmd, &sc.road) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(format!("plant failed at t = {:.3}: {e}", s.t));
                    plant_failed = true;
                    break;
                }
            };
            meas = sample_measurement(s.vx, s.vy, ax, ay, s.yaw_rate, &s.omega, sc.noise, p.g, &mut rng);
            record_noise(&s, &imu, &meas, ax, ay);
            match &mut est {
                Estimator::Truth => {}
                Estimator::Ekf(f) => {
                    let fz = vertical_loads(&p, plant.config.cg_height, meas.y[2], meas.y[3]);
                    let input = EkfInput { delta: cmd.delta, torque: cmd.torque, fz };
                    let r = f.predict(&input, &p, PLANT_DT).and_then(|_| f.update(&meas, &input, &p));
                    if let Err(e) = r {
                        failure = Some(format!("EKF failed at t = {:.3}: {e}", s.t));
                        plant_failed = true;
                        break;
                    }
                }
                Estimator::Lstm { window, .. } => window.push(&imu),
            }
        }
        if plant_failed {
            break;
        }
    }

    let noise_stats = NoiseStats {
        samples: imu_noise[0].n,
        imu_var: std::array::from_fn(|i| imu_noise[i].variance()),
        ekf_var: std::array::from_fn(|i| ekf_noise[i].variance()),
    };
    let metrics = compute_metrics(&records)?;
    Ok(RunOutcome {
        scenario: sc.name.clone(),
        estimator: sc.estimator,
        noise: sc.noise,
        seed: sc.seed,
        records,
        metrics,
        noise_stats,
        failure,
        max_control_seconds,
    })
}

/// Loads the checkpoint named by the scenario when needed, then runs it.
pub fn run_scenario(sc: &Scenario) -> Result<RunOutcome> {
    sc.validate()?;
    let model = match (&sc.estimator, &sc.model_path) {
        (EstimatorKind::Lstm, Some(p)) => Some(LstmModel::load(p)?),
        _ => None,
    };
    run_closed_loop(sc, model.as_ref())
}

pub fn compute_metrics(records: &[LoopRecord]) -> Result<RunMetrics> {
    if records.is_empty() {
        return Ok(RunMetrics::default());
    }
    let truth: Vec<[f64; 8]> = records.iter().map(|r| r.force_true).collect();
    let est: Vec<[f64; 8]> = records.iter().map(|r| r.force_est).collect();
    let y: Vec<f64> = records.iter().map(|r| r.y).collect();
    let y_ref: Vec<f64> = records.iter().map(|r| r.y_ref).collect();
    let (max_departure, departure_rate) = path_departure(&y, &y_ref)?;
    Ok(RunMetrics {
        force_rmse: channel_rmse(&truth, &est)?,
        max_departure,
        departure_rate,
        max_abs_beta: records.iter().map(|r| r.beta.abs()).fold(0.0, f64::max),
        max_abs_yaw_rate: records.iter().map(|r| r.yaw_rate.abs()).fold(0.0, f64::max),
        relative_error: None,
    })
}

/// Fraction of steps with |s| > phi at which s^2 decreases on the next step.
pub fn lyapunov_decrease_ratio(records: &[LoopRecord], phi: f64) -> (usize, usize) {
    let mut outside = 0;
    let mut decreased = 0;
    for w in records.windows(2) {
        if w[0].s.abs() > phi {
            outside += 1;
            if w[1].s * w[1].s < w[0].s * w[0].s {
                decreased += 1;
            }
        }
    }
    (decreased, outside)
}
