//! Ground-truth nonlinear vehicle: planar rigid body with four independently
//! steered and driven wheels, magic-formula tires with a friction ellipse,
//! quasi-static load transfer and a second-order roll/pitch model that feeds
//! the IMU.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{ControlCommand, ImuSample, PerWheel, TireForceSet, VehicleParams, WheelId};
use crate::noise::NoiseCase;
use crate::{Error, Result};

/// Friction at which the lateral curves reproduce the linear cornering
/// stiffness.
pub const CALIBRATION_MU: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub t: f64,
    pub step: usize,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    pub yaw: f64,
    pub x: f64,
    pub y: f64,
    pub omega: PerWheel,
    pub roll: f64,
    pub roll_rate: f64,
    pub pitch: f64,
    pub pitch_rate: f64,
    /// Specific force along body x from the last evaluated step, m/s^2.
    /// Drives the quasi-static load transfer.
    pub ax: f64,
    /// Specific force along body y, m/s^2.
    pub ay: f64,
}

impl PlantState {
    /// Straight-line driving at `vx` with free-rolling wheels.
    pub fn cruising(vx: f64, p: &VehicleParams) -> Self {
        PlantState { vx, omega: PerWheel::splat(vx / p.r_eff), ..Default::default() }
    }

    pub fn sideslip(&self) -> f64 {
        self.vy.atan2(self.vx)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.ax.is_finite() && self.ay.is_finite()
    }

    fn to_array(self) -> [f64; N_STATE] {
        let o = self.omega.0;
        [
            self.vx,
            self.vy,
            self.yaw_rate,
            self.yaw,
            self.x,
            self.y,
            o[0],
            o[1],
            o[2],
            o[3],
            self.roll,
            self.roll_rate,
            self.pitch,
            self.pitch_rate,
        ]
    }

    fn with_array(self, a: &[f64; N_STATE]) -> Self {
        PlantState {
            vx: a[0],
            vy: a[1],
            yaw_rate: a[2],
            yaw: a[3],
            x: a[4],
            y: a[5],
            omega: PerWheel([a[6], a[7], a[8], a[9]]),
            roll: a[10],
            roll_rate: a[11],
            pitch: a[12],
            pitch_rate: a[13],
            ..self
        }
    }

    /// Translational plus rotational kinetic energy, wheels included.
    pub fn kinetic_energy(&self, p: &VehicleParams) -> f64 {
        0.5 * p.m * (self.vx * self.vx + self.vy * self.vy)
            + 0.5 * p.iz * self.yaw_rate * self.yaw_rate
            + 0.5 * p.iw * self.omega.0.iter().map(|w| w * w).sum::<f64>()
    }
}

const N_STATE: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub x_start: f64,
    pub x_end: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadProfile {
    #[serde(default)]
    pub segments: Vec<RoadSegment>,
    pub default_mu: f64,
}

impl RoadProfile {
    pub fn uniform(mu: f64) -> Self {
        RoadProfile { segments: Vec::new(), default_mu: mu }
    }

    /// Dry road with a single low-friction patch.
    pub fn with_patch(x_start: f64, x_end: f64, patch_mu: f64, default_mu: f64) -> Self {
        RoadProfile { segments: vec![RoadSegment { x_start, x_end, mu: patch_mu }], default_mu }
    }

    pub fn mu_at(&self, x: f64) -> f64 {
        self.segments.iter().find(|s| x >= s.x_start && x < s.x_end).map_or(self.default_mu, |s| s.mu)
    }

    pub fn validate(&self) -> Result<()> {
        let ok_mu = |mu: f64| mu > 0.0 && mu <= 1.2;
        if !ok_mu(self.default_mu) {
            return Err(Error::Config(format!("default friction {} outside (0, 1.2]", self.default_mu)));
        }
        let mut segs = self.segments.clone();
        segs.sort_by(|a, b| a.x_start.total_cmp(&b.x_start));
        for s in &segs {
            if !(s.x_end > s.x_start) || !ok_mu(s.mu) {
                return Err(Error::Config(format!("bad road segment {s:?}")));
            }
        }
        for w in segs.windows(2) {
            if w[1].x_start < w[0].x_end {
                return Err(Error::Config(format!("road segments overlap: {:?} and {:?}", w[0], w[1])));
            }
        }
        Ok(())
    }
}

/// One magic-formula curve, F = D sin(C atan(B s - E (B s - atan(B s)))).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagicCurve {
    pub b: f64,
    pub c: f64,
    pub e: f64,
}

impl MagicCurve {
    pub fn eval(&self, slip: f64, peak: f64) -> f64 {
        let bs = self.b * slip;
        peak * (self.c * (bs - self.e * (bs - bs.atan())).atan()).sin()
    }

    /// Slope at zero slip per unit peak force.
    pub fn unit_slope(&self) -> f64 {
        self.b * self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagicTireParams {
    pub lateral_front: MagicCurve,
    pub lateral_rear: MagicCurve,
    pub longitudinal: MagicCurve,
    /// rolling-resistance coefficient
    pub f_r: f64,
}

impl MagicTireParams {
    /// Lateral shape (C, E) = (1.9, 0.97) with B rescaled per axle so that
    /// B C D equals the linear cornering stiffness at the static load and
    /// mu = 0.85; longitudinal (B, C, E) = (12, 2.3, 0.95).
    pub fn calibrated(p: &VehicleParams) -> Self {
        let fz = static_loads(p);
        let shape = |stiffness: f64, load: f64| MagicCurve { b: stiffness / (1.9 * CALIBRATION_MU * load), c: 1.9, e: 0.97 };
        MagicTireParams {
            lateral_front: shape(p.cf, fz[WheelId::FL]),
            lateral_rear: shape(p.cr, fz[WheelId::RL]),
            longitudinal: MagicCurve { b: 12.0, c: 2.3, e: 0.95 },
            f_r: 0.015,
        }
    }

    pub fn lateral(&self, w: WheelId) -> &MagicCurve {
        if w.is_front() {
            &self.lateral_front
        } else {
            &self.lateral_rear
        }
    }
}

/// Second-order body mode: x'' = wn^2 (gain * input - x) - 2 zeta wn x'.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyMode {
    pub freq_hz: f64,
    pub damping: f64,
    /// steady-state rad per m/s^2 of driving acceleration
    pub gain: f64,
}

impl BodyMode {
    fn accel(&self, angle: f64, rate: f64, input: f64) -> f64 {
        let wn = 2.0 * std::f64::consts::PI * self.freq_hz;
        wn * wn * (self.gain * input - angle) - 2.0 * self.damping * wn * rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub tire: MagicTireParams,
    /// CG height, m
    pub cg_height: f64,
    pub roll: BodyMode,
    pub pitch: BodyMode,
}

impl PlantConfig {
    pub fn new(p: &VehicleParams) -> Self {
        let cg_height = 0.53;
        // 0.5 g lateral gives 3 deg of roll (outward, i.e. negative for ay > 0)
        let roll_gain = -crate::domain::deg(3.0) / (0.5 * p.g);
        let pitch_gain = crate::domain::deg(1.5) / (0.5 * p.g);
        PlantConfig {
            tire: MagicTireParams::calibrated(p),
            cg_height,
            roll: BodyMode { freq_hz: 2.0, damping: 0.7, gain: roll_gain },
            pitch: BodyMode { freq_hz: 2.0, damping: 0.7, gain: pitch_gain },
        }
    }
}

pub fn static_loads(p: &VehicleParams) -> PerWheel {
    let w = p.m * p.g / (2.0 * p.wheelbase());
    PerWheel([w * p.lr, w * p.lr, w * p.lf, w * p.lf])
}

/// Static axle split plus longitudinal and lateral transfer. The sum is
/// always m g; a wheel that would go negative is clamped at zero and its
/// deficit moved to the other wheel of the same axle.
pub fn vertical_loads(p: &VehicleParams, cg_height: f64, ax: f64, ay: f64) -> PerWheel {
    let mut fz = static_loads(p);
    let l = p.wheelbase();
    let long = p.m * ax * cg_height / l;
    let lat = p.m * ay * cg_height / p.tw;
    let lat_front = lat * p.lr / l;
    let lat_rear = lat * p.lf / l;
    for w in WheelId::ALL {
        let d_long = if w.is_front() { -0.5 * long } else { 0.5 * long };
        let share = if w.is_front() { lat_front } else { lat_rear };
        // ay > 0 is a right turn: load moves to the left (outer) wheels
        let d_lat = if w.is_left() { share } else { -share };
        fz[w] += d_long + d_lat;
    }
    for (a, b) in [(WheelId::FL, WheelId::FR), (WheelId::RL, WheelId::RR)] {
        for (lo, hi) in [(a, b), (b, a)] {
            if fz[lo] < 0.0 {
                log::warn!("load transfer exceeds static load on {lo}; clamping");
                fz[hi] += fz[lo];
                fz[lo] = 0.0;
            }
        }
    }
    fz
}

/// Plant with fixed parameters; the state is passed by value.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    pub params: VehicleParams,
    pub config: PlantConfig,
}

/// Wheel-contact kinematics used by the slip computations.
#[derive(Debug, Clone, Copy)]
struct ContactVelocity {
    /// along the wheel heading
    long: f64,
    lat: f64,
}

impl Plant {
    pub fn new(params: VehicleParams) -> Self {
        Plant { config: PlantConfig::new(&params), params }
    }

    pub fn vertical_loads(&self, ax: f64, ay: f64) -> PerWheel {
        vertical_loads(&self.params, self.config.cg_height, ax, ay)
    }

    fn contact_velocity(&self, s: &PlantState, delta: f64, w: WheelId) -> ContactVelocity {
        let vxi = s.vx - s.yaw_rate * self.params.wheel_y(w);
        let vyi = s.vy + s.yaw_rate * self.params.wheel_x(w);
        let (sd, cd) = delta.sin_cos();
        ContactVelocity { long: vxi * cd + vyi * sd, lat: -vxi * sd + vyi * cd }
    }

    /// Global longitudinal position of a wheel's contact patch.
    pub fn wheel_global_x(&self, s: &PlantState, w: WheelId) -> f64 {
        let (sy, cy) = s.yaw.sin_cos();
        s.x + self.params.wheel_x(w) * cy - self.params.wheel_y(w) * sy
    }

    pub fn wheel_mu(&self, s: &PlantState, road: &RoadProfile) -> PerWheel {
        PerWheel::from_fn(|w| road.mu_at(self.wheel_global_x(s, w)))
    }

    /// Slip ratio and slip angle per wheel.
    pub fn slips(&self, s: &PlantState, delta: &PerWheel) -> (PerWheel, PerWheel) {
        let mut kappa = PerWheel::ZERO;
        let mut alpha = PerWheel::ZERO;
        for w in WheelId::ALL {
            let v = self.contact_velocity(s, delta[w], w);
            let denom = v.long.abs().max(0.1);
            kappa[w] = (s.omega[w] * self.params.r_eff - v.long) / denom;
            alpha[w] = -v.lat.atan2(v.long.abs().max(0.1));
        }
        (kappa, alpha)
    }

    /// Nonlinear tire forces in each wheel's own frame at the given loads.
    pub fn tire_forces(&self, s: &PlantState, cmd: &ControlCommand, mu: &PerWheel, fz: &PerWheel) -> Result<TireForceSet> {
        if s.vx <= 0.1 {
            return Err(Error::SlipUndefined { vx: s.vx });
        }
        let (kappa, alpha) = self.slips(s, &cmd.delta);
        let tire = &self.config.tire;
        let mut out = TireForceSet { fz: *fz, ..Default::default() };
        for w in WheelId::ALL {
            let peak = mu[w] * fz[w];
            let mut fx = tire.longitudinal.eval(kappa[w], peak);
            let mut fy = tire.lateral(w).eval(alpha[w], peak);
            let mag = (fx * fx + fy * fy).sqrt();
            if mag > peak && mag > 0.0 {
                let k = peak / mag;
                fx *= k;
                fy *= k;
            }
            debug_assert!(fx * fx + fy * fy <= peak * peak + 1e-9 * (1.0 + peak * peak));
            out.fx[w] = fx;
            out.fy[w] = fy;
        }
        Ok(out)
    }

    /// Forces at the loads implied by the state's stored accelerations.
    pub fn forces_at(&self, s: &PlantState, cmd: &ControlCommand, road: &RoadProfile) -> Result<TireForceSet> {
        let fz = self.vertical_loads(s.ax, s.ay);
        self.tire_forces(s, cmd, &self.wheel_mu(s, road), &fz)
    }

    /// Body-frame resultant (Fx, Fy, Mz) of a set of wheel-frame forces.
    pub fn body_resultant(&self, f: &TireForceSet, delta: &PerWheel) -> (f64, f64, f64) {
        let (mut fxb, mut fyb, mut mz) = (0.0, 0.0, 0.0);
        for w in WheelId::ALL {
            let (sd, cd) = delta[w].sin_cos();
            let bx = f.fx[w] * cd - f.fy[w] * sd;
            let by = f.fx[w] * sd + f.fy[w] * cd;
            fxb += bx;
            fyb += by;
            mz += self.params.wheel_x(w) * by - self.params.wheel_y(w) * bx;
        }
        (fxb, fyb, mz)
    }

    fn derivative(&self, s: &PlantState, cmd: &ControlCommand, road: &RoadProfile) -> Result<([f64; N_STATE], f64, f64)> {
        let p = &self.params;
        let f = self.forces_at(s, cmd, road)?;
        let (fxb, fyb, mz) = self.body_resultant(&f, &cmd.delta);
        let ax = fxb / p.m;
        let ay = fyb / p.m;
        let (sy, cy) = s.yaw.sin_cos();
        let mut d = [0.0; N_STATE];
        d[0] = ax + s.vy * s.yaw_rate;
        d[1] = ay - s.vx * s.yaw_rate;
        d[2] = mz / p.iz;
        d[3] = s.yaw_rate;
        d[4] = s.vx * cy - s.vy * sy;
        d[5] = s.vx * sy + s.vy * cy;
        for w in WheelId::ALL {
            let rolling = self.config.tire.f_r * f.fz[w] * s.omega[w].signum();
            d[6 + w.index()] = (cmd.torque[w] - p.r_eff * (f.fx[w] + rolling)) / p.iw;
        }
        d[10] = s.roll_rate;
        d[11] = self.config.roll.accel(s.roll, s.roll_rate, ay);
        d[12] = s.pitch_rate;
        d[13] = self.config.pitch.accel(s.pitch, s.pitch_rate, ax);
        Ok((d, ax, ay))
    }

    /// One RK4 step of length `h` with the command held. The step must
    /// resolve the wheel-spin time constant (a few ms), so `h` is normally
    /// 1 ms.
    pub fn step(&self, s: &PlantState, cmd: &ControlCommand, road: &RoadProfile, h: f64) -> Result<PlantState> {
        if !s.is_finite() {
            return Err(Error::Divergence { step: s.step, reason: "non-finite state".into() });
        }
        let x0 = s.to_array();
        let at = |base: &[f64; N_STATE], k: &[f64; N_STATE], c: f64| -> PlantState {
            let mut a = *base;
            for i in 0..N_STATE {
                a[i] += c * k[i];
            }
            s.with_array(&a)
        };
        let (k1, ax, ay) = self.derivative(s, cmd, road)?;
        let (k2, ..) = self.derivative(&at(&x0, &k1, 0.5 * h), cmd, road)?;
        let (k3, ..) = self.derivative(&at(&x0, &k2, 0.5 * h), cmd, road)?;
        let (k4, ..) = self.derivative(&at(&x0, &k3, h), cmd, road)?;
        let mut x1 = x0;
        for i in 0..N_STATE {
            x1[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let mut next = s.with_array(&x1);
        next.t = s.t + h;
        next.step = s.step + 1;
        // loads for the next step follow the accelerations at the step start
        next.ax = ax;
        next.ay = ay;
        if !next.is_finite() {
            return Err(Error::Divergence { step: next.step, reason: "non-finite state".into() });
        }
        if next.vy.abs() > next.vx {
            return Err(Error::Divergence {
                step: next.step,
                reason: format!("|vy| = {:.3} exceeds vx = {:.3}", next.vy.abs(), next.vx),
            });
        }
        Ok(next)
    }

    /// Equal drive torque per wheel that cancels rolling resistance and
    /// pulls vx toward `v_target` with time constant 1/`gain`.
    pub fn cruise_torque(&self, s: &PlantState, v_target: f64, gain: f64) -> PerWheel {
        let p = &self.params;
        let fz = self.vertical_loads(s.ax, s.ay);
        let push = gain * (v_target - s.vx) * p.m / 4.0;
        PerWheel::from_fn(|w| p.r_eff * (push + self.config.tire.f_r * fz[w]))
    }

    /// Specific forces (accelerometer readings) at the current state.
    pub fn specific_force(&self, s: &PlantState, cmd: &ControlCommand, road: &RoadProfile) -> Result<(f64, f64)> {
        let f = self.forces_at(s, cmd, road)?;
        let (fxb, fyb, _) = self.body_resultant(&f, &cmd.delta);
        Ok((fxb / self.params.m, fyb / self.params.m))
    }
}

/// Five IMU channels, optionally corrupted by white Gaussian noise at the
/// case's variances.
pub fn sample_imu<R: Rng + ?Sized>(s: &PlantState, noise: NoiseCase, rng: &mut R) -> ImuSample {
    let clean = [s.roll_rate, s.pitch_rate, s.yaw_rate, s.roll, s.yaw];
    if noise == NoiseCase::None {
        return ImuSample::from_array(clean);
    }
    let var = noise.imu_si();
    let mut out = clean;
    for i in 0..5 {
        out[i] += gaussian(rng, var[i]);
    }
    ImuSample::from_array(out)
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> f64 {
    if variance <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, variance.sqrt()).expect("finite std").sample(rng)
}
