//! Shared vocabulary: wheel indexing, vehicle constants and the force/command
//! value types passed between the plant, estimators and controllers.
//!
//! Body frame is SAE: x forward, y to the right, z down, yaw positive
//! clockwise seen from above. The left wheels therefore sit at y = -t_w/2.
//! Angles are radians everywhere inside the crate.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

/// Steering amplitude bound used by the MPC, 21 deg.
pub const MAX_STEER: f64 = 21.0 * std::f64::consts::PI / 180.0;
/// Steering rate bound, 90 deg/s.
pub const MAX_STEER_RATE: f64 = 90.0 * std::f64::consts::PI / 180.0;

pub const fn deg(x: f64) -> f64 {
    x * std::f64::consts::PI / 180.0
}

pub const fn to_deg(x: f64) -> f64 {
    x * 180.0 / std::f64::consts::PI
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WheelId {
    FL,
    FR,
    RL,
    RR,
}

impl WheelId {
    pub const ALL: [WheelId; 4] = [WheelId::FL, WheelId::FR, WheelId::RL, WheelId::RR];

    pub const fn index(self) -> usize {
        self as usize
    }

    pub const fn is_front(self) -> bool {
        matches!(self, WheelId::FL | WheelId::FR)
    }

    pub const fn is_left(self) -> bool {
        matches!(self, WheelId::FL | WheelId::RL)
    }

    /// Wheel on the same side of the car, other axle.
    pub const fn same_side(self) -> WheelId {
        match self {
            WheelId::FL => WheelId::RL,
            WheelId::RL => WheelId::FL,
            WheelId::FR => WheelId::RR,
            WheelId::RR => WheelId::FR,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            WheelId::FL => "FL",
            WheelId::FR => "FR",
            WheelId::RL => "RL",
            WheelId::RR => "RR",
        }
    }
}

impl fmt::Display for WheelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per wheel in FL, FR, RL, RR order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerWheel(pub [f64; 4]);

impl PerWheel {
    pub const ZERO: PerWheel = PerWheel([0.0; 4]);

    pub fn splat(v: f64) -> Self {
        PerWheel([v; 4])
    }

    pub fn from_fn(f: impl FnMut(WheelId) -> f64) -> Self {
        PerWheel(WheelId::ALL.map(f))
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (WheelId, f64)> + '_ {
        WheelId::ALL.iter().map(move |&w| (w, self[w]))
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Self {
        PerWheel(self.0.map(f))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Index<WheelId> for PerWheel {
    type Output = f64;
    fn index(&self, w: WheelId) -> &f64 {
        &self.0[w.index()]
    }
}

impl IndexMut<WheelId> for PerWheel {
    fn index_mut(&mut self, w: WheelId) -> &mut f64 {
        &mut self.0[w.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// kg
    pub m: f64,
    /// kg m^2
    pub iz: f64,
    /// kg m^2
    pub iw: f64,
    /// track width, m
    pub tw: f64,
    /// CG to front axle, m
    pub lf: f64,
    /// CG to rear axle, m
    pub lr: f64,
    /// front cornering stiffness per tire, N/rad
    pub cf: f64,
    /// rear cornering stiffness per tire, N/rad
    pub cr: f64,
    /// unloaded wheel radius, m
    pub r_unloaded: f64,
    /// effective rolling radius, m
    pub r_eff: f64,
    /// control sample time, s
    pub dt: f64,
    /// m/s^2
    pub g: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        default_params()
    }
}

/// D-class sedan constants.
pub fn default_params() -> VehicleParams {
    VehicleParams {
        m: 1685.2,
        iz: 2315.3,
        iw: 1.5,
        tw: 1.795,
        lf: 1.110,
        lr: 1.756,
        cf: 46235.0,
        cr: 31442.0,
        r_unloaded: 0.325,
        r_eff: 0.334,
        dt: 0.01,
        g: 9.81,
    }
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.lf + self.lr
    }

    /// Longitudinal position of the wheel relative to the CG.
    pub fn wheel_x(&self, w: WheelId) -> f64 {
        if w.is_front() {
            self.lf
        } else {
            -self.lr
        }
    }

    /// Lateral position of the wheel relative to the CG (y right).
    pub fn wheel_y(&self, w: WheelId) -> f64 {
        if w.is_left() {
            -0.5 * self.tw
        } else {
            0.5 * self.tw
        }
    }

    pub fn cornering_stiffness(&self, w: WheelId) -> f64 {
        if w.is_front() {
            self.cf
        } else {
            self.cr
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let fields = [
            ("m", self.m),
            ("iz", self.iz),
            ("iw", self.iw),
            ("tw", self.tw),
            ("lf", self.lf),
            ("lr", self.lr),
            ("cf", self.cf),
            ("cr", self.cr),
            ("r_unloaded", self.r_unloaded),
            ("r_eff", self.r_eff),
            ("dt", self.dt),
            ("g", self.g),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(crate::Error::Config(format!("vehicle parameter {name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TireForceSet {
    pub fx: PerWheel,
    pub fy: PerWheel,
    pub fz: PerWheel,
}

impl TireForceSet {
    pub fn is_valid(&self) -> bool {
        self.fx.is_finite() && self.fy.is_finite() && self.fz.is_finite() && self.fz.0.iter().all(|&z| z >= 0.0)
    }

    /// The eight estimated channels in log order: fx FL..RR then fy FL..RR.
    pub fn channels(&self) -> [f64; 8] {
        let mut out = [0.0; 8];
        out[..4].copy_from_slice(&self.fx.0);
        out[4..].copy_from_slice(&self.fy.0);
        out
    }

    pub fn from_channels(c: &[f64]) -> Self {
        let mut s = TireForceSet::default();
        s.fx.0.copy_from_slice(&c[..4]);
        s.fy.0.copy_from_slice(&c[4..8]);
        s
    }
}

pub const FORCE_CHANNELS: [&str; 8] = ["fx_FL", "fx_FR", "fx_RL", "fx_RR", "fy_FL", "fy_FR", "fy_RL", "fy_RR"];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    /// road-wheel steering angles, rad
    pub delta: PerWheel,
    /// wheel torques, N m
    pub torque: PerWheel,
}

impl ControlCommand {
    pub fn is_valid(&self) -> bool {
        self.delta.is_finite() && self.torque.is_finite() && self.delta.0.iter().all(|d| d.abs() <= MAX_STEER + 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImuSample {
    pub roll_rate: f64,
    pub pitch_rate: f64,
    pub yaw_rate: f64,
    pub roll_angle: f64,
    pub yaw_angle: f64,
}

impl ImuSample {
    pub fn to_array(&self) -> [f64; 5] {
        [self.roll_rate, self.pitch_rate, self.yaw_rate, self.roll_angle, self.yaw_angle]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        ImuSample { roll_rate: a[0], pitch_rate: a[1], yaw_rate: a[2], roll_angle: a[3], yaw_angle: a[4] }
    }
}

pub const IMU_CHANNELS: [&str; 5] = ["roll_rate", "pitch_rate", "yaw_rate", "roll_angle", "yaw_angle"];
