//! Sensor-noise cases. Variances are stored in the units the sensor tables
//! use (deg, deg/s, g, rpm) and converted to SI on the way out.

use serde::{Deserialize, Serialize};

use crate::domain::deg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseCase {
    #[default]
    None,
    Case1,
    Case2,
}

impl NoiseCase {
    pub const ALL: [NoiseCase; 3] = [NoiseCase::None, NoiseCase::Case1, NoiseCase::Case2];

    pub fn name(self) -> &'static str {
        match self {
            NoiseCase::None => "none",
            NoiseCase::Case1 => "case1",
            NoiseCase::Case2 => "case2",
        }
    }

    fn pick(self, c1: f64, c2: f64) -> f64 {
        match self {
            NoiseCase::None => 0.0,
            NoiseCase::Case1 => c1,
            NoiseCase::Case2 => c2,
        }
    }

    /// IMU channel variances in table units: (deg/s)^2 for rates, deg^2 for
    /// angles, ordered roll rate, pitch rate, yaw rate, roll angle, yaw angle.
    pub fn imu_table(self) -> [f64; 5] {
        [
            self.pick(0.5, 1.0),
            self.pick(0.031, 0.062),
            self.pick(0.25, 0.5),
            self.pick(0.125, 0.25),
            self.pick(0.125, 0.25),
        ]
    }

    /// IMU variances in rad-based units.
    pub fn imu_si(self) -> [f64; 5] {
        let k = deg(1.0) * deg(1.0);
        self.imu_table().map(|v| v * k)
    }

    /// EKF measurement variances in table units: vx (m/s)^2, vy (m/s)^2,
    /// ax g^2, ay g^2, yaw rate (rad/s)^2, wheel speeds rpm^2.
    pub fn ekf_table(self) -> [f64; 9] {
        let w = self.pick(6.0, 12.0);
        [
            self.pick(0.02, 0.04),
            self.pick(0.2, 0.4),
            self.pick(0.02, 0.04),
            self.pick(0.02, 0.04),
            self.pick(0.02, 0.04),
            w,
            w,
            w,
            w,
        ]
    }

    /// EKF measurement variances in SI units (m/s^2 for accelerations,
    /// rad/s for wheel speeds).
    pub fn ekf_si(self, g: f64) -> [f64; 9] {
        let t = self.ekf_table();
        let rpm = 2.0 * std::f64::consts::PI / 60.0;
        [t[0], t[1], t[2] * g * g, t[3] * g * g, t[4], t[5] * rpm * rpm, t[6] * rpm * rpm, t[7] * rpm * rpm, t[8] * rpm * rpm]
    }

    /// Converts an SI-unit EKF sample vector back to table units.
    pub fn ekf_si_to_table(values: &[f64; 9], g: f64) -> [f64; 9] {
        let rpm = 2.0 * std::f64::consts::PI / 60.0;
        let mut out = *values;
        out[2] /= g;
        out[3] /= g;
        for v in &mut out[5..] {
            *v /= rpm;
        }
        out
    }

    pub fn imu_si_to_table(values: &[f64; 5]) -> [f64; 5] {
        values.map(|v| v / deg(1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yaw_rate_variances() {
        assert_eq!(NoiseCase::Case1.imu_table()[2], 0.25);
        assert_eq!(NoiseCase::Case2.imu_table()[2], 0.5);
        assert_eq!(NoiseCase::Case2.imu_table()[3], 0.25);
        assert_eq!(NoiseCase::Case1.ekf_table()[4], 0.02);
        assert_eq!(NoiseCase::Case2.ekf_table()[5], 12.0);
        assert!(NoiseCase::None.imu_si().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_conversion_inverts() {
        let si = NoiseCase::Case1.ekf_si(9.81).map(f64::sqrt);
        let back = NoiseCase::ekf_si_to_table(&si, 9.81).map(|v| v * v);
        for (a, b) in back.iter().zip(NoiseCase::Case1.ekf_table()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
