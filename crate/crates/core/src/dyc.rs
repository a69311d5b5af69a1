//! Direct yaw-moment control: a sliding-mode upper level producing the
//! corrective moment and a load-weighted allocator turning it into wheel
//! torques.

use serde::{Deserialize, Serialize};

use crate::domain::{PerWheel, VehicleParams, WheelId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    /// sideslip weight in the sliding surface
    pub eta: f64,
    /// switching gain, N m
    pub k1: f64,
    /// proportional gain, N m s
    pub k2: f64,
    /// boundary-layer thickness
    pub phi_b: f64,
    /// yaw-rate reference filter time constant, s
    pub tau_gamma: f64,
    /// reproduce the printed allocation denominators instead of the
    /// moment-consistent ones
    #[serde(default)]
    pub paper_literal_allocation: bool,
}

impl Default for SmcConfig {
    fn default() -> Self {
        SmcConfig { eta: 0.01, k1: 3000.0, k2: 8000.0, phi_b: 0.05, tau_gamma: 0.1, paper_literal_allocation: false }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("k1", self.k1), ("k2", self.k2), ("phi_b", self.phi_b), ("tau_gamma", self.tau_gamma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("SMC parameter {name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

/// Minimum |moment arm| before a wheel's share is moved to its neighbour.
pub const MIN_ARM: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct YawRefState {
    /// filtered reference
    pub gamma_t: f64,
    /// friction-limited reference
    pub gamma_des: f64,
}

/// Steady-state yaw rate of the front-steered bicycle model.
pub fn steady_yaw_gain(delta_f: f64, vx: f64, p: &VehicleParams) -> Result<f64> {
    if !(vx > 0.1) {
        return Err(Error::SlipUndefined { vx });
    }
    let l = p.wheelbase();
    let den = l + p.m * vx * vx * (p.lr * p.cr - p.lf * p.cf) / (2.0 * p.cr * p.cf * l);
    if den <= 0.0 {
        return Err(Error::UnstableUndersteer(den));
    }
    Ok(vx * delta_f / den)
}

pub fn yaw_rate_bound(mu_hat: f64, vx: f64, g: f64) -> f64 {
    0.85 * mu_hat * g / vx
}

/// Advances the reference filter by `h` and applies the friction bound.
pub fn desired_yaw_rate(
    state: YawRefState,
    delta_f: f64,
    vx: f64,
    mu_hat: f64,
    cfg: &SmcConfig,
    p: &VehicleParams,
    h: f64,
) -> Result<YawRefState> {
    let gamma_o = steady_yaw_gain(delta_f, vx, p)?;
    let a = 1.0 - (-h / cfg.tau_gamma).exp();
    let gamma_t = state.gamma_t + a * (gamma_o - state.gamma_t);
    let bound = yaw_rate_bound(mu_hat, vx, p.g);
    let gamma_des = if gamma_t.abs() < bound { gamma_t } else { bound * gamma_t.signum() };
    Ok(YawRefState { gamma_t, gamma_des })
}

pub fn sat(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Yaw moment of the lateral tire forces about the CG.
pub fn lateral_force_moment(fy: &PerWheel, delta: &PerWheel, p: &VehicleParams) -> f64 {
    use WheelId::*;
    let c = |w: WheelId| fy[w] * delta[w].cos();
    let s = |w: WheelId| fy[w] * delta[w].sin();
    p.lf * (c(FL) + c(FR)) - p.lr * (c(RL) + c(RR)) - 0.5 * p.tw * (s(FL) - s(FR) + s(RL) - s(RR))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmcOutput {
    pub s: f64,
    pub m_z: f64,
    /// -k1 sat(s/phi) - k2 s
    pub reaching: f64,
}

pub fn sliding_surface(gamma: f64, gamma_des: f64, beta_hat: f64, eta: f64) -> f64 {
    gamma - gamma_des + eta * beta_hat
}

/// Reaching law plus cancellation of the estimated lateral-force moment.
pub fn yaw_moment(
    gamma: f64,
    gamma_des: f64,
    beta_hat: f64,
    fy_hat: &PerWheel,
    delta: &PerWheel,
    cfg: &SmcConfig,
    p: &VehicleParams,
) -> SmcOutput {
    let s = sliding_surface(gamma, gamma_des, beta_hat, cfg.eta);
    let reaching = -cfg.k1 * sat(s / cfg.phi_b) - cfg.k2 * s;
    SmcOutput { s, m_z: reaching - lateral_force_moment(fy_hat, delta, p), reaching }
}

/// Coefficient of F_x of wheel `w` in the longitudinal-force yaw moment.
pub fn moment_arm(w: WheelId, delta: f64, p: &VehicleParams) -> f64 {
    p.wheel_x(w) * delta.sin() - p.wheel_y(w) * delta.cos()
}

/// Yaw moment produced by longitudinal tire forces.
pub fn longitudinal_force_moment(fx: &PerWheel, delta: &PerWheel, p: &VehicleParams) -> f64 {
    WheelId::ALL.iter().map(|&w| moment_arm(w, delta[w], p) * fx[w]).sum()
}

fn literal_arm(w: WheelId, d: f64, p: &VehicleParams) -> f64 {
    let h = 0.5 * p.tw * d.cos();
    match w {
        WheelId::FL => p.lf * d.sin() - h,
        WheelId::FR => p.lf * d.sin() + h,
        // printed with a leading minus sign on the torque
        WheelId::RL => -(-p.lr * d.sin() + h),
        WheelId::RR => -p.lr * d.sin() + h,
    }
}

/// Splits `m_z` over the wheels in proportion to vertical load so the
/// resulting longitudinal forces T_i / R_e reproduce `m_z`.
pub fn allocate_torques(m_z: f64, delta: &PerWheel, fz: &PerWheel, p: &VehicleParams, cfg: &SmcConfig) -> Result<PerWheel> {
    let total = fz.sum();
    if !(total > 0.0) {
        return Err(Error::Config(format!("total vertical load {total} must be positive")));
    }
    let mut weight = fz.map(|z| z / total);
    let arm = PerWheel::from_fn(|w| {
        if cfg.paper_literal_allocation {
            literal_arm(w, delta[w], p)
        } else {
            moment_arm(w, delta[w], p)
        }
    });
    for w in WheelId::ALL {
        if arm[w].abs() < MIN_ARM && weight[w] != 0.0 {
            let target = [w.same_side(), WheelId::ALL[(w.index() + 1) % 4], WheelId::ALL[(w.index() + 3) % 4]]
                .into_iter()
                .find(|&o| arm[o].abs() >= MIN_ARM)
                .ok_or_else(|| Error::Numerical("no wheel has a usable moment arm".into()))?;
            log::debug!("moment arm of {w} is {:.4} m, moving its share to {target}", arm[w]);
            weight[target] += weight[w];
            weight[w] = 0.0;
        }
    }
    Ok(PerWheel::from_fn(|w| if weight[w] == 0.0 { 0.0 } else { weight[w] * m_z * p.r_eff / arm[w] }))
}

/// |I_z (eta beta_dot - gamma_des_dot)|, the disturbance the switching gain
/// must dominate.
pub fn disturbance_bound(beta_dot: f64, gamma_des_dot: f64, eta: f64, p: &VehicleParams) -> f64 {
    (p.iz * (eta * beta_dot - gamma_des_dot)).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{default_params, deg};
    use crate::plant::static_loads;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn yaw_gain_regression() {
        let p = default_params();
        assert_eq!(steady_yaw_gain(0.0, 22.22, &p).unwrap(), 0.0);
        let l: f64 = 1.110 + 1.756;
        let den = l + 1685.2 * 22.22 * 22.22 * (1.756 * 31442.0 - 1.110 * 46235.0) / (2.0 * 31442.0 * 46235.0 * l);
        assert!((den - 3.2545).abs() < 1e-3, "{den}");
        let g = steady_yaw_gain(0.02, 22.22, &p).unwrap();
        assert!((g - 22.22 * 0.02 / den).abs() < 1e-15);
        assert_eq!(steady_yaw_gain(0.04, 22.22, &p).unwrap(), 2.0 * g);
    }

    #[test]
    fn understeer_holds_up_to_sixty() {
        let p = default_params();
        for v in [1.0, 10.0, 30.0, 60.0] {
            steady_yaw_gain(0.01, v, &p).unwrap();
        }
        let mut q = p;
        q.lf = 2.5;
        q.lr = 0.3;
        assert!(matches!(steady_yaw_gain(0.01, 40.0, &q), Err(Error::UnstableUndersteer(_))));
    }

    #[test]
    fn friction_bound_value() {
        assert!((yaw_rate_bound(0.2, 22.22, 9.81) - 0.0751).abs() < 1e-4);
    }

    #[test]
    fn reference_filter_converges_and_saturates() {
        let p = default_params();
        let cfg = SmcConfig::default();
        let mut st = YawRefState::default();
        let target = steady_yaw_gain(0.002, 22.22, &p).unwrap();
        for _ in 0..300 {
            st = desired_yaw_rate(st, 0.002, 22.22, 0.85, &cfg, &p, 0.01).unwrap();
        }
        assert!((st.gamma_des - target).abs() < 1e-9);
        let bound = yaw_rate_bound(0.2, 22.22, p.g);
        for _ in 0..300 {
            st = desired_yaw_rate(st, 0.05, 22.22, 0.2, &cfg, &p, 0.01).unwrap();
            assert!(st.gamma_des.abs() <= bound);
        }
        assert_eq!(st.gamma_des, bound);
    }

    #[test]
    fn moment_zero_on_surface_without_forces() {
        let p = default_params();
        let out = yaw_moment(0.1, 0.1, 0.0, &PerWheel::ZERO, &PerWheel::ZERO, &SmcConfig::default(), &p);
        assert_eq!(out.m_z, 0.0);
    }

    #[test]
    fn pure_cancellation_on_surface() {
        let p = default_params();
        let fy = PerWheel([500.0, 500.0, 300.0, 300.0]);
        let out = yaw_moment(0.0, 0.0, 0.0, &fy, &PerWheel::ZERO, &SmcConfig::default(), &p);
        assert!((out.m_z - (-p.lf * 1000.0 + p.lr * 600.0)).abs() < 1e-9);
    }

    #[test]
    fn reaching_term_saturates() {
        let p = default_params();
        let cfg = SmcConfig::default();
        let s = 2.0;
        let out = yaw_moment(s, 0.0, 0.0, &PerWheel::ZERO, &PerWheel::ZERO, &cfg, &p);
        assert!((out.reaching.abs() - (cfg.k1 + cfg.k2 * s)).abs() < 1e-9);
    }

    #[test]
    fn zero_moment_zero_torque() {
        let p = default_params();
        let t = allocate_torques(0.0, &PerWheel::splat(0.1), &static_loads(&p), &p, &SmcConfig::default()).unwrap();
        assert!(t.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn straight_wheels_split_evenly() {
        let p = default_params();
        let t = allocate_torques(-1000.0, &PerWheel::ZERO, &PerWheel::splat(4000.0), &p, &SmcConfig::default()).unwrap();
        let mag = t.0[0].abs();
        for v in t.0 {
            assert!((v.abs() - mag).abs() < 1e-9);
        }
        assert!(t.0[0] < 0.0 && t.0[1] > 0.0 && t.0[2] < 0.0 && t.0[3] > 0.0);
        for w in WheelId::ALL {
            assert!((moment_arm(w, 0.0, &p).abs() - 0.5 * p.tw).abs() < 1e-15);
        }
    }

    /// Longitudinal-force moment written out term by term.
    fn moment_transcription(fx: &PerWheel, d: &PerWheel, p: &VehicleParams) -> f64 {
        let [fl, fr, rl, rr] = fx.0;
        let [dfl, dfr, drl, drr] = d.0;
        p.lf * (fl * dfl.sin() + fr * dfr.sin()) - p.lr * (rl * drl.sin() + rr * drr.sin())
            - 0.5 * p.tw * (-fl * dfl.cos() + fr * dfr.cos() - rl * drl.cos() + rr * drr.cos())
    }

    #[test]
    fn allocation_reconstructs_moment() {
        let p = default_params();
        let cfg = SmcConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let mz = rng.random_range(-8000.0..8000.0);
            let d = PerWheel::from_fn(|_| rng.random_range(-deg(21.0)..deg(21.0)));
            let fz = PerWheel::from_fn(|_| rng.random_range(500.0..6000.0));
            let t = allocate_torques(mz, &d, &fz, &p, &cfg).unwrap();
            let back = moment_transcription(&t.map(|v| v / p.r_eff), &d, &p);
            assert!((back - mz).abs() <= 1e-9 * mz.abs().max(1e-9), "{back} vs {mz}");
        }
    }

    #[test]
    fn allocation_is_homogeneous() {
        let p = default_params();
        let d = PerWheel([0.1, 0.12, -0.02, -0.03]);
        let fz = static_loads(&p);
        let a = allocate_torques(700.0, &d, &fz, &p, &SmcConfig::default()).unwrap();
        let b = allocate_torques(2100.0, &d, &fz, &p, &SmcConfig::default()).unwrap();
        for (x, y) in a.0.iter().zip(b.0) {
            assert!((3.0 * x - y).abs() < 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn small_arm_moves_share_to_same_side() {
        let mut p = default_params();
        // a long front overhang makes the FL arm vanish at this angle
        p.lf = 0.5 * p.tw / deg(20.0).tan();
        let d = PerWheel([-deg(20.0), 0.0, 0.0, 0.0]);
        assert!(moment_arm(WheelId::FL, d[WheelId::FL], &p).abs() < MIN_ARM);
        let fz = PerWheel::splat(4000.0);
        let t = allocate_torques(1000.0, &d, &fz, &p, &SmcConfig::default()).unwrap();
        assert_eq!(t[WheelId::FL], 0.0);
        let back = longitudinal_force_moment(&t.map(|v| v / p.r_eff), &d, &p);
        assert!((back - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn literal_allocation_differs_in_sign() {
        let p = default_params();
        let cfg = SmcConfig { paper_literal_allocation: true, ..SmcConfig::default() };
        let t = allocate_torques(1000.0, &PerWheel::ZERO, &PerWheel::splat(4000.0), &p, &cfg).unwrap();
        let back = longitudinal_force_moment(&t.map(|v| v / p.r_eff), &PerWheel::ZERO, &p);
        assert!((back + 1000.0).abs() < 1e-9, "{back}");
    }
}
