//! Controller-side prediction model: linear tires driven by estimated
//! longitudinal forces, analytic Jacobians and first-order discretization.
//!
//! State x = [vx, vy, yaw_rate, yaw, Y], input u = four road-wheel angles,
//! output (yaw, Y). Tire slip uses the reconstructed lateral velocity
//! `vy_hat`, which is held fixed while differentiating.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::domain::{PerWheel, TireForceSet, VehicleParams, WheelId};
use crate::{Error, Result};

pub type Vec5 = SVector<f64, 5>;
pub type Vec4 = SVector<f64, 4>;
pub type Mat5 = SMatrix<f64, 5, 5>;
pub type Mat54 = SMatrix<f64, 5, 4>;
pub type Mat25 = SMatrix<f64, 2, 5>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtrlState {
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    pub yaw: f64,
    pub y: f64,
}

impl CtrlState {
    pub fn to_vector(&self) -> Vec5 {
        Vec5::new(self.vx, self.vy, self.yaw_rate, self.yaw, self.y)
    }

    pub fn from_vector(v: &Vec5) -> Self {
        CtrlState { vx: v[0], vy: v[1], yaw_rate: v[2], yaw: v[3], y: v[4] }
    }

    fn check(&self) -> Result<()> {
        if !(self.vx > 0.1) {
            return Err(Error::SlipUndefined { vx: self.vx });
        }
        if !self.to_vector().iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite controller state".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelOptions {
    /// Use Y' = vy instead of the rotated kinematics.
    #[serde(default)]
    pub paper_literal_f5: bool,
}

/// Linear lateral tire force from the slip angle of the given wheel.
pub fn lateral_force_linear(delta: f64, vy_hat: f64, yaw_rate: f64, vx: f64, wheel: WheelId, p: &VehicleParams) -> f64 {
    p.cornering_stiffness(wheel) * slip_angle(delta, vy_hat, yaw_rate, vx, wheel, p)
}

fn slip_angle(delta: f64, vy_hat: f64, yaw_rate: f64, vx: f64, wheel: WheelId, p: &VehicleParams) -> f64 {
    delta - (vy_hat + p.wheel_x(wheel) * yaw_rate) / vx
}

/// Continuous-time state derivative.
pub fn eval_dynamics(
    x: &CtrlState,
    u: &Vec4,
    fx_hat: &PerWheel,
    vy_hat: f64,
    p: &VehicleParams,
    opts: ModelOptions,
) -> Result<Vec5> {
    x.check()?;
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    let mut moment = 0.0;
    for w in WheelId::ALL {
        let d = u[w.index()];
        let fy = lateral_force_linear(d, vy_hat, x.yaw_rate, x.vx, w, p);
        let (s, c) = d.sin_cos();
        let fxb = fx_hat[w] * c - fy * s;
        let fyb = fx_hat[w] * s + fy * c;
        sum_x += fxb;
        sum_y += fyb;
        moment += p.wheel_x(w) * fyb - p.wheel_y(w) * fxb;
    }
    let y_dot = if opts.paper_literal_f5 { x.vy } else { x.vx * x.yaw.sin() + x.vy * x.yaw.cos() };
    Ok(Vec5::new(
        sum_x / p.m + x.vy * x.yaw_rate,
        sum_y / p.m - x.vx * x.yaw_rate,
        moment / p.iz,
        x.yaw_rate,
        y_dot,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedModel {
    pub a: Mat5,
    pub b: Mat54,
    pub c: Mat25,
    pub a_d: Mat5,
    pub b_d: Mat54,
    pub x_bar: Vec5,
    pub u_bar: Vec4,
    /// f(x_bar, u_bar), kept so callers can form the affine remainder
    pub f_bar: Vec5,
    pub dt: f64,
}

impl LinearizedModel {
    /// Discrete affine term dt (f(x_bar, u_bar) - A x_bar - B u_bar); zero when
    /// the dynamics are linear through the operating point.
    pub fn drift(&self) -> Vec5 {
        (self.f_bar - self.a * self.x_bar - self.b * self.u_bar) * self.dt
    }
}

pub fn output_matrix() -> Mat25 {
    let mut c = Mat25::zeros();
    c[(0, 3)] = 1.0;
    c[(1, 4)] = 1.0;
    c
}

/// Analytic Jacobians at (x_bar, u_bar) plus the first-order discrete pair.
pub fn linearize(
    x_bar: &CtrlState,
    u_bar: &Vec4,
    fx_hat: &PerWheel,
    vy_hat: f64,
    p: &VehicleParams,
    opts: ModelOptions,
) -> Result<LinearizedModel> {
    let f_bar = eval_dynamics(x_bar, u_bar, fx_hat, vy_hat, p, opts)?;
    let vx = x_bar.vx;
    let r = x_bar.yaw_rate;
    let mut a = Mat5::zeros();
    let mut b = Mat54::zeros();
    for w in WheelId::ALL {
        let i = w.index();
        let d = u_bar[i];
        let xi = p.wheel_x(w);
        let yi = p.wheel_y(w);
        let ci = p.cornering_stiffness(w);
        let fy = lateral_force_linear(d, vy_hat, r, vx, w, p);
        let (s, c) = d.sin_cos();
        // slip-angle sensitivities
        let da_dvx = (vy_hat + xi * r) / (vx * vx);
        let da_dr = -xi / vx;
        // body-force sensitivities to slip angle and steering
        let dfxb_da = -ci * s;
        let dfyb_da = ci * c;
        let dfxb_du = -fx_hat[w] * s - ci * s - fy * c;
        let dfyb_du = fx_hat[w] * c + ci * c - fy * s;
        for (col, da) in [(0, da_dvx), (2, da_dr)] {
            a[(0, col)] += dfxb_da * da / p.m;
            a[(1, col)] += dfyb_da * da / p.m;
            a[(2, col)] += (xi * dfyb_da - yi * dfxb_da) * da / p.iz;
        }
        b[(0, i)] = dfxb_du / p.m;
        b[(1, i)] = dfyb_du / p.m;
        b[(2, i)] = (xi * dfyb_du - yi * dfxb_du) / p.iz;
    }
    a[(0, 1)] += r;
    a[(0, 2)] += x_bar.vy;
    a[(1, 0)] -= r;
    a[(1, 2)] -= vx;
    a[(3, 2)] = 1.0;
    if opts.paper_literal_f5 {
        a[(4, 1)] = 1.0;
    } else {
        let (s, c) = x_bar.yaw.sin_cos();
        a[(4, 0)] = s;
        a[(4, 1)] = c;
        a[(4, 3)] = vx * c - x_bar.vy * s;
    }
    let dt = p.dt;
    Ok(LinearizedModel {
        a,
        b,
        c: output_matrix(),
        a_d: Mat5::identity() + a * dt,
        b_d: b * dt,
        x_bar: x_bar.to_vector(),
        u_bar: *u_bar,
        f_bar,
        dt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct SideslipConfig {
    /// Integrate the body-sideslip balance without the yaw-rate term.
    #[serde(default)]
    pub paper_literal: bool,
    /// Optional leak time constant pulling the estimate back to zero, s.
    #[serde(default)]
    pub leak_tau: Option<f64>,
}


#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SideslipEstimate {
    pub beta_hat: f64,
    pub vy_hat: f64,
}

impl SideslipEstimate {
    pub fn new(beta_hat: f64, vx: f64) -> Self {
        SideslipEstimate { beta_hat, vy_hat: vx * beta_hat.tan() }
    }
}

pub const SIDESLIP_LIMIT: f64 = std::f64::consts::FRAC_PI_3;

/// Sideslip rate from estimated tire forces.
pub fn sideslip_rate(
    beta: f64,
    forces: &TireForceSet,
    u: &Vec4,
    vx: f64,
    yaw_rate: f64,
    p: &VehicleParams,
    cfg: &SideslipConfig,
) -> f64 {
    let mut perp = 0.0;
    for w in WheelId::ALL {
        let d = u[w.index()];
        perp += -forces.fx[w] * (beta - d).sin() + forces.fy[w] * (d - beta).cos();
    }
    let mut rate = perp / (p.m * vx);
    if !cfg.paper_literal {
        rate -= yaw_rate;
    }
    if let Some(tau) = cfg.leak_tau {
        rate -= beta / tau;
    }
    rate
}

/// One RK2 (midpoint) step of the sideslip integrator.
#[allow(clippy::too_many_arguments)]
pub fn advance_sideslip(
    est: SideslipEstimate,
    forces: &TireForceSet,
    u: &Vec4,
    vx: f64,
    yaw_rate: f64,
    p: &VehicleParams,
    h: f64,
    cfg: &SideslipConfig,
) -> Result<SideslipEstimate> {
    if !(vx > 0.1) {
        return Err(Error::SlipUndefined { vx });
    }
    let k1 = sideslip_rate(est.beta_hat, forces, u, vx, yaw_rate, p, cfg);
    let k2 = sideslip_rate(est.beta_hat + 0.5 * h * k1, forces, u, vx, yaw_rate, p, cfg);
    let beta = est.beta_hat + h * k2;
    if !beta.is_finite() || beta.abs() >= SIDESLIP_LIMIT {
        return Err(Error::SideslipSaturated);
    }
    Ok(SideslipEstimate::new(beta, vx))
}

pub fn steering_vector(delta: &PerWheel) -> Vec4 {
    Vec4::from_column_slice(&delta.0)
}

pub fn steering_perwheel(u: &Vec4) -> PerWheel {
    PerWheel([u[0], u[1], u[2], u[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::default_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const OPTS: ModelOptions = ModelOptions { paper_literal_f5: false };

    #[test]
    fn linear_tire_examples() {
        let p = default_params();
        assert_eq!(lateral_force_linear(0.0, 0.0, 0.0, 20.0, WheelId::FL, &p), 0.0);
        assert!((lateral_force_linear(0.01, 0.0, 0.0, 20.0, WheelId::FL, &p) - 462.35).abs() < 1e-9);
        let rl = lateral_force_linear(0.0, 0.0, 0.1, 20.0, WheelId::RL, &p);
        assert!((rl - 31442.0 * 1.756 * 0.1 / 20.0).abs() < 1e-9);
        assert!((rl - 276.1).abs() < 0.1);
    }

    #[test]
    fn zero_forces_only_kinematics_remain() {
        let p = default_params();
        let x = CtrlState { vx: 20.0, vy: 0.4, yaw_rate: 0.0, yaw: 0.0, y: 1.0 };
        let f = eval_dynamics(&x, &Vec4::zeros(), &PerWheel::ZERO, 0.0, &p, ModelOptions { paper_literal_f5: true }).unwrap();
        assert_eq!(f, Vec5::new(0.0, 0.0, 0.0, 0.0, 0.4));
    }

    #[test]
    fn symmetric_drive_has_no_moment() {
        let p = default_params();
        let x = CtrlState { vx: 20.0, vy: 0.0, yaw_rate: 0.05, yaw: 0.0, y: 0.0 };
        let f = eval_dynamics(&x, &Vec4::zeros(), &PerWheel::splat(300.0), 0.0, &p, OPTS).unwrap();
        assert!((f[0] - 1200.0 / p.m).abs() < 1e-12);
        // only the yaw-damping of the rear/front lateral forces remains
        let x0 = CtrlState { yaw_rate: 0.0, ..x };
        let f0 = eval_dynamics(&x0, &Vec4::zeros(), &PerWheel::splat(300.0), 0.0, &p, OPTS).unwrap();
        assert_eq!(f0[2], 0.0);
    }

    /// Yaw moment written out term by term from the body yaw balance and the
    /// longitudinal-force moment, with left wheels at y = -t_w/2.
    fn moment_transcription(u: &Vec4, fx: &PerWheel, fy: &[f64; 4], p: &VehicleParams) -> f64 {
        let (lf, lr, tw) = (p.lf, p.lr, p.tw);
        let (c, s) = (u.map(f64::cos), u.map(f64::sin));
        let lateral = lf * (fy[0] * c[0] + fy[1] * c[1]) - lr * (fy[2] * c[2] + fy[3] * c[3])
            - 0.5 * tw * (fy[0] * s[0] - fy[1] * s[1] + fy[2] * s[2] - fy[3] * s[3]);
        let mz = lf * (fx.0[0] * s[0] + fx.0[1] * s[1]) - lr * (fx.0[2] * s[2] + fx.0[3] * s[3])
            - 0.5 * tw * (-fx.0[0] * c[0] + fx.0[1] * c[1] - fx.0[2] * c[2] + fx.0[3] * c[3]);
        lateral + mz
    }

    fn random_point(rng: &mut ChaCha8Rng) -> (CtrlState, Vec4, PerWheel, f64) {
        let x = CtrlState {
            vx: rng.random_range(5.0..35.0),
            vy: rng.random_range(-3.0..3.0),
            yaw_rate: rng.random_range(-1.0..1.0),
            yaw: rng.random_range(-0.6..0.6),
            y: rng.random_range(-5.0..5.0),
        };
        let u = Vec4::from_fn(|_, _| rng.random_range(-0.37..0.37));
        let fx = PerWheel::from_fn(|_| rng.random_range(-2000.0..2000.0));
        let vy_hat = rng.random_range(-3.0..3.0);
        (x, u, fx, vy_hat)
    }

    #[test]
    fn yaw_moment_matches_transcription() {
        let p = default_params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (x, u, fx, vy_hat) = random_point(&mut rng);
            let fy = WheelId::ALL.map(|w| lateral_force_linear(u[w.index()], vy_hat, x.yaw_rate, x.vx, w, &p));
            let f = eval_dynamics(&x, &u, &fx, vy_hat, &p, OPTS).unwrap();
            let m = moment_transcription(&u, &fx, &fy, &p);
            assert!((f[2] * p.iz - m).abs() < 1e-9 * m.abs().max(1.0));
        }
    }

    pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let p = default_params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for opts in [OPTS, ModelOptions { paper_literal_f5: true }] {
            for _ in 0..200 {
                let (x, u, fx, vy_hat) = random_point(&mut rng);
                let lm = linearize(&x, &u, &fx, vy_hat, &p, opts).unwrap();
                let xv = x.to_vector();
                for j in 0..5 {
                    let mut up = xv;
                    let mut dn = xv;
                    up[j] += h;
                    dn[j] -= h;
                    let fp = eval_dynamics(&CtrlState::from_vector(&up), &u, &fx, vy_hat, &p, opts).unwrap();
                    let fm = eval_dynamics(&CtrlState::from_vector(&dn), &u, &fx, vy_hat, &p, opts).unwrap();
                    let col = (fp - fm) / (2.0 * h);
                    for i in 0..5 {
                        assert!(rel_err(lm.a[(i, j)], col[i]) < 1e-5, "A[{i},{j}] {} vs {}", lm.a[(i, j)], col[i]);
                    }
                }
                for j in 0..4 {
                    let mut up = u;
                    let mut dn = u;
                    up[j] += h;
                    dn[j] -= h;
                    let fp = eval_dynamics(&x, &up, &fx, vy_hat, &p, opts).unwrap();
                    let fm = eval_dynamics(&x, &dn, &fx, vy_hat, &p, opts).unwrap();
                    let col = (fp - fm) / (2.0 * h);
                    for i in 0..5 {
                        assert!(rel_err(lm.b[(i, j)], col[i]) < 1e-5, "B[{i},{j}]");
                    }
                }
            }
        }
    }

    #[test]
    fn discretization_is_first_order() {
        let p = default_params();
        let x = CtrlState { vx: 20.0, vy: 0.1, yaw_rate: 0.02, yaw: 0.05, y: 0.3 };
        let lm = linearize(&x, &Vec4::repeat(0.01), &PerWheel::splat(100.0), 0.1, &p, OPTS).unwrap();
        assert_eq!(lm.a_d, Mat5::identity() + lm.a * p.dt);
        assert_eq!(lm.b_d, lm.b * p.dt);
        let c = lm.c;
        assert_eq!(c.iter().filter(|&&v| v == 1.0).count(), 2);
        assert_eq!(c.iter().filter(|&&v| v == 0.0).count(), 8);
        assert_eq!((c[(0, 3)], c[(1, 4)]), (1.0, 1.0));
    }

    #[test]
    fn zero_forces_leave_sideslip_unchanged() {
        let p = default_params();
        let cfg = SideslipConfig { paper_literal: true, leak_tau: None };
        let est = SideslipEstimate::new(0.02, 20.0);
        let next = advance_sideslip(est, &TireForceSet::default(), &Vec4::zeros(), 20.0, 0.0, &p, 0.01, &cfg).unwrap();
        assert_eq!(next.beta_hat, 0.02);
    }

    #[test]
    fn symmetric_lateral_forces_rate() {
        let p = default_params();
        let f = TireForceSet { fy: PerWheel::splat(500.0), ..Default::default() };
        let cfg = SideslipConfig::default();
        let rate = sideslip_rate(0.0, &f, &Vec4::zeros(), 20.0, 0.0, &p, &cfg);
        assert!((rate - 2000.0 / (p.m * 20.0)).abs() < 1e-15);
        let next = advance_sideslip(SideslipEstimate::default(), &f, &Vec4::zeros(), 20.0, 0.0, &p, 0.01, &cfg).unwrap();
        assert!((next.vy_hat / 20.0 - next.beta_hat.tan()).abs() < 1e-15);
    }

    #[test]
    fn steady_turn_keeps_sideslip_constant() {
        // lateral force exactly balancing centripetal acceleration
        let p = default_params();
        let (vx, r) = (20.0, 0.1);
        let f = TireForceSet { fy: PerWheel::splat(p.m * vx * r / 4.0), ..Default::default() };
        let next = advance_sideslip(SideslipEstimate::default(), &f, &Vec4::zeros(), vx, r, &p, 0.01, &SideslipConfig::default()).unwrap();
        assert!(next.beta_hat.abs() < 1e-15);
    }

    #[test]
    fn saturation_is_flagged() {
        let p = default_params();
        let f = TireForceSet { fy: PerWheel::splat(1e7), ..Default::default() };
        let r = advance_sideslip(SideslipEstimate::default(), &f, &Vec4::zeros(), 1.0, 0.0, &p, 0.01, &SideslipConfig::default());
        assert!(matches!(r, Err(Error::SideslipSaturated)));
    }
}
