//! Fifteen-state extended Kalman filter for per-wheel tire forces.
//!
//! State: [vx, vy, yaw_rate, omega x4, Fx x4, Fy x4]. Longitudinal forces are
//! random walks; lateral forces relax towards the linear-tire value over the
//! relaxation length. Measurements: [vx, vy, ax, ay, yaw_rate, omega x4],
//! with ax, ay the specific forces.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{PerWheel, TireForceSet, VehicleParams, WheelId};
use crate::noise::NoiseCase;
use crate::plant::gaussian;
use crate::{Error, Result};

pub const NX: usize = 15;
pub const NY: usize = 9;

pub type StateVec = SVector<f64, NX>;
pub type MeasVec = SVector<f64, NY>;
pub type Cov = SMatrix<f64, NX, NX>;
pub type MeasJac = SMatrix<f64, NY, NX>;

const OMEGA: usize = 3;
const FX: usize = 7;
const FY: usize = 11;

/// How the wheel-spin equation scales the vertical load into a drag torque.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum RollingTerm {
    /// R_e * R_r * F_z with R_r the unloaded radius
    UnloadedRadius,
    /// R_e * c * F_z
    Coefficient(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfConfig {
    /// tire relaxation length, m
    pub sigma: f64,
    pub q: [f64; NX],
    pub r: [f64; NY],
    pub rolling: RollingTerm,
    /// CG height for load transfer from measured accelerations, m
    pub cg_height: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        let (q, r) = default_covariances();
        EkfConfig { sigma: 0.3, q, r, rolling: RollingTerm::UnloadedRadius, cg_height: 0.53 }
    }
}

/// Diagonals of Q* and R* in SI units.
pub fn default_covariances() -> ([f64; NX], [f64; NY]) {
    let mut q = [0.0; NX];
    let head = [1000.0, 1000.0, 100.0, 1.0, 1.0, 1.0, 1.0];
    for (i, v) in head.iter().enumerate() {
        q[i] = v * 1e-3;
    }
    let qf = [1000.0, 1000.0, 1000.0, 1000.0, 1.0, 1.0, 1.0, 1.0];
    for (i, v) in qf.iter().enumerate() {
        q[FX + i] = v * 1e-3;
    }
    (q, [10.0, 1.0, 10.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfInput {
    pub delta: PerWheel,
    pub torque: PerWheel,
    /// vertical loads, treated as known inputs
    pub fz: PerWheel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfMeasurement {
    pub y: [f64; NY],
}

impl EkfMeasurement {
    pub fn vector(&self) -> MeasVec {
        MeasVec::from_column_slice(&self.y)
    }
}

fn rolling_scale(cfg: &EkfConfig, p: &VehicleParams) -> f64 {
    match cfg.rolling {
        RollingTerm::UnloadedRadius => p.r_unloaded,
        RollingTerm::Coefficient(c) => c,
    }
}

/// Linear-tire lateral force target for wheel `w` from the filter's own state.
fn target_fy(x: &StateVec, delta: f64, w: WheelId, p: &VehicleParams) -> f64 {
    p.cornering_stiffness(w) * (delta - (x[1] + p.wheel_x(w) * x[2]) / x[0])
}

fn body_forces(x: &StateVec, u: &EkfInput, p: &VehicleParams) -> (f64, f64, f64) {
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut mz = 0.0;
    for w in WheelId::ALL {
        let i = w.index();
        let (s, c) = u.delta[w].sin_cos();
        let fxb = x[FX + i] * c - x[FY + i] * s;
        let fyb = x[FX + i] * s + x[FY + i] * c;
        sx += fxb;
        sy += fyb;
        mz += p.wheel_x(w) * fyb - p.wheel_y(w) * fxb;
    }
    (sx, sy, mz)
}

pub fn eval_f_star(x: &StateVec, u: &EkfInput, p: &VehicleParams, cfg: &EkfConfig) -> Result<StateVec> {
    if !(x[0] > 0.1) {
        return Err(Error::SlipUndefined { vx: x[0] });
    }
    let (sx, sy, mz) = body_forces(x, u, p);
    let rr = rolling_scale(cfg, p);
    let mut f = StateVec::zeros();
    f[0] = sx / p.m + x[1] * x[2];
    f[1] = sy / p.m - x[0] * x[2];
    f[2] = mz / p.iz;
    for w in WheelId::ALL {
        let i = w.index();
        f[OMEGA + i] = (u.torque[w] - p.r_eff * (x[FX + i] + rr * u.fz[w])) / p.iw;
        f[FY + i] = x[0] / cfg.sigma * (-x[FY + i] + target_fy(x, u.delta[w], w, p));
    }
    Ok(f)
}

/// Analytic Jacobian of `eval_f_star` with respect to the state.
pub fn jacobian_f(x: &StateVec, u: &EkfInput, p: &VehicleParams, cfg: &EkfConfig) -> Cov {
    let mut a = Cov::zeros();
    a[(0, 1)] = x[2];
    a[(0, 2)] = x[1];
    a[(1, 0)] = -x[2];
    a[(1, 2)] = -x[0];
    for w in WheelId::ALL {
        let i = w.index();
        let (s, c) = u.delta[w].sin_cos();
        let (xi, yi) = (p.wheel_x(w), p.wheel_y(w));
        a[(0, FX + i)] = c / p.m;
        a[(0, FY + i)] = -s / p.m;
        a[(1, FX + i)] = s / p.m;
        a[(1, FY + i)] = c / p.m;
        a[(2, FX + i)] = (xi * s - yi * c) / p.iz;
        a[(2, FY + i)] = (xi * c + yi * s) / p.iz;
        a[(OMEGA + i, FX + i)] = -p.r_eff / p.iw;
        let ci = p.cornering_stiffness(w);
        let k = x[0] / cfg.sigma;
        let gap = -x[FY + i] + target_fy(x, u.delta[w], w, p);
        a[(FY + i, 0)] = gap / cfg.sigma + k * ci * (x[1] + xi * x[2]) / (x[0] * x[0]);
        a[(FY + i, 1)] = -ci / cfg.sigma;
        a[(FY + i, 2)] = -ci * xi / cfg.sigma;
        a[(FY + i, FY + i)] = -k;
    }
    a
}

pub fn eval_h(x: &StateVec, u: &EkfInput, p: &VehicleParams) -> MeasVec {
    let (sx, sy, _) = body_forces(x, u, p);
    MeasVec::from_column_slice(&[x[0], x[1], sx / p.m, sy / p.m, x[2], x[3], x[4], x[5], x[6]])
}

pub fn jacobian_h(u: &EkfInput, p: &VehicleParams) -> MeasJac {
    let mut c = MeasJac::zeros();
    c[(0, 0)] = 1.0;
    c[(1, 1)] = 1.0;
    c[(4, 2)] = 1.0;
    for w in WheelId::ALL {
        let i = w.index();
        let (s, co) = u.delta[w].sin_cos();
        c[(2, FX + i)] = co / p.m;
        c[(2, FY + i)] = -s / p.m;
        c[(3, FX + i)] = s / p.m;
        c[(3, FY + i)] = co / p.m;
        c[(5 + i, OMEGA + i)] = 1.0;
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateInfo {
    /// normalized innovation squared
    pub nis: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ekf {
    pub x: StateVec,
    pub p: Cov,
    pub cfg: EkfConfig,
    q: Cov,
    r: SMatrix<f64, NY, NY>,
    /// measurements rejected as non-finite
    pub skipped: usize,
}

impl Ekf {
    /// Kinematic states from the first measurement, forces zero, P = I.
    pub fn new(first: &EkfMeasurement, cfg: EkfConfig) -> Result<Self> {
        if !(cfg.sigma > 0.0) {
            return Err(Error::Config("relaxation length must be positive".into()));
        }
        if cfg.r.iter().any(|&v| !(v > 0.0)) || cfg.q.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("EKF covariances must be non-negative with R positive".into()));
        }
        let y = first.y;
        let mut x = StateVec::zeros();
        x[0] = y[0];
        x[1] = y[1];
        x[2] = y[4];
        for i in 0..4 {
            x[OMEGA + i] = y[5 + i];
        }
        Ok(Ekf {
            x,
            p: Cov::identity(),
            q: Cov::from_diagonal(&StateVec::from_column_slice(&cfg.q)),
            r: SMatrix::<f64, NY, NY>::from_diagonal(&MeasVec::from_column_slice(&cfg.r)),
            cfg,
            skipped: 0,
        })
    }

    pub fn predict(&mut self, u: &EkfInput, p: &VehicleParams, dt: f64) -> Result<()> {
        let f = eval_f_star(&self.x, u, p, &self.cfg)?;
        let ad = Cov::identity() + jacobian_f(&self.x, u, p, &self.cfg) * dt;
        self.x += f * dt;
        self.p = ad * self.p * ad.transpose() + self.q;
        self.symmetrize();
        Ok(())
    }

    /// Joseph-form measurement update.
    pub fn update(&mut self, y: &EkfMeasurement, u: &EkfInput, p: &VehicleParams) -> Result<UpdateInfo> {
        let innov = y.vector() - eval_h(&self.x, u, p);
        if !innov.iter().all(|v| v.is_finite()) {
            self.skipped += 1;
            return Ok(UpdateInfo { nis: f64::NAN, skipped: true });
        }
        let c = jacobian_h(u, p);
        let s = c * self.p * c.transpose() + self.r;
        let chol = s.cholesky().ok_or_else(|| Error::Numerical("innovation covariance not positive definite".into()))?;
        let k = self.p * c.transpose() * chol.inverse();
        let nis = innov.dot(&chol.solve(&innov));
        self.x += k * innov;
        let ikc = Cov::identity() - k * c;
        self.p = ikc * self.p * ikc.transpose() + k * self.r * k.transpose();
        self.symmetrize();
        Ok(UpdateInfo { nis, skipped: false })
    }

    pub fn gain(&self, u: &EkfInput, p: &VehicleParams) -> Option<SMatrix<f64, NX, NY>> {
        let c = jacobian_h(u, p);
        let s = c * self.p * c.transpose() + self.r;
        Some(self.p * c.transpose() * s.cholesky()?.inverse())
    }

    fn symmetrize(&mut self) {
        self.p = (self.p + self.p.transpose()) * 0.5;
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.p.symmetric_eigenvalues().min()
    }

    pub fn forces(&self, fz: &PerWheel) -> TireForceSet {
        TireForceSet {
            fx: PerWheel::from_fn(|w| self.x[FX + w.index()]),
            fy: PerWheel::from_fn(|w| self.x[FY + w.index()]),
            fz: *fz,
        }
    }
}

/// Noisy measurement vector from true kinematics and specific forces, with
/// the case's variances in SI units.
#[allow(clippy::too_many_arguments)]
pub fn sample_measurement<R: Rng + ?Sized>(
    vx: f64,
    vy: f64,
    ax: f64,
    ay: f64,
    yaw_rate: f64,
    omega: &PerWheel,
    noise: NoiseCase,
    g: f64,
    rng: &mut R,
) -> EkfMeasurement {
    let var = noise.ekf_si(g);
    let clean = [vx, vy, ax, ay, yaw_rate, omega.0[0], omega.0[1], omega.0[2], omega.0[3]];
    let mut y = clean;
    if noise != NoiseCase::None {
        for i in 0..NY {
            y[i] += gaussian(rng, var[i]);
        }
    }
    EkfMeasurement { y }
}

/// Runs where the truth is the filter's own model, for consistency checks.
pub mod synthetic {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[derive(Debug, Clone, PartialEq)]
    pub struct Report {
        /// force RMSE after prediction, per channel (fx FL..RR, fy FL..RR)
        pub prior_rmse: [f64; 8],
        /// force RMSE after the measurement update
        pub posterior_rmse: [f64; 8],
        pub min_eigenvalue: f64,
        pub asymmetry: f64,
        /// fraction of updates whose NIS lies in the two-sided 95% band
        pub nis_in_band: f64,
    }

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Setup {
        pub steps: usize,
        pub seed: u64,
        pub noise: NoiseCase,
        /// use the true noise levels in the filter instead of the defaults
        pub matched: bool,
        /// evaluate the smallest eigenvalue of P every this many steps
        pub eig_every: usize,
    }

    /// chi-square(9) 2.5% and 97.5% quantiles
    pub const NIS_BAND: (f64, f64) = (2.700389, 19.022768);

    fn truth_input(t: f64, x: &StateVec, p: &VehicleParams, fz: &PerWheel, rr: f64) -> EkfInput {
        let d = 0.03 * (0.5 * t).sin() + 0.01 * (2.1 * t).sin();
        let delta = PerWheel([d, d, -0.3 * d, -0.3 * d]);
        // hold the wheel speeds near rolling with a small known excitation
        let torque = PerWheel::from_fn(|w| {
            let i = w.index();
            p.r_eff * (x[FX + i] + rr * fz[w]) + 20.0 * (0.9 * t + i as f64).sin() + p.iw * 0.2 * (x[0] / p.r_eff - x[OMEGA + i])
        });
        EkfInput { delta, torque, fz: *fz }
    }

    pub fn run(setup: Setup, p: &VehicleParams) -> Result<Report> {
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
        let dt = p.dt;
        let r_true = setup.noise.ekf_si(p.g);
        // process noise on the states the model leaves undriven
        let mut q_true = [0.0; NX];
        q_true[0] = 1e-6;
        q_true[1] = 1e-6;
        q_true[2] = 1e-7;
        for i in 0..4 {
            q_true[OMEGA + i] = 1e-4;
            q_true[FX + i] = 4.0;
            q_true[FY + i] = 1.0;
        }
        let mut cfg = EkfConfig::default();
        if setup.matched {
            cfg.q = q_true;
            cfg.r = r_true.map(|v| v.max(1e-12));
        }
        let rr = rolling_scale(&cfg, p);
        let fz = crate::plant::static_loads(p);

        let mut x = StateVec::zeros();
        x[0] = 20.0;
        for i in 0..4 {
            x[OMEGA + i] = x[0] / p.r_eff;
        }
        let u0 = truth_input(0.0, &x, p, &fz, rr);
        let y0 = measure(&x, &u0, p, &r_true, &mut rng);
        let mut ekf = Ekf::new(&y0, cfg)?;

        let mut prior_sq = [0.0; 8];
        let mut post_sq = [0.0; 8];
        let mut min_eig = f64::INFINITY;
        let mut asym: f64 = 0.0;
        let mut in_band = 0usize;
        for k in 0..setup.steps {
            let t = k as f64 * dt;
            let u = truth_input(t, &x, p, &fz, rr);
            let f = eval_f_star(&x, &u, p, &cfg)?;
            x += f * dt;
            // longitudinal forces follow a bounded mean-reverting walk so the
            // speed stays in range over long runs
            for i in 0..NX {
                x[i] += gaussian(&mut rng, q_true[i]);
            }
            for i in 0..4 {
                x[FX + i] -= 1e-3 * x[FX + i];
            }
            ekf.predict(&u, p, dt)?;
            let prior = ekf.x;
            let y = measure(&x, &u, p, &r_true, &mut rng);
            let info = ekf.update(&y, &u, p)?;
            if info.nis >= NIS_BAND.0 && info.nis <= NIS_BAND.1 {
                in_band += 1;
            }
            for c in 0..8 {
                prior_sq[c] += (prior[FX + c] - x[FX + c]).powi(2);
                post_sq[c] += (ekf.x[FX + c] - x[FX + c]).powi(2);
            }
            if setup.eig_every > 0 && k % setup.eig_every == 0 {
                min_eig = min_eig.min(ekf.min_eigenvalue());
                asym = asym.max((ekf.p - ekf.p.transpose()).amax());
            }
        }
        let n = setup.steps.max(1) as f64;
        Ok(Report {
            prior_rmse: prior_sq.map(|v| (v / n).sqrt()),
            posterior_rmse: post_sq.map(|v| (v / n).sqrt()),
            min_eigenvalue: min_eig,
            asymmetry: asym,
            nis_in_band: in_band as f64 / n,
        })
    }

    fn measure(x: &StateVec, u: &EkfInput, p: &VehicleParams, var: &[f64; NY], rng: &mut ChaCha8Rng) -> EkfMeasurement {
        let clean = eval_h(x, u, p);
        EkfMeasurement { y: std::array::from_fn(|i| clean[i] + gaussian(rng, var[i])) }
    }
}
