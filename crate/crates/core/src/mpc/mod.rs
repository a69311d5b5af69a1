//! Linear time-varying MPC for the four steering angles.
//!
//! At each step the controller model is linearized at the current state and
//! previous input, augmented with the input as a state so the decision
//! variables are input increments, and the tracking problem over the
//! prediction horizon is solved as a QP.

pub mod qp;

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::domain::{PerWheel, VehicleParams, MAX_STEER, MAX_STEER_RATE};
use crate::ltv_model::{linearize, CtrlState, LinearizedModel, ModelOptions, Vec4};
use crate::{Error, Result};
use qp::{solve_qp, QpProblem, QpSettings};

pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Mat94 = SMatrix<f64, 9, 4>;
pub type Mat29 = SMatrix<f64, 2, 9>;
pub type Vec9 = SVector<f64, 9>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub n_p: usize,
    pub n_u: usize,
    /// first costed prediction step
    pub n_1: usize,
    pub q: f64,
    pub r: f64,
    /// steering amplitude bound, rad
    pub u_max: f64,
    /// steering rate bound, rad/s
    pub du_max: f64,
    /// output bounds (yaw rad, Y m)
    pub y_max: [f64; 2],
    pub slack_penalty: f64,
    pub max_iter: usize,
    pub tol: f64,
    #[serde(default)]
    pub model: ModelOptions,
    /// propagate the linearization remainder through the prediction
    #[serde(default = "default_true")]
    pub affine_drift: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            n_p: 16,
            n_u: 4,
            n_1: 1,
            q: 1.0,
            r: 1000.0,
            u_max: MAX_STEER,
            du_max: MAX_STEER_RATE,
            y_max: [MAX_STEER, 5.0],
            slack_penalty: 1e5,
            max_iter: 400,
            tol: 1e-8,
            model: ModelOptions::default(),
            affine_drift: true,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_u < 1 || self.n_u > self.n_p {
            return Err(Error::Config(format!("need 1 <= N_u ({}) <= N_p ({})", self.n_u, self.n_p)));
        }
        if self.n_1 < 1 || self.n_1 > self.n_p {
            return Err(Error::Config(format!("first costed step {} outside 1..={}", self.n_1, self.n_p)));
        }
        if !(self.q > 0.0 && self.r > 0.0) {
            return Err(Error::Config("MPC weights must be positive".into()));
        }
        if !(self.u_max > 0.0 && self.du_max > 0.0 && self.y_max.iter().all(|&v| v > 0.0)) {
            return Err(Error::Config("MPC bounds must be positive".into()));
        }
        Ok(())
    }

    fn n_out(&self) -> usize {
        self.n_p - self.n_1 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub a: Mat9,
    pub b: Mat94,
    pub c: Mat29,
    pub x: Vec9,
    /// affine term of the augmented recursion, zero on the input rows
    pub drift: Vec9,
}

pub fn augment(lm: &LinearizedModel, u_prev: &Vec4) -> Augmented {
    let mut a = Mat9::zeros();
    a.fixed_view_mut::<5, 5>(0, 0).copy_from(&lm.a_d);
    a.fixed_view_mut::<5, 4>(0, 5).copy_from(&lm.b_d);
    a.fixed_view_mut::<4, 4>(5, 5).copy_from(&SMatrix::<f64, 4, 4>::identity());
    let mut b = Mat94::zeros();
    b.fixed_view_mut::<5, 4>(0, 0).copy_from(&lm.b_d);
    b.fixed_view_mut::<4, 4>(5, 0).copy_from(&SMatrix::<f64, 4, 4>::identity());
    let mut c = Mat29::zeros();
    c.fixed_view_mut::<2, 5>(0, 0).copy_from(&lm.c);
    let mut x = Vec9::zeros();
    x.fixed_rows_mut::<5>(0).copy_from(&lm.x_bar);
    x.fixed_rows_mut::<4>(5).copy_from(u_prev);
    let mut drift = Vec9::zeros();
    drift.fixed_rows_mut::<5>(0).copy_from(&lm.drift());
    Augmented { a, b, c, x, drift }
}

/// F stacks C A^j and H holds C A^(j-i) B for j = N_1..N_p and N_u block
/// columns.
pub fn prediction_matrices(aug: &Augmented, cfg: &MpcConfig) -> (DMatrix<f64>, DMatrix<f64>) {
    let rows = 2 * cfg.n_out();
    let mut f = DMatrix::zeros(rows, 9);
    let mut h = DMatrix::zeros(rows, 4 * cfg.n_u);
    // powers[k] = C A^k
    let mut powers: Vec<Mat29> = Vec::with_capacity(cfg.n_p + 1);
    let mut ca = aug.c;
    for _ in 0..=cfg.n_p {
        powers.push(ca);
        ca *= aug.a;
    }
    for j in cfg.n_1..=cfg.n_p {
        let r = 2 * (j - cfg.n_1);
        f.view_mut((r, 0), (2, 9)).copy_from(&powers[j]);
        for i in 1..=cfg.n_u.min(j) {
            let blk = powers[j - i] * aug.b;
            h.view_mut((r, 4 * (i - 1)), (2, 4)).copy_from(&blk);
        }
    }
    (f, h)
}

/// Output contribution of the affine term at each costed step.
pub fn drift_response(aug: &Augmented, cfg: &MpcConfig) -> DVector<f64> {
    let mut out = DVector::zeros(2 * cfg.n_out());
    let mut s = Vec9::zeros();
    for j in 1..=cfg.n_p {
        s = aug.a * s + aug.drift;
        if j >= cfg.n_1 {
            let y = aug.c * s;
            let r = 2 * (j - cfg.n_1);
            out[r] = y[0];
            out[r + 1] = y[1];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcDiagnostics {
    pub cost: f64,
    pub qp_iters: usize,
    pub active_set_size: usize,
    pub u: [f64; 4],
    pub du: [f64; 4],
    /// predicted (yaw, Y) for the costed steps
    pub predicted: Vec<[f64; 2]>,
    pub kkt_residual: f64,
    pub suboptimal: bool,
    /// the solve failed and the previous input was held
    pub held: bool,
}

/// Assembled QP plus the pieces needed to report cost and predictions.
pub struct BuiltQp {
    pub qp: QpProblem,
    pub free: DVector<f64>,
    pub h: DMatrix<f64>,
    pub xi: DVector<f64>,
}

pub fn build_qp(aug: &Augmented, refs: &[[f64; 2]], cfg: &MpcConfig, dt: f64) -> Result<BuiltQp> {
    if refs.len() < cfg.n_p {
        return Err(Error::Config(format!("{} references for a horizon of {}", refs.len(), cfg.n_p)));
    }
    let (f, h) = prediction_matrices(aug, cfg);
    let mut free = &f * DVector::from_column_slice(aug.x.as_slice());
    if cfg.affine_drift {
        free += drift_response(aug, cfg);
    }
    let rows = free.len();
    let xi = DVector::from_fn(rows, |r, _| refs[cfg.n_1 - 1 + r / 2][r % 2]);
    let nu = 4 * cfg.n_u;
    let nz = nu + 1;

    let mut hess = DMatrix::zeros(nz, nz);
    let ht = h.transpose();
    hess.view_mut((0, 0), (nu, nu)).copy_from(&((&ht * &h) * (2.0 * cfg.q)));
    for i in 0..nu {
        hess[(i, i)] += 2.0 * cfg.r;
    }
    hess[(nu, nu)] = 2.0 * cfg.slack_penalty;
    let mut g = DVector::zeros(nz);
    g.rows_mut(0, nu).copy_from(&(&ht * (&xi - &free) * (-2.0 * cfg.q)));

    let u_prev = aug.x.fixed_rows::<4>(5);
    let du = cfg.du_max * dt;
    let mut m_rows: Vec<Vec<f64>> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    // rate bounds
    for i in 0..nu {
        for sign in [1.0, -1.0] {
            let mut row = vec![0.0; nz];
            row[i] = sign;
            m_rows.push(row);
            b.push(du);
        }
    }
    // amplitude bounds on u_prev + cumulative increments
    for step in 0..cfg.n_u {
        for ch in 0..4 {
            for sign in [1.0, -1.0] {
                let mut row = vec![0.0; nz];
                for k in 0..=step {
                    row[4 * k + ch] = sign;
                }
                m_rows.push(row);
                b.push(cfg.u_max - sign * u_prev[ch]);
            }
        }
    }
    // output bounds, softened where the free response is already outside
    for r in 0..rows {
        let bound = cfg.y_max[r % 2];
        let soft = free[r].abs() > bound;
        for sign in [1.0, -1.0] {
            let mut row = vec![0.0; nz];
            for j in 0..nu {
                row[j] = sign * h[(r, j)];
            }
            if soft {
                row[nu] = -1.0;
            }
            m_rows.push(row);
            b.push(bound - sign * free[r]);
        }
    }
    let mut row = vec![0.0; nz];
    row[nu] = -1.0;
    m_rows.push(row);
    b.push(0.0);

    let m = DMatrix::from_fn(m_rows.len(), nz, |i, j| m_rows[i][j]);
    Ok(BuiltQp { qp: QpProblem { h: hess, g, m, b: DVector::from_vec(b) }, free, h, xi })
}

#[derive(Debug, Clone)]
pub struct MpcController {
    pub cfg: MpcConfig,
    warm: Option<DVector<f64>>,
}

impl MpcController {
    pub fn new(cfg: MpcConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(MpcController { cfg, warm: None })
    }

    /// Linearizes at (x, u_prev), solves the tracking QP and applies the first
    /// increment. A failed solve holds `u_prev` and reports it.
    pub fn control_step(
        &mut self,
        x: &CtrlState,
        u_prev: &Vec4,
        fx_hat: &PerWheel,
        vy_hat: f64,
        refs: &[[f64; 2]],
        p: &VehicleParams,
    ) -> Result<(Vec4, MpcDiagnostics)> {
        let cfg = self.cfg;
        if u_prev.amax() > cfg.u_max + 1e-9 {
            return Err(Error::Config(format!("previous steering {} exceeds bound", u_prev.amax())));
        }
        let lm = linearize(x, u_prev, fx_hat, vy_hat, p, cfg.model)?;
        let aug = augment(&lm, u_prev);
        let built = build_qp(&aug, refs, &cfg, p.dt)?;
        let settings = QpSettings { max_iter: cfg.max_iter, tol: cfg.tol };
        let sol = match solve_qp(&built.qp, settings, self.warm.as_ref()) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("MPC solve failed, holding previous steering: {e}");
                self.warm = None;
                let predicted = pairs(&built.free);
                let err = &built.xi - &built.free;
                return Ok((
                    *u_prev,
                    MpcDiagnostics {
                        cost: cfg.q * err.norm_squared(),
                        qp_iters: 0,
                        active_set_size: 0,
                        u: [u_prev[0], u_prev[1], u_prev[2], u_prev[3]],
                        du: [0.0; 4],
                        predicted,
                        kkt_residual: f64::NAN,
                        suboptimal: true,
                        held: true,
                    },
                ));
            }
        };
        if sol.suboptimal {
            log::debug!("MPC QP suboptimal, kkt residual {:.3e}", sol.kkt_residual);
        }
        self.warm = Some(sol.lambda.clone());
        let nu = 4 * cfg.n_u;
        let dumax = cfg.du_max * p.dt;
        let mut du = Vec4::zeros();
        let mut u = Vec4::zeros();
        for ch in 0..4 {
            // clamp away solver round-off so the bounds hold exactly
            du[ch] = sol.z[ch].clamp(-dumax, dumax);
            u[ch] = (u_prev[ch] + du[ch]).clamp(-cfg.u_max, cfg.u_max);
            du[ch] = u[ch] - u_prev[ch];
        }
        let dvec = sol.z.rows(0, nu).into_owned();
        let pred = &built.free + &built.h * &dvec;
        let err = &built.xi - &pred;
        let slack = sol.z[nu];
        let cost = cfg.q * err.norm_squared() + cfg.r * dvec.norm_squared() + cfg.slack_penalty * slack * slack;
        Ok((
            u,
            MpcDiagnostics {
                cost,
                qp_iters: sol.iterations,
                active_set_size: sol.active_set_size,
                u: [u[0], u[1], u[2], u[3]],
                du: [du[0], du[1], du[2], du[3]],
                predicted: pairs(&pred),
                kkt_residual: sol.kkt_residual,
                suboptimal: sol.suboptimal,
                held: false,
            },
        ))
    }
}

fn pairs(v: &DVector<f64>) -> Vec<[f64; 2]> {
    v.as_slice().chunks(2).map(|c| [c[0], c[1]]).collect()
}
