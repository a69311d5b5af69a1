//! Inequality-constrained convex QP
//!
//!   minimize 1/2 z'Hz + g'z  subject to  M z <= b
//!
//! solved with Hildreth's dual coordinate ascent. The multipliers it
//! produces identify a working set, which a few equality-constrained KKT
//! solves then refine to machine precision.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QpProblem {
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }

    pub fn max_violation(&self, z: &DVector<f64>) -> (usize, f64) {
        if self.m.nrows() == 0 {
            return (0, 0.0);
        }
        let r = &self.m * z - &self.b;
        let (i, v) = r.argmax();
        (i, v.max(0.0))
    }

    fn scale(&self) -> f64 {
        1.0 + self.g.amax() + self.b.amax()
    }

    /// Largest of the stationarity, primal, dual and complementarity residuals,
    /// divided by 1 + |g|_inf + |b|_inf.
    pub fn kkt_residual(&self, z: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
        let stat = (&self.h * z + &self.g + self.m.transpose() * lambda).amax();
        let slack = &self.m * z - &self.b;
        let mut worst = stat;
        for i in 0..lambda.len() {
            worst = worst.max(slack[i].max(0.0)).max((-lambda[i]).max(0.0)).max((lambda[i] * slack[i]).abs());
        }
        worst / self.scale()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings { max_iter: 400, tol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub lambda: DVector<f64>,
    pub iterations: usize,
    pub active_set_size: usize,
    pub objective: f64,
    pub kkt_residual: f64,
    /// true when neither the dual iteration nor the polish reached `tol`
    pub suboptimal: bool,
}

/// Solves the QP, optionally warm-starting the dual iteration.
pub fn solve_qp(qp: &QpProblem, settings: QpSettings, warm: Option<&DVector<f64>>) -> Result<QpSolution> {
    let n = qp.h.nrows();
    let nc = qp.m.nrows();
    if qp.h.ncols() != n || qp.g.len() != n || qp.m.ncols() != n || qp.b.len() != nc {
        return Err(Error::Numerical("QP dimension mismatch".into()));
    }
    let chol = qp
        .h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("QP Hessian is not positive definite".into()))?;
    let z_unc = -chol.solve(&qp.g);
    if nc == 0 {
        let lambda = DVector::zeros(0);
        let kkt = qp.kkt_residual(&z_unc, &lambda);
        return Ok(QpSolution {
            objective: qp.objective(&z_unc),
            z: z_unc,
            lambda,
            iterations: 0,
            active_set_size: 0,
            kkt_residual: kkt,
            suboptimal: false,
        });
    }

    // dual: max -1/2 l'Pl - l'd with P = M H^-1 M', d = b - M z_unc
    let hinv_mt = chol.solve(&qp.m.transpose());
    let p = &qp.m * &hinv_mt;
    let d = &qp.b - &qp.m * &z_unc;

    let mut lambda = match warm {
        Some(w) if w.len() == nc => w.map(|v| v.max(0.0)),
        _ => DVector::zeros(nc),
    };
    let mut iterations = 0;
    for it in 0..settings.max_iter {
        iterations = it + 1;
        let mut change: f64 = 0.0;
        let mut size: f64 = 0.0;
        for i in 0..nc {
            let pii = p[(i, i)];
            if pii <= 0.0 {
                continue;
            }
            let w = p.row(i).dot(&lambda.transpose()) - pii * lambda[i] + d[i];
            let new = (-w / pii).max(0.0);
            change += (new - lambda[i]).powi(2);
            size += new * new;
            lambda[i] = new;
        }
        if change <= settings.tol * settings.tol * size.max(1.0) {
            break;
        }
    }
    let z_dual = &z_unc - &hinv_mt * &lambda;
    let scale = qp.scale();
    let accept = |z: &DVector<f64>, l: &DVector<f64>| qp.kkt_residual(z, l) <= settings.tol;

    let (z, lambda, extra) = if accept(&z_dual, &lambda) {
        (z_dual, lambda, 0)
    } else if let Some((z, l)) = polish(qp, &z_unc, &hinv_mt, &p, &d, &lambda, settings.tol).filter(|(z, l)| accept(z, l)) {
        (z, l, 0)
    } else {
        let (z, l, steps) = dual_active_set(qp, &z_unc, &hinv_mt, scale)?;
        (z, l, steps)
    };
    let kkt = qp.kkt_residual(&z, &lambda);
    let active = lambda.iter().filter(|&&l| l > 0.0).count();
    Ok(QpSolution {
        objective: qp.objective(&z),
        z,
        lambda,
        iterations: iterations + extra,
        active_set_size: active,
        kkt_residual: kkt,
        suboptimal: kkt > settings.tol.max(1e-12) * 1e2,
    })
}

/// Goldfarb-Idnani dual active-set method. Starts from the unconstrained
/// minimum and adds the most violated row until none remain; finite and exact.
fn dual_active_set(qp: &QpProblem, z_unc: &DVector<f64>, hinv_mt: &DMatrix<f64>, scale: f64) -> Result<(DVector<f64>, DVector<f64>, usize)> {
    let nc = qp.m.nrows();
    let feas_tol = 1e-12 * scale;
    let mut z = z_unc.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut steps = 0;
    let cap = 50 * (nc + qp.h.nrows()) + 100;
    loop {
        let slack = &qp.m * &z - &qp.b;
        let (p, viol) = slack.argmax();
        if viol <= feas_tol || active.contains(&p) {
            let mut lambda = DVector::zeros(nc);
            for (k, &i) in active.iter().enumerate() {
                lambda[i] = u[k];
            }
            return Ok((z, lambda, steps));
        }
        let mut up = 0.0;
        loop {
            steps += 1;
            if steps > cap {
                return Err(Error::Numerical("dual active-set iteration cap".into()));
            }
            // raising row p's multiplier by t moves z by t dz and the active
            // multipliers by -t r
            let hinv_mp = hinv_mt.column(p).into_owned();
            let (dz, r) = if active.is_empty() {
                (-hinv_mp.clone(), Vec::new())
            } else {
                let k = active.len();
                let nw = DMatrix::from_fn(k, qp.m.ncols(), |a, j| qp.m[(active[a], j)]);
                let jn = DMatrix::from_fn(qp.m.ncols(), k, |j, a| hinv_mt[(j, active[a])]);
                let gram = &nw * &jn;
                let chol = gram
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("dependent active constraints".into()))?;
                let r = chol.solve(&(&nw * &hinv_mp));
                let dz = -(&hinv_mp - &jn * &r);
                (dz, r.iter().copied().collect::<Vec<_>>())
            };
            // dual step limit: an active multiplier reaching zero
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 0.0 {
                    let t = u[k] / rk;
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let mp = qp.m.row(p);
            let curv = -(mp * &dz)[0];
            let s_p = qp.b[p] - (mp * &z)[0];
            let t2 = if curv > 1e-14 * (mp * &hinv_mp)[0] { -s_p / curv } else { f64::INFINITY };
            if t1.is_infinite() && t2.is_infinite() {
                return Err(Error::Infeasible { row: p, violation: -s_p });
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                z += &dz * t;
            }
            for (k, &rk) in r.iter().enumerate() {
                u[k] -= t * rk;
            }
            up += t;
            if t2 <= t1 {
                active.push(p);
                u.push(up);
                break;
            }
            let k = drop.expect("finite t1 has a blocking row");
            active.remove(k);
            u.remove(k);
        }
    }
}

/// Active-set refinement seeded with the rows carrying positive multipliers.
#[allow(clippy::too_many_arguments)]
fn polish(
    qp: &QpProblem,
    z_unc: &DVector<f64>,
    hinv_mt: &DMatrix<f64>,
    p: &DMatrix<f64>,
    d: &DVector<f64>,
    lambda0: &DVector<f64>,
    tol: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let nc = qp.m.nrows();
    let scale = qp.scale();
    let lam_floor = 1e-10 * lambda0.amax().max(1.0);
    let mut working: Vec<usize> = (0..nc).filter(|&i| lambda0[i] > lam_floor).collect();
    let feas_tol = 1e-10 * scale;
    for _ in 0..(2 * nc + 8) {
        let mut lambda = DVector::zeros(nc);
        if !working.is_empty() {
            let k = working.len();
            let pw = DMatrix::from_fn(k, k, |a, b| p[(working[a], working[b])]);
            let dw = DVector::from_fn(k, |a, _| d[working[a]]);
            // equality rows: P_w lambda_w = -d_w
            let lw = match pw.clone().cholesky() {
                Some(c) => -c.solve(&dw),
                None => {
                    // dependent rows: drop the one with the smallest seed multiplier
                    let (pos, _) = working
                        .iter()
                        .enumerate()
                        .min_by(|a, b| lambda0[*a.1].total_cmp(&lambda0[*b.1]))?;
                    working.remove(pos);
                    continue;
                }
            };
            for (a, &i) in working.iter().enumerate() {
                lambda[i] = lw[a];
            }
            let (pos, val) = working
                .iter()
                .enumerate()
                .map(|(a, &i)| (a, lambda[i]))
                .min_by(|a, b| a.1.total_cmp(&b.1))?;
            if val < -tol * lambda.amax().max(1.0) {
                working.remove(pos);
                continue;
            }
        }
        let lambda = lambda.map(|v| v.max(0.0));
        let z = z_unc - hinv_mt * &lambda;
        let slack = &qp.m * &z - &qp.b;
        let (worst, viol) = slack.argmax();
        if viol > feas_tol && !working.contains(&worst) {
            working.push(worst);
            continue;
        }
        return Some((z, lambda));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(h: f64, g: f64, m: f64, b: f64) -> QpProblem {
        QpProblem {
            h: DMatrix::from_element(1, 1, h),
            g: DVector::from_element(1, g),
            m: DMatrix::from_element(1, 1, m),
            b: DVector::from_element(1, b),
        }
    }

    #[test]
    fn clipped_scalar_minimum() {
        // (x - 3)^2 = x^2 - 6x + 9 -> H = 2, g = -6
        let s = solve_qp(&scalar(2.0, -6.0, 1.0, 1.0), QpSettings::default(), None).unwrap();
        assert!((s.z[0] - 1.0).abs() < 1e-12);
        assert!((s.lambda[0] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn inactive_constraint_gives_unconstrained_point() {
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let g = DVector::from_vec(vec![1.0, -2.0]);
        let qp = QpProblem { h: h.clone(), g: g.clone(), m: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), b: DVector::from_element(1, 100.0) };
        let s = solve_qp(&qp, QpSettings::default(), None).unwrap();
        let z = -h.cholesky().unwrap().solve(&g);
        assert!((s.z - z).amax() < 1e-12);
        assert_eq!(s.active_set_size, 0);
    }

    #[test]
    fn infeasible_rows_are_reported() {
        // x <= -1 and -x <= -1 (x >= 1)
        let qp = QpProblem {
            h: DMatrix::from_element(1, 1, 1.0),
            g: DVector::zeros(1),
            m: DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            b: DVector::from_vec(vec![-1.0, -1.0]),
        };
        let r = solve_qp(&qp, QpSettings { max_iter: 2000, tol: 1e-12 }, None);
        assert!(matches!(r, Err(Error::Infeasible { .. })), "{r:?}");
    }

    /// Tries every subset of constraints as the active set and keeps the best
    /// KKT point that is primal and dual feasible.
    pub(crate) fn enumerate(qp: &QpProblem) -> f64 {
        let n = qp.h.nrows();
        let nc = qp.m.nrows();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << nc) {
            let act: Vec<usize> = (0..nc).filter(|i| mask & (1 << i) != 0).collect();
            let k = act.len();
            let mut kkt = DMatrix::zeros(n + k, n + k);
            let mut rhs = DVector::zeros(n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
            for i in 0..n {
                rhs[i] = -qp.g[i];
            }
            for (a, &r) in act.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + a, j)] = qp.m[(r, j)];
                    kkt[(j, n + a)] = qp.m[(r, j)];
                }
                rhs[n + a] = qp.b[r];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            if !sol.iter().all(|v| v.is_finite()) {
                continue;
            }
            let z = sol.rows(0, n).into_owned();
            if (0..k).any(|a| sol[n + a] < -1e-9) {
                continue;
            }
            if qp.max_violation(&z).1 > 1e-9 {
                continue;
            }
            best = best.min(qp.objective(&z));
        }
        best
    }

    pub(crate) fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
        let n = rng.random_range(1..=8);
        let nc = rng.random_range(1..=12);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = a.transpose() * a + DMatrix::identity(n, n) * 0.1;
        let g = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let m = DMatrix::from_fn(nc, n, |_, _| rng.random_range(-1.0..1.0));
        let z0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let slack = DVector::from_fn(nc, |_, _| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) });
        let b = &m * z0 + slack;
        QpProblem { h, g, m, b }
    }

    #[test]
    fn matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for k in 0..500 {
            let qp = random_qp(&mut rng);
            let s = solve_qp(&qp, QpSettings::default(), None).unwrap();
            let oracle = enumerate(&qp);
            assert!((s.objective - oracle).abs() <= 1e-6 * oracle.abs().max(1.0), "case {k}: {} vs {oracle}", s.objective);
            assert!(s.kkt_residual <= 1e-6, "case {k}: kkt {}", s.kkt_residual);
        }
    }

    #[test]
    fn warm_start_reaches_same_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let qp = random_qp(&mut rng);
        let cold = solve_qp(&qp, QpSettings::default(), None).unwrap();
        let warm = solve_qp(&qp, QpSettings::default(), Some(&cold.lambda)).unwrap();
        assert!((cold.z - warm.z).amax() < 1e-9);
    }
}
