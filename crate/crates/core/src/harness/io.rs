//! CSV and JSON artifacts of closed-loop runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LoopRecord, RunOutcome};
use crate::domain::FORCE_CHANNELS;
use crate::metrics::{phase_plane, RunMetrics};
use crate::{Error, Result};

const WHEELS: [&str; 4] = ["FL", "FR", "RL", "RR"];

fn header() -> Vec<String> {
    let mut h: Vec<String> = ["t", "X", "Y", "vx", "vy", "yaw", "yaw_rate", "beta"].iter().map(|s| s.to_string()).collect();
    h.extend(FORCE_CHANNELS.iter().map(|c| c.to_string()));
    h.extend(WHEELS.iter().map(|w| format!("fz_{w}")));
    h.extend(WHEELS.iter().map(|w| format!("delta_{w}")));
    h.extend(WHEELS.iter().map(|w| format!("T_{w}")));
    h.extend(["beta_hat", "Y_ref", "phi_ref", "mu", "M_z", "s", "gamma_des"].iter().map(|s| s.to_string()));
    h.extend(FORCE_CHANNELS.iter().map(|c| format!("est_{c}")));
    h.extend(["mpc_cost", "qp_iters", "mpc_held"].iter().map(|s| s.to_string()));
    h
}

/// One row per control step: the plant columns first (time, pose, true
/// forces, commands), then controller internals. Floats are written in
/// shortest round-trip form.
pub fn write_trajectory_csv(path: &Path, records: &[LoopRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header())?;
    for r in records {
        let mut row: Vec<String> = [r.t, r.x, r.y, r.vx, r.vy, r.yaw, r.yaw_rate, r.beta].iter().map(|v| v.to_string()).collect();
        row.extend(r.force_true.iter().chain(&r.fz).chain(&r.delta).chain(&r.torque).map(|v| v.to_string()));
        row.extend([r.beta_hat, r.y_ref, r.phi_ref, r.mu, r.m_z, r.s, r.gamma_des].iter().map(|v| v.to_string()));
        row.extend(r.force_est.iter().map(|v| v.to_string()));
        row.push(r.mpc_cost.to_string());
        row.push(r.qp_iters.to_string());
        row.push((r.mpc_held as u8).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<LoopRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    if rd.headers()?.iter().collect::<Vec<_>>() != header() {
        return Err(Error::Config(format!("{} is not a trajectory CSV", path.display())));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let f: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad value {s:?}: {e}"))))
            .collect::<Result<_>>()?;
        let arr4 = |i: usize| -> [f64; 4] { std::array::from_fn(|k| f[i + k]) };
        let arr8 = |i: usize| -> [f64; 8] { std::array::from_fn(|k| f[i + k]) };
        out.push(LoopRecord {
            t: f[0],
            x: f[1],
            y: f[2],
            vx: f[3],
            vy: f[4],
            yaw: f[5],
            yaw_rate: f[6],
            beta: f[7],
            force_true: arr8(8),
            fz: arr4(16),
            delta: arr4(20),
            torque: arr4(24),
            beta_hat: f[28],
            y_ref: f[29],
            phi_ref: f[30],
            mu: f[31],
            m_z: f[32],
            s: f[33],
            gamma_des: f[34],
            force_est: arr8(35),
            mpc_cost: f[43],
            qp_iters: f[44] as usize,
            mpc_held: f[45] != 0.0,
        });
    }
    Ok(out)
}

/// `t,beta,beta_dot`.
pub fn write_phase_plane_csv(path: &Path, records: &[LoopRecord]) -> Result<()> {
    let t: Vec<f64> = records.iter().map(|r| r.t).collect();
    let b: Vec<f64> = records.iter().map(|r| r.beta).collect();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "beta", "beta_dot"])?;
    for (t, b, d) in phase_plane(&t, &b)? {
        w.write_record([t.to_string(), b.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Metrics plus run metadata, without the per-step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub estimator: String,
    pub noise: String,
    pub seed: u64,
    pub steps: usize,
    pub failure: Option<String>,
    pub metrics: RunMetrics,
    pub noise_stats: super::NoiseStats,
}

impl From<&RunOutcome> for MetricsReport {
    fn from(o: &RunOutcome) -> Self {
        MetricsReport {
            scenario: o.scenario.clone(),
            estimator: o.estimator.name().into(),
            noise: o.noise.name().into(),
            seed: o.seed,
            steps: o.records.len(),
            failure: o.failure.clone(),
            metrics: o.metrics.clone(),
            noise_stats: o.noise_stats.clone(),
        }
    }
}

pub fn metrics_json(o: &RunOutcome) -> Result<String> {
    Ok(serde_json::to_string_pretty(&MetricsReport::from(o))?)
}

pub fn write_metrics_json(path: &Path, o: &RunOutcome) -> Result<()> {
    std::fs::write(path, metrics_json(o)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: usize) -> LoopRecord {
        let v = i as f64 * 0.1 + 1.0 / 3.0;
        LoopRecord {
            t: 0.01 * i as f64,
            x: v,
            y: -v,
            yaw: 1e-7 * v,
            vx: 22.0,
            vy: 0.1,
            yaw_rate: 0.2,
            beta: 0.003,
            beta_hat: 0.004,
            y_ref: 1.7,
            phi_ref: 0.05,
            mu: 0.2,
            delta: [0.01, 0.02, -0.01, -0.02],
            torque: [1.0, 2.0, 3.0, 4.0],
            m_z: 123.456,
            s: 0.07,
            gamma_des: 0.1,
            force_true: [std::f64::consts::PI; 8],
            fz: [4000.0, 4100.5, 3000.25, 2999.0],
            force_est: [2.5; 8],
            mpc_cost: 1e-3,
            qp_iters: 7,
            mpc_held: i.is_multiple_of(2),
        }
    }

    #[test]
    fn trajectory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        let recs: Vec<LoopRecord> = (0..5).map(record).collect();
        write_trajectory_csv(&p, &recs).unwrap();
        assert_eq!(read_trajectory_csv(&p).unwrap(), recs);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,X,Y,vx,vy,yaw,yaw_rate,beta,fx_FL,"));
        assert_eq!(text.lines().next().unwrap().split(',').count(), 46);
    }

    #[test]
    fn phase_plane_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pp.csv");
        write_phase_plane_csv(&p, &(0..4).map(record).collect::<Vec<_>>()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,beta,beta_dot\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
