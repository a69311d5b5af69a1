//! Estimator × noise-case comparison runs.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{write_metrics_json, write_phase_plane_csv, write_trajectory_csv};
use super::svg::{line_plot, Series};
use super::{run_closed_loop, EstimatorKind, RunOutcome, Scenario};
use crate::domain::FORCE_CHANNELS;
use crate::lstm::LstmModel;
use crate::metrics::channel_relative_error;
use crate::noise::NoiseCase;
use crate::{Error, Result};

pub const SUITE_ESTIMATORS: [EstimatorKind; 2] = [EstimatorKind::Ekf, EstimatorKind::Lstm];

pub struct SuiteRun {
    pub estimator: EstimatorKind,
    pub noise: NoiseCase,
    pub outcome: std::result::Result<RunOutcome, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteTables {
    /// noise-free RMSE, one row per estimator in `SUITE_ESTIMATORS` order
    pub rmse: [Option<[f64; 8]>; 2],
    /// [estimator][case1, case2] relative error
    pub relative_error: [[Option<[f64; 8]>; 2]; 2],
    pub failures: Vec<String>,
}

pub struct SuiteResult {
    pub runs: Vec<SuiteRun>,
    pub tables: SuiteTables,
}

/// Worker count from `FOURWISD_THREADS`, else rayon's default.
pub fn thread_count() -> usize {
    std::env::var("FOURWISD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Runs all six combinations in parallel. Individual failures are kept in
/// the result instead of aborting the suite.
pub fn run_suite(base: &Scenario, model: Option<&LstmModel>) -> Result<SuiteResult> {
    let jobs: Vec<(EstimatorKind, NoiseCase)> =
        SUITE_ESTIMATORS.iter().flat_map(|&e| NoiseCase::ALL.iter().map(move |&n| (e, n))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs: Vec<SuiteRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(estimator, noise)| {
                let sc = Scenario { estimator, noise, model_path: None, ..base.clone() };
                let outcome = match (estimator, model) {
                    (EstimatorKind::Lstm, None) => Err("no LSTM checkpoint supplied".to_string()),
                    (EstimatorKind::Lstm, Some(m)) => run_closed_loop(&sc, Some(m)).map_err(|e| e.to_string()),
                    _ => run_closed_loop(&sc, None).map_err(|e| e.to_string()),
                };
                let outcome = match outcome {
                    Ok(o) if o.failure.is_some() => Err(o.failure.clone().unwrap_or_default()),
                    other => other,
                };
                SuiteRun { estimator, noise, outcome }
            })
            .collect()
    });
    let tables = tabulate(&runs);
    Ok(SuiteResult { runs, tables })
}

fn tabulate(runs: &[SuiteRun]) -> SuiteTables {
    let find = |e: EstimatorKind, n: NoiseCase| {
        runs.iter().find(|r| r.estimator == e && r.noise == n).and_then(|r| r.outcome.as_ref().ok())
    };
    let mut t = SuiteTables { rmse: [None; 2], relative_error: [[None; 2]; 2], failures: Vec::new() };
    for r in runs {
        if let Err(msg) = &r.outcome {
            t.failures.push(format!("{}/{}: {msg}", r.estimator.name(), r.noise.name()));
        }
    }
    for (i, &e) in SUITE_ESTIMATORS.iter().enumerate() {
        let Some(nominal) = find(e, NoiseCase::None) else { continue };
        t.rmse[i] = Some(nominal.metrics.force_rmse);
        for (j, case) in [NoiseCase::Case1, NoiseCase::Case2].into_iter().enumerate() {
            if let Some(o) = find(e, case) {
                match channel_relative_error(&o.metrics.force_rmse, &nominal.metrics.force_rmse) {
                    Ok(v) => t.relative_error[i][j] = Some(v),
                    Err(err) => t.failures.push(format!("{}/{}: {err}", e.name(), case.name())),
                }
            }
        }
    }
    t
}

fn row(label: &[&str], v: &Option<[f64; 8]>) -> Vec<String> {
    let mut r: Vec<String> = label.iter().map(|s| s.to_string()).collect();
    match v {
        Some(v) => r.extend(v.iter().map(|x| x.to_string())),
        None => r.extend(std::iter::repeat_n(String::new(), 8)),
    }
    r
}

/// Writes per-run CSV/JSON, the two tables and the comparison plots.
pub fn write_suite(dir: &Path, res: &SuiteResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in &res.runs {
        if let Ok(o) = &r.outcome {
            let stem = format!("{}_{}", r.estimator.name(), r.noise.name());
            write_trajectory_csv(&dir.join(format!("{stem}_trajectory.csv")), &o.records)?;
            write_phase_plane_csv(&dir.join(format!("{stem}_phase.csv")), &o.records)?;
            write_metrics_json(&dir.join(format!("{stem}_metrics.json")), o)?;
        }
    }

    let mut w = csv::Writer::from_path(dir.join("rmse.csv"))?;
    let mut h = vec!["estimator".to_string()];
    h.extend(FORCE_CHANNELS.iter().map(|s| s.to_string()));
    w.write_record(&h)?;
    for (i, e) in SUITE_ESTIMATORS.iter().enumerate() {
        w.write_record(row(&[e.name()], &res.tables.rmse[i]))?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("relative_error.csv"))?;
    let mut h = vec!["estimator".to_string(), "noise".to_string()];
    h.extend(FORCE_CHANNELS.iter().map(|s| s.to_string()));
    w.write_record(&h)?;
    for (i, e) in SUITE_ESTIMATORS.iter().enumerate() {
        for (j, n) in ["case1", "case2"].iter().enumerate() {
            w.write_record(row(&[e.name(), n], &res.tables.relative_error[i][j]))?;
        }
    }
    w.flush()?;

    if !res.tables.failures.is_empty() {
        std::fs::write(dir.join("failures.txt"), res.tables.failures.join("\n") + "\n")?;
    }
    write_plots(dir, res)
}

fn write_plots(dir: &Path, res: &SuiteResult) -> Result<()> {
    let nominal: Vec<(&str, &RunOutcome)> = res
        .runs
        .iter()
        .filter(|r| r.noise == NoiseCase::None)
        .filter_map(|r| r.outcome.as_ref().ok().map(|o| (r.estimator.name(), o)))
        .collect();
    let Some((_, first)) = nominal.first() else { return Ok(()) };

    let mut traj = vec![Series { label: "reference", points: first.records.iter().map(|r| (r.x, r.y_ref)).collect() }];
    traj.extend(nominal.iter().map(|(n, o)| Series { label: n, points: o.records.iter().map(|r| (r.x, r.y)).collect() }));
    std::fs::write(dir.join("trajectory.svg"), line_plot("Lateral position", "X [m]", "Y [m]", &traj))?;

    let mut phase = Vec::new();
    for (n, o) in &nominal {
        let t: Vec<f64> = o.records.iter().map(|r| r.t).collect();
        let b: Vec<f64> = o.records.iter().map(|r| r.beta).collect();
        let pts = crate::metrics::phase_plane(&t, &b)?.into_iter().map(|(_, b, d)| (b, d)).collect();
        phase.push(Series { label: n, points: pts });
    }
    std::fs::write(dir.join("phase_plane.svg"), line_plot("Sideslip phase plane", "beta [rad]", "beta rate [rad/s]", &phase))?;

    // front-left lateral force, the channel the yaw controller leans on most
    let c = 4;
    let mut forces = vec![Series { label: "true", points: first.records.iter().map(|r| (r.t, r.force_true[c])).collect() }];
    forces.extend(nominal.iter().map(|(n, o)| Series { label: n, points: o.records.iter().map(|r| (r.t, r.force_est[c])).collect() }));
    std::fs::write(dir.join("forces_fy_fl.svg"), line_plot("Front-left lateral force", "t [s]", "Fy [N]", &forces))?;
    Ok(())
}
