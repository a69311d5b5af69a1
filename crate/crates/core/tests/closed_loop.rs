use fourwisd::domain::{MAX_STEER, MAX_STEER_RATE};
use fourwisd::dyc::yaw_rate_bound;
use fourwisd::harness::io::{metrics_json, read_trajectory_csv, write_trajectory_csv};
use fourwisd::harness::{lyapunov_decrease_ratio, run_closed_loop, run_scenario, EstimatorKind, Scenario};
use fourwisd::noise::NoiseCase;
use fourwisd::plant::RoadProfile;

fn short(estimator: EstimatorKind) -> Scenario {
    Scenario { estimator, duration: 6.0, ..Scenario::desk() }
}

#[test]
fn straight_road_stays_on_centre() {
    let sc = Scenario {
        field: Scenario::desk().field.without_obstacle(),
        road: RoadProfile::uniform(0.85),
        ..Scenario::desk()
    };
    let o = run_closed_loop(&sc, None).unwrap();
    assert!(o.failure.is_none());
    assert_eq!(o.records.len(), 1000);
    let max_y = o.records.iter().map(|r| r.y.abs()).fold(0.0, f64::max);
    assert!(max_y < 0.05, "max |Y| = {max_y}");
}

#[test]
fn truth_run_tracks_and_respects_bounds() {
    let sc = Scenario::desk();
    let o = run_closed_loop(&sc, None).unwrap();
    assert!(o.failure.is_none(), "{:?}", o.failure);
    assert!(o.metrics.max_departure < 1.0, "{}", o.metrics.max_departure);
    let du = MAX_STEER_RATE * sc.vehicle.dt + 1e-12;
    for w in o.records.windows(2) {
        assert!((w[1].t - w[0].t - 0.01).abs() < 1e-9);
        for i in 0..4 {
            assert!(w[1].delta[i].abs() <= MAX_STEER + 1e-12);
            assert!((w[1].delta[i] - w[0].delta[i]).abs() <= du);
        }
    }
    for r in &o.records {
        assert!(r.gamma_des.abs() <= yaw_rate_bound(sc.road.mu_at(r.x), r.vx.max(1.0), sc.vehicle.g) * 1.05 + 1e-9);
        assert!(r.torque.iter().all(|t| t.abs() <= sc.torque_max));
    }
}

#[test]
fn sideslip_reconstruction_follows_plant() {
    let o = run_closed_loop(&Scenario::desk(), None).unwrap();
    let worst = o.records.iter().map(|r| (r.vx * r.beta_hat.tan() - r.vy).abs()).fold(0.0, f64::max);
    assert!(worst < 0.3, "max |vy_hat - vy| = {worst}");
}

#[test]
fn ekf_run_completes_and_stays_in_bounds() {
    let o = run_closed_loop(&short(EstimatorKind::Ekf), None).unwrap();
    assert!(o.failure.is_none(), "{:?}", o.failure);
    assert!(o.metrics.max_departure < 5.0);
    assert!(o.metrics.force_rmse.iter().all(|v| v.is_finite() && *v > 0.0));
}

#[test]
fn identical_seeds_give_identical_reports() {
    let sc = Scenario { noise: NoiseCase::Case1, seed: 11, ..short(EstimatorKind::Ekf) };
    let a = run_closed_loop(&sc, None).unwrap();
    let b = run_closed_loop(&sc, None).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(metrics_json(&a).unwrap(), metrics_json(&b).unwrap());
    let c = run_closed_loop(&Scenario { seed: 12, ..sc }, None).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn injected_noise_matches_targets() {
    let sc = Scenario { noise: NoiseCase::Case2, ..Scenario::desk() };
    let o = run_closed_loop(&sc, None).unwrap();
    assert!(o.noise_stats.samples >= 10_000);
    for (got, want) in o.noise_stats.imu_var.iter().zip(NoiseCase::Case2.imu_si()) {
        assert!((got / want - 1.0).abs() < 0.2, "imu {got} vs {want}");
    }
    for (got, want) in o.noise_stats.ekf_var.iter().zip(NoiseCase::Case2.ekf_si(sc.vehicle.g)) {
        assert!((got / want - 1.0).abs() < 0.2, "ekf {got} vs {want}");
    }
}

#[test]
fn reaching_phase_decreases_lyapunov_function() {
    let sc = Scenario { initial_yaw_rate: 0.5, ..short(EstimatorKind::Truth) };
    let o = run_closed_loop(&sc, None).unwrap();
    let (dec, outside) = lyapunov_decrease_ratio(&o.records, sc.smc.phi_b);
    assert!(outside > 0);
    assert!(dec as f64 >= 0.99 * outside as f64, "{dec}/{outside}");
}

#[test]
fn trajectory_csv_roundtrips_a_real_run() {
    let o = run_closed_loop(&Scenario { duration: 1.0, ..Scenario::desk() }, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    write_trajectory_csv(&p, &o.records).unwrap();
    assert_eq!(read_trajectory_csv(&p).unwrap(), o.records);
}

#[test]
fn lstm_without_checkpoint_is_a_config_error() {
    let sc = short(EstimatorKind::Lstm);
    assert!(matches!(run_scenario(&sc), Err(fourwisd::Error::Config(_))));
    assert!(matches!(run_closed_loop(&sc, None), Err(fourwisd::Error::Config(_))));
    let missing = Scenario { model_path: Some("/nonexistent/model.json".into()), ..sc };
    assert!(matches!(run_scenario(&missing), Err(fourwisd::Error::Config(_))));
}

#[test]
fn scenario_json_roundtrip_and_unknown_fields() {
    let sc = Scenario::paper();
    let text = serde_json::to_string(&sc).unwrap();
    let back: Scenario = serde_json::from_str(&text).unwrap();
    assert_eq!(back, sc);
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["bogus"] = serde_json::json!(1);
    assert!(serde_json::from_value::<Scenario>(v).is_err());
}
