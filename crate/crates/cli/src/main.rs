use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fourwisd::bayes_opt::{optimize, write_history_csv, BoConfig, SearchSpace};
use fourwisd::domain::FORCE_CHANNELS;
use fourwisd::harness::io::{read_trajectory_csv, write_metrics_json, write_phase_plane_csv, write_trajectory_csv};
use fourwisd::harness::suite::{run_suite, thread_count, write_suite, SUITE_ESTIMATORS};
use fourwisd::harness::svg::{line_plot, Series};
use fourwisd::harness::{run_scenario, EstimatorKind, LoopRecord, Scenario};
use fourwisd::lstm::{generate_dataset, train, Arch, Dataset, DatasetSpec, LstmModel, TrainConfig, HYPERPARAMETER_NAMES};
use fourwisd::metrics::phase_plane;
use fourwisd::noise::NoiseCase;
use fourwisd::{Error, Result};

#[derive(Parser)]
#[command(name = "fourwisd", version, about = "Path tracking with estimated tire forces for a 4WIS/4WID vehicle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// built-in configuration to start from
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// scenario JSON replacing the preset scenario
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    Truth,
    Ekf,
    Lstm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    None,
    Case1,
    Case2,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop scenario
    Simulate {
        #[arg(long, value_enum)]
        estimator: Option<Estimator>,
        #[arg(long, value_enum)]
        noise: Option<Noise>,
        /// LSTM checkpoint
        #[arg(long)]
        model: Option<PathBuf>,
        /// simulated time, s
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Generate the estimator training dataset
    GenData {
        /// dataset spec JSON replacing the preset
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train an LSTM force estimator
    Train {
        /// dataset directory written by gen-data; generated when absent
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long, default_value_t = 1)]
        layers: usize,
    },
    /// Bayesian optimization of the training hyperparameters
    Tune {
        #[arg(long, default_value_t = 100)]
        budget: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// EKF and LSTM under every noise case
    Suite {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// SVG plots from a trajectory CSV
    Plot {
        #[arg(long)]
        input: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<u8> {
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Simulate { estimator, noise, model, duration } => {
            let mut sc = scenario(cli)?;
            if let Some(e) = estimator {
                sc.estimator = estimator_kind(*e);
            }
            if let Some(n) = noise {
                sc.noise = noise_case(*n);
            }
            if model.is_some() {
                sc.model_path = model.clone();
            }
            if let Some(d) = duration {
                sc.duration = *d;
            }
            simulate(&sc, &cli.out)
        }
        Command::GenData { spec } => {
            let spec = dataset_spec(cli, spec.as_deref())?;
            let data = generate_dataset(&spec, &scenario(cli)?.vehicle)?;
            data.save(&cli.out)?;
            println!(
                "dataset: train {} test {} validation {} -> {}",
                data.train.len(),
                data.test.len(),
                data.validation.len(),
                cli.out.display()
            );
            Ok(0)
        }
        Command::Train { data, hidden, layers } => {
            let data = dataset(cli, data.as_deref())?;
            let arch = Arch { hidden: hidden.unwrap_or(default_hidden(cli.preset)), layers: *layers };
            arch.validate()?;
            let cfg = TrainConfig { threads: thread_count(), ..train_config(cli.preset) };
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
            let mut model = LstmModel::init(arch, &mut rng);
            let history = train(&mut model, &data, &cfg, &mut rng)?;
            model.save(&cli.out.join("model.json"))?;
            std::fs::write(cli.out.join("train_history.json"), serde_json::to_string_pretty(&history)?)?;
            println!(
                "trained {} epochs: train RMSE {:.4}, validation RMSE {:.4} -> {}",
                history.epoch_loss.len(),
                history.final_train_rmse,
                history.final_validation_rmse,
                cli.out.join("model.json").display()
            );
            Ok(0)
        }
        Command::Tune { budget, data, hidden } => {
            let data = dataset(cli, data.as_deref())?;
            let arch = Arch { hidden: hidden.unwrap_or(default_hidden(cli.preset)), layers: 1 };
            arch.validate()?;
            let base = TrainConfig { threads: 1, ..train_config(cli.preset) };
            let space = match cli.preset {
                Preset::Paper => SearchSpace::table_ii(),
                Preset::Desk => SearchSpace::desk(),
            };
            let seed = cli.seed.unwrap_or(0);
            let objective = |x: &[f64]| -> Result<f64> {
                let cfg = base.with_hyperparameters(x)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut model = LstmModel::init(arch, &mut rng);
                let h = train(&mut model, &data, &cfg, &mut rng)?;
                if h.final_validation_rmse.is_finite() {
                    Ok(h.final_validation_rmse)
                } else {
                    Err(Error::Numerical("non-finite validation RMSE".into()))
                }
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = BoConfig { parallel: thread_count(), ..BoConfig::default() };
            let res = optimize(objective, &space, *budget, &cfg, &mut rng)?;
            write_history_csv(&cli.out.join("tuning_history.csv"), &space, &res.history)?;
            let best: serde_json::Map<String, serde_json::Value> =
                HYPERPARAMETER_NAMES.iter().zip(&res.best_x).map(|(k, v)| (k.to_string(), (*v).into())).collect();
            let summary = serde_json::json!({ "best_value": res.best_value, "best_iter": res.best_iter, "best": best });
            std::fs::write(cli.out.join("tuning_best.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("best validation RMSE {:.4} at trial {} of {}", res.best_value, res.best_iter, res.history.len());
            Ok(0)
        }
        Command::Suite { model, duration } => {
            let mut base = scenario(cli)?;
            if let Some(d) = duration {
                base.duration = *d;
            }
            base.validate()?;
            let path = model.clone().or_else(|| base.model_path.clone());
            let model = path.as_deref().map(LstmModel::load).transpose()?;
            if model.is_none() {
                warn!("no LSTM checkpoint given; LSTM runs will be recorded as failures");
            }
            let res = run_suite(&base, model.as_ref())?;
            write_suite(&cli.out, &res)?;
            println!("channel        {}", FORCE_CHANNELS.join("  "));
            for (e, row) in SUITE_ESTIMATORS.iter().zip(&res.tables.rmse) {
                match row {
                    Some(r) => println!("{:<14} {}", e.name(), r.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>().join("  ")),
                    None => println!("{:<14} (failed)", e.name()),
                }
            }
            for f in &res.tables.failures {
                warn!("{f}");
            }
            println!("{} runs, {} failures -> {}", res.runs.len(), res.tables.failures.len(), cli.out.display());
            Ok(0)
        }
        Command::Plot { input } => {
            let records = read_trajectory_csv(input)?;
            plot(&records, &cli.out)?;
            println!("plots -> {}", cli.out.display());
            Ok(0)
        }
    }
}

fn scenario(cli: &Cli) -> Result<Scenario> {
    let mut sc = match &cli.scenario {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => match cli.preset {
            Preset::Paper => Scenario::paper(),
            Preset::Desk => Scenario::desk(),
        },
    };
    if let Some(s) = cli.seed {
        sc.seed = s;
    }
    Ok(sc)
}

fn dataset_spec(cli: &Cli, path: Option<&Path>) -> Result<DatasetSpec> {
    let mut spec = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => match cli.preset {
            Preset::Paper => DatasetSpec::paper(),
            Preset::Desk => DatasetSpec::desk(),
        },
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn dataset(cli: &Cli, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => Dataset::load(d),
        None => {
            info!("generating the {} dataset", if cli.preset == Preset::Paper { "paper" } else { "desk" });
            generate_dataset(&dataset_spec(cli, None)?, &scenario(cli)?.vehicle)
        }
    }
}

fn default_hidden(p: Preset) -> usize {
    match p {
        Preset::Paper => 128,
        Preset::Desk => 8,
    }
}

fn train_config(p: Preset) -> TrainConfig {
    match p {
        Preset::Paper => TrainConfig::table_ii(),
        Preset::Desk => TrainConfig::desk(),
    }
}

fn estimator_kind(e: Estimator) -> EstimatorKind {
    match e {
        Estimator::Truth => EstimatorKind::Truth,
        Estimator::Ekf => EstimatorKind::Ekf,
        Estimator::Lstm => EstimatorKind::Lstm,
    }
}

fn noise_case(n: Noise) -> NoiseCase {
    match n {
        Noise::None => NoiseCase::None,
        Noise::Case1 => NoiseCase::Case1,
        Noise::Case2 => NoiseCase::Case2,
    }
}

fn simulate(sc: &Scenario, out: &Path) -> Result<u8> {
    let o = run_scenario(sc)?;
    write_trajectory_csv(&out.join("trajectory.csv"), &o.records)?;
    write_metrics_json(&out.join("metrics.json"), &o)?;
    if o.records.len() >= 2 {
        write_phase_plane_csv(&out.join("phase_plane.csv"), &o.records)?;
        plot(&o.records, out)?;
    }
    println!(
        "{} / {} / {}: {} steps, max departure {:.3} m, max control step {:.2} ms -> {}",
        sc.name,
        sc.estimator.name(),
        sc.noise.name(),
        o.records.len(),
        o.metrics.max_departure,
        o.max_control_seconds * 1e3,
        out.display()
    );
    match &o.failure {
        Some(f) => {
            eprintln!("run failed: {f}");
            Ok(3)
        }
        None => Ok(0),
    }
}

fn plot(records: &[LoopRecord], out: &Path) -> Result<()> {
    let xy = |f: fn(&LoopRecord) -> (f64, f64)| records.iter().map(f).collect::<Vec<_>>();
    let traj = [Series { label: "reference", points: xy(|r| (r.x, r.y_ref)) }, Series { label: "vehicle", points: xy(|r| (r.x, r.y)) }];
    std::fs::write(out.join("trajectory.svg"), line_plot("Lateral position", "X [m]", "Y [m]", &traj))?;

    let t: Vec<f64> = records.iter().map(|r| r.t).collect();
    let b: Vec<f64> = records.iter().map(|r| r.beta).collect();
    let pts = phase_plane(&t, &b)?.into_iter().map(|(_, b, d)| (b, d)).collect();
    std::fs::write(
        out.join("phase_plane.svg"),
        line_plot("Sideslip phase plane", "beta [rad]", "beta rate [rad/s]", &[Series { label: "beta", points: pts }]),
    )?;

    let mut forces = Vec::new();
    for (c, name) in FORCE_CHANNELS.iter().enumerate().skip(4) {
        forces.push(Series { label: name, points: records.iter().map(|r| (r.t, r.force_true[c])).collect() });
    }
    std::fs::write(out.join("forces_fy.svg"), line_plot("Lateral tire forces", "t [s]", "Fy [N]", &forces))?;
    let est: Vec<Series> = [4usize, 5]
        .iter()
        .flat_map(|&c| {
            [
                Series { label: FORCE_CHANNELS[c], points: records.iter().map(|r| (r.t, r.force_true[c])).collect() },
                Series { label: "estimate", points: records.iter().map(|r| (r.t, r.force_est[c])).collect() },
            ]
        })
        .collect();
    std::fs::write(out.join("forces_estimate.svg"), line_plot("Front lateral force estimates", "t [s]", "Fy [N]", &est))?;
    Ok(())
}
