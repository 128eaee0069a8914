//! `rally`: experiment runner for the estimation and control stack.
//!
//! Every subcommand reads a TOML config, writes its artifacts into an
//! isolated output directory, and finishes with a `manifest.json`
//! recording the config hash, seed, and per-file checksums. Exit codes:
//! 0 success, 2 config error, 3 input error, 4 numerical divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use rally_core::config::{ExperimentConfig, ManeuverConfig, ModelKind};
use rally_core::logio::{
    read_csv, read_sensor_jsonl, write_csv, write_jsonl, write_sensor_jsonl, write_truth_csv,
    RunManifest,
};
use rally_core::moi::{bifilar_moi, oscillation_period, BifilarSetup};
use rally_core::mppi::{MppiController, RolloutDynamics, RolloutModel};
use rally_core::smoother::{build_graph, interpolate_state, optimize};
use rally_core::tire::MagicFormulaParams;
use rally_core::track::{
    build_oval_track, run_closed_loop, run_open_loop, simulate_sensors, SensorStreams,
    TruthSample,
};
use rally_core::ukf::{
    AlmUkf, GaussianBelief, JointUkf, NoiseSampleWindow, NoiseStatistics, ParameterSpec, UtParams,
};
use rally_core::vehicle::{step_full_vehicle, ControlInput, VehicleState11, VehicleState3};
use rally_core::RallyError;

#[derive(Parser)]
#[command(name = "rally", version, about = "Scale-vehicle estimation and control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `<output_dir>/<subcommand>` from
    /// the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Open-loop scripted maneuver: truth trajectory plus synthetic
    /// sensor streams.
    Sim(CommonArgs),
    /// Closed-loop MPPI race on the oval track.
    Race(CommonArgs),
    /// Joint state/parameter filter over a sim-generated sensor log.
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
        /// Sensor log (JSONL) from `sim`.
        #[arg(long)]
        log: PathBuf,
    },
    /// Batch GPS/IMU smoothing of a sensor log.
    Smooth {
        #[command(flatten)]
        common: CommonArgs,
        /// Sensor log (JSONL) from `sim` or `race`.
        #[arg(long)]
        log: PathBuf,
    },
    /// Moment of inertia from a pendulum angle series.
    Moi {
        /// Pendulum setup (TOML).
        #[arg(long)]
        setup: PathBuf,
        /// Angle series CSV with columns t_s, angle_rad.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate finished runs into plot-ready summary tables.
    Report {
        /// Run directories containing manifests.
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sim(c) => run_sim(&c),
        Command::Race(c) => run_race(&c),
        Command::Estimate { common, log } => run_estimate(&common, &log),
        Command::Smooth { common, log } => run_smooth(&common, &log),
        Command::Moi { setup, data, out } => run_moi(&setup, &data, out.as_deref()),
        Command::Report { runs, out } => run_report(&runs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &RallyError) -> u8 {
    match e {
        RallyError::Config(_) | RallyError::Domain(_) | RallyError::Geometry(_) => 2,
        RallyError::Input(_) | RallyError::InsufficientData(_) => 3,
        RallyError::Divergence(_) | RallyError::Numerical(_) | RallyError::NonConvergence(_) => 4,
    }
}

type Result<T> = rally_core::Result<T>;

/// Resolves the run directory, creating it if needed.
fn run_dir(cfg: &ExperimentConfig, sub: &str, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(sub));
    std::fs::create_dir_all(&dir)
        .map_err(|e| RallyError::Input(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RallyError::Input(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = ExperimentConfig::from_toml_str(&text)?;
    Ok((cfg, text))
}

fn planar_dynamics(cfg: &ExperimentConfig) -> Result<RolloutDynamics> {
    let model = match cfg.model {
        ModelKind::Single => RolloutModel::Single,
        ModelKind::Double | ModelKind::Full => RolloutModel::Double,
    };
    Ok(RolloutDynamics {
        model,
        params: cfg.vehicle_params()?,
        mf: cfg.tire,
    })
}

fn maneuver_control(m: &ManeuverConfig, t: f64) -> ControlInput {
    ControlInput {
        delta: 0.35 * m.steer_amplitude * (2.0 * std::f64::consts::PI * t / m.steer_period).sin(),
        drive_torque: m.drive_torque,
        brake_front: 0.0,
    }
}

/// Open-loop truth for the configured model. The full model logs its
/// planar projection so downstream consumers see one trajectory format.
fn scripted_truth(cfg: &ExperimentConfig) -> Result<Vec<TruthSample>> {
    let initial = VehicleState3::rolling(
        cfg.maneuver.initial_speed,
        cfg.vehicle_params()?.wheel_radius,
    );
    if cfg.model != ModelKind::Full {
        let dynamics = planar_dynamics(cfg)?;
        return run_open_loop(
            &dynamics,
            |t| maneuver_control(&cfg.maneuver, t),
            initial,
            cfg.duration,
            cfg.physics_dt,
        );
    }
    let p = cfg.full_vehicle_params()?;
    let steps = (cfg.duration / cfg.physics_dt).round() as usize;
    let mut s = VehicleState11 {
        planar: initial,
        ..Default::default()
    };
    let mut truth = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 * cfg.physics_dt;
        let u = maneuver_control(&cfg.maneuver, t);
        let d = rally_core::vehicle::full_vehicle_derivatives(&s, &u, &p, &cfg.tire)?;
        truth.push(TruthSample {
            t,
            state: s.planar,
            a_x: d.planar.v_x - s.planar.v_y * s.planar.r,
            a_y: d.planar.v_y + s.planar.v_x * s.planar.r,
        });
        if i < steps {
            s = step_full_vehicle(&s, &u, &p, &cfg.tire, cfg.physics_dt)?;
        }
    }
    Ok(truth)
}

fn run_sim(args: &CommonArgs) -> Result<()> {
    let (cfg, text) = load_config(&args.config)?;
    let dir = run_dir(&cfg, "sim", args.out.as_deref())?;
    let truth = scripted_truth(&cfg)?;
    let streams = simulate_sensors(&truth, &cfg.sensors, cfg.seed)?;

    write_truth_csv(&dir.join("truth.csv"), &truth)?;
    write_sensor_jsonl(&dir.join("sensors.jsonl"), &streams)?;

    let mut manifest = RunManifest::new("sim", &text, cfg.seed);
    manifest.record(&dir, "truth.csv")?;
    manifest.record(&dir, "sensors.jsonl")?;
    manifest.write(&dir)?;
    println!(
        "sim: {} truth samples, {} GPS / {} IMU / {} wheel readings -> {}",
        truth.len(),
        streams.gps.len(),
        streams.imu.len(),
        streams.wheel.len(),
        dir.display()
    );
    Ok(())
}

fn run_race(args: &CommonArgs) -> Result<()> {
    let (cfg, text) = load_config(&args.config)?;
    let dir = run_dir(&cfg, "race", args.out.as_deref())?;
    let dynamics = planar_dynamics(&cfg)?;
    let (track, costmap) = build_oval_track(&cfg.track, 0.05, 0.3)?;
    let mut controller = MppiController::new(cfg.mppi.clone(), dynamics.clone(), costmap, cfg.seed)?;
    // Rolling start on the start/finish line, heading along the bottom
    // straight.
    let mut initial = VehicleState3::rolling(3.0, dynamics.params.wheel_radius);
    initial.p_y = -track.radius;
    let log = run_closed_loop(
        &dynamics,
        &mut controller,
        &track,
        initial,
        cfg.duration,
        cfg.physics_dt,
        cfg.control_period,
    )?;

    let lap_rows: Vec<Vec<f64>> = log
        .laps
        .iter()
        .map(|l| vec![l.lap as f64, l.start_t, l.end_t, l.duration()])
        .collect();
    write_csv(&dir.join("laps.csv"), &["lap", "start_t", "end_t", "duration"], &lap_rows)?;
    let control_rows: Vec<Vec<f64>> = log
        .controls
        .iter()
        .map(|(t, u)| vec![*t, u[0], u[1]])
        .collect();
    write_csv(&dir.join("controls.csv"), &["t", "steer", "throttle"], &control_rows)?;
    write_jsonl(&dir.join("trajectory.jsonl"), &log.truth)?;
    let streams = simulate_sensors(&log.truth, &cfg.sensors, cfg.seed)?;
    write_sensor_jsonl(&dir.join("sensors.jsonl"), &streams)?;

    let mut manifest = RunManifest::new("race", &text, cfg.seed);
    for name in ["laps.csv", "controls.csv", "trajectory.jsonl", "sensors.jsonl"] {
        manifest.record(&dir, name)?;
    }
    manifest.write(&dir)?;

    println!(
        "race: {} laps in {:.1} s, max track cost {:.3}{} -> {}",
        log.laps.len(),
        cfg.duration,
        log.max_track_cost,
        match log.boundary_violation_at {
            Some(t) => format!(", BOUNDARY VIOLATION at t={t:.2}"),
            None => String::new(),
        },
        dir.display()
    );
    Ok(())
}

/// Linear interpolation into a uniformly sampled stream, clamped at the
/// ends.
fn interp1<T>(
    samples: &[T],
    t: f64,
    time_of: impl Fn(&T) -> f64,
    value_of: impl Fn(&T) -> f64,
) -> f64 {
    let n = samples.len();
    if n == 1 {
        return value_of(&samples[0]);
    }
    let dt = (time_of(&samples[n - 1]) - time_of(&samples[0])) / (n - 1) as f64;
    let x = ((t - time_of(&samples[0])) / dt).clamp(0.0, (n - 1) as f64);
    let i = (x.floor() as usize).min(n - 2);
    let frac = x - i as f64;
    value_of(&samples[i]) * (1.0 - frac) + value_of(&samples[i + 1]) * frac
}

/// Joint state/parameter estimation of the tire curve's stiffness,
/// shape, and peak factors from a driving log, with optional
/// limited-memory noise adaptation.
fn run_estimate(args: &CommonArgs, log_path: &Path) -> Result<()> {
    let (cfg, text) = load_config(&args.config)?;
    let dir = run_dir(&cfg, "estimate", args.out.as_deref())?;
    let streams = read_sensor_jsonl(log_path)?;
    if streams.imu.len() < 2 || streams.wheel.len() < 2 {
        return Err(RallyError::InsufficientData(
            "estimation needs IMU and wheel streams".into(),
        ));
    }

    let est = cfg.estimator;
    let params = cfg.vehicle_params()?;
    let truth_mf = cfg.tire;
    let dt = 1.0 / est.rate_hz;
    let t_end = streams.imu.last().unwrap().t;
    let steps = (t_end / dt).floor() as usize;

    // Stiffness and peak factors only: the shape factor is nearly
    // unidentifiable from driving data (only the product B*C*D enters at
    // moderate slip) and dragging it along destabilizes the filter.
    let mf_of = move |p: &DVector<f64>| MagicFormulaParams {
        b: p[0],
        d: p[1],
        ..truth_mf
    };

    let state0 = VehicleState3::rolling(cfg.maneuver.initial_speed, params.wheel_radius);
    let x0 = DVector::from_vec(vec![
        state0.v_x,
        state0.v_y,
        state0.r,
        state0.omega_f,
        state0.omega_r,
    ]);
    let p0 = DVector::from_vec(vec![
        truth_mf.b * (1.0 + est.initial_offset),
        truth_mf.d * (1.0 + est.initial_offset),
    ]);
    let spec = ParameterSpec {
        lower: DVector::from_element(2, 0.2),
        upper: DVector::from_vec(vec![5.0, 3.0]),
        q_p_diag: DVector::from_element(2, est.q_p),
    };
    let p_cov = DMatrix::from_diagonal(&p0.map(|v| (0.35 * v).powi(2)));
    let wq = (cfg.sensors.wheel_quantization / 12f64.sqrt()).max(1e-3);
    let r_cov = DMatrix::from_diagonal(&DVector::from_vec(vec![
        cfg.sensors.gyro_sigma.powi(2).max(1e-8),
        cfg.sensors.accel_sigma.powi(2).max(1e-6),
        cfg.sensors.accel_sigma.powi(2).max(1e-6),
        wq * wq,
        wq * wq,
    ]));
    let mut q_cov = DMatrix::from_element(7, 7, 0.0);
    // The process model is the same integrator that generated the data,
    // so state process noise only covers measurement-time interpolation;
    // keeping it small also keeps the predicted covariance consistent,
    // which the adaptive noise estimators rely on.
    q_cov.view_mut((0, 0), (5, 5)).copy_from(&DMatrix::from_diagonal(
        &DVector::from_element(5, 1e-6),
    ));
    let stats = NoiseStatistics::zero_mean(q_cov, r_cov);
    let ut = UtParams {
        alpha: est.alpha,
        beta: est.beta,
        kappa: est.kappa,
    };
    let joint = JointUkf::new(
        GaussianBelief::new(x0, DMatrix::identity(5, 5) * 0.1),
        GaussianBelief::new(p0, p_cov),
        stats,
        ut,
        spec,
    );
    let mut filter = AlmUkf::new(joint, NoiseSampleWindow::for_rate(est.rate_hz));
    filter.adapt = est.adapt;

    let substeps = (dt / 1e-3).ceil().max(1.0) as usize;
    let dt_sub = dt / substeps as f64;
    let state_of = |x: &DVector<f64>| VehicleState3 {
        v_x: x[0],
        v_y: x[1],
        r: x[2],
        omega_f: x[3],
        omega_r: x[4],
        ..Default::default()
    };

    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 * dt;
        let u = maneuver_control(&cfg.maneuver, t);
        let f = |x: &DVector<f64>, p: &DVector<f64>| -> Result<DVector<f64>> {
            let mf = mf_of(p);
            let mut s = state_of(x);
            for _ in 0..substeps {
                s = rally_core::vehicle::step_single_track(&s, &u, &params, &mf, dt_sub)?;
            }
            Ok(DVector::from_vec(vec![s.v_x, s.v_y, s.r, s.omega_f, s.omega_r]))
        };
        let u_next = maneuver_control(&cfg.maneuver, t + dt);
        let h = |aug: &DVector<f64>| -> Result<DVector<f64>> {
            let s = state_of(&aug.rows(0, 5).into_owned());
            let mf = mf_of(&aug.rows(5, 2).into_owned());
            let d = rally_core::vehicle::single_track_derivatives(&s, &u_next, &params, &mf)?;
            Ok(DVector::from_vec(vec![
                s.r,
                d.v_x - s.v_y * s.r,
                d.v_y + s.v_x * s.r,
                s.omega_f,
                s.omega_r,
            ]))
        };
        let t_z = t + dt;
        let z = DVector::from_vec(vec![
            interp1(&streams.imu, t_z, |s| s.t, |s| s.gyro[2]),
            interp1(&streams.imu, t_z, |s| s.t, |s| s.accel[0]),
            interp1(&streams.imu, t_z, |s| s.t, |s| s.accel[1]),
            interp1(&streams.wheel, t_z, |s| s.t, |s| s.omega_f),
            interp1(&streams.wheel, t_z, |s| s.t, |s| s.omega_r),
        ]);
        filter.step(f, h, &z)?;

        let x = filter.filter.state();
        let p = filter.filter.parameters();
        let stats = &filter.filter.stats;
        let mut row = vec![t_z];
        row.extend(x.iter());
        row.extend(p.iter());
        for i in 0..5 {
            row.push(stats.r_cov[(i, i)]);
        }
        row.push(stats.q_cov.view((0, 0), (5, 5)).trace());
        row.push(stats.r.norm());
        row.push(stats.q.norm());
        rows.push(row);
    }

    write_csv(
        &dir.join("estimate.csv"),
        &[
            "t", "v_x", "v_y", "r", "omega_f", "omega_r", "mf_b", "mf_d", "r_var_gyro",
            "r_var_ax", "r_var_ay", "r_var_wf", "r_var_wr", "q_state_trace", "r_mean_norm",
            "q_mean_norm",
        ],
        &rows,
    )?;

    let p_final = filter.filter.parameters();
    let truth = [truth_mf.b, truth_mf.d];
    let err: f64 = (0..2)
        .map(|i| ((p_final[i] - truth[i]) / truth[i]).abs())
        .fold(0.0, f64::max);
    let mut manifest = RunManifest::new("estimate", &text, cfg.seed);
    manifest.record(&dir, "estimate.csv")?;
    manifest.write(&dir)?;
    println!(
        "estimate: {} steps, tire params B={:.4} D={:.4}, max relative error {:.2}% -> {}",
        steps,
        p_final[0],
        p_final[1],
        100.0 * err,
        dir.display()
    );
    Ok(())
}

fn run_smooth(args: &CommonArgs, log_path: &Path) -> Result<()> {
    let (cfg, text) = load_config(&args.config)?;
    let dir = run_dir(&cfg, "smooth", args.out.as_deref())?;
    let streams: SensorStreams = read_sensor_jsonl(log_path)?;
    let (graph, initial) = build_graph(&streams.gps, &streams.imu, &cfg.smoother)?;
    let report = optimize(&graph, &initial, &cfg.smoother)?;

    let node_rows: Vec<Vec<f64>> = graph
        .node_times
        .iter()
        .zip(&report.states)
        .map(|(t, s)| {
            let (roll, pitch, yaw) = s.rot.euler_angles();
            vec![
                *t, s.p.x, s.p.y, s.p.z, s.v.x, s.v.y, s.v.z, yaw, pitch, roll, s.bias_g.x,
                s.bias_g.y, s.bias_g.z, s.bias_a.x, s.bias_a.y, s.bias_a.z,
            ]
        })
        .collect();
    write_csv(
        &dir.join("nodes.csv"),
        &[
            "t", "p_x", "p_y", "p_z", "v_x", "v_y", "v_z", "yaw", "pitch", "roll", "bg_x", "bg_y",
            "bg_z", "ba_x", "ba_y", "ba_z",
        ],
        &node_rows,
    )?;

    let interp = interpolate_state(&graph, &report.states, &streams.imu);
    let interp_rows: Vec<Vec<f64>> = interp
        .iter()
        .map(|s| {
            vec![
                s.t, s.p[0], s.p[1], s.p[2], s.v[0], s.v[1], s.v[2], s.ypr[0], s.ypr[1], s.ypr[2],
            ]
        })
        .collect();
    write_csv(
        &dir.join("interpolated.csv"),
        &["t", "p_x", "p_y", "p_z", "v_x", "v_y", "v_z", "yaw", "pitch", "roll"],
        &interp_rows,
    )?;

    let mut manifest = RunManifest::new("smooth", &text, cfg.seed);
    manifest.record(&dir, "nodes.csv")?;
    manifest.record(&dir, "interpolated.csv")?;
    manifest.write(&dir)?;
    println!(
        "smooth: {} nodes, {} interpolated states, cost {:.3e} after {} iterations -> {}",
        graph.nodes(),
        interp.len(),
        report.cost_history.last().copied().unwrap_or(f64::NAN),
        report.iterations,
        dir.display()
    );
    Ok(())
}

fn default_n_periods() -> usize {
    20
}

/// Pendulum setup document: bifilar geometry plus how many periods to
/// average.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MoiSetup {
    m: f64,
    r_1: f64,
    r_2: f64,
    d: f64,
    #[serde(default = "default_gravity")]
    g: f64,
    #[serde(default = "default_n_periods")]
    n_periods: usize,
}

fn default_gravity() -> f64 {
    9.81
}

fn run_moi(setup_path: &Path, data_path: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(setup_path).map_err(|e| {
        RallyError::Input(format!("cannot read setup {}: {e}", setup_path.display()))
    })?;
    let setup: MoiSetup =
        toml::from_str(&text).map_err(|e| RallyError::Config(e.to_string()))?;
    let (header, rows) = read_csv(data_path)?;
    if header != ["t_s", "angle_rad"] {
        return Err(RallyError::Input(format!(
            "expected columns t_s, angle_rad; got {header:?}"
        )));
    }
    if rows.len() < 4 {
        return Err(RallyError::InsufficientData("too few angle samples".into()));
    }
    let t0 = rows[0][0];
    let t1 = rows[rows.len() - 1][0];
    if t1 <= t0 {
        return Err(RallyError::Input("time column must increase".into()));
    }
    let rate = (rows.len() - 1) as f64 / (t1 - t0);
    let angles: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let period = oscillation_period(&angles, rate, setup.n_periods)?;
    let bifilar = BifilarSetup {
        m: setup.m,
        r_1: setup.r_1,
        r_2: setup.r_2,
        d: setup.d,
        g: setup.g,
    };
    let inertia = bifilar_moi(&bifilar, period)?;
    println!("period {period:.6} s, moment of inertia {inertia:.6} kg m^2");

    if let Some(dir) = out {
        std::fs::create_dir_all(dir)
            .map_err(|e| RallyError::Input(format!("cannot create {}: {e}", dir.display())))?;
        write_csv(&dir.join("moi.csv"), &["period_s", "inertia_kgm2"], &[vec![period, inertia]])?;
        let mut manifest = RunManifest::new("moi", &text, 0);
        manifest.record(dir, "moi.csv")?;
        manifest.write(dir)?;
    }
    Ok(())
}

fn run_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(RallyError::Input("no run directories given".into()));
    }
    std::fs::create_dir_all(out)
        .map_err(|e| RallyError::Input(format!("cannot create {}: {e}", out.display())))?;

    let mut lap_rows = Vec::new();
    let mut param_rows = Vec::new();
    let mut config_hashes = String::new();
    for (idx, dir) in runs.iter().enumerate() {
        let manifest = RunManifest::read(dir)?;
        config_hashes.push_str(&manifest.config_sha256);
        config_hashes.push('\n');

        let laps = dir.join("laps.csv");
        if laps.exists() {
            let (_, rows) = read_csv(&laps)?;
            let durations: Vec<f64> = rows.iter().map(|r| r[3]).collect();
            let n = durations.len() as f64;
            let mean = durations.iter().sum::<f64>() / n.max(1.0);
            let best = durations.iter().cloned().fold(f64::INFINITY, f64::min);
            lap_rows.push(vec![
                idx as f64,
                manifest.seed as f64,
                n,
                if n > 0.0 { mean } else { f64::NAN },
                if n > 0.0 { best } else { f64::NAN },
            ]);
        }
        let estimate = dir.join("estimate.csv");
        if estimate.exists() {
            let (_, rows) = read_csv(&estimate)?;
            if let Some(last) = rows.last() {
                param_rows.push(vec![idx as f64, manifest.seed as f64, last[6], last[7]]);
            }
        }
    }

    let mut manifest = RunManifest::new("report", &config_hashes, 0);
    if !lap_rows.is_empty() {
        write_csv(
            &out.join("lap_summary.csv"),
            &["run", "seed", "laps", "mean_lap_s", "best_lap_s"],
            &lap_rows,
        )?;
        manifest.record(out, "lap_summary.csv")?;
    }
    if !param_rows.is_empty() {
        write_csv(
            &out.join("param_summary.csv"),
            &["run", "seed", "mf_b", "mf_d"],
            &param_rows,
        )?;
        manifest.record(out, "param_summary.csv")?;
    }
    manifest.write(out)?;
    println!(
        "report: {} runs, {} lap tables, {} parameter tables -> {}",
        runs.len(),
        lap_rows.len(),
        param_rows.len(),
        out.display()
    );
    Ok(())
}
