//! Synthetic oval track modeled on a desk-scale dirt facility: two
//! straights joined by 180-degree constant-radius turns, plus noisy
//! sensor stream generation and the closed-loop simulation driver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{RallyError, Result};
use crate::mppi::{CostMap, MppiController, RolloutDynamics};
use crate::vehicle::{ControlInput, VehicleState3, GRAVITY};

/// Stadium-shaped closed track: straights of `straight_length` at
/// y = ±`radius`, semicircular turns of `radius` centered at
/// (±straight_length/2, 0), drivable band of `width` around the
/// centerline. Travel direction is counterclockwise; the start/finish
/// line is at (0, -radius).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackMap {
    pub straight_length: f64,
    pub radius: f64,
    pub width: f64,
}

impl Default for TrackMap {
    fn default() -> Self {
        // Turn radius from the facility's 15.5 m outer extent and 3.3 m
        // width: (15.5 - 3.3) / 2.
        Self {
            straight_length: 11.5,
            radius: 6.1,
            width: 3.3,
        }
    }
}

impl TrackMap {
    pub fn validate(&self) -> Result<()> {
        if self.straight_length <= 0.0 || self.width <= 0.0 {
            return Err(RallyError::Config("track dimensions must be positive".into()));
        }
        if self.radius <= self.width / 2.0 {
            return Err(RallyError::Config(
                "turn radius must exceed half the track width".into(),
            ));
        }
        Ok(())
    }

    pub fn lap_length(&self) -> f64 {
        2.0 * self.straight_length + 2.0 * std::f64::consts::PI * self.radius
    }

    /// Distance from `p` to the spine segment the centerline is offset
    /// from.
    fn spine_distance(&self, x: f64, y: f64) -> f64 {
        let half = self.straight_length / 2.0;
        let cx = x.clamp(-half, half);
        ((x - cx).powi(2) + y * y).sqrt()
    }

    /// Signed distance to the drivable band: negative inside, zero on
    /// the boundaries.
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        (self.spine_distance(x, y) - self.radius).abs() - self.width / 2.0
    }

    /// Arc-length progress of the closest centerline point, in
    /// [0, lap_length), measured counterclockwise from (0, -radius).
    pub fn progress(&self, x: f64, y: f64) -> f64 {
        let half = self.straight_length / 2.0;
        let lap = self.lap_length();
        let pi = std::f64::consts::PI;
        if x > half {
            // Right turn, from angle -pi/2 to +pi/2.
            let theta = y.atan2(x - half);
            half + (theta + pi / 2.0) * self.radius
        } else if x < -half {
            let theta = y.atan2(x + half);
            let phi = if theta >= pi / 2.0 {
                theta - pi / 2.0
            } else {
                theta + 3.0 * pi / 2.0
            };
            half + pi * self.radius + self.straight_length + phi * self.radius
        } else if y >= 0.0 {
            half + pi * self.radius + (half - x)
        } else if x >= 0.0 {
            x
        } else {
            lap + x
        }
    }

    /// Centerline point and unit tangent at arc-length `s`.
    pub fn centerline(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let half = self.straight_length / 2.0;
        let pi = std::f64::consts::PI;
        let arc = pi * self.radius;
        let mut s = s.rem_euclid(self.lap_length());
        if s < half {
            return ([s, -self.radius], [1.0, 0.0]);
        }
        s -= half;
        if s < arc {
            let theta = -pi / 2.0 + s / self.radius;
            return (
                [half + self.radius * theta.cos(), self.radius * theta.sin()],
                [-theta.sin(), theta.cos()],
            );
        }
        s -= arc;
        if s < self.straight_length {
            return ([half - s, self.radius], [-1.0, 0.0]);
        }
        s -= self.straight_length;
        if s < arc {
            let theta = pi / 2.0 + s / self.radius;
            return (
                [-half + self.radius * theta.cos(), self.radius * theta.sin()],
                [-theta.sin(), theta.cos()],
            );
        }
        s -= arc;
        ([-half + s, -self.radius], [1.0, 0.0])
    }
}

/// Rasterizes the track into a cost map: 0 inside the boundaries,
/// linear ramp to 1 across `margin` outside.
pub fn build_oval_track(
    track: &TrackMap,
    resolution: f64,
    margin: f64,
) -> Result<(TrackMap, CostMap)> {
    track.validate()?;
    if resolution <= 0.0 || margin <= 0.0 {
        return Err(RallyError::Config("resolution and margin must be positive".into()));
    }
    let pad = margin + 3.0 * resolution;
    let half_x = track.straight_length / 2.0 + track.radius + track.width / 2.0 + pad;
    let half_y = track.radius + track.width / 2.0 + pad;
    let nx = (2.0 * half_x / resolution).ceil() as usize;
    let ny = (2.0 * half_y / resolution).ceil() as usize;
    let mut data = vec![0.0; nx * ny];
    for iy in 0..ny {
        let y = -half_y + (iy as f64 + 0.5) * resolution;
        for ix in 0..nx {
            let x = -half_x + (ix as f64 + 0.5) * resolution;
            let sd = track.signed_distance(x, y);
            data[iy * nx + ix] = (sd / margin).clamp(0.0, 1.0);
        }
    }
    Ok((
        *track,
        CostMap {
            origin_x: -half_x,
            origin_y: -half_y,
            resolution,
            nx,
            ny,
            data,
        },
    ))
}

fn d20() -> f64 {
    20.0
}
fn dsig() -> f64 {
    0.02
}
fn d200() -> f64 {
    200.0
}
fn d70() -> f64 {
    70.0
}
fn default_accel_sigma() -> f64 {
    0.05
}
fn default_gyro_sigma() -> f64 {
    0.005
}
fn default_accel_walk() -> f64 {
    0.001
}
fn default_gyro_walk() -> f64 {
    0.0001
}
fn default_wheel_quant() -> f64 {
    2.0 * std::f64::consts::PI / 100.0
}

/// Sensor rates and noise levels for synthetic stream generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    #[serde(rename = "gps_rate_hz")]
    pub gps_rate: f64,
    /// Per-axis GPS standard deviation (m).
    pub gps_sigma: f64,
    #[serde(rename = "imu_rate_hz")]
    pub imu_rate: f64,
    /// Accelerometer white noise per sample (m/s^2).
    pub accel_sigma: f64,
    /// Gyro white noise per sample (rad/s).
    pub gyro_sigma: f64,
    /// Accelerometer bias random walk per sample (m/s^2).
    pub accel_bias_walk: f64,
    /// Gyro bias random walk per sample (rad/s).
    pub gyro_bias_walk: f64,
    #[serde(rename = "wheel_rate_hz")]
    pub wheel_rate: f64,
    /// Wheel-speed quantization step (rad/s); 0 disables.
    pub wheel_quantization: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            gps_rate: d20(),
            gps_sigma: dsig(),
            imu_rate: d200(),
            accel_sigma: default_accel_sigma(),
            gyro_sigma: default_gyro_sigma(),
            accel_bias_walk: default_accel_walk(),
            gyro_bias_walk: default_gyro_walk(),
            wheel_rate: d70(),
            wheel_quantization: default_wheel_quant(),
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gps_rate <= 0.0 || self.imu_rate <= 0.0 || self.wheel_rate <= 0.0 {
            return Err(RallyError::Config("sensor rates must be positive".into()));
        }
        let sigmas = [
            self.gps_sigma,
            self.accel_sigma,
            self.gyro_sigma,
            self.accel_bias_walk,
            self.gyro_bias_walk,
            self.wheel_quantization,
        ];
        if sigmas.iter().any(|s| *s < 0.0) {
            return Err(RallyError::Config("noise levels must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn noiseless() -> Self {
        Self {
            gps_sigma: 0.0,
            accel_sigma: 0.0,
            gyro_sigma: 0.0,
            accel_bias_walk: 0.0,
            gyro_bias_walk: 0.0,
            wheel_quantization: 0.0,
            ..Self::default()
        }
    }
}

/// One ground-truth sample: planar state plus the body-frame
/// accelerations realized at that instant.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruthSample {
    pub t: f64,
    pub state: VehicleState3,
    /// Body-frame longitudinal acceleration of the CG (m/s^2).
    pub a_x: f64,
    pub a_y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// Body angular rate (rad/s).
    pub gyro: [f64; 3],
    /// Body specific force (m/s^2); +z when stationary and level.
    pub accel: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelSample {
    pub t: f64,
    pub omega_f: f64,
    pub omega_r: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SensorStreams {
    pub gps: Vec<GpsFix>,
    pub imu: Vec<ImuSample>,
    pub wheel: Vec<WheelSample>,
}

fn sample_truth(truth: &[TruthSample], t: f64) -> &TruthSample {
    // Truth is uniformly sampled; nearest index lookup.
    let dt = if truth.len() > 1 {
        truth[1].t - truth[0].t
    } else {
        1.0
    };
    let idx = ((t - truth[0].t) / dt).round() as usize;
    &truth[idx.min(truth.len() - 1)]
}

/// Generates GPS, IMU, and wheel-speed streams from a truth trajectory,
/// deterministically per seed.
pub fn simulate_sensors(
    truth: &[TruthSample],
    cfg: &SensorConfig,
    seed: u64,
) -> Result<SensorStreams> {
    cfg.validate()?;
    if truth.is_empty() {
        return Err(RallyError::Input("empty truth trajectory".into()));
    }
    let t0 = truth[0].t;
    let t_end = truth[truth.len() - 1].t;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = SensorStreams::default();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6770_73); // gps
    let gps_dt = 1.0 / cfg.gps_rate;
    let mut k = 0usize;
    loop {
        let t = t0 + k as f64 * gps_dt;
        if t > t_end + 1e-9 {
            break;
        }
        let s = sample_truth(truth, t);
        out.gps.push(GpsFix {
            t,
            x: s.state.p_x + cfg.gps_sigma * unit.sample(&mut rng),
            y: s.state.p_y + cfg.gps_sigma * unit.sample(&mut rng),
            z: cfg.gps_sigma * unit.sample(&mut rng),
        });
        k += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696d_75); // imu
    let imu_dt = 1.0 / cfg.imu_rate;
    let mut bias_g = [0.0f64; 3];
    let mut bias_a = [0.0f64; 3];
    let mut k = 0usize;
    loop {
        let t = t0 + k as f64 * imu_dt;
        if t > t_end + 1e-9 {
            break;
        }
        let s = sample_truth(truth, t);
        for b in &mut bias_g {
            *b += cfg.gyro_bias_walk * unit.sample(&mut rng);
        }
        for b in &mut bias_a {
            *b += cfg.accel_bias_walk * unit.sample(&mut rng);
        }
        let gyro_true = [0.0, 0.0, s.state.r];
        let accel_true = [s.a_x, s.a_y, GRAVITY];
        let mut gyro = [0.0; 3];
        let mut accel = [0.0; 3];
        for i in 0..3 {
            gyro[i] = gyro_true[i] + bias_g[i] + cfg.gyro_sigma * unit.sample(&mut rng);
            accel[i] = accel_true[i] + bias_a[i] + cfg.accel_sigma * unit.sample(&mut rng);
        }
        out.imu.push(ImuSample { t, gyro, accel });
        k += 1;
    }

    let wheel_dt = 1.0 / cfg.wheel_rate;
    // Round-to-nearest keeps the quantization error zero-mean; an
    // edge-counting floor would bias every reading low by half a step.
    let quant = |w: f64| {
        if cfg.wheel_quantization > 0.0 {
            (w / cfg.wheel_quantization).round() * cfg.wheel_quantization
        } else {
            w
        }
    };
    let mut k = 0usize;
    loop {
        let t = t0 + k as f64 * wheel_dt;
        if t > t_end + 1e-9 {
            break;
        }
        let s = sample_truth(truth, t);
        out.wheel.push(WheelSample {
            t,
            omega_f: quant(s.state.omega_f),
            omega_r: quant(s.state.omega_r),
        });
        k += 1;
    }
    Ok(out)
}

/// One completed lap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LapRecord {
    pub lap: usize,
    pub start_t: f64,
    pub end_t: f64,
}

impl LapRecord {
    pub fn duration(&self) -> f64 {
        self.end_t - self.start_t
    }
}

/// Full record of one closed- or open-loop run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimulationLog {
    pub truth: Vec<TruthSample>,
    /// Normalized (steering, throttle) at each controller invocation.
    pub controls: Vec<(f64, [f64; 2])>,
    pub laps: Vec<LapRecord>,
    /// Time the run was cut short by leaving the track margin, if any.
    pub boundary_violation_at: Option<f64>,
    /// Largest cost-map value visited.
    pub max_track_cost: f64,
}

/// Fixed-step open-loop run of the planar dynamics under a scripted
/// normalized control schedule, recording truth at the physics rate.
pub fn run_open_loop(
    dynamics: &RolloutDynamics,
    control_of_t: impl Fn(f64) -> ControlInput,
    initial: VehicleState3,
    duration: f64,
    physics_dt: f64,
) -> Result<Vec<TruthSample>> {
    if duration <= 0.0 || physics_dt <= 0.0 {
        return Err(RallyError::Config("duration and dt must be positive".into()));
    }
    let steps = (duration / physics_dt).round() as usize;
    let mut truth = Vec::with_capacity(steps + 1);
    let mut s = initial;
    for i in 0..=steps {
        let t = i as f64 * physics_dt;
        let u = control_of_t(t);
        let d = match dynamics.model {
            crate::mppi::RolloutModel::Single => {
                crate::vehicle::single_track_derivatives(&s, &u, &dynamics.params, &dynamics.mf)?
            }
            crate::mppi::RolloutModel::Double => {
                crate::vehicle::double_track_derivatives(&s, &u, &dynamics.params, &dynamics.mf)?
            }
        };
        truth.push(TruthSample {
            t,
            state: s,
            a_x: d.v_x - s.v_y * s.r,
            a_y: d.v_y + s.v_x * s.r,
        });
        if i < steps {
            s = dynamics.step(&s, &u, physics_dt)?;
        }
    }
    Ok(truth)
}

/// Closed-loop simulation: physics at `physics_dt` (default 1 kHz),
/// controller invoked every `control_period` (default 25 ms), lap
/// counting by start-line crossing. Terminates early with a logged
/// boundary violation when the vehicle leaves the track margin.
pub fn run_closed_loop(
    dynamics: &RolloutDynamics,
    controller: &mut MppiController,
    track: &TrackMap,
    initial: VehicleState3,
    duration: f64,
    physics_dt: f64,
    control_period: f64,
) -> Result<SimulationLog> {
    track.validate()?;
    if duration <= 0.0 || physics_dt <= 0.0 || control_period < physics_dt {
        return Err(RallyError::Config("inconsistent timing configuration".into()));
    }
    let steps = (duration / physics_dt).round() as usize;
    let control_every = (control_period / physics_dt).round() as usize;
    let lap = track.lap_length();

    let mut log = SimulationLog::default();
    let mut s = initial;
    let mut u_norm = [0.0f64; 2];
    let mut prev_progress = track.progress(s.p_x, s.p_y);
    let mut lap_start_t = 0.0;

    for i in 0..=steps {
        let t = i as f64 * physics_dt;
        if i % control_every == 0 {
            u_norm = controller.mpc_step(&s)?;
            log.controls.push((t, u_norm));
        }
        let u = controller.params.to_control(u_norm);
        let d = match dynamics.model {
            crate::mppi::RolloutModel::Single => {
                crate::vehicle::single_track_derivatives(&s, &u, &dynamics.params, &dynamics.mf)?
            }
            crate::mppi::RolloutModel::Double => {
                crate::vehicle::double_track_derivatives(&s, &u, &dynamics.params, &dynamics.mf)?
            }
        };
        log.truth.push(TruthSample {
            t,
            state: s,
            a_x: d.v_x - s.v_y * s.r,
            a_y: d.v_y + s.v_x * s.r,
        });

        let cost = controller.costmap.cost(s.p_x, s.p_y);
        if cost > log.max_track_cost {
            log.max_track_cost = cost;
        }
        if cost >= 1.0 {
            log.boundary_violation_at = Some(t);
            break;
        }

        let progress = track.progress(s.p_x, s.p_y);
        if progress < 0.2 * lap && prev_progress > 0.8 * lap {
            log.laps.push(LapRecord {
                lap: log.laps.len() + 1,
                start_t: lap_start_t,
                end_t: t,
            });
            lap_start_t = t;
        }
        prev_progress = progress;

        if i < steps {
            s = dynamics.step(&s, &u, physics_dt)?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mppi::{MppiParams, RolloutModel};
    use crate::tire::MagicFormulaParams;
    use crate::vehicle::VehicleParams;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn lap_length_matches_geometry() {
        let t = TrackMap::default();
        assert_relative_eq!(
            t.lap_length(),
            2.0 * 11.5 + 2.0 * std::f64::consts::PI * 6.1,
            epsilon = 1e-12
        );
    }

    #[test]
    fn centerline_point_is_deep_inside() {
        let t = TrackMap::default();
        assert_relative_eq!(t.signed_distance(2.0, -6.1), -1.65, epsilon = 1e-12);
        assert_relative_eq!(t.signed_distance(5.75 + 6.1, 0.0), -1.65, epsilon = 1e-12);
    }

    #[test]
    fn boundary_and_exterior_distances() {
        let t = TrackMap::default();
        assert_abs_diff_eq!(t.signed_distance(0.0, -6.1 - 1.65), 0.0, epsilon = 1e-12);
        // Far exterior: distance approx Euclidean to the outer boundary.
        let d = t.signed_distance(0.0, -20.0);
        assert_relative_eq!(d, 20.0 - 7.75, epsilon = 1e-9);
    }

    #[test]
    fn signed_distance_is_lipschitz() {
        let t = TrackMap::default();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..2000 {
            let x = rng.gen_range(-20.0..20.0);
            let y = rng.gen_range(-12.0..12.0);
            let dx: f64 = rng.gen_range(-0.1..0.1);
            let dy: f64 = rng.gen_range(-0.1..0.1);
            let step = (dx * dx + dy * dy).sqrt();
            let diff = (t.signed_distance(x + dx, y + dy) - t.signed_distance(x, y)).abs();
            assert!(diff <= step + 1e-12, "not 1-Lipschitz at ({x}, {y})");
        }
    }

    #[test]
    fn progress_and_centerline_round_trip() {
        let t = TrackMap::default();
        for i in 0..200 {
            let s = t.lap_length() * i as f64 / 200.0;
            let (p, tangent) = t.centerline(s);
            assert_relative_eq!(t.progress(p[0], p[1]), s, epsilon = 1e-9);
            assert_relative_eq!(
                (tangent[0] * tangent[0] + tangent[1] * tangent[1]).sqrt(),
                1.0,
                epsilon = 1e-12
            );
            // Tangent direction agrees with finite differences.
            let (p2, _) = t.centerline(s + 1e-6);
            assert_abs_diff_eq!((p2[0] - p[0]) / 1e-6, tangent[0], epsilon = 1e-4);
            assert_abs_diff_eq!((p2[1] - p[1]) / 1e-6, tangent[1], epsilon = 1e-4);
        }
    }

    #[test]
    fn cost_map_anchors() {
        let (track, map) = build_oval_track(&TrackMap::default(), 0.05, 0.3).unwrap();
        // Mid-straight centerline: on track.
        assert_eq!(map.cost(0.0, -track.radius), 0.0);
        // 1 m past the outer boundary: fully off.
        assert_eq!(map.cost(0.0, -(track.radius + track.width / 2.0 + 1.0)), 1.0);
    }

    #[test]
    fn cost_map_sign_agrees_with_signed_distance() {
        let (track, map) = build_oval_track(&TrackMap::default(), 0.05, 0.3).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..5000 {
            let x = rng.gen_range(-14.0..14.0);
            let y = rng.gen_range(-8.0..8.0);
            let sd = track.signed_distance(x, y);
            let c = map.cost(x, y);
            // Stay clear of the boundary by a cell diagonal.
            if sd < -0.08 {
                assert_eq!(c, 0.0, "at ({x}, {y}), sd {sd}");
            }
            if sd > 0.08 {
                assert!(c > 0.0, "at ({x}, {y}), sd {sd}");
            }
        }
    }

    #[test]
    fn on_track_area_matches_band_area() {
        let t = TrackMap::default();
        let mut rng = StdRng::seed_from_u64(99);
        let (hx, hy) = (14.0, 8.5);
        let n = 2_000_000;
        let mut inside = 0usize;
        for _ in 0..n {
            let x = rng.gen_range(-hx..hx);
            let y = rng.gen_range(-hy..hy);
            if t.signed_distance(x, y) < 0.0 {
                inside += 1;
            }
        }
        let area = inside as f64 / n as f64 * 4.0 * hx * hy;
        let expect = t.lap_length() * t.width;
        assert!((area - expect).abs() / expect < 0.02, "area {area} vs {expect}");
    }

    fn rolling_truth(v: f64, duration: f64) -> Vec<TruthSample> {
        let n = (duration * 1000.0) as usize;
        (0..=n)
            .map(|i| {
                let t = i as f64 * 0.001;
                let mut state = VehicleState3::rolling(v, 0.0975);
                state.p_x = v * t;
                TruthSample {
                    t,
                    state,
                    a_x: 0.0,
                    a_y: 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn noiseless_sensors_reproduce_truth() {
        let truth = rolling_truth(3.0, 1.0);
        let s = simulate_sensors(&truth, &SensorConfig::noiseless(), 1).unwrap();
        assert_eq!(s.gps.len(), 21);
        assert_eq!(s.imu.len(), 201);
        assert_eq!(s.wheel.len(), 71);
        for fix in &s.gps {
            assert_relative_eq!(fix.x, 3.0 * fix.t, epsilon = 1e-9);
            assert_eq!(fix.y, 0.0);
        }
        for imu in &s.imu {
            assert_eq!(imu.gyro, [0.0, 0.0, 0.0]);
            assert_eq!(imu.accel, [0.0, 0.0, GRAVITY]);
        }
        for w in &s.wheel {
            assert_relative_eq!(w.omega_r, 3.0 / 0.0975, epsilon = 1e-12);
        }
    }

    #[test]
    fn stationary_imu_reads_gravity() {
        let truth = rolling_truth(0.0, 5.0);
        let s = simulate_sensors(&truth, &SensorConfig::default(), 2).unwrap();
        let mean_z =
            s.imu.iter().map(|m| m.accel[2]).sum::<f64>() / s.imu.len() as f64;
        // White noise 0.05 over ~1000 samples: CI a few mm/s^2; bias walk
        // dominates the tolerance.
        assert!((mean_z - GRAVITY).abs() < 0.1, "mean accel z {mean_z}");
    }

    #[test]
    fn gps_noise_matches_configured_sigma() {
        let truth = rolling_truth(0.0, 500.0);
        let cfg = SensorConfig::default();
        let s = simulate_sensors(&truth, &cfg, 3).unwrap();
        assert!(s.gps.len() > 10_000);
        let n = s.gps.len() as f64;
        let var = s.gps.iter().map(|f| f.x * f.x).sum::<f64>() / n;
        let sigma = var.sqrt();
        assert!(
            (sigma - cfg.gps_sigma).abs() / cfg.gps_sigma < 0.05,
            "empirical sigma {sigma}"
        );
    }

    #[test]
    fn sensors_deterministic_per_seed() {
        let truth = rolling_truth(2.0, 2.0);
        let a = simulate_sensors(&truth, &SensorConfig::default(), 5).unwrap();
        let b = simulate_sensors(&truth, &SensorConfig::default(), 5).unwrap();
        assert_eq!(a.gps, b.gps);
        assert_eq!(a.imu, b.imu);
        assert_eq!(a.wheel, b.wheel);
        let c = simulate_sensors(&truth, &SensorConfig::default(), 6).unwrap();
        assert_ne!(a.gps, c.gps);
    }

    #[test]
    fn timestamps_monotone() {
        let truth = rolling_truth(2.0, 3.0);
        let s = simulate_sensors(&truth, &SensorConfig::default(), 8).unwrap();
        for pair in s.gps.windows(2) {
            assert!(pair[1].t > pair[0].t);
        }
        for pair in s.imu.windows(2) {
            assert!(pair[1].t > pair[0].t);
        }
        for pair in s.wheel.windows(2) {
            assert!(pair[1].t > pair[0].t);
        }
    }

    #[test]
    fn wheel_quantization_rounds_to_nearest() {
        let truth = rolling_truth(3.0, 0.1);
        let mut cfg = SensorConfig::noiseless();
        cfg.wheel_quantization = 1.0;
        let s = simulate_sensors(&truth, &cfg, 1).unwrap();
        let w_true: f64 = 3.0 / 0.0975;
        for w in &s.wheel {
            assert_eq!(w.omega_r, w_true.round());
        }
    }

    #[test]
    fn zero_control_run_stays_put() {
        let dynamics = RolloutDynamics {
            model: RolloutModel::Single,
            params: VehicleParams::autorally(),
            mf: MagicFormulaParams::default(),
        };
        let truth = run_open_loop(
            &dynamics,
            |_| ControlInput {
                delta: 0.0,
                drive_torque: 0.0,
                brake_front: 0.0,
            },
            VehicleState3::default(),
            1.0,
            0.001,
        )
        .unwrap();
        let last = truth.last().unwrap();
        assert_abs_diff_eq!(last.state.p_x, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(last.state.v_x, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn closed_loop_laps_on_the_oval() {
        // Short deterministic closed-loop sanity run: stays on track and
        // makes forward progress. The full lap-count run lives in the
        // acceptance suite.
        let track = TrackMap::default();
        let (_, costmap) = build_oval_track(&track, 0.05, 0.3).unwrap();
        let dynamics = RolloutDynamics {
            model: RolloutModel::Single,
            params: VehicleParams::autorally(),
            mf: MagicFormulaParams::default(),
        };
        let mut params = MppiParams::default();
        params.samples = 96;
        let mut controller =
            MppiController::new(params, dynamics.clone(), costmap, 42).unwrap();
        let mut initial = VehicleState3::rolling(3.0, 0.0975);
        initial.p_y = -track.radius;
        let log = run_closed_loop(
            &dynamics,
            &mut controller,
            &track,
            initial,
            6.0,
            0.001,
            0.025,
        )
        .unwrap();
        assert!(log.boundary_violation_at.is_none(), "violated boundary");
        let end = log.truth.last().unwrap();
        let progress = track.progress(end.state.p_x, end.state.p_y);
        assert!(
            progress > 15.0,
            "only {progress} m of progress in 6 s"
        );
        assert!(log.max_track_cost < 1.0);
    }
}
