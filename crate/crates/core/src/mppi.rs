//! Sampling-based model predictive control: importance-sampled rollouts
//! through a dynamics model combined by a cost-weighted average into an
//! updated control sequence, executed receding-horizon.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{RallyError, Result};
use crate::tire::MagicFormulaParams;
use crate::vehicle::{step_double_track, step_single_track, ControlInput, VehicleParams, VehicleState3};

/// Grid of positional penalties in [0, 1]; 0 means on-track. Queries
/// outside the grid cost 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostMap {
    pub origin_x: f64,
    pub origin_y: f64,
    /// Cell size (m).
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major, `data[iy * nx + ix]`.
    pub data: Vec<f64>,
}

impl CostMap {
    pub fn cost(&self, x: f64, y: f64) -> f64 {
        let ix = (x - self.origin_x) / self.resolution;
        let iy = (y - self.origin_y) / self.resolution;
        if ix < 0.0 || iy < 0.0 {
            return 1.0;
        }
        let (ix, iy) = (ix as usize, iy as usize);
        if ix >= self.nx || iy >= self.ny {
            return 1.0;
        }
        self.data[iy * self.nx + ix]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.origin_x
            && y >= self.origin_y
            && x < self.origin_x + self.nx as f64 * self.resolution
            && y < self.origin_y + self.ny as f64 * self.resolution
    }
}

fn default_k() -> usize {
    192
}
fn default_horizon() -> usize {
    40
}
fn default_dt() -> f64 {
    0.025
}
fn default_lambda() -> f64 {
    0.05
}
fn default_gamma() -> f64 {
    0.1
}
fn default_sigma() -> [f64; 2] {
    [0.3 * 0.3, 0.25 * 0.25]
}
fn default_w() -> [f64; 4] {
    [100.0, 4.25, 10000.0, 1.75]
}
fn default_v_desired() -> f64 {
    6.0
}
fn default_decay() -> f64 {
    0.9
}
fn default_track_cost_threshold() -> f64 {
    0.9
}
fn default_roll_threshold() -> f64 {
    0.35
}
fn default_heading_threshold() -> f64 {
    1.5
}
fn default_delta_max() -> f64 {
    0.35
}
fn default_torque_max() -> f64 {
    12.0
}

/// MPPI tuning. `sigma` holds the per-channel sampling variances for
/// (steering, throttle) in normalized units.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MppiParams {
    /// Rollout count K.
    pub samples: usize,
    /// Horizon length T (steps).
    pub horizon: usize,
    pub dt: f64,
    /// Temperature lambda.
    pub lambda: f64,
    /// Control-cost weight gamma.
    pub gamma: f64,
    /// Diagonal control sampling covariance.
    pub sigma: [f64; 2],
    /// Running-cost weights (track, speed, indicator, slip).
    pub w: [f64; 4],
    pub v_x_desired: f64,
    /// Per-step geometric decay of the indicator weight.
    pub indicator_decay: f64,
    pub track_cost_threshold: f64,
    pub roll_threshold: f64,
    /// Threshold on the angle between body velocity and heading (rad).
    pub heading_threshold: f64,
    /// Low-speed guard below which the slip and heading terms are off.
    pub speed_guard: f64,
    /// Steering command mapping: normalized 1.0 -> this angle (rad).
    pub delta_max: f64,
    /// Throttle command mapping: normalized 1.0 -> this torque (N m).
    pub torque_max: f64,
}

impl Default for MppiParams {
    fn default() -> Self {
        Self {
            samples: default_k(),
            horizon: default_horizon(),
            dt: default_dt(),
            lambda: default_lambda(),
            gamma: default_gamma(),
            sigma: default_sigma(),
            w: default_w(),
            v_x_desired: default_v_desired(),
            indicator_decay: default_decay(),
            track_cost_threshold: default_track_cost_threshold(),
            roll_threshold: default_roll_threshold(),
            heading_threshold: default_heading_threshold(),
            speed_guard: 0.5,
            delta_max: default_delta_max(),
            torque_max: default_torque_max(),
        }
    }
}

impl MppiParams {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(RallyError::Config("need at least one rollout".into()));
        }
        if self.lambda <= 0.0 {
            return Err(RallyError::Config("lambda must be positive".into()));
        }
        if self.sigma.iter().any(|v| *v <= 0.0) {
            return Err(RallyError::Config("sampling covariance must be PD".into()));
        }
        if self.horizon == 0 || self.dt <= 0.0 {
            return Err(RallyError::Config("horizon and dt must be positive".into()));
        }
        Ok(())
    }

    /// Normalized (steering, throttle) to physical actuation.
    pub fn to_control(&self, u: [f64; 2]) -> ControlInput {
        ControlInput {
            delta: u[0] * self.delta_max,
            drive_torque: u[1] * self.torque_max,
            brake_front: 0.0,
        }
    }
}

/// Planned controls over the horizon, each a normalized
/// (steering, throttle) pair in [-1, 1].
pub type ControlSequence = Vec<[f64; 2]>;

/// Dynamics model used for rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutModel {
    Single,
    Double,
}

/// Rollout dynamics: planar model selection plus its parameters.
#[derive(Debug, Clone)]
pub struct RolloutDynamics {
    pub model: RolloutModel,
    pub params: VehicleParams,
    pub mf: MagicFormulaParams,
}

impl RolloutDynamics {
    pub fn step(&self, s: &VehicleState3, u: &ControlInput, dt: f64) -> Result<VehicleState3> {
        match self.model {
            RolloutModel::Single => step_single_track(s, u, &self.params, &self.mf, dt),
            RolloutModel::Double => step_double_track(s, u, &self.params, &self.mf, dt),
        }
    }
}

/// Instantaneous running cost q(x) at horizon step `t`.
pub fn running_cost(s: &VehicleState3, costmap: &CostMap, p: &MppiParams, t: usize) -> f64 {
    let track = costmap.cost(s.p_x, s.p_y);
    let speed_err = s.v_x - p.v_x_desired;
    let fast_enough = s.v_x.abs() >= p.speed_guard;
    let slip = if fast_enough {
        let ratio = s.v_y / s.v_x;
        ratio * ratio
    } else {
        0.0
    };
    let heading_off = fast_enough && s.v_y.atan2(s.v_x).abs() > p.heading_threshold;
    let indicator = track > p.track_cost_threshold || heading_off;
    let indicator_term = if indicator {
        p.indicator_decay.powi(t as i32)
    } else {
        0.0
    };
    p.w[0] * track + p.w[1] * speed_err * speed_err + p.w[2] * indicator_term + p.w[3] * slip
}

/// K sampled control sequences with their state costs.
#[derive(Debug, Clone)]
pub struct Rollouts {
    /// Sampled sequences E_k (nominal plus noise, clamped).
    pub sequences: Vec<ControlSequence>,
    /// State running-cost totals S(E_k); +inf marks a diverged rollout.
    pub costs: Vec<f64>,
}

fn clamp_unit(u: [f64; 2]) -> [f64; 2] {
    [u[0].clamp(-1.0, 1.0), u[1].clamp(-1.0, 1.0)]
}

/// Samples K perturbed control sequences around the nominal and scores
/// each by propagating the dynamics. Deterministic per (seed, k);
/// diverged rollouts are quarantined at infinite cost.
pub fn sample_rollouts(
    nominal: &ControlSequence,
    dynamics: &RolloutDynamics,
    state: &VehicleState3,
    costmap: &CostMap,
    p: &MppiParams,
    seed: u64,
) -> Result<Rollouts> {
    p.validate()?;
    if nominal.len() != p.horizon {
        return Err(RallyError::Input(format!(
            "nominal sequence length {} != horizon {}",
            nominal.len(),
            p.horizon
        )));
    }
    let dists = [
        Normal::new(0.0, p.sigma[0].sqrt())
            .map_err(|e| RallyError::Config(format!("bad sigma: {e}")))?,
        Normal::new(0.0, p.sigma[1].sqrt())
            .map_err(|e| RallyError::Config(format!("bad sigma: {e}")))?,
    ];

    let mut sequences = Vec::with_capacity(p.samples);
    let mut costs = Vec::with_capacity(p.samples);
    for k in 0..p.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut seq = Vec::with_capacity(p.horizon);
        for u in nominal {
            let e = clamp_unit([
                u[0] + dists[0].sample(&mut rng),
                u[1] + dists[1].sample(&mut rng),
            ]);
            seq.push(e);
        }

        let mut s = *state;
        let mut total = 0.0;
        for (t, e) in seq.iter().enumerate() {
            match dynamics.step(&s, &p.to_control(*e), p.dt) {
                Ok(next) if next.is_finite() && next.v_x.abs() < 50.0 => s = next,
                _ => {
                    total = f64::INFINITY;
                    break;
                }
            }
            total += running_cost(&s, costmap, p, t);
        }
        sequences.push(seq);
        costs.push(total);
    }
    Ok(Rollouts { sequences, costs })
}

/// Cost-weighted (softmax) average of the sampled sequences. Costs are
/// shifted by their minimum before exponentiation; the result is clamped
/// to the unit box.
pub fn mppi_update(
    nominal: &ControlSequence,
    rollouts: &Rollouts,
    p: &MppiParams,
) -> Result<ControlSequence> {
    let total_costs: Vec<f64> = rollouts
        .costs
        .iter()
        .zip(&rollouts.sequences)
        .map(|(s_cost, seq)| {
            if !s_cost.is_finite() {
                return f64::INFINITY;
            }
            // gamma * sum_t u_t^T Sigma^-1 eps_t with diagonal Sigma.
            let control: f64 = nominal
                .iter()
                .zip(seq)
                .map(|(u, e)| {
                    u[0] * (e[0] - u[0]) / p.sigma[0] + u[1] * (e[1] - u[1]) / p.sigma[1]
                })
                .sum();
            s_cost + p.gamma * control
        })
        .collect();

    let min = total_costs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(RallyError::Divergence("every rollout diverged".into()));
    }
    let weights: Vec<f64> = total_costs
        .iter()
        .map(|c| (-(c - min) / p.lambda).exp())
        .collect();
    let eta: f64 = weights.iter().sum();

    let mut out = vec![[0.0; 2]; nominal.len()];
    for (w, seq) in weights.iter().zip(&rollouts.sequences) {
        for (acc, e) in out.iter_mut().zip(seq) {
            acc[0] += w / eta * e[0];
            acc[1] += w / eta * e[1];
        }
    }
    for u in &mut out {
        *u = clamp_unit(*u);
    }
    Ok(out)
}

/// Receding-horizon MPPI driver holding the warm-started control
/// sequence.
pub struct MppiController {
    pub params: MppiParams,
    pub dynamics: RolloutDynamics,
    pub costmap: CostMap,
    pub sequence: ControlSequence,
    base_seed: u64,
    step_index: u64,
}

impl MppiController {
    pub fn new(
        params: MppiParams,
        dynamics: RolloutDynamics,
        costmap: CostMap,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        let sequence = vec![[0.0; 2]; params.horizon];
        Ok(Self {
            params,
            dynamics,
            costmap,
            sequence,
            base_seed: seed,
            step_index: 0,
        })
    }

    /// One MPC cycle from the fed-back state: optimize, return the first
    /// control, shift the sequence left repeating the tail.
    pub fn mpc_step(&mut self, state: &VehicleState3) -> Result<[f64; 2]> {
        let seed = self
            .base_seed
            .wrapping_add(self.step_index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let rollouts = sample_rollouts(
            &self.sequence,
            &self.dynamics,
            state,
            &self.costmap,
            &self.params,
            seed,
        )?;
        self.sequence = mppi_update(&self.sequence, &rollouts, &self.params)?;
        let first = self.sequence[0];
        self.sequence.rotate_left(1);
        let last = self.params.horizon - 1;
        self.sequence[last] = self.sequence[last.saturating_sub(1)];
        self.step_index += 1;
        Ok(first)
    }
}
