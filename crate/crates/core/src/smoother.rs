//! Batch GPS/IMU fusion: preintegrated IMU factors and GPS position
//! factors over a chain of 10 Hz nav-state nodes, optimized by
//! Levenberg-Marquardt with a block-tridiagonal sparse solve, plus
//! high-rate forward interpolation of the result.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{RallyError, Result};
use crate::track::{GpsFix, ImuSample};
use crate::vehicle::GRAVITY;

/// Local perturbation order per node: rotation, position, velocity,
/// gyro bias, accel bias.
pub const NODE_DIM: usize = 15;

/// One estimation node: orientation, position, velocity, IMU biases.
#[derive(Debug, Clone, PartialEq)]
pub struct NavState {
    pub rot: Rotation3<f64>,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub bias_g: Vector3<f64>,
    pub bias_a: Vector3<f64>,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            rot: Rotation3::identity(),
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            bias_g: Vector3::zeros(),
            bias_a: Vector3::zeros(),
        }
    }
}

impl NavState {
    /// Applies a 15-D tangent increment: rotation on the right, the
    /// rest additively.
    pub fn retract(&self, d: &[f64]) -> Self {
        debug_assert_eq!(d.len(), NODE_DIM);
        Self {
            rot: self.rot * Rotation3::new(Vector3::new(d[0], d[1], d[2])),
            p: self.p + Vector3::new(d[3], d[4], d[5]),
            v: self.v + Vector3::new(d[6], d[7], d[8]),
            bias_g: self.bias_g + Vector3::new(d[9], d[10], d[11]),
            bias_a: self.bias_a + Vector3::new(d[12], d[13], d[14]),
        }
    }
}

fn gravity_vec() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

/// IMU noise model used for preintegration covariance (per-sample
/// standard deviations).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuNoise {
    pub gyro_sigma: f64,
    pub accel_sigma: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            gyro_sigma: 0.005,
            accel_sigma: 0.05,
        }
    }
}

/// Compressed relative motion over one node interval, with first-order
/// bias correction Jacobians and accumulated covariance.
#[derive(Debug, Clone)]
pub struct PreintegratedImu {
    pub dt: f64,
    pub delta_rot: Rotation3<f64>,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    /// Covariance of (rotation, velocity, position) errors.
    pub cov: SMatrix<f64, 9, 9>,
    /// Bias linearization point.
    pub bias_g: Vector3<f64>,
    pub bias_a: Vector3<f64>,
    pub dr_dbg: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
    pub dp_dba: Matrix3<f64>,
}

/// Midpoint-rule delta integration in the gravity-compensated frame of
/// the interval start (assumed level).
fn integrate_deltas(
    samples: &[ImuSample],
    bias_g: &Vector3<f64>,
    bias_a: &Vector3<f64>,
) -> (Rotation3<f64>, Vector3<f64>, Vector3<f64>) {
    let g = gravity_vec();
    let mut rot = Rotation3::identity();
    let mut dv = Vector3::zeros();
    let mut dp = Vector3::zeros();
    for pair in samples.windows(2) {
        let dt = pair[1].t - pair[0].t;
        let w_mid = (Vector3::from(pair[0].gyro) + Vector3::from(pair[1].gyro)) * 0.5 - bias_g;
        let a_mid = (Vector3::from(pair[0].accel) + Vector3::from(pair[1].accel)) * 0.5 - bias_a;
        let rot_mid = rot * Rotation3::new(w_mid * (dt / 2.0));
        let acc = rot_mid * a_mid + g;
        dp += dv * dt + acc * (0.5 * dt * dt);
        dv += acc * dt;
        rot *= Rotation3::new(w_mid * dt);
    }
    (rot, dv, dp)
}

/// Builds the preintegrated factor for one interval. Errors on sample
/// gaps longer than twice the nominal period.
pub fn preintegrate_imu(
    samples: &[ImuSample],
    bias_g: Vector3<f64>,
    bias_a: Vector3<f64>,
    noise: &ImuNoise,
) -> Result<PreintegratedImu> {
    if samples.len() < 2 {
        return Err(RallyError::InsufficientData(
            "need at least two IMU samples per interval".into(),
        ));
    }
    let mut dts: Vec<f64> = samples.windows(2).map(|p| p[1].t - p[0].t).collect();
    if dts.iter().any(|d| *d <= 0.0) {
        return Err(RallyError::Input("IMU samples not strictly time-ordered".into()));
    }
    dts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let nominal = dts[dts.len() / 2];
    if dts[dts.len() - 1] > 2.0 * nominal + 1e-12 {
        return Err(RallyError::Input(format!(
            "IMU gap of {:.4} s exceeds twice the {:.4} s sample period",
            dts[dts.len() - 1],
            nominal
        )));
    }

    let (delta_rot, delta_v, delta_p) = integrate_deltas(samples, &bias_g, &bias_a);

    // First-order covariance propagation over the same sweep.
    let mut cov = SMatrix::<f64, 9, 9>::zeros();
    let mut rot = Rotation3::identity();
    for pair in samples.windows(2) {
        let dt = pair[1].t - pair[0].t;
        let w_mid = (Vector3::from(pair[0].gyro) + Vector3::from(pair[1].gyro)) * 0.5 - bias_g;
        let a_mid = (Vector3::from(pair[0].accel) + Vector3::from(pair[1].accel)) * 0.5 - bias_a;
        let rot_mid = rot * Rotation3::new(w_mid * (dt / 2.0));
        let r_mid = rot_mid.matrix();
        let a_skew = skew(&(rot_mid * a_mid));

        let mut a = SMatrix::<f64, 9, 9>::identity();
        let inc_t = Rotation3::new(w_mid * dt).matrix().transpose();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&inc_t);
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-a_skew * dt));
        a.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-a_skew * (0.5 * dt * dt)));
        a.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * dt));

        let mut b = SMatrix::<f64, 9, 6>::zeros();
        b.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(Matrix3::identity() * dt));
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&(r_mid * dt));
        b.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(r_mid * (0.5 * dt * dt)));
        let mut n = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            n[(i, i)] = noise.gyro_sigma * noise.gyro_sigma;
            n[(i + 3, i + 3)] = noise.accel_sigma * noise.accel_sigma;
        }
        cov = a * cov * a.transpose() + b * n * b.transpose();
        rot *= Rotation3::new(w_mid * dt);
    }

    // Numeric bias Jacobians by forward differences of the deltas.
    let h = 1e-6;
    let mut dr_dbg = Matrix3::zeros();
    let mut dv_dbg = Matrix3::zeros();
    let mut dv_dba = Matrix3::zeros();
    let mut dp_dbg = Matrix3::zeros();
    let mut dp_dba = Matrix3::zeros();
    for k in 0..3 {
        let mut bg = bias_g;
        bg[k] += h;
        let (r2, v2, p2) = integrate_deltas(samples, &bg, &bias_a);
        dr_dbg.set_column(k, &((delta_rot.inverse() * r2).scaled_axis() / h));
        dv_dbg.set_column(k, &((v2 - delta_v) / h));
        dp_dbg.set_column(k, &((p2 - delta_p) / h));

        let mut ba = bias_a;
        ba[k] += h;
        let (_, v3, p3) = integrate_deltas(samples, &bias_g, &ba);
        dv_dba.set_column(k, &((v3 - delta_v) / h));
        dp_dba.set_column(k, &((p3 - delta_p) / h));
    }

    Ok(PreintegratedImu {
        dt: samples[samples.len() - 1].t - samples[0].t,
        delta_rot,
        delta_v,
        delta_p,
        cov,
        bias_g,
        bias_a,
        dr_dbg,
        dv_dbg,
        dv_dba,
        dp_dbg,
        dp_dba,
    })
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

impl PreintegratedImu {
    /// Deltas corrected to first order for a bias estimate away from
    /// the linearization point.
    pub fn corrected(
        &self,
        bias_g: &Vector3<f64>,
        bias_a: &Vector3<f64>,
    ) -> (Rotation3<f64>, Vector3<f64>, Vector3<f64>) {
        let dbg = bias_g - self.bias_g;
        let dba = bias_a - self.bias_a;
        (
            self.delta_rot * Rotation3::new(self.dr_dbg * dbg),
            self.delta_v + self.dv_dbg * dbg + self.dv_dba * dba,
            self.delta_p + self.dp_dbg * dbg + self.dp_dba * dba,
        )
    }
}

/// Measurement factor over one or two chain nodes.
#[derive(Debug, Clone)]
pub enum Factor {
    /// Position measurement in the local frame. `dt` is the fix time
    /// minus the node time; the predicted position is extrapolated by
    /// `v * dt` so off-node fixes stay consistent.
    Gps {
        node: usize,
        z: Vector3<f64>,
        sigma: f64,
        dt: f64,
    },
    /// Preintegrated inertial constraint between node `i` and `i + 1`.
    Imu { i: usize, preint: PreintegratedImu },
    /// Bias random walk between node `i` and `i + 1`.
    BiasWalk { i: usize, sigma_g: f64, sigma_a: f64 },
    /// Per-block Gaussian prior (rotation, position, velocity, gyro
    /// bias, accel bias sigmas).
    Prior {
        node: usize,
        state: NavState,
        sigmas: [f64; 5],
    },
}

impl Factor {
    pub fn nodes(&self) -> (usize, Option<usize>) {
        match self {
            Factor::Gps { node, .. } | Factor::Prior { node, .. } => (*node, None),
            Factor::Imu { i, .. } | Factor::BiasWalk { i, .. } => (*i, Some(*i + 1)),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Factor::Gps { .. } => 3,
            Factor::Imu { .. } => 9,
            Factor::BiasWalk { .. } => 6,
            Factor::Prior { .. } => 15,
        }
    }

    /// Whitened residual at the given assignment.
    pub fn residual(&self, states: &[NavState]) -> DVector<f64> {
        match self {
            Factor::Gps { node, z, sigma, dt } => {
                let s = &states[*node];
                let r = (s.p + s.v * *dt - z) / *sigma;
                DVector::from_column_slice(r.as_slice())
            }
            Factor::Imu { i, preint } => {
                let a = &states[*i];
                let b = &states[*i + 1];
                let (d_rot, d_v, d_p) = preint.corrected(&a.bias_g, &a.bias_a);
                let dt = preint.dt;
                let r_rot = (d_rot.inverse() * (a.rot.inverse() * b.rot)).scaled_axis();
                let r_v = a.rot.inverse() * (b.v - a.v) - d_v;
                let r_p = a.rot.inverse() * (b.p - a.p - a.v * dt) - d_p;
                let mut raw = SMatrix::<f64, 9, 1>::zeros();
                raw.fixed_view_mut::<3, 1>(0, 0).copy_from(&r_rot);
                raw.fixed_view_mut::<3, 1>(3, 0).copy_from(&r_v);
                raw.fixed_view_mut::<3, 1>(6, 0).copy_from(&r_p);
                let white = sqrt_information(&preint.cov) * raw;
                DVector::from_column_slice(white.as_slice())
            }
            Factor::BiasWalk { i, sigma_g, sigma_a } => {
                let dg = (states[*i + 1].bias_g - states[*i].bias_g) / *sigma_g;
                let da = (states[*i + 1].bias_a - states[*i].bias_a) / *sigma_a;
                let mut r = DVector::zeros(6);
                r.rows_mut(0, 3).copy_from(&dg);
                r.rows_mut(3, 3).copy_from(&da);
                r
            }
            Factor::Prior {
                node,
                state,
                sigmas,
            } => {
                let s = &states[*node];
                let r_rot = (state.rot.inverse() * s.rot).scaled_axis() / sigmas[0];
                let r_p = (s.p - state.p) / sigmas[1];
                let r_v = (s.v - state.v) / sigmas[2];
                let r_bg = (s.bias_g - state.bias_g) / sigmas[3];
                let r_ba = (s.bias_a - state.bias_a) / sigmas[4];
                let mut r = DVector::zeros(15);
                r.rows_mut(0, 3).copy_from(&r_rot);
                r.rows_mut(3, 3).copy_from(&r_p);
                r.rows_mut(6, 3).copy_from(&r_v);
                r.rows_mut(9, 3).copy_from(&r_bg);
                r.rows_mut(12, 3).copy_from(&r_ba);
                r
            }
        }
    }
}

/// Square-root information matrix of a 9x9 covariance (inverse of the
/// Cholesky factor), with a small jitter for rank safety.
fn sqrt_information(cov: &SMatrix<f64, 9, 9>) -> SMatrix<f64, 9, 9> {
    let jittered = cov + SMatrix::<f64, 9, 9>::identity() * 1e-12;
    let chol = jittered
        .cholesky()
        .expect("jittered preintegration covariance is PD");
    chol.l()
        .try_inverse()
        .expect("triangular factor invertible")
}

/// Chain-structured factor graph over `nodes` sequential nav states.
#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    pub node_times: Vec<f64>,
    pub factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn nodes(&self) -> usize {
        self.node_times.len()
    }

    /// Total cost 0.5 * sum of squared whitened residuals.
    pub fn cost(&self, states: &[NavState]) -> f64 {
        self.factors
            .iter()
            .map(|f| f.residual(states).norm_squared())
            .sum::<f64>()
            * 0.5
    }
}

fn default_node_rate() -> f64 {
    10.0
}
fn default_bias_walk_g() -> f64 {
    1e-3
}
fn default_bias_walk_a() -> f64 {
    1e-2
}
fn default_weak_sigma() -> f64 {
    100.0
}

/// Graph construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmootherConfig {
    pub node_rate_hz: f64,
    pub gps_sigma: f64,
    pub imu_noise: ImuNoise,
    /// Bias random-walk sigma per node interval.
    pub bias_walk_gyro: f64,
    pub bias_walk_accel: f64,
    /// Loose prior applied to every node for conditioning of the
    /// otherwise gauge-free blocks.
    pub weak_prior_sigma: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            node_rate_hz: default_node_rate(),
            gps_sigma: 0.02,
            imu_noise: ImuNoise::default(),
            bias_walk_gyro: default_bias_walk_g(),
            bias_walk_accel: default_bias_walk_a(),
            weak_prior_sigma: default_weak_sigma(),
            max_iterations: 100,
            relative_tolerance: 1e-9,
        }
    }
}

/// Builds the chain graph: one node per `1/node_rate` second starting
/// at the first GPS fix (which defines the local origin), GPS factors
/// attached to their nearest node, preintegrated IMU factors and bias
/// random-walk factors between consecutive nodes, and an origin anchor
/// on the first node. Also returns the GPS-interpolated initial guess.
pub fn build_graph(
    gps: &[GpsFix],
    imu: &[ImuSample],
    cfg: &SmootherConfig,
) -> Result<(FactorGraph, Vec<NavState>)> {
    if gps.is_empty() {
        return Err(RallyError::InsufficientData("no GPS fixes".into()));
    }
    let t0 = gps[0].t;
    let origin = Vector3::new(gps[0].x, gps[0].y, gps[0].z);
    let t_last = gps[gps.len() - 1].t;
    let dt_node = 1.0 / cfg.node_rate_hz;
    let n_nodes = ((t_last - t0) / dt_node + 1e-9).floor() as usize + 1;
    if n_nodes < 1 {
        return Err(RallyError::InsufficientData("no nodes in time span".into()));
    }
    let node_times: Vec<f64> = (0..n_nodes).map(|i| t0 + i as f64 * dt_node).collect();

    let mut factors = Vec::new();
    for fix in gps {
        let node = (((fix.t - t0) / dt_node).round() as usize).min(n_nodes - 1);
        factors.push(Factor::Gps {
            node,
            z: Vector3::new(fix.x, fix.y, fix.z) - origin,
            sigma: cfg.gps_sigma,
            dt: fix.t - node_times[node],
        });
    }

    let mut imu_factors = 0usize;
    for i in 0..n_nodes.saturating_sub(1) {
        let (t_a, t_b) = (node_times[i], node_times[i + 1]);
        let segment: Vec<ImuSample> = imu
            .iter()
            .filter(|s| s.t >= t_a - 1e-9 && s.t <= t_b + 1e-9)
            .cloned()
            .collect();
        if segment.len() >= 2 {
            let preint =
                preintegrate_imu(&segment, Vector3::zeros(), Vector3::zeros(), &cfg.imu_noise)?;
            factors.push(Factor::Imu { i, preint });
            imu_factors += 1;
        }
        factors.push(Factor::BiasWalk {
            i,
            sigma_g: cfg.bias_walk_gyro,
            sigma_a: cfg.bias_walk_accel,
        });
    }
    let _ = imu_factors;

    // Origin anchor plus a loose all-block prior per node so the
    // orientation/velocity gauge stays conditioned even without IMU.
    // Position sigma at GPS strength: the origin is itself one noisy
    // fix, so pinning harder than that just bakes its error in.
    factors.push(Factor::Prior {
        node: 0,
        state: NavState::default(),
        sigmas: [10.0, cfg.gps_sigma.max(1e-6), 100.0, 0.1, 0.1],
    });
    for node in 0..n_nodes {
        factors.push(Factor::Prior {
            node,
            state: NavState::default(),
            sigmas: [cfg.weak_prior_sigma; 5],
        });
    }

    // Initial guess: GPS interpolation for position, finite-difference
    // velocity, yaw from the velocity direction, zero biases.
    let mut initial = Vec::with_capacity(n_nodes);
    let interp = |t: f64| -> Vector3<f64> {
        let i = gps.partition_point(|f| f.t <= t).min(gps.len() - 1).max(1);
        let (a, b) = (&gps[i - 1], &gps[i]);
        let w = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
        let pa = Vector3::new(a.x, a.y, a.z);
        let pb = Vector3::new(b.x, b.y, b.z);
        pa + (pb - pa) * w.clamp(0.0, 1.0) - origin
    };
    for (i, &t) in node_times.iter().enumerate() {
        let p = interp(t);
        let h = dt_node / 2.0;
        let v = (interp(t + h) - interp(t - h)) / (2.0 * h);
        let v = if i == 0 || i == n_nodes - 1 { Vector3::zeros() } else { v };
        let yaw = if v.xy().norm() > 0.5 {
            v.y.atan2(v.x)
        } else {
            0.0
        };
        initial.push(NavState {
            rot: Rotation3::from_euler_angles(0.0, 0.0, yaw),
            p,
            v,
            ..Default::default()
        });
    }

    Ok((FactorGraph { node_times, factors }, initial))
}

/// Numeric Jacobian of one factor with respect to the local coordinates
/// of its nodes, whitened like the residual. Central differences.
fn factor_jacobians(
    factor: &Factor,
    states: &mut [NavState],
) -> (DVector<f64>, Vec<(usize, DMatrix<f64>)>) {
    let r0 = factor.residual(states);
    let (a, b) = factor.nodes();
    let involved: Vec<usize> = std::iter::once(a).chain(b).collect();
    let h = 1e-6;
    let mut jacobians = Vec::with_capacity(involved.len());
    for &node in &involved {
        let mut j = DMatrix::zeros(r0.len(), NODE_DIM);
        let saved = states[node].clone();
        for c in 0..NODE_DIM {
            let mut d = [0.0; NODE_DIM];
            d[c] = h;
            states[node] = saved.retract(&d);
            let rp = factor.residual(states);
            d[c] = -h;
            states[node] = saved.retract(&d);
            let rm = factor.residual(states);
            j.set_column(c, &((rp - rm) / (2.0 * h)));
        }
        states[node] = saved;
        jacobians.push((node, j));
    }
    (r0, jacobians)
}

/// Gauss-Newton normal equations in block-tridiagonal form.
pub struct NormalEquations {
    /// Diagonal blocks, one per node.
    pub diag: Vec<DMatrix<f64>>,
    /// Upper off-diagonal blocks, `off[i]` coupling node i and i+1.
    pub off: Vec<DMatrix<f64>>,
    /// Right-hand side -J^T r.
    pub rhs: DVector<f64>,
}

/// Linearizes every factor at the assignment and assembles J^T J and
/// -J^T r exploiting the chain sparsity.
pub fn linearize(graph: &FactorGraph, states: &[NavState]) -> NormalEquations {
    let n = graph.nodes();
    let mut diag = vec![DMatrix::zeros(NODE_DIM, NODE_DIM); n];
    let mut off = vec![DMatrix::zeros(NODE_DIM, NODE_DIM); n.saturating_sub(1)];
    let mut rhs = DVector::zeros(n * NODE_DIM);
    let mut work = states.to_vec();
    for factor in &graph.factors {
        let (r, jacobians) = factor_jacobians(factor, &mut work);
        for (node_a, ja) in &jacobians {
            diag[*node_a] += ja.transpose() * ja;
            let mut seg = rhs.rows_mut(node_a * NODE_DIM, NODE_DIM);
            seg -= ja.transpose() * &r;
        }
        if jacobians.len() == 2 {
            let (i, ji) = &jacobians[0];
            let (_, jj) = &jacobians[1];
            off[*i] += ji.transpose() * jj;
        }
    }
    NormalEquations { diag, off, rhs }
}

/// Solves the block-tridiagonal SPD system by block forward
/// elimination and back substitution.
pub fn solve_block_tridiagonal(eq: &NormalEquations, damping: f64) -> Result<DVector<f64>> {
    let n = eq.diag.len();
    let mut d = Vec::with_capacity(n);
    for block in &eq.diag {
        let mut b = block.clone();
        for k in 0..NODE_DIM {
            b[(k, k)] += damping * block[(k, k)].max(1e-12);
        }
        d.push(b);
    }
    let mut rhs: Vec<DVector<f64>> = (0..n)
        .map(|i| eq.rhs.rows(i * NODE_DIM, NODE_DIM).into_owned())
        .collect();

    // Forward sweep.
    let mut factors = Vec::with_capacity(n);
    for i in 0..n {
        let chol = d[i].clone().cholesky().ok_or_else(|| {
            RallyError::Numerical(format!("normal equations not PD at node {i}"))
        })?;
        if i + 1 < n {
            // d[i+1] -= U^T D^-1 U; rhs[i+1] -= U^T D^-1 rhs[i]
            let u = &eq.off[i];
            let dinv_u = chol.solve(u);
            let dinv_r = chol.solve(&rhs[i]);
            d[i + 1] -= u.transpose() * &dinv_u;
            let correction = u.transpose() * &dinv_r;
            rhs[i + 1] -= correction;
        }
        factors.push(chol);
    }

    // Back substitution.
    let mut x = vec![DVector::zeros(NODE_DIM); n];
    for i in (0..n).rev() {
        let mut b = rhs[i].clone();
        if i + 1 < n {
            b -= &eq.off[i] * &x[i + 1];
        }
        x[i] = factors[i].solve(&b);
    }
    let mut out = DVector::zeros(n * NODE_DIM);
    for i in 0..n {
        out.rows_mut(i * NODE_DIM, NODE_DIM).copy_from(&x[i]);
    }
    Ok(out)
}

/// Optimization trace.
#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub states: Vec<NavState>,
    /// Cost after each accepted iteration, starting with the initial.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

/// Levenberg-Marquardt over the chain graph. Converges on relative cost
/// decrease below the configured tolerance.
pub fn optimize(
    graph: &FactorGraph,
    initial: &[NavState],
    cfg: &SmootherConfig,
) -> Result<OptimizeReport> {
    if initial.len() != graph.nodes() {
        return Err(RallyError::Input(format!(
            "assignment covers {} nodes, graph has {}",
            initial.len(),
            graph.nodes()
        )));
    }
    let mut states = initial.to_vec();
    let mut cost = graph.cost(&states);
    let mut history = vec![cost];
    let mut lambda = 1e-4;
    let mut iterations = 0;

    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let eq = linearize(graph, &states);
        // Already at a stationary point (e.g. zero-residual data).
        if eq.rhs.norm() < 1e-10 * (1.0 + cost) {
            break;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let delta = match solve_block_tridiagonal(&eq, lambda) {
                Ok(d) => d,
                Err(_) => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let candidate: Vec<NavState> = states
                .iter()
                .enumerate()
                .map(|(i, s)| s.retract(delta.rows(i * NODE_DIM, NODE_DIM).as_slice()))
                .collect();
            let c = graph.cost(&candidate);
            if c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                states = candidate;
                cost = c;
                history.push(cost);
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < cfg.relative_tolerance {
                    return Ok(OptimizeReport {
                        states,
                        cost_history: history,
                        iterations,
                    });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            if history.len() > 1 || cost < 1e-12 {
                // Stalled at (or already at) the optimum: accept.
                break;
            }
            return Err(RallyError::NonConvergence(format!(
                "no cost decrease from {cost:.6e} at damping {lambda:.1e}"
            )));
        }
    }
    Ok(OptimizeReport {
        states,
        cost_history: history,
        iterations,
    })
}

/// One high-rate interpolated output sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolatedState {
    pub t: f64,
    pub p: [f64; 3],
    pub v: [f64; 3],
    /// Yaw-pitch-roll of the orientation (rad).
    pub ypr: [f64; 3],
}

fn to_interp(t: f64, s: &NavState) -> InterpolatedState {
    let (roll, pitch, yaw) = s.rot.euler_angles();
    InterpolatedState {
        t,
        p: [s.p.x, s.p.y, s.p.z],
        v: [s.v.x, s.v.y, s.v.z],
        ypr: [yaw, pitch, roll],
    }
}

/// Forward-integrates the bias-corrected IMU stream from each node,
/// resetting to the MAP value at every node time, and emits one state
/// per IMU sample.
pub fn interpolate_state(
    graph: &FactorGraph,
    states: &[NavState],
    imu: &[ImuSample],
) -> Vec<InterpolatedState> {
    let g = gravity_vec();
    let mut out = Vec::new();
    for i in 0..graph.nodes() {
        let t_a = graph.node_times[i];
        let t_b = graph
            .node_times
            .get(i + 1)
            .copied()
            .unwrap_or(f64::INFINITY);
        let node = &states[i];
        out.push(to_interp(t_a, node));
        let mut cur = node.clone();
        let segment: Vec<&ImuSample> = imu
            .iter()
            .filter(|s| s.t >= t_a - 1e-9 && s.t < t_b - 1e-9)
            .collect();
        for pair in segment.windows(2) {
            let dt = pair[1].t - pair[0].t;
            let w = (Vector3::from(pair[0].gyro) + Vector3::from(pair[1].gyro)) * 0.5
                - node.bias_g;
            let a = (Vector3::from(pair[0].accel) + Vector3::from(pair[1].accel)) * 0.5
                - node.bias_a;
            let rot_mid = cur.rot * Rotation3::new(w * (dt / 2.0));
            let acc = rot_mid * a + g;
            cur.p += cur.v * dt + acc * (0.5 * dt * dt);
            cur.v += acc * dt;
            cur.rot *= Rotation3::new(w * dt);
            out.push(to_interp(pair[1].t, &cur));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn imu_stream(
        duration: f64,
        rate: f64,
        gyro: [f64; 3],
        accel: [f64; 3],
    ) -> Vec<ImuSample> {
        let n = (duration * rate).round() as usize;
        (0..=n)
            .map(|i| ImuSample {
                t: i as f64 / rate,
                gyro,
                accel,
            })
            .collect()
    }

    #[test]
    fn stationary_preintegration_is_zero() {
        let samples = imu_stream(0.1, 200.0, [0.0; 3], [0.0, 0.0, GRAVITY]);
        let p = preintegrate_imu(
            &samples,
            Vector3::zeros(),
            Vector3::zeros(),
            &ImuNoise::default(),
        )
        .unwrap();
        assert!(p.delta_v.norm() < 1e-12);
        assert!(p.delta_p.norm() < 1e-12);
        assert!(p.delta_rot.scaled_axis().norm() < 1e-12);
    }

    #[test]
    fn constant_acceleration_kinematics() {
        let samples = imu_stream(0.1, 200.0, [0.0; 3], [1.0, 0.0, GRAVITY]);
        let p = preintegrate_imu(
            &samples,
            Vector3::zeros(),
            Vector3::zeros(),
            &ImuNoise::default(),
        )
        .unwrap();
        assert_relative_eq!(p.delta_v.x, 0.1, epsilon = 1e-10);
        assert_relative_eq!(p.delta_p.x, 0.005, epsilon = 1e-10);
        assert_abs_diff_eq!(p.delta_v.z, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn constant_yaw_rate_rotation() {
        let w = std::f64::consts::PI;
        let samples = imu_stream(0.1, 200.0, [0.0, 0.0, w], [0.0, 0.0, GRAVITY]);
        let p = preintegrate_imu(
            &samples,
            Vector3::zeros(),
            Vector3::zeros(),
            &ImuNoise::default(),
        )
        .unwrap();
        assert_relative_eq!(p.delta_rot.scaled_axis().z, 0.1 * w, epsilon = 1e-9);
    }

    #[test]
    fn sample_gap_is_an_error() {
        let mut samples = imu_stream(0.1, 200.0, [0.0; 3], [0.0, 0.0, GRAVITY]);
        samples.retain(|s| !(s.t > 0.04 && s.t < 0.06));
        let err = preintegrate_imu(
            &samples,
            Vector3::zeros(),
            Vector3::zeros(),
            &ImuNoise::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn bias_correction_matches_reintegration() {
        // First-order corrected deltas vs. exact reintegration at a
        // slightly moved bias.
        let samples = imu_stream(0.1, 200.0, [0.1, -0.05, 0.3], [0.5, 0.2, GRAVITY - 0.1]);
        let p = preintegrate_imu(
            &samples,
            Vector3::zeros(),
            Vector3::zeros(),
            &ImuNoise::default(),
        )
        .unwrap();
        let bg = Vector3::new(0.01, -0.004, 0.006);
        let ba = Vector3::new(-0.02, 0.01, 0.005);
        let (r_c, v_c, p_c) = p.corrected(&bg, &ba);
        let (r_e, v_e, p_e) = super::integrate_deltas(&samples, &bg, &ba);
        assert!((r_c.inverse() * r_e).scaled_axis().norm() < 5e-4);
        assert!((v_c - v_e).norm() < 1e-4);
        assert!((p_c - p_e).norm() < 1e-5);
    }

    fn straight_line_streams(duration: f64, v: f64) -> (Vec<GpsFix>, Vec<ImuSample>) {
        let gps: Vec<GpsFix> = (0..=(duration * 20.0) as usize)
            .map(|i| {
                let t = i as f64 / 20.0;
                GpsFix {
                    t,
                    x: v * t,
                    y: 0.0,
                    z: 0.0,
                }
            })
            .collect();
        let imu = imu_stream(duration, 200.0, [0.0; 3], [0.0, 0.0, GRAVITY]);
        (gps, imu)
    }

    #[test]
    fn one_second_graph_counts() {
        let (gps, imu) = straight_line_streams(0.999, 1.0);
        assert_eq!(gps.len(), 20);
        let (graph, initial) = build_graph(&gps, &imu, &SmootherConfig::default()).unwrap();
        assert_eq!(graph.nodes(), 10);
        assert_eq!(initial.len(), 10);
        let gps_n = graph
            .factors
            .iter()
            .filter(|f| matches!(f, Factor::Gps { .. }))
            .count();
        let imu_n = graph
            .factors
            .iter()
            .filter(|f| matches!(f, Factor::Imu { .. }))
            .count();
        let bias_n = graph
            .factors
            .iter()
            .filter(|f| matches!(f, Factor::BiasWalk { .. }))
            .count();
        assert_eq!(gps_n, 20);
        assert_eq!(imu_n, 9);
        assert_eq!(bias_n, 9);
    }

    #[test]
    fn empty_streams_error() {
        assert!(build_graph(&[], &[], &SmootherConfig::default()).is_err());
    }

    #[test]
    fn block_solver_matches_dense() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..5 {
            let n = 4;
            // Random SPD block-tridiagonal system.
            let dim = n * NODE_DIM;
            let mut diag = Vec::new();
            let mut off = Vec::new();
            for _ in 0..n {
                let a = DMatrix::from_fn(NODE_DIM, NODE_DIM, |_, _| rng.gen_range(-1.0..1.0));
                diag.push(&a * a.transpose() + DMatrix::identity(NODE_DIM, NODE_DIM) * 20.0);
            }
            for _ in 0..n - 1 {
                off.push(DMatrix::from_fn(NODE_DIM, NODE_DIM, |_, _| {
                    rng.gen_range(-0.3..0.3)
                }));
            }
            let rhs = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
            let eq = NormalEquations {
                diag: diag.clone(),
                off: off.clone(),
                rhs: rhs.clone(),
            };
            let x = solve_block_tridiagonal(&eq, 0.0).unwrap();

            let mut dense = DMatrix::zeros(dim, dim);
            for i in 0..n {
                dense
                    .view_mut((i * NODE_DIM, i * NODE_DIM), (NODE_DIM, NODE_DIM))
                    .copy_from(&diag[i]);
                if i + 1 < n {
                    dense
                        .view_mut((i * NODE_DIM, (i + 1) * NODE_DIM), (NODE_DIM, NODE_DIM))
                        .copy_from(&off[i]);
                    dense
                        .view_mut(((i + 1) * NODE_DIM, i * NODE_DIM), (NODE_DIM, NODE_DIM))
                        .copy_from(&off[i].transpose());
                }
            }
            let x_dense = dense.cholesky().unwrap().solve(&rhs);
            assert!(
                (x.clone() - &x_dense).norm() / x_dense.norm() < 1e-8,
                "solver mismatch {}",
                (x - x_dense).norm()
            );
        }
    }

    #[test]
    fn gps_only_posterior_is_weighted_mean() {
        // One node, three GPS fixes with different sigmas: posterior
        // position is the precision-weighted mean (weak priors are
        // negligible at sigma 1e4).
        let graph = FactorGraph {
            node_times: vec![0.0],
            factors: vec![
                Factor::Gps {
                    node: 0,
                    z: Vector3::new(1.0, 0.0, 0.0),
                    sigma: 0.1,
                    dt: 0.0,
                },
                Factor::Gps {
                    node: 0,
                    z: Vector3::new(2.0, 0.0, 0.0),
                    sigma: 0.2,
                    dt: 0.0,
                },
                Factor::Prior {
                    node: 0,
                    state: NavState::default(),
                    sigmas: [1e4; 5],
                },
            ],
        };
        let cfg = SmootherConfig::default();
        let report = optimize(&graph, &[NavState::default()], &cfg).unwrap();
        let w1 = 1.0 / 0.01;
        let w2 = 1.0 / 0.04;
        let expect = (w1 * 1.0 + w2 * 2.0) / (w1 + w2);
        assert_relative_eq!(report.states[0].p.x, expect, epsilon = 1e-6);
    }

    #[test]
    fn noiseless_straight_line_recovered() {
        let (gps, imu) = straight_line_streams(3.0, 2.0);
        let cfg = SmootherConfig::default();
        let (graph, initial) = build_graph(&gps, &imu, &cfg).unwrap();
        let report = optimize(&graph, &initial, &cfg).unwrap();
        for (i, s) in report.states.iter().enumerate() {
            let t = graph.node_times[i];
            assert!(
                (s.p - Vector3::new(2.0 * t, 0.0, 0.0)).norm() < 1e-4,
                "node {i}: {:?}",
                s.p
            );
        }
        // Accepted LM iterations never increase the cost.
        for pair in report.cost_history.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn interpolation_resets_at_nodes() {
        let (gps, imu) = straight_line_streams(2.0, 1.5);
        let cfg = SmootherConfig::default();
        let (graph, initial) = build_graph(&gps, &imu, &cfg).unwrap();
        let report = optimize(&graph, &initial, &cfg).unwrap();
        let stream = interpolate_state(&graph, &report.states, &imu);
        for (i, &t) in graph.node_times.iter().enumerate() {
            let at_node = stream
                .iter()
                .find(|s| (s.t - t).abs() < 1e-9)
                .expect("node time present");
            assert_abs_diff_eq!(at_node.p[0], report.states[i].p.x, epsilon = 1e-12);
            assert_abs_diff_eq!(at_node.v[0], report.states[i].v.x, epsilon = 1e-12);
        }
        for pair in stream.windows(2) {
            assert!(pair[1].t >= pair[0].t);
        }
    }

    #[test]
    fn stationary_interpolation_is_constant() {
        let (gps, imu) = straight_line_streams(1.0, 0.0);
        let cfg = SmootherConfig::default();
        let (graph, initial) = build_graph(&gps, &imu, &cfg).unwrap();
        let report = optimize(&graph, &initial, &cfg).unwrap();
        let stream = interpolate_state(&graph, &report.states, &imu);
        for s in &stream {
            assert!(s.p[0].abs() < 1e-4, "drifted to {}", s.p[0]);
            assert!(s.v[0].abs() < 1e-3);
        }
    }

    #[test]
    fn cost_decomposes_over_factors() {
        let (gps, imu) = straight_line_streams(1.0, 1.0);
        let cfg = SmootherConfig::default();
        let (graph, initial) = build_graph(&gps, &imu, &cfg).unwrap();
        let total = graph.cost(&initial);
        let sum: f64 = graph
            .factors
            .iter()
            .map(|f| 0.5 * f.residual(&initial).norm_squared())
            .sum();
        assert_relative_eq!(total, sum, epsilon = 1e-12);
    }

    #[test]
    fn inflating_one_gps_sigma_does_not_tighten_its_fit() {
        // Information monotonicity on a small fixture: doubling one GPS
        // factor's sigma never reduces that factor's raw residual at
        // the optimum.
        let (gps, imu) = straight_line_streams(0.999, 1.0);
        let mut gps = gps;
        // Perturb one fix so residuals are nonzero.
        gps[10].y += 0.5;
        let cfg = SmootherConfig::default();
        let (graph, initial) = build_graph(&gps, &imu, &cfg).unwrap();
        let report = optimize(&graph, &initial, &cfg).unwrap();
        let raw_residual = |states: &[NavState], sigma: f64| {
            // Factor index 10 is the perturbed fix.
            if let Factor::Gps { node, z, .. } = &graph.factors[10] {
                ((states[*node].p - z) * sigma).norm() * (1.0 / sigma)
            } else {
                panic!("expected GPS factor")
            }
        };
        let tight = raw_residual(&report.states, cfg.gps_sigma);

        let mut loose_cfg = cfg;
        let (mut graph2, initial2) = build_graph(&gps, &imu, &loose_cfg).unwrap();
        if let Factor::Gps { sigma, .. } = &mut graph2.factors[10] {
            *sigma *= 2.0;
        }
        loose_cfg.gps_sigma = cfg.gps_sigma;
        let report2 = optimize(&graph2, &initial2, &loose_cfg).unwrap();
        let loose = raw_residual(&report2.states, cfg.gps_sigma);
        assert!(loose + 1e-9 >= tight, "loose {loose} < tight {tight}");
    }
}
