//! Unscented transform machinery, joint-state UKF, and the adaptive
//! limited-memory extension that estimates the noise statistics online.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{RallyError, Result};
use crate::linalg::{nearest_positive_definite, sqrt_psd};

/// Unscented transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

impl UtParams {
    pub fn lambda(&self, dim: usize) -> f64 {
        let l = dim as f64;
        self.alpha * self.alpha * (l + self.kappa) - l
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(RallyError::Config("alpha must be in (0, 1]".into()));
        }
        if dim as f64 + self.lambda(dim) <= 0.0 {
            return Err(RallyError::Config("require L + lambda > 0".into()));
        }
        Ok(())
    }
}

/// The 2L+1 sigma points with their mean and covariance weights.
#[derive(Debug, Clone)]
pub struct SigmaPointSet {
    pub points: Vec<DVector<f64>>,
    pub w_mean: Vec<f64>,
    pub w_cov: Vec<f64>,
}

impl SigmaPointSet {
    pub fn weighted_mean(values: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(values[0].len());
        for (v, w) in values.iter().zip(weights) {
            out += v * *w;
        }
        out
    }

    /// Weighted second moment `sum W_i v_i v_i^T`.
    pub fn weighted_square(values: &[DVector<f64>], weights: &[f64]) -> DMatrix<f64> {
        let n = values[0].len();
        let mut out = DMatrix::zeros(n, n);
        for (v, w) in values.iter().zip(weights) {
            out += v * v.transpose() * *w;
        }
        out
    }
}

/// Standard unscented transform point selection around (mean, cov).
pub fn sigma_points(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    ut: &UtParams,
) -> Result<SigmaPointSet> {
    let l = mean.len();
    ut.validate(l)?;
    let lambda = ut.lambda(l);
    let scaled = cov * (l as f64 + lambda);
    let root = sqrt_psd(&scaled).ok_or_else(|| {
        RallyError::Numerical("covariance square root failed after PD repair".into())
    })?;

    let mut points = Vec::with_capacity(2 * l + 1);
    points.push(mean.clone());
    for i in 0..l {
        let col = root.column(i).into_owned();
        points.push(mean + &col);
        points.push(mean - &col);
    }

    let w0_m = lambda / (l as f64 + lambda);
    let w0_c = w0_m + 1.0 - ut.alpha * ut.alpha + ut.beta;
    let wi = 1.0 / (2.0 * (l as f64 + lambda));
    let mut w_mean = vec![wi; 2 * l + 1];
    let mut w_cov = vec![wi; 2 * l + 1];
    w_mean[0] = w0_m;
    w_cov[0] = w0_c;

    Ok(SigmaPointSet {
        points,
        w_mean,
        w_cov,
    })
}

/// Gaussian state estimate.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }
}

/// Kalman filter hyperparameters: process and observation noise means
/// and covariances.
#[derive(Debug, Clone)]
pub struct NoiseStatistics {
    pub q: DVector<f64>,
    pub q_cov: DMatrix<f64>,
    pub r: DVector<f64>,
    pub r_cov: DMatrix<f64>,
}

impl NoiseStatistics {
    pub fn zero_mean(q_cov: DMatrix<f64>, r_cov: DMatrix<f64>) -> Self {
        Self {
            q: DVector::zeros(q_cov.nrows()),
            r: DVector::zeros(r_cov.nrows()),
            q_cov,
            r_cov,
        }
    }
}

/// Byproducts of a predict step needed by the limited-memory noise
/// estimators.
#[derive(Debug, Clone)]
pub struct PredictInfo {
    /// Sigma-weighted mean of the propagated points (before adding q).
    pub f_hat: DVector<f64>,
    /// Sigma-weighted second moment of the propagated points.
    pub f_square: DMatrix<f64>,
}

/// Byproducts of an update step.
#[derive(Debug, Clone)]
pub struct UpdateInfo {
    pub innovation: DVector<f64>,
    /// Sigma-weighted mean of the predicted observations (before adding r).
    pub h_hat: DVector<f64>,
    /// Sigma-weighted second moment of the predicted observations.
    pub h_square: DMatrix<f64>,
}

/// Propagates the belief through the process function and adds the
/// process-noise mean and covariance.
pub fn ukf_predict<F>(
    belief: &GaussianBelief,
    f: F,
    noise: &NoiseStatistics,
    ut: &UtParams,
) -> Result<(GaussianBelief, PredictInfo)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let sp = sigma_points(&belief.mean, &belief.cov, ut)?;
    let propagated: Vec<DVector<f64>> = sp
        .points
        .iter()
        .map(|p| {
            let out = f(p)?;
            if out.iter().any(|v| !v.is_finite()) {
                return Err(RallyError::Divergence(
                    "process function produced non-finite sigma point".into(),
                ));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let f_hat = SigmaPointSet::weighted_mean(&propagated, &sp.w_mean);
    let f_square = SigmaPointSet::weighted_square(&propagated, &sp.w_mean);

    let n = f_hat.len();
    let mut cov = DMatrix::zeros(n, n);
    for (p, w) in propagated.iter().zip(&sp.w_cov) {
        let d = p - &f_hat;
        cov += &d * d.transpose() * *w;
    }
    cov += &noise.q_cov;

    Ok((
        GaussianBelief::new(&f_hat + &noise.q, cov),
        PredictInfo { f_hat, f_square },
    ))
}

/// Standard UT measurement update; returns the posterior and the
/// innovation byproducts.
pub fn ukf_update<H>(
    belief: &GaussianBelief,
    z: &DVector<f64>,
    h: H,
    noise: &NoiseStatistics,
    ut: &UtParams,
) -> Result<(GaussianBelief, UpdateInfo)>
where
    H: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let sp = sigma_points(&belief.mean, &belief.cov, ut)?;
    let observed: Vec<DVector<f64>> = sp.points.iter().map(|p| h(p)).collect::<Result<_>>()?;

    let h_hat = SigmaPointSet::weighted_mean(&observed, &sp.w_mean);
    let h_square = SigmaPointSet::weighted_square(&observed, &sp.w_mean);

    let m = h_hat.len();
    let n = belief.mean.len();
    let mut s = DMatrix::zeros(m, m);
    let mut cross = DMatrix::zeros(n, m);
    for ((x, y), w) in sp.points.iter().zip(&observed).zip(&sp.w_cov) {
        let dy = y - &h_hat;
        let dx = x - &belief.mean;
        s += &dy * dy.transpose() * *w;
        cross += dx * dy.transpose() * *w;
    }
    s += &noise.r_cov;

    let s_inv = s
        .clone()
        .try_inverse()
        .or_else(|| nearest_positive_definite(&s).try_inverse())
        .ok_or_else(|| RallyError::Numerical("singular innovation covariance".into()))?;
    let gain = cross * s_inv;

    let predicted_z = &h_hat + &noise.r;
    let innovation = z - &predicted_z;
    let mean = &belief.mean + &gain * &innovation;
    let cov = &belief.cov - &gain * s * gain.transpose();
    let cov = nearest_positive_definite(&cov);

    Ok((
        GaussianBelief::new(mean, cov),
        UpdateInfo {
            innovation,
            h_hat,
            h_square,
        },
    ))
}

struct ObsSample {
    residual: DVector<f64>,
    /// `E[h h^T] - h_hat h_hat^T` at the sample time.
    spread: DMatrix<f64>,
}

struct ProcSample {
    residual: DVector<f64>,
    /// `E[f f^T] - f_hat f_hat^T - P_k` at the sample time.
    term: DMatrix<f64>,
}

/// Fixed-capacity ring buffers of observation- and process-noise samples
/// with their sigma-point statistics.
pub struct NoiseSampleWindow {
    obs: VecDeque<ObsSample>,
    proc: VecDeque<ProcSample>,
    obs_capacity: usize,
    proc_capacity: usize,
}

impl NoiseSampleWindow {
    /// Capacities sized for a 10 s window at the filter rate.
    pub fn for_rate(filter_rate_hz: f64) -> Self {
        let n = (10.0 * filter_rate_hz).round().max(2.0) as usize;
        Self::with_capacity(n, n)
    }

    pub fn with_capacity(obs_capacity: usize, proc_capacity: usize) -> Self {
        Self {
            obs: VecDeque::with_capacity(obs_capacity),
            proc: VecDeque::with_capacity(proc_capacity),
            obs_capacity,
            proc_capacity,
        }
    }

    pub fn push_observation(&mut self, z: &DVector<f64>, info: &UpdateInfo) {
        if self.obs.len() == self.obs_capacity {
            self.obs.pop_front();
        }
        let spread = &info.h_square - &info.h_hat * info.h_hat.transpose();
        self.obs.push_back(ObsSample {
            residual: z - &info.h_hat,
            spread,
        });
    }

    pub fn push_process(
        &mut self,
        posterior_mean: &DVector<f64>,
        posterior_cov: &DMatrix<f64>,
        info: &PredictInfo,
    ) {
        if self.proc.len() == self.proc_capacity {
            self.proc.pop_front();
        }
        let term = &info.f_square - &info.f_hat * info.f_hat.transpose() - posterior_cov;
        self.proc.push_back(ProcSample {
            residual: posterior_mean - &info.f_hat,
            term,
        });
    }

    pub fn observation_count(&self) -> usize {
        self.obs.len()
    }

    pub fn process_count(&self) -> usize {
        self.proc.len()
    }

    /// True once both ring buffers hold a full window.
    pub fn is_full(&self) -> bool {
        self.obs.len() == self.obs_capacity && self.proc.len() == self.proc_capacity
    }
}

/// Limited-memory unbiased estimate of the observation-noise mean and
/// covariance, the covariance repaired to PD.
pub fn estimate_observation_noise(
    window: &NoiseSampleWindow,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = window.obs.len();
    if n < 2 {
        return Err(RallyError::InsufficientData(format!(
            "observation window holds {n} samples, need at least 2"
        )));
    }
    let nf = n as f64;
    let dim = window.obs[0].residual.len();
    let mut mean = DVector::zeros(dim);
    for s in &window.obs {
        mean += &s.residual;
    }
    mean /= nf;

    let mut cov = DMatrix::zeros(dim, dim);
    for s in &window.obs {
        let d = &s.residual - &mean;
        cov += &d * d.transpose() - &s.spread * ((nf - 1.0) / nf);
    }
    cov /= nf - 1.0;
    Ok((mean, nearest_positive_definite(&cov)))
}

/// Limited-memory unbiased estimate of the process-noise mean and
/// covariance, the covariance repaired to PD.
pub fn estimate_process_noise(window: &NoiseSampleWindow) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = window.proc.len();
    if m < 2 {
        return Err(RallyError::InsufficientData(format!(
            "process window holds {m} samples, need at least 2"
        )));
    }
    let mf = m as f64;
    let dim = window.proc[0].residual.len();
    let mut mean = DVector::zeros(dim);
    for s in &window.proc {
        mean += &s.residual;
    }
    mean /= mf;

    let mut cov = DMatrix::zeros(dim, dim);
    for s in &window.proc {
        let d = &s.residual - &mean;
        cov += &d * d.transpose() + &s.term * ((mf - 1.0) / mf);
    }
    cov /= mf - 1.0;
    Ok((mean, nearest_positive_definite(&cov)))
}

/// Box constraints and per-step random-walk variance for the estimated
/// parameter vector.
#[derive(Debug, Clone)]
pub struct ParameterSpec {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Diagonal the parameter block of Q is rescaled to each step.
    pub q_p_diag: DVector<f64>,
}

impl ParameterSpec {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp(&self, p: &mut DVector<f64>) {
        for i in 0..p.len() {
            p[i] = p[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

/// Joint-state UKF over the augmented vector `[x; p]` with random-walk
/// parameter dynamics.
pub struct JointUkf {
    pub belief: GaussianBelief,
    pub stats: NoiseStatistics,
    pub ut: UtParams,
    pub spec: ParameterSpec,
    pub state_dim: usize,
}

impl JointUkf {
    pub fn new(
        state: GaussianBelief,
        params: GaussianBelief,
        stats: NoiseStatistics,
        ut: UtParams,
        spec: ParameterSpec,
    ) -> Self {
        let state_dim = state.mean.len();
        let total = state_dim + params.mean.len();
        let mut mean = DVector::zeros(total);
        mean.rows_mut(0, state_dim).copy_from(&state.mean);
        mean.rows_mut(state_dim, params.mean.len()).copy_from(&params.mean);
        let mut cov = DMatrix::zeros(total, total);
        cov.view_mut((0, 0), (state_dim, state_dim)).copy_from(&state.cov);
        cov.view_mut((state_dim, state_dim), (params.mean.len(), params.mean.len()))
            .copy_from(&params.cov);
        Self {
            belief: GaussianBelief::new(mean, cov),
            stats,
            ut,
            spec,
            state_dim,
        }
    }

    pub fn parameters(&self) -> DVector<f64> {
        self.belief
            .mean
            .rows(self.state_dim, self.spec.dim())
            .into_owned()
    }

    pub fn state(&self) -> DVector<f64> {
        self.belief.mean.rows(0, self.state_dim).into_owned()
    }

    /// Augmented process: the physical process applied with the sampled
    /// parameter block, parameters held (clamped random walk).
    pub fn augmented_process<'a, F>(&'a self, f: F) -> impl Fn(&DVector<f64>) -> Result<DVector<f64>> + 'a
    where
        F: Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>> + 'a,
    {
        let state_dim = self.state_dim;
        let spec = &self.spec;
        move |aug: &DVector<f64>| {
            let x = aug.rows(0, state_dim).into_owned();
            let mut p = aug.rows(state_dim, spec.dim()).into_owned();
            spec.clamp(&mut p);
            let next = f(&x, &p)?;
            let mut out = DVector::zeros(aug.len());
            out.rows_mut(0, state_dim).copy_from(&next);
            out.rows_mut(state_dim, spec.dim()).copy_from(&p);
            Ok(out)
        }
    }

    /// Restores the parameter block of the process noise to its
    /// random-walk prior: zero mean, configured small diagonal. The
    /// parameter walk is a design choice, not a physical noise, so
    /// adaptive estimates must not leak into it — a nonzero estimated
    /// mean would act as a constant drift on the parameters.
    pub fn rescale_parameter_noise(&mut self) {
        let n = self.state_dim;
        for i in 0..self.spec.dim() {
            self.stats.q[n + i] = 0.0;
            for j in 0..self.spec.dim() {
                self.stats.q_cov[(n + i, n + j)] =
                    if i == j { self.spec.q_p_diag[i] } else { 0.0 };
            }
        }
    }

    /// One predict/update cycle. Returns the byproducts for adaptive
    /// noise estimation.
    pub fn step<F, H>(
        &mut self,
        f: F,
        h: H,
        z: &DVector<f64>,
    ) -> Result<(PredictInfo, UpdateInfo)>
    where
        F: Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
        H: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    {
        self.rescale_parameter_noise();
        let (predicted, pinfo) = {
            let process = self.augmented_process(f);
            ukf_predict(&self.belief, process, &self.stats, &self.ut)?
        };
        let (posterior, uinfo) = ukf_update(&predicted, z, h, &self.stats, &self.ut)?;
        self.belief = posterior;
        // Keep the parameter estimate inside its physical bounds.
        let mut p = self.parameters();
        self.spec.clamp(&mut p);
        self.belief
            .mean
            .rows_mut(self.state_dim, self.spec.dim())
            .copy_from(&p);
        Ok((pinfo, uinfo))
    }
}

/// Adaptive limited-memory wrapper: a joint-state UKF whose noise
/// statistics are re-estimated from fixed-length residual windows.
pub struct AlmUkf {
    pub filter: JointUkf,
    pub window: NoiseSampleWindow,
    /// With adaptation off this reduces to the plain joint-state UKF.
    pub adapt: bool,
    /// Number of PD repairs triggered by the noise estimators.
    pub repair_count: usize,
}

impl AlmUkf {
    pub fn new(filter: JointUkf, window: NoiseSampleWindow) -> Self {
        Self {
            filter,
            window,
            adapt: true,
            repair_count: 0,
        }
    }

    /// One predict + update, pushing residual samples and re-estimating
    /// the hyperparameter set from the windows.
    pub fn step<F, H>(&mut self, f: F, h: H, z: &DVector<f64>) -> Result<()>
    where
        F: Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
        H: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    {
        let (pinfo, uinfo) = self.filter.step(f, h, z)?;
        if !self.adapt {
            return Ok(());
        }
        self.window.push_observation(z, &uinfo);
        self.window
            .push_process(&self.filter.belief.mean, &self.filter.belief.cov, &pinfo);

        // Estimates from partially filled windows reflect the filter's
        // own convergence transient, not the noise; feeding those back
        // destabilizes the loop. Wait for a full window.
        if !self.window.is_full() {
            return Ok(());
        }

        if self.window.observation_count() >= 2 {
            let (r, r_cov) = estimate_observation_noise(&self.window)?;
            if !crate::linalg::is_positive_definite(&r_cov, 0.0) {
                self.repair_count += 1;
            }
            self.filter.stats.r = r;
            self.filter.stats.r_cov = r_cov;
        }
        if self.window.process_count() >= 2 {
            let (q, q_cov) = estimate_process_noise(&self.window)?;
            self.filter.stats.q = q;
            self.filter.stats.q_cov = q_cov;
        }
        self.filter.rescale_parameter_noise();
        Ok(())
    }
}
