//! Moment-of-inertia computation from bifilar pendulum oscillation
//! records.

use serde::{Deserialize, Serialize};

use crate::error::{RallyError, Result};

fn default_gravity() -> f64 {
    9.81
}

/// Bifilar pendulum geometry: suspended mass, wire attachment distances
/// from the CG, and wire length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BifilarSetup {
    /// Suspended mass (kg).
    pub m: f64,
    /// CG to first wire attachment (m).
    pub r_1: f64,
    /// CG to second wire attachment (m).
    pub r_2: f64,
    /// Wire length (m).
    pub d: f64,
    #[serde(default = "default_gravity")]
    pub g: f64,
}

impl BifilarSetup {
    /// Parallel-wire setup with both attachments at distance `b`.
    pub fn parallel(m: f64, b: f64, d: f64) -> Self {
        Self {
            m,
            r_1: b,
            r_2: b,
            d,
            g: default_gravity(),
        }
    }
}

/// Mean oscillation period from successive upward zero crossings of the
/// mean-removed angle signal, linearly interpolated between samples.
/// Crossing detection uses hysteresis at half the signal RMS so
/// measurement noise cannot double-count a crossing.
pub fn oscillation_period(angle_samples: &[f64], sample_rate: f64, n_periods: usize) -> Result<f64> {
    if sample_rate <= 0.0 {
        return Err(RallyError::Domain("sample rate must be positive".into()));
    }
    if angle_samples.len() < 4 {
        return Err(RallyError::InsufficientData(
            "too few samples for period extraction".into(),
        ));
    }
    let n = angle_samples.len() as f64;
    let mean = angle_samples.iter().sum::<f64>() / n;
    let rms = (angle_samples.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    let arm_level = -0.5 * rms;
    let dt = 1.0 / sample_rate;

    // A crossing only counts once the signal has dipped below the arm
    // level since the previous one.
    let mut crossings = Vec::new();
    let mut armed = false;
    for i in 1..angle_samples.len() {
        let prev = angle_samples[i - 1] - mean;
        let cur = angle_samples[i] - mean;
        if prev <= arm_level {
            armed = true;
        }
        if armed && prev <= 0.0 && cur > 0.0 {
            let frac = -prev / (cur - prev);
            crossings.push((i as f64 - 1.0 + frac) * dt);
            armed = false;
        }
    }
    if crossings.len() < 2 {
        return Err(RallyError::InsufficientData(format!(
            "found {} upward zero crossings, need at least 2",
            crossings.len()
        )));
    }
    let available = crossings.len() - 1;
    let used = available.min(n_periods.max(1));
    if used < n_periods {
        return Err(RallyError::InsufficientData(format!(
            "found {available} full periods, need {n_periods}"
        )));
    }
    let span = crossings[used] - crossings[0];
    Ok(span / used as f64)
}

/// Moment of inertia from the pendulum geometry and oscillation period.
///
/// With equal attachment distances this reduces to the parallel-wire
/// special case `I = m g b^2 T^2 / (4 pi^2 d)`.
pub fn bifilar_moi(setup: &BifilarSetup, period: f64) -> Result<f64> {
    if period < 0.0 {
        return Err(RallyError::Domain("period must be nonnegative".into()));
    }
    let dr = setup.r_1 - setup.r_2;
    let h_sq = setup.d * setup.d - dr * dr;
    if h_sq < 0.0 {
        return Err(RallyError::Geometry(format!(
            "wire length {} shorter than attachment offset {}",
            setup.d,
            dr.abs()
        )));
    }
    let h = h_sq.sqrt();
    Ok(setup.m * setup.g * setup.r_1 * setup.r_2 * period * period
        / (4.0 * std::f64::consts::PI.powi(2) * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    #[test]
    fn known_sinusoid_period() {
        let rate = 100.0;
        let n = (130.0 * rate) as usize;
        let samples: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / rate / 2.0).sin())
            .collect();
        let t = oscillation_period(&samples, rate, 60).unwrap();
        assert!((t - 2.0).abs() < 1e-3, "T = {t}");
    }

    #[test]
    fn noisy_sinusoid_within_half_percent() {
        let rate = 100.0;
        let n = (130.0 * rate) as usize;
        let noise = Normal::new(0.0, 0.05).unwrap();
        for seed in 0..100u64 {
            let mut rng = StdRng::seed_from_u64(seed);
            let samples: Vec<f64> = (0..n)
                .map(|i| {
                    (2.0 * std::f64::consts::PI * i as f64 / rate / 2.0).sin()
                        + noise.sample(&mut rng)
                })
                .collect();
            let t = oscillation_period(&samples, rate, 60).unwrap();
            assert!((t - 2.0).abs() / 2.0 < 0.005, "seed {seed}: T = {t}");
        }
    }

    #[test]
    fn damped_sinusoid_matches_damped_period() {
        // zeta = 0.005, omega_n = pi: damped period 2 / sqrt(1 - zeta^2).
        let rate = 100.0;
        let zeta = 0.005f64;
        let omega_n = std::f64::consts::PI;
        let omega_d = omega_n * (1.0 - zeta * zeta).sqrt();
        let t_expected = 2.0 * std::f64::consts::PI / omega_d;
        let n = (130.0 * rate) as usize;
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                (-zeta * omega_n * t).exp() * (omega_d * t).sin()
            })
            .collect();
        let t = oscillation_period(&samples, rate, 40).unwrap();
        assert!((t - t_expected).abs() / t_expected < 1e-3, "T = {t}");
    }

    #[test]
    fn too_few_crossings_errors() {
        let samples = vec![0.0, 0.5, 1.0, 0.5];
        assert!(oscillation_period(&samples, 10.0, 60).is_err());
    }

    #[test]
    fn front_wheel_row() {
        let setup = BifilarSetup::parallel(1.64, 0.182, 0.935);
        let i = bifilar_moi(&setup, 1.81).unwrap();
        assert!((i - 0.048).abs() / 0.048 < 0.02, "I_f = {i}");
    }

    #[test]
    fn zero_period_zero_moi() {
        let setup = BifilarSetup::parallel(1.0, 0.2, 1.0);
        assert_eq!(bifilar_moi(&setup, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn general_geometry_direct_substitution() {
        let setup = BifilarSetup {
            m: 10.0,
            r_1: 0.2,
            r_2: 0.3,
            d: 1.0,
            g: 9.81,
        };
        let h = (1.0f64 - 0.01).sqrt();
        let expected = 10.0 * 9.81 * 0.2 * 0.3 * 4.0 / (4.0 * std::f64::consts::PI.powi(2) * h);
        assert_relative_eq!(bifilar_moi(&setup, 2.0).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn invalid_geometry_errors() {
        let setup = BifilarSetup {
            m: 1.0,
            r_1: 0.0,
            r_2: 2.0,
            d: 1.0,
            g: 9.81,
        };
        assert!(bifilar_moi(&setup, 1.0).is_err());
    }

    #[test]
    fn moi_scales_as_period_squared() {
        let setup = BifilarSetup::parallel(2.0, 0.25, 1.2);
        let i1 = bifilar_moi(&setup, 1.3).unwrap();
        let i2 = bifilar_moi(&setup, 2.6).unwrap();
        assert_relative_eq!(i2, 4.0 * i1, max_relative = 1e-12);
    }

    #[test]
    fn parallel_reduction_matches_general_formula() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let b = rng.gen_range(0.05..0.5);
            let d = rng.gen_range(0.5..2.0);
            let m = rng.gen_range(0.5..30.0);
            let t = rng.gen_range(0.5..3.0);
            let general = BifilarSetup {
                m,
                r_1: b,
                r_2: b,
                d,
                g: 9.81,
            };
            let reduced = m * 9.81 * b * b * t * t / (4.0 * std::f64::consts::PI.powi(2) * d);
            assert_relative_eq!(
                bifilar_moi(&general, t).unwrap(),
                reduced,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn simulated_pendulum_round_trip() {
        // Small-angle pendulum theta'' = -(m g b^2 / (I d)) theta with a
        // known I; extraction then inversion recovers I within 1%.
        let setup = BifilarSetup::parallel(5.0, 0.2, 1.0);
        let i_true = 0.35;
        let omega_sq = setup.m * setup.g * setup.r_1 * setup.r_2 / (i_true * setup.d);
        let rate = 200.0;
        let dt = 1.0 / rate;
        let mut theta: f64 = 0.1;
        let mut theta_dot = 0.0;
        let mut samples = Vec::new();
        let total = (180.0 * rate) as usize;
        for _ in 0..total {
            samples.push(theta);
            // RK4 on the linear oscillator
            let f = |th: f64, _td: f64| -omega_sq * th;
            let k1 = (theta_dot, f(theta, theta_dot));
            let k2 = (theta_dot + dt / 2.0 * k1.1, f(theta + dt / 2.0 * k1.0, 0.0));
            let k3 = (theta_dot + dt / 2.0 * k2.1, f(theta + dt / 2.0 * k2.0, 0.0));
            let k4 = (theta_dot + dt * k3.1, f(theta + dt * k3.0, 0.0));
            theta += dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            theta_dot += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        let t = oscillation_period(&samples, rate, 60).unwrap();
        let i_est = bifilar_moi(&setup, t).unwrap();
        assert!((i_est - i_true).abs() / i_true < 0.01, "I = {i_est}");
    }
}
