//! Planar and full (sprung-mass) vehicle dynamics with Magic Formula
//! tires, quasi-static normal loads, and a fixed-step RK4 integrator.

use nalgebra::SVector;
use serde::{Deserialize, Serialize};

use crate::error::{RallyError, Result};
use crate::tire::{magic_formula_mu, tire_forces, wheel_slip, MagicFormulaParams, TireForce};

pub const GRAVITY: f64 = 9.81;

/// Hard validity bound on pitch and roll for the full model.
pub const MAX_SUSPENSION_ANGLE: f64 = std::f64::consts::FRAC_PI_6;

fn default_brake_torque_max() -> f64 {
    8.0
}

/// Planar model parameters. The `autorally` preset carries the measured
/// values for the 1:5 scale platform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// Total mass (kg).
    pub m: f64,
    /// Yaw inertia (kg m^2).
    pub i_z: f64,
    /// CG to front axle (m).
    pub l_f: f64,
    /// CG to rear axle (m).
    pub l_r: f64,
    /// Wheel radius (m).
    pub wheel_radius: f64,
    /// Front axle spin inertia, both wheels (kg m^2).
    pub i_f: f64,
    /// Rear axle spin inertia, both wheels (kg m^2).
    pub i_r: f64,
    /// Front track width (m).
    pub w_f: f64,
    /// Rear track width (m).
    pub w_r: f64,
    /// CG height above ground (m), used for load transfer.
    pub h_cg: f64,
    /// Full front-brake torque at command 1.0 (N m).
    #[serde(default = "default_brake_torque_max")]
    pub brake_torque_max: f64,
}

impl VehicleParams {
    /// Measured parameters of the AutoRally platform.
    pub fn autorally() -> Self {
        Self {
            m: 21.88,
            i_z: 1.124,
            l_f: 0.34,
            l_r: 0.23,
            wheel_radius: 0.195 / 2.0,
            i_f: 0.048,
            i_r: 0.044,
            w_f: 0.395,
            w_r: 0.405,
            h_cg: 0.12,
            brake_torque_max: default_brake_torque_max(),
        }
    }

    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.m,
            self.i_z,
            self.l_f,
            self.l_r,
            self.wheel_radius,
            self.i_f,
            self.i_r,
        ];
        if pos.iter().any(|v| *v <= 0.0) || self.w_f < 0.0 || self.w_r < 0.0 || self.h_cg < 0.0 {
            return Err(RallyError::Config("vehicle parameters must be positive".into()));
        }
        Ok(())
    }
}

fn default_c_d() -> f64 {
    0.65
}
fn default_rho_air() -> f64 {
    1.225
}
fn default_frontal_area() -> f64 {
    0.1
}

/// Full-model parameters: planar set plus sprung mass, suspension, and
/// aerodynamic drag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullVehicleParams {
    #[serde(flatten)]
    pub base: VehicleParams,
    /// Sprung mass (kg).
    pub m_s: f64,
    /// Front tire mass, each (kg).
    pub m_tire_f: f64,
    /// Rear tire mass, each (kg).
    pub m_tire_r: f64,
    /// Suspension stiffness per front wheel (N/m).
    pub k_f: f64,
    /// Suspension stiffness per rear wheel (N/m).
    pub k_r: f64,
    /// Suspension damping per front wheel (N s/m).
    pub c_f: f64,
    /// Suspension damping per rear wheel (N s/m).
    pub c_r: f64,
    /// Sprung-mass CG height (m).
    pub h_s: f64,
    /// Roll-center height (m).
    pub h_c: f64,
    /// Roll inertia of the sprung mass (kg m^2).
    pub i_x_roll: f64,
    /// Pitch inertia of the sprung mass (kg m^2).
    pub i_y_pitch: f64,
    /// Air drag coefficient.
    #[serde(default = "default_c_d")]
    pub c_d: f64,
    /// Air density (kg/m^3).
    #[serde(default = "default_rho_air")]
    pub rho_air: f64,
    /// Frontal area (m^2).
    #[serde(default = "default_frontal_area")]
    pub frontal_area: f64,
}

impl FullVehicleParams {
    pub fn autorally() -> Self {
        let base = VehicleParams::autorally();
        Self {
            base,
            m_s: base.m - 2.0 * 0.82 - 2.0 * 0.89,
            m_tire_f: 0.82,
            m_tire_r: 0.89,
            // Spring rate chosen from the 1-2 cm static deflection of the
            // sprung mass; damping sized below per-corner critical.
            k_f: 2000.0,
            k_r: 2000.0,
            c_f: 120.0,
            c_r: 120.0,
            h_s: 0.15,
            h_c: 0.05,
            i_x_roll: 0.347,
            i_y_pitch: 1.131,
            c_d: default_c_d(),
            rho_air: default_rho_air(),
            frontal_area: default_frontal_area(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.m_s + 2.0 * self.m_tire_f + 2.0 * self.m_tire_r > self.base.m + 1e-9 {
            return Err(RallyError::Config(
                "sprung plus tire masses exceed total mass".into(),
            ));
        }
        if self.k_f < 0.0 || self.k_r < 0.0 || self.c_f < 0.0 || self.c_r < 0.0 {
            return Err(RallyError::Config("suspension constants must be nonnegative".into()));
        }
        if !(self.h_s > self.h_c && self.h_c >= 0.0) {
            return Err(RallyError::Config("require h_s > h_c >= 0".into()));
        }
        Ok(())
    }
}

/// Planar state shared by the single- and double-track models.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState3 {
    /// Body-frame longitudinal velocity (m/s).
    pub v_x: f64,
    /// Body-frame lateral velocity (m/s).
    pub v_y: f64,
    /// Yaw rate (rad/s).
    pub r: f64,
    /// Yaw angle (rad).
    pub psi: f64,
    /// World position (m).
    pub p_x: f64,
    pub p_y: f64,
    /// Front axle wheel speed (rad/s).
    pub omega_f: f64,
    /// Rear axle wheel speed (rad/s).
    pub omega_r: f64,
}

pub const STATE3_DIM: usize = 8;
pub const STATE11_DIM: usize = 14;

impl VehicleState3 {
    /// State rolling straight at `v` with matched wheel speeds.
    pub fn rolling(v: f64, wheel_radius: f64) -> Self {
        Self {
            v_x: v,
            omega_f: v / wheel_radius,
            omega_r: v / wheel_radius,
            ..Self::default()
        }
    }

    pub fn to_vector(&self) -> SVector<f64, STATE3_DIM> {
        SVector::from([
            self.v_x,
            self.v_y,
            self.r,
            self.psi,
            self.p_x,
            self.p_y,
            self.omega_f,
            self.omega_r,
        ])
    }

    pub fn from_vector(v: &SVector<f64, STATE3_DIM>) -> Self {
        Self {
            v_x: v[0],
            v_y: v[1],
            r: v[2],
            psi: v[3],
            p_x: v[4],
            p_y: v[5],
            omega_f: v[6],
            omega_r: v[7],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Full-model state: planar state plus sprung-mass vertical, pitch, and
/// roll degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState11 {
    #[serde(flatten)]
    pub planar: VehicleState3,
    /// Sprung-mass vertical displacement (m).
    pub z_s: f64,
    /// Sprung-mass vertical velocity (m/s).
    pub v_z_s: f64,
    /// Pitch (rad).
    pub theta: f64,
    pub theta_dot: f64,
    /// Roll (rad).
    pub phi: f64,
    pub phi_dot: f64,
}

impl VehicleState11 {
    pub fn to_vector(&self) -> SVector<f64, STATE11_DIM> {
        let p = self.planar.to_vector();
        let mut out = SVector::zeros();
        for i in 0..STATE3_DIM {
            out[i] = p[i];
        }
        out[8] = self.z_s;
        out[9] = self.v_z_s;
        out[10] = self.theta;
        out[11] = self.theta_dot;
        out[12] = self.phi;
        out[13] = self.phi_dot;
        out
    }

    pub fn from_vector(v: &SVector<f64, STATE11_DIM>) -> Self {
        Self {
            planar: VehicleState3::from_vector(&SVector::from_fn(|i, _| v[i])),
            z_s: v[8],
            v_z_s: v[9],
            theta: v[10],
            theta_dot: v[11],
            phi: v[12],
            phi_dot: v[13],
        }
    }
}

/// Actuation: front steering angle, rear-axle drive torque, and
/// normalized front brake.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Front steering angle (rad).
    pub delta: f64,
    /// Rear axle drive torque (N m); negative values brake through the
    /// powertrain.
    pub drive_torque: f64,
    /// Normalized front brake in [0, 1].
    pub brake_front: f64,
}

/// Per-wheel normal loads `[LF, RF, LR, RR]` from the static split plus
/// quasi-static longitudinal and lateral transfer. Loads are floored at
/// zero; the total equals `m g` whenever nothing saturates.
pub fn normal_loads(p: &VehicleParams, a_x: f64, a_y: f64) -> [f64; 4] {
    let wb = p.wheelbase();
    let weight = p.m * GRAVITY;
    let long_transfer = p.m * a_x * p.h_cg / wb;
    let front = weight * p.l_r / wb - long_transfer;
    let rear = weight * p.l_f / wb + long_transfer;

    let split = |axle: f64, share: f64, w: f64| -> (f64, f64) {
        let lat = if w > 1e-9 {
            share * p.m * a_y * p.h_cg / w
        } else {
            0.0
        };
        ((axle / 2.0 - lat).max(0.0), (axle / 2.0 + lat).max(0.0))
    };
    let (lf, rf) = split(front, p.l_r / wb, p.w_f);
    let (lr, rr) = split(rear, p.l_f / wb, p.w_r);
    [lf, rf, lr, rr]
}

fn check_finite3(s: &VehicleState3) -> Result<()> {
    if !s.is_finite() {
        return Err(RallyError::Domain("non-finite vehicle state".into()));
    }
    Ok(())
}

/// Tire-frame velocity of a wheel at body position (x, y), with the front
/// wheels rotated by the steering angle.
fn tire_velocity(s: &VehicleState3, x: f64, y: f64, delta: f64) -> (f64, f64) {
    let vx = s.v_x - s.r * y;
    let vy = s.v_y + s.r * x;
    let (sin_d, cos_d) = delta.sin_cos();
    (vx * cos_d + vy * sin_d, -vx * sin_d + vy * cos_d)
}

fn axle_force(
    s: &VehicleState3,
    x: f64,
    y: f64,
    delta: f64,
    omega: f64,
    f_z: f64,
    p: &VehicleParams,
    mf: &MagicFormulaParams,
) -> Result<TireForce> {
    let (vt_x, vt_y) = tire_velocity(s, x, y, delta);
    let slip = wheel_slip(vt_x, vt_y, omega, p.wheel_radius);
    let mu = magic_formula_mu(slip.s_total, mf);
    tire_forces(&slip, mu, f_z)
}

struct PlanarForces {
    /// Front axle force in the tire frame (sum over wheels).
    front: TireForce,
    /// Rear axle force in the tire frame.
    rear: TireForce,
}

impl PlanarForces {
    fn accelerations(&self, delta: f64, m: f64) -> (f64, f64) {
        let (sin_d, cos_d) = delta.sin_cos();
        let fx = self.front.f_x * cos_d - self.front.f_y * sin_d + self.rear.f_x;
        let fy = self.front.f_x * sin_d + self.front.f_y * cos_d + self.rear.f_y;
        (fx / m, fy / m)
    }
}

fn single_track_forces(
    s: &VehicleState3,
    u: &ControlInput,
    p: &VehicleParams,
    mf: &MagicFormulaParams,
    a_x: f64,
    a_y: f64,
) -> Result<PlanarForces> {
    let loads = normal_loads(p, a_x, a_y);
    let front = axle_force(s, p.l_f, 0.0, u.delta, s.omega_f, loads[0] + loads[1], p, mf)?;
    let rear = axle_force(s, -p.l_r, 0.0, 0.0, s.omega_r, loads[2] + loads[3], p, mf)?;
    Ok(PlanarForces { front, rear })
}

fn double_track_forces(
    s: &VehicleState3,
    u: &ControlInput,
    p: &VehicleParams,
    mf: &MagicFormulaParams,
    a_x: f64,
    a_y: f64,
) -> Result<PlanarForces> {
    let loads = normal_loads(p, a_x, a_y);
    let lf = axle_force(s, p.l_f, p.w_f / 2.0, u.delta, s.omega_f, loads[0], p, mf)?;
    let rf = axle_force(s, p.l_f, -p.w_f / 2.0, u.delta, s.omega_f, loads[1], p, mf)?;
    let lr = axle_force(s, -p.l_r, p.w_r / 2.0, 0.0, s.omega_r, loads[2], p, mf)?;
    let rr = axle_force(s, -p.l_r, -p.w_r / 2.0, 0.0, s.omega_r, loads[3], p, mf)?;
    Ok(PlanarForces {
        front: TireForce {
            f_x: lf.f_x + rf.f_x,
            f_y: lf.f_y + rf.f_y,
        },
        rear: TireForce {
            f_x: lr.f_x + rr.f_x,
            f_y: lr.f_y + rr.f_y,
        },
    })
}

fn planar_derivatives(
    s: &VehicleState3,
    u: &ControlInput,
    p: &VehicleParams,
    forces: &PlanarForces,
    drag_accel: f64,
) -> VehicleState3 {
    let (sin_d, cos_d) = u.delta.sin_cos();
    let f = &forces.front;
    let r = &forces.rear;
    let v_x_dot = (f.f_x * cos_d - f.f_y * sin_d + r.f_x) / p.m + s.v_y * s.r - drag_accel;
    let v_y_dot = (f.f_x * sin_d + f.f_y * cos_d + r.f_y) / p.m - s.v_x * s.r;
    let r_dot = ((f.f_y * cos_d + f.f_x * sin_d) * p.l_f - r.f_y * p.l_r) / p.i_z;
    let (sin_psi, cos_psi) = s.psi.sin_cos();
    let brake = u.brake_front.clamp(0.0, 1.0) * p.brake_torque_max;
    VehicleState3 {
        v_x: v_x_dot,
        v_y: v_y_dot,
        r: r_dot,
        psi: s.r,
        p_x: s.v_x * cos_psi - s.v_y * sin_psi,
        p_y: s.v_x * sin_psi + s.v_y * cos_psi,
        omega_f: (-p.wheel_radius * f.f_x - brake * s.omega_f.signum()) / p.i_f,
        omega_r: (u.drive_torque - p.wheel_radius * r.f_x) / p.i_r,
    }
}

/// Single-track (bicycle) model derivative. Normal loads use one
/// quasi-static refinement pass: forces are evaluated at the static load
/// split, the resulting accelerations feed the load transfer, and forces
/// are evaluated once more.
pub fn single_track_derivatives(
    s: &VehicleState3,
    u: &ControlInput,
    p: &VehicleParams,
    mf: &MagicFormulaParams,
) -> Result<VehicleState3> {
    check_finite3(s)?;
    let f0 = single_track_forces(s, u, p, mf, 0.0, 0.0)?;
    let (a_x, a_y) = f0.accelerations(u.delta, p.m);
    let f1 = single_track_forces(s, u, p, mf, a_x, a_y)?;
    Ok(planar_derivatives(s, u, p, &f1, 0.0))
}

/// Double-track model derivative with per-wheel normal loads and lateral
/// load transfer.
pub fn double_track_derivatives(
    s: &VehicleState3,
    u: &ControlInput,
    p: &VehicleParams,
    mf: &MagicFormulaParams,
) -> Result<VehicleState3> {
    check_finite3(s)?;
    let f0 = double_track_forces(s, u, p, mf, 0.0, 0.0)?;
    let (a_x, a_y) = f0.accelerations(u.delta, p.m);
    let f1 = double_track_forces(s, u, p, mf, a_x, a_y)?;
    Ok(planar_derivatives(s, u, p, &f1, 0.0))
}

/// Full-model derivative: double-track planar dynamics with air drag plus
/// sprung-mass vertical, pitch, and roll dynamics. Sprung-mass
/// accelerations are taken equal to the total-mass body-frame
/// accelerations.
pub fn full_vehicle_derivatives(
    s: &VehicleState11,
    u: &ControlInput,
    p: &FullVehicleParams,
    mf: &MagicFormulaParams,
) -> Result<VehicleState11> {
    check_finite3(&s.planar)?;
    if s.theta.abs() >= MAX_SUSPENSION_ANGLE || s.phi.abs() >= MAX_SUSPENSION_ANGLE {
        return Err(RallyError::Divergence(format!(
            "suspension angle out of the small-angle regime: theta={:.3} phi={:.3}",
            s.theta, s.phi
        )));
    }
    let b = &p.base;
    let drag =
        p.c_d * p.rho_air * p.frontal_area * s.planar.v_x * s.planar.v_x.abs() / (2.0 * b.m);
    let f0 = double_track_forces(&s.planar, u, b, mf, 0.0, 0.0)?;
    let (a_x0, a_y0) = f0.accelerations(u.delta, b.m);
    let f1 = double_track_forces(&s.planar, u, b, mf, a_x0 - drag, a_y0)?;
    let planar = planar_derivatives(&s.planar, u, b, &f1, drag);

    // Body-frame accelerations of the total-mass solution drive the
    // sprung-mass equations.
    let a_x = planar.v_x - s.planar.v_y * s.planar.r;
    let a_y = planar.v_y + s.planar.v_x * s.planar.r;

    let kf = p.k_f;
    let kr = p.k_r;
    let cf = p.c_f;
    let cr = p.c_r;
    let lf = b.l_f;
    let lr = b.l_r;

    let v_z_dot = (-2.0 * (kf + kr) * s.theta - 2.0 * (cf + cr) * s.v_z_s
        + 2.0 * (lf * kf - lr * kr) * s.phi
        + 2.0 * (lf * cf - lr * cr) * s.theta_dot)
        / p.m_s;

    let theta_ddot = (2.0 * (lf * kf - lr * kr) * s.z_s + 2.0 * (lf * cf - lr * cr) * s.v_z_s
        - 2.0 * (lf * lf * kf + lr * lr * kr) * s.theta
        - 2.0 * (lf * lf * cf + lr * lr * cr) * s.theta_dot
        + p.m_s * GRAVITY * p.h_s * s.theta.sin()
        + p.m_s * a_x * p.h_s * s.theta.cos())
        / p.i_y_pitch;

    let lever = p.h_s - p.h_c;
    let phi_ddot = (-b.w_f * b.w_f * kf * s.phi / 2.0
        - b.w_f * b.w_f * cf * s.phi_dot / 2.0
        - b.w_r * b.w_r * kr * s.phi / 2.0
        - b.w_r * b.w_r * cr * s.phi_dot / 2.0
        + p.m_s * GRAVITY * lever * s.phi.sin()
        + p.m_s * a_y * lever * s.phi.cos())
        / p.i_x_roll;

    Ok(VehicleState11 {
        planar,
        z_s: s.v_z_s,
        v_z_s: v_z_dot,
        theta: s.theta_dot,
        theta_dot: theta_ddot,
        phi: s.phi_dot,
        phi_dot: phi_ddot,
    })
}

/// Classical fixed-step 4th-order Runge-Kutta step.
pub fn integrate_rk4<const N: usize, F>(
    f: F,
    x: &SVector<f64, N>,
    dt: f64,
) -> Result<SVector<f64, N>>
where
    F: Fn(&SVector<f64, N>) -> Result<SVector<f64, N>>,
{
    if !(dt > 0.0 && dt <= 0.05) {
        return Err(RallyError::Domain(format!("dt {dt} outside (0, 0.05]")));
    }
    let k1 = f(x)?;
    let k2 = f(&(x + k1 * (dt / 2.0)))?;
    let k3 = f(&(x + k2 * (dt / 2.0)))?;
    let k4 = f(&(x + k3 * dt))?;
    let out = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    for (i, v) in out.iter().enumerate() {
        if !v.is_finite() {
            return Err(RallyError::Divergence(format!(
                "non-finite state component {i} after RK4 step"
            )));
        }
    }
    Ok(out)
}

/// One RK4 step of the single-track model.
pub fn step_single_track(
    s: &VehicleState3,
    u: &ControlInput,
    p: &VehicleParams,
    mf: &MagicFormulaParams,
    dt: f64,
) -> Result<VehicleState3> {
    let next = integrate_rk4(
        |x| {
            single_track_derivatives(&VehicleState3::from_vector(x), u, p, mf)
                .map(|d| d.to_vector())
        },
        &s.to_vector(),
        dt,
    )?;
    Ok(VehicleState3::from_vector(&next))
}

/// One RK4 step of the double-track model.
pub fn step_double_track(
    s: &VehicleState3,
    u: &ControlInput,
    p: &VehicleParams,
    mf: &MagicFormulaParams,
    dt: f64,
) -> Result<VehicleState3> {
    let next = integrate_rk4(
        |x| {
            double_track_derivatives(&VehicleState3::from_vector(x), u, p, mf)
                .map(|d| d.to_vector())
        },
        &s.to_vector(),
        dt,
    )?;
    Ok(VehicleState3::from_vector(&next))
}

/// One RK4 step of the full model.
pub fn step_full_vehicle(
    s: &VehicleState11,
    u: &ControlInput,
    p: &FullVehicleParams,
    mf: &MagicFormulaParams,
    dt: f64,
) -> Result<VehicleState11> {
    let next = integrate_rk4(
        |x| {
            full_vehicle_derivatives(&VehicleState11::from_vector(x), u, p, mf)
                .map(|d| d.to_vector())
        },
        &s.to_vector(),
        dt,
    )?;
    Ok(VehicleState11::from_vector(&next))
}
