//! Tire slip, Magic Formula friction, and per-tire force components.

use serde::{Deserialize, Serialize};

use crate::error::{RallyError, Result};

/// Denominator floor for the slip computation, in m/s of wheel surface
/// speed. Keeps slip (and its derivatives) finite for a locked or
/// stationary wheel.
pub const SLIP_EPS: f64 = 1e-3;

/// Combined slip below this is treated as pure rolling and produces zero
/// force.
pub const ZERO_SLIP_EPS: f64 = 1e-9;

/// Magic Formula coefficients: stiffness, shape, peak, curvature, plus
/// horizontal and vertical shifts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagicFormulaParams {
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub s_h: f64,
    pub s_v: f64,
}

impl Default for MagicFormulaParams {
    /// Coefficients identified from human driving data on dirt.
    fn default() -> Self {
        Self {
            b: 1.1559,
            c: 1.1924,
            d: 0.9956,
            e: -0.8505,
            s_h: -0.0540,
            s_v: 0.1444,
        }
    }
}

/// Nondimensional relative velocity between the contact patch and the road.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WheelSlip {
    pub s_x: f64,
    pub s_y: f64,
    pub s_total: f64,
}

impl WheelSlip {
    pub fn new(s_x: f64, s_y: f64) -> Self {
        Self {
            s_x,
            s_y,
            s_total: s_x.hypot(s_y),
        }
    }
}

/// Friction force components acting on the vehicle at one tire, in the
/// tire frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TireForce {
    pub f_x: f64,
    pub f_y: f64,
}

/// Longitudinal and lateral slip from tire-frame velocities and the wheel
/// spin rate.
///
/// The denominator is `omega * radius` with a sign-preserving floor at
/// [`SLIP_EPS`], so a locked wheel returns saturated slip instead of a
/// division by zero.
pub fn wheel_slip(v_tire_x: f64, v_tire_y: f64, wheel_omega: f64, wheel_radius: f64) -> WheelSlip {
    debug_assert!(wheel_radius > 0.0);
    let surface = wheel_omega * wheel_radius;
    let denom = if surface.abs() < SLIP_EPS {
        SLIP_EPS.copysign(if surface == 0.0 { 1.0 } else { surface })
    } else {
        surface
    };
    WheelSlip::new((v_tire_x - surface) / denom, v_tire_y / denom)
}

/// Total friction coefficient for a combined slip magnitude.
pub fn magic_formula_mu(s_total: f64, p: &MagicFormulaParams) -> f64 {
    let s_e = s_total - p.s_h;
    p.d * (p.c * (p.b * s_e - p.e * (p.b * s_e - s_e.atan())).atan()).sin() + p.s_v
}

/// Force components from the friction-circle split of `mu * f_z` along the
/// slip direction, opposing the slip.
pub fn tire_forces(slip: &WheelSlip, mu: f64, f_z: f64) -> Result<TireForce> {
    if f_z < 0.0 {
        return Err(RallyError::Domain(format!(
            "negative normal load {f_z} N"
        )));
    }
    if slip.s_total < ZERO_SLIP_EPS {
        return Ok(TireForce::default());
    }
    let scale = -mu * f_z / slip.s_total;
    Ok(TireForce {
        f_x: scale * slip.s_x,
        f_y: scale * slip.s_y,
    })
}
