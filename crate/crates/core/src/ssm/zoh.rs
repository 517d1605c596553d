//! Zero-order-hold discretization of a diagonal continuous-time system.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this `|delta * a|` the exact input matrix falls back to its limit
/// `delta * b`.
pub const SMALL_ARG: f64 = 1e-8;

/// How the discrete input coefficient is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZohMode {
    /// `b_bar = (delta a)^-1 (exp(delta a) - 1) delta b`.
    #[default]
    Exact,
    /// `b_bar = delta b`.
    Simplified,
}

/// `(exp(z) - 1) / z`, with value 1 near the origin.
pub fn phi(z: f64) -> f64 {
    phi_from(z, z.exp_m1())
}

/// [`phi`] given `em1 = exp(z) - 1`.
#[inline]
pub fn phi_from(z: f64, em1: f64) -> f64 {
    if z.abs() < SMALL_ARG {
        1.0
    } else {
        em1 / z
    }
}

/// Derivative of `(exp(z) - 1) / z`.
pub fn phi_deriv(z: f64) -> f64 {
    phi_deriv_from(z, z.exp(), phi(z))
}

/// [`phi_deriv`] given `exp(z)` and `phi(z)`.
#[inline]
pub fn phi_deriv_from(z: f64, exp_z: f64, phi_z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z / 144.0)))
    } else {
        (exp_z - phi_z) / z
    }
}

impl ZohMode {
    /// Discrete input coefficient for one (channel, state) pair.
    #[inline]
    pub fn b_bar(self, z: f64, delta: f64, b: f64) -> f64 {
        match self {
            ZohMode::Exact => delta * phi(z) * b,
            ZohMode::Simplified => delta * b,
        }
    }
}

/// Discretizes one diagonal entry `a` with input coefficient `b` over step
/// `delta`, returning `(a_bar, b_bar)`.
pub fn discretize(a: f64, b: f64, delta: f64, mode: ZohMode) -> Result<(f64, f64)> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::invalid(
            "discretize",
            format!("step size must be positive, got {delta}"),
        ));
    }
    let z = delta * a;
    Ok((z.exp(), mode.b_bar(z, delta, b)))
}
