//! κ-trigonometry: circular functions for positive curvature, hyperbolic
//! functions for negative curvature. The flat case has no trigonometric
//! branch; callers use the analytic limits in [`super::ops`] instead.

use super::{Curvature, GeometryError, Regime};

/// Arguments this close outside a closed domain are clamped onto it.
pub const DOMAIN_SLACK: f64 = 1e-12;

fn curved(k: Curvature, branch: &'static str) -> Result<Regime, GeometryError> {
    match k.regime() {
        Regime::Flat => Err(GeometryError::Regime(branch)),
        r => Ok(r),
    }
}

fn finite(branch: &'static str, u: f64) -> Result<f64, GeometryError> {
    if u.is_finite() {
        Ok(u)
    } else {
        Err(GeometryError::Domain { branch, arg: u })
    }
}

fn clamp_unit(branch: &'static str, u: f64) -> Result<f64, GeometryError> {
    if u.abs() <= 1.0 {
        Ok(u)
    } else if u.abs() <= 1.0 + DOMAIN_SLACK {
        Ok(u.signum())
    } else {
        Err(GeometryError::Domain { branch, arg: u })
    }
}

pub fn sin_k(k: Curvature, u: f64) -> Result<f64, GeometryError> {
    let u = finite("sin_k", u)?;
    Ok(match curved(k, "sin_k")? {
        Regime::Spherical => u.sin(),
        _ => u.sinh(),
    })
}

pub fn cos_k(k: Curvature, u: f64) -> Result<f64, GeometryError> {
    let u = finite("cos_k", u)?;
    Ok(match curved(k, "cos_k")? {
        Regime::Spherical => u.cos(),
        _ => u.cosh(),
    })
}

pub fn tan_k(k: Curvature, u: f64) -> Result<f64, GeometryError> {
    let u = finite("tan_k", u)?;
    Ok(match curved(k, "tan_k")? {
        Regime::Spherical => u.tan(),
        _ => u.tanh(),
    })
}

pub fn asin_k(k: Curvature, u: f64) -> Result<f64, GeometryError> {
    let u = finite("asin_k", u)?;
    Ok(match curved(k, "asin_k")? {
        Regime::Spherical => clamp_unit("asin_k", u)?.asin(),
        _ => u.asinh(),
    })
}

pub fn acos_k(k: Curvature, u: f64) -> Result<f64, GeometryError> {
    let u = finite("acos_k", u)?;
    Ok(match curved(k, "acos_k")? {
        Regime::Spherical => clamp_unit("acos_k", u)?.acos(),
        _ => {
            if u >= 1.0 {
                u.acosh()
            } else if u >= 1.0 - DOMAIN_SLACK {
                0.0
            } else {
                return Err(GeometryError::Domain {
                    branch: "acos_k",
                    arg: u,
                });
            }
        }
    })
}

/// Inverse tangent; artanh for `k < 0`, defined on the open interval
/// `(-1, 1)`. Arguments on the boundary (within the slack) map to the
/// largest finite value.
pub fn atan_k(k: Curvature, u: f64) -> Result<f64, GeometryError> {
    let u = finite("atan_k", u)?;
    Ok(match curved(k, "atan_k")? {
        Regime::Spherical => u.atan(),
        _ => {
            if u.abs() < 1.0 {
                u.atanh()
            } else if u.abs() <= 1.0 + DOMAIN_SLACK {
                (u.signum() * (1.0 - f64::EPSILON)).atanh()
            } else {
                return Err(GeometryError::Domain {
                    branch: "atan_k",
                    arg: u,
                });
            }
        }
    })
}
