//! Curvature-parameterized gyrovector formulas on raw coordinate slices.
//!
//! Everything here is generic over [`Real`] so the same code serves the
//! checked public API (on `f64`) and the differentiable latent paths (on
//! [`crate::autodiff::Var`]). No validation happens at this level: callers
//! guarantee shapes and chart membership.
//!
//! The "scaled" κ-trigonometric helpers (`tan_s`, `atan_s`, ...) evaluate
//! `f_k(√|k| r) / √|k|` and its inverses; all of them reduce to the identity
//! at `k = 0`, which gives every formula its exact flat limit.

use crate::autodiff::Real;

/// Norms below this are treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-15;

/// Relative margin kept from the boundary when a Poincaré-ball point has to
/// be pulled back inside after rounding.
pub const BALL_MARGIN: f64 = 1e-12;

pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = x[0] * y[0];
    for i in 1..x.len() {
        acc = acc + x[i] * y[i];
    }
    acc
}

pub fn norm_sq<T: Real>(x: &[T]) -> T {
    dot(x, x)
}

pub fn norm<T: Real>(x: &[T]) -> T {
    norm_sq(x).sqrt()
}

pub fn scale<T: Real>(x: &[T], s: T) -> Vec<T> {
    x.iter().map(|&v| v * s).collect()
}

pub fn neg<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| -v).collect()
}

/// `tan_k(√|k| r) / √|k|`.
pub fn tan_s<T: Real>(k: f64, r: T) -> T {
    if k > 0.0 {
        let s = k.sqrt();
        (r * s).tan() / s
    } else if k < 0.0 {
        let s = (-k).sqrt();
        (r * s).tanh() / s
    } else {
        r
    }
}

/// Inverse of [`tan_s`]. For `k < 0` the artanh argument is clamped just
/// below one.
pub fn atan_s<T: Real>(k: f64, y: T) -> T {
    if k > 0.0 {
        let s = k.sqrt();
        (y * s).atan() / s
    } else if k < 0.0 {
        let s = (-k).sqrt();
        let u = y * s;
        let lim = 1.0 - f64::EPSILON;
        let u = if u.value() > lim {
            u.lift(lim)
        } else if u.value() < -lim {
            u.lift(-lim)
        } else {
            u
        };
        u.atanh() / s
    } else {
        y
    }
}

/// `sin_k(√|k| r) / √|k|`.
pub fn sin_s<T: Real>(k: f64, r: T) -> T {
    if k > 0.0 {
        let s = k.sqrt();
        (r * s).sin() / s
    } else if k < 0.0 {
        let s = (-k).sqrt();
        (r * s).sinh() / s
    } else {
        r
    }
}

/// Inverse of [`sin_s`]; for `k > 0` the arcsin argument is clamped to
/// `[-1, 1]`.
pub fn asin_s<T: Real>(k: f64, y: T) -> T {
    if k > 0.0 {
        let s = k.sqrt();
        let u = y * s;
        let u = if u.value() > 1.0 {
            u.lift(1.0)
        } else if u.value() < -1.0 {
            u.lift(-1.0)
        } else {
            u
        };
        u.asin() / s
    } else if k < 0.0 {
        let s = (-k).sqrt();
        (y * s).asinh() / s
    } else {
        y
    }
}

/// `sin_k(√|k| r) / (√|k| r)`, the radial volume distortion of the exponential
/// map; equals one at `r = 0` and for `k = 0`.
pub fn sinc_s<T: Real>(k: f64, r: T) -> T {
    if k == 0.0 || r.value().abs() < 1e-8 {
        // Second-order expansion: 1 - k r² / 6.
        r.lift(1.0) - r * r * (k / 6.0)
    } else {
        sin_s(k, r) / r
    }
}

/// Conformal factor `2 / (1 + k‖x‖²)`.
pub fn lambda<T: Real>(k: f64, x: &[T]) -> T {
    let n2 = norm_sq(x);
    n2.lift(2.0) / (n2 * k + 1.0)
}

/// Möbius addition `x ⊕_k y`.
pub fn mobius_add<T: Real>(k: f64, x: &[T], y: &[T]) -> Vec<T> {
    let xy = dot(x, y);
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let a = -(xy * (2.0 * k)) - y2 * k + 1.0;
    let b = x2 * k + 1.0;
    let den = -(xy * (2.0 * k)) + x2 * y2 * (k * k) + 1.0;
    x.iter()
        .zip(y.iter())
        .map(|(&xi, &yi)| (a * xi + b * yi) / den)
        .collect()
}

/// Denominator of Möbius addition; vanishes only for antipodal pairs when
/// `k > 0`.
pub fn mobius_denominator(k: f64, x: &[f64], y: &[f64]) -> f64 {
    let xy = dot(x, y);
    1.0 - 2.0 * k * xy + k * k * norm_sq(x) * norm_sq(y)
}

/// Möbius scalar multiplication `t ⊗_k v`.
pub fn mobius_scalar<T: Real>(k: f64, t: f64, v: &[T]) -> Vec<T> {
    let n = norm(v);
    if n.value() < ZERO_NORM {
        return scale(v, n.lift(t));
    }
    let r = tan_s(k, atan_s(k, n) * t);
    scale(v, r / n)
}

/// Exponential map at `x`.
pub fn exp_map<T: Real>(k: f64, x: &[T], v: &[T]) -> Vec<T> {
    let n = norm(v);
    if n.value() < ZERO_NORM {
        return x.iter().zip(v).map(|(&a, &b)| a + b).collect();
    }
    let lam = lambda(k, x);
    let step = scale(v, tan_s(k, lam * n / 2.0) / n);
    mobius_add(k, x, &step)
}

/// Exponential map at the origin (`λ_0 = 2`).
pub fn exp0<T: Real>(k: f64, v: &[T]) -> Vec<T> {
    let n = norm(v);
    if n.value() < ZERO_NORM {
        return v.to_vec();
    }
    scale(v, tan_s(k, n) / n)
}

/// Logarithmic map at `x`.
pub fn log_map<T: Real>(k: f64, x: &[T], y: &[T]) -> Vec<T> {
    let w = mobius_add(k, &neg(x), y);
    let n = norm(&w);
    let lam = lambda(k, x);
    if n.value() < ZERO_NORM {
        return scale(&w, lam.lift(2.0) / lam);
    }
    scale(&w, atan_s(k, n) * 2.0 / (lam * n))
}

/// Logarithmic map at the origin.
pub fn log0<T: Real>(k: f64, y: &[T]) -> Vec<T> {
    let n = norm(y);
    if n.value() < ZERO_NORM {
        return y.to_vec();
    }
    scale(y, atan_s(k, n) / n)
}

/// Gyro-distance `2/√|k| · atan_k(√|k| ‖-x ⊕ y‖)`; `2‖y - x‖` when flat.
pub fn distance<T: Real>(k: f64, x: &[T], y: &[T]) -> T {
    let w = mobius_add(k, &neg(x), y);
    let n2 = norm_sq(&w);
    if n2.value() < ZERO_NORM * ZERO_NORM {
        return n2.lift(0.0);
    }
    atan_s(k, n2.sqrt()) * 2.0
}

/// Gyroline through `x` (t = 0) and `y` (t = 1).
pub fn geodesic<T: Real>(k: f64, x: &[T], y: &[T], t: f64) -> Vec<T> {
    let w = mobius_add(k, &neg(x), y);
    let wt = mobius_scalar(k, t, &w);
    mobius_add(k, x, &wt)
}

/// Radius of the Poincaré ball `1/√|k|`, infinite otherwise.
pub fn ball_radius(k: f64) -> f64 {
    if k < 0.0 {
        1.0 / (-k).sqrt()
    } else {
        f64::INFINITY
    }
}

/// Pulls a point that rounding pushed onto or past the ball boundary back
/// inside. Identity for interior points and for `k >= 0`.
pub fn project<T: Real>(k: f64, x: &[T]) -> Vec<T> {
    if k >= 0.0 {
        return x.to_vec();
    }
    let r = ball_radius(k);
    let n = norm(x);
    if n.value() < r * (1.0 - BALL_MARGIN) {
        return x.to_vec();
    }
    scale(x, n.lift(r * (1.0 - BALL_MARGIN)) / n)
}
