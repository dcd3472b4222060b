//! Gyrovector geometry of stereographically projected constant-curvature
//! spaces: the Poincaré ball (`k < 0`), Euclidean space (`k = 0`) and the
//! projected sphere (`k > 0`).
//!
//! The checked API in this module validates shapes, curvatures and chart
//! membership and delegates the arithmetic to [`ops`].

pub mod ops;
pub mod trig;

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

pub use trig::{acos_k, asin_k, atan_k, cos_k, sin_k, tan_k};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("{branch}: argument {arg} outside the domain")]
    Domain { branch: &'static str, arg: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("singular configuration: {0}")]
    Singularity(String),
    #[error("{0} is undefined for flat curvature")]
    Regime(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty input")]
    EmptyInput,
    #[error("no convergence after {iterations} iterations")]
    Convergence {
        iterations: usize,
        last: Box<ManifoldPoint>,
    },
    #[error("invalid point: {0}")]
    InvalidPoint(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Hyperbolic,
    Flat,
    Spherical,
}

/// Signed sectional curvature.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(k: f64) -> Result<Self> {
        if k.is_finite() {
            Ok(Self(k))
        } else {
            Err(GeometryError::InvalidPoint(format!(
                "curvature {k} is not finite"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn regime(self) -> Regime {
        if self.0 < 0.0 {
            Regime::Hyperbolic
        } else if self.0 > 0.0 {
            Regime::Spherical
        } else {
            Regime::Flat
        }
    }

    /// `√|k|`.
    pub fn sqrt_abs(self) -> f64 {
        self.0.abs().sqrt()
    }
}

impl TryFrom<f64> for Curvature {
    type Error = GeometryError;
    fn try_from(k: f64) -> Result<Self> {
        Self::new(k)
    }
}

impl From<Curvature> for f64 {
    fn from(k: Curvature) -> f64 {
        k.0
    }
}

/// Coordinates in a projected space of curvature `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPoint {
    k: Curvature,
    coords: Vec<f64>,
}

/// Checks the chart constraint for coordinates under curvature `k`.
pub fn check_coords(k: f64, coords: &[f64]) -> Result<()> {
    if coords.is_empty() {
        return Err(GeometryError::InvalidPoint(
            "dimension must be at least 1".into(),
        ));
    }
    if let Some(v) = coords.iter().find(|v| !v.is_finite()) {
        return Err(GeometryError::InvalidPoint(format!(
            "non-finite coordinate {v}"
        )));
    }
    if k < 0.0 {
        let n2 = ops::norm_sq(coords);
        if n2 >= -1.0 / k {
            return Err(GeometryError::InvalidPoint(format!(
                "squared norm {n2} outside the ball of radius {}",
                ops::ball_radius(k)
            )));
        }
    }
    Ok(())
}

impl ManifoldPoint {
    pub fn new(k: Curvature, coords: Vec<f64>) -> Result<Self> {
        check_coords(k.value(), &coords)?;
        Ok(Self { k, coords })
    }

    /// Wraps the output of an internal computation: rounding onto the ball
    /// boundary is projected back, anything else invalid is an error.
    pub(crate) fn from_computed(k: Curvature, coords: Vec<f64>) -> Result<Self> {
        let coords = ops::project(k.value(), &coords);
        Self::new(k, coords)
    }

    pub fn origin(k: Curvature, dim: usize) -> Self {
        Self {
            k,
            coords: vec![0.0; dim.max(1)],
        }
    }

    pub fn curvature(&self) -> Curvature {
        self.k
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn is_origin(&self) -> bool {
        self.coords.iter().all(|&v| v == 0.0)
    }

    /// Gyro-inverse `⊖x = -x`.
    pub fn negated(&self) -> Self {
        Self {
            k: self.k,
            coords: ops::neg(&self.coords),
        }
    }
}

/// A tangent vector in projected coordinates; its length under the metric at
/// `base` is `λ_base ‖v‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: ManifoldPoint,
    v: Vec<f64>,
}

impl TangentVector {
    pub fn new(base: ManifoldPoint, v: Vec<f64>) -> Result<Self> {
        if v.len() != base.dim() {
            return Err(GeometryError::Shape(format!(
                "tangent dimension {} at a point of dimension {}",
                v.len(),
                base.dim()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::InvalidPoint(
                "non-finite tangent component".into(),
            ));
        }
        Ok(Self { base, v })
    }

    pub fn at_origin(k: Curvature, v: Vec<f64>) -> Result<Self> {
        let base = ManifoldPoint::origin(k, v.len());
        Self::new(base, v)
    }

    pub fn base(&self) -> &ManifoldPoint {
        &self.base
    }

    pub fn components(&self) -> &[f64] {
        &self.v
    }

    /// `λ_base ‖v‖`.
    pub fn metric_norm(&self) -> f64 {
        conformal_factor(&self.base) * ops::norm(&self.v)
    }
}

/// A point on the hypersphere (`k > 0`) or hyperboloid (`k < 0`) embedded in
/// `R^{d+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbientPoint {
    k: Curvature,
    xi: f64,
    x: Vec<f64>,
}

impl AmbientPoint {
    pub fn new(k: Curvature, xi: f64, x: Vec<f64>) -> Result<Self> {
        let kv = k.value();
        if kv == 0.0 {
            return Err(GeometryError::Regime("ambient point"));
        }
        if x.is_empty() || !xi.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidPoint("ambient coordinates".into()));
        }
        let n2 = ops::norm_sq(&x);
        let (constraint, scale) = if kv > 0.0 {
            (xi * xi + n2, 1.0)
        } else {
            (xi * xi - n2, xi * xi * -kv)
        };
        if (constraint - 1.0 / kv.abs()).abs() > 1e-9 * scale.max(1.0) {
            return Err(GeometryError::InvalidPoint(format!(
                "ambient constraint {constraint} != {}",
                1.0 / kv.abs()
            )));
        }
        if kv < 0.0 && xi <= 0.0 {
            return Err(GeometryError::InvalidPoint(
                "hyperboloid point on the lower sheet".into(),
            ));
        }
        Ok(Self { k, xi, x })
    }

    pub fn curvature(&self) -> Curvature {
        self.k
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Ambient bilinear form: Euclidean for the sphere, Lorentzian
    /// `ξ₁ξ₂ − ⟨x₁, x₂⟩` for the hyperboloid.
    pub fn inner(&self, other: &AmbientPoint) -> f64 {
        let xx = ops::dot(&self.x, &other.x);
        if self.k.value() > 0.0 {
            self.xi * other.xi + xx
        } else {
            self.xi * other.xi - xx
        }
    }
}

fn same_space(x: &ManifoldPoint, y: &ManifoldPoint) -> Result<()> {
    if x.k != y.k {
        return Err(GeometryError::Shape(format!(
            "curvature {} vs {}",
            x.k.value(),
            y.k.value()
        )));
    }
    if x.dim() != y.dim() {
        return Err(GeometryError::Shape(format!(
            "dimension {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Möbius addition `x ⊕_k y`.
pub fn mobius_add(x: &ManifoldPoint, y: &ManifoldPoint) -> Result<ManifoldPoint> {
    same_space(x, y)?;
    let k = x.k.value();
    let den = ops::mobius_denominator(k, &x.coords, &y.coords);
    if den.abs() < 1e-300 || !den.is_finite() {
        return Err(GeometryError::Singularity(format!(
            "Möbius denominator {den} (antipodal configuration)"
        )));
    }
    ManifoldPoint::from_computed(x.k, ops::mobius_add(k, &x.coords, &y.coords))
}

/// Möbius scalar multiplication `t ⊗_k v`.
pub fn mobius_scalar(t: f64, v: &ManifoldPoint) -> Result<ManifoldPoint> {
    let k = v.k.value();
    let n = ops::norm(&v.coords);
    if k > 0.0 && n >= ZERO {
        let angle = t * (k.sqrt() * n).atan();
        if angle.abs() >= FRAC_PI_2 {
            return Err(GeometryError::Domain {
                branch: "mobius_scalar",
                arg: angle,
            });
        }
    }
    ManifoldPoint::from_computed(v.k, ops::mobius_scalar(k, t, &v.coords))
}

const ZERO: f64 = ops::ZERO_NORM;

/// Conformal factor `λ_p = 2 / (1 + k‖p‖²)`.
pub fn conformal_factor(p: &ManifoldPoint) -> f64 {
    ops::lambda(p.k.value(), &p.coords)
}

/// Geodesic distance in its gyro form.
pub fn gyro_distance(x: &ManifoldPoint, y: &ManifoldPoint) -> Result<f64> {
    same_space(x, y)?;
    let k = x.k.value();
    if k > 0.0 {
        let den = ops::mobius_denominator(k, &ops::neg(&x.coords), &y.coords);
        if den.abs() < 1e-300 {
            // Antipodal pair: half the great circle.
            return Ok(std::f64::consts::PI / k.sqrt());
        }
    }
    Ok(ops::distance(k, &x.coords, &y.coords))
}

/// Geodesic distance through the arc-cosine of the ambient inner product:
/// `1/√|k| · acos_k(1 − 2k‖x−y‖² / ((1+k‖x‖²)(1+k‖y‖²)))`.
pub fn arc_distance(x: &ManifoldPoint, y: &ManifoldPoint) -> Result<f64> {
    same_space(x, y)?;
    let k = x.k;
    let kv = k.value();
    let diff: Vec<f64> = x.coords.iter().zip(&y.coords).map(|(a, b)| a - b).collect();
    let d2 = ops::norm_sq(&diff);
    if kv == 0.0 {
        return Ok(2.0 * d2.sqrt());
    }
    let arg = 1.0
        - 2.0 * kv * d2
            / ((1.0 + kv * ops::norm_sq(&x.coords)) * (1.0 + kv * ops::norm_sq(&y.coords)));
    Ok(acos_k(k, arg)? / k.sqrt_abs())
}

/// Stereographic projection `(ξ, x) ↦ x / (1 + √|k| ξ)`.
pub fn stereo_project(a: &AmbientPoint) -> Result<ManifoldPoint> {
    let den = 1.0 + a.k.sqrt_abs() * a.xi;
    if den.abs() < 1e-300 {
        return Err(GeometryError::Singularity("projection pole".into()));
    }
    let coords = a.x.iter().map(|v| v / den).collect();
    ManifoldPoint::from_computed(a.k, coords)
}

/// Inverse stereographic projection onto the sphere or hyperboloid.
pub fn stereo_lift(z: &ManifoldPoint) -> Result<AmbientPoint> {
    let k = z.k.value();
    if k == 0.0 {
        return Err(GeometryError::Regime("stereo_lift"));
    }
    let n2 = ops::norm_sq(&z.coords);
    let den = 1.0 + k * n2;
    let xi = (1.0 - k * n2) / (den * z.k.sqrt_abs());
    let x = z.coords.iter().map(|v| 2.0 * v / den).collect();
    Ok(AmbientPoint { k: z.k, xi, x })
}

/// Exponential map `x ⊕ tan_k(√|k| λ_x‖v‖/2) v / (√|k|‖v‖)`.
pub fn exp_map(x: &ManifoldPoint, v: &TangentVector) -> Result<ManifoldPoint> {
    if v.base.k != x.k || v.base.coords != x.coords {
        return Err(GeometryError::Shape(
            "tangent vector based at another point".into(),
        ));
    }
    let k = x.k.value();
    if k > 0.0 {
        let angle = k.sqrt() * v.metric_norm() / 2.0;
        if angle >= FRAC_PI_2 {
            return Err(GeometryError::Domain {
                branch: "exp_map",
                arg: angle,
            });
        }
    }
    ManifoldPoint::from_computed(x.k, ops::exp_map(k, &x.coords, &v.v))
}

/// Logarithmic map; the zero vector when `y = x`.
pub fn log_map(x: &ManifoldPoint, y: &ManifoldPoint) -> Result<TangentVector> {
    same_space(x, y)?;
    let k = x.k.value();
    if k > 0.0 && ops::mobius_denominator(k, &ops::neg(&x.coords), &y.coords).abs() < 1e-300 {
        return Err(GeometryError::Singularity("log_map at the antipode".into()));
    }
    Ok(TangentVector {
        base: x.clone(),
        v: ops::log_map(k, &x.coords, &y.coords),
    })
}

/// Parallel transport from the origin: `(λ_0 / λ_p) v`.
pub fn parallel_transport_from_origin(
    p: &ManifoldPoint,
    v: &TangentVector,
) -> Result<TangentVector> {
    if !v.base.is_origin() || v.base.k != p.k || v.v.len() != p.dim() {
        return Err(GeometryError::Shape(
            "tangent vector must be based at the origin".into(),
        ));
    }
    let s = 2.0 / conformal_factor(p);
    Ok(TangentVector {
        base: p.clone(),
        v: v.v.iter().map(|c| c * s).collect(),
    })
}

/// Gyroline `x ⊕ ((⊖x ⊕ y) ⊗ t)`.
pub fn geodesic(x: &ManifoldPoint, y: &ManifoldPoint, t: f64) -> Result<ManifoldPoint> {
    same_space(x, y)?;
    let w = mobius_add(&x.negated(), y)?;
    let wt = mobius_scalar(t, &w)?;
    mobius_add(x, &wt)
}

/// Angle at `x` between the geodesics towards `y` and `z`, in `[0, π]`.
pub fn gyroangle(x: &ManifoldPoint, y: &ManifoldPoint, z: &ManifoldPoint) -> Result<f64> {
    same_space(x, y)?;
    same_space(x, z)?;
    let k = x.k.value();
    let nx = ops::neg(&x.coords);
    let u = ops::mobius_add(k, &nx, &y.coords);
    let w = ops::mobius_add(k, &nx, &z.coords);
    let nu = ops::norm(&u);
    let nw = ops::norm(&w);
    if nu < ZERO || nw < ZERO {
        return Err(GeometryError::Degenerate(
            "gyroangle vertex coincides with an endpoint".into(),
        ));
    }
    let c = (ops::dot(&u, &w) / (nu * nw)).clamp(-1.0, 1.0);
    Ok(c.acos())
}

/// Iteration controls for [`karcher_mean_with`].
#[derive(Debug, Clone, Copy)]
pub struct KarcherOptions {
    pub step: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KarcherOptions {
    fn default() -> Self {
        Self {
            step: 1.0,
            max_iter: 200,
            tol: 1e-10,
        }
    }
}

/// Weighted Karcher mean (gyrobarycenter) by Riemannian gradient descent.
pub fn karcher_mean(points: &[ManifoldPoint], weights: &[f64]) -> Result<ManifoldPoint> {
    karcher_mean_with(points, weights, KarcherOptions::default())
}

pub fn karcher_mean_with(
    points: &[ManifoldPoint],
    weights: &[f64],
    opts: KarcherOptions,
) -> Result<ManifoldPoint> {
    let first = points.first().ok_or(GeometryError::EmptyInput)?;
    if weights.len() != points.len() {
        return Err(GeometryError::Shape(format!(
            "{} weights for {} points",
            weights.len(),
            points.len()
        )));
    }
    for p in points {
        same_space(first, p)?;
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(GeometryError::Degenerate(
            "weights must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(GeometryError::Degenerate("weights sum to zero".into()));
    }
    let k = first.k.value();
    let dim = first.dim();

    if k == 0.0 {
        let mut mean = vec![0.0; dim];
        for (p, w) in points.iter().zip(weights) {
            for (m, c) in mean.iter_mut().zip(&p.coords) {
                *m += w * c;
            }
        }
        for m in &mut mean {
            *m /= total;
        }
        return ManifoldPoint::new(first.k, mean);
    }

    let start = weights
        .iter()
        .enumerate()
        .fold(0, |best, (i, w)| if *w > weights[best] { i } else { best });
    let mut p = points[start].coords.clone();
    for _ in 0..opts.max_iter {
        let mut grad = vec![0.0; dim];
        for (q, w) in points.iter().zip(weights) {
            if *w == 0.0 {
                continue;
            }
            let l = ops::log_map(k, &p, &q.coords);
            for (g, v) in grad.iter_mut().zip(&l) {
                *g += w * v / total;
            }
        }
        let step: Vec<f64> = grad.iter().map(|g| g * opts.step).collect();
        let metric = ops::lambda(k, &p) * ops::norm(&step);
        if !metric.is_finite() {
            break;
        }
        if metric < opts.tol {
            return ManifoldPoint::from_computed(first.k, p);
        }
        if k > 0.0 && k.sqrt() * metric / 2.0 >= FRAC_PI_2 {
            break;
        }
        p = ops::project(k, &ops::exp_map(k, &p, &step));
    }
    Err(GeometryError::Convergence {
        iterations: opts.max_iter,
        last: Box::new(ManifoldPoint {
            k: first.k,
            coords: p,
        }),
    })
}
