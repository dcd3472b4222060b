//! Hyperplanes `H_{a,p} = {z : ⟨-p ⊕ z, a⟩ = 0}` in projected spaces and the
//! gyroplane layer built from their signed distances.
//!
//! For `w = -p ⊕ z`, `s = ⟨w, a⟩` and `D = 1 + k‖w‖²` the distance is
//! `asin_s(k, 2|s| / (D‖a‖))` and the layer feature is
//! `‖a‖ · asin_s(k, 2s / (D‖a‖))`, whose flat limit is `2⟨a, z - p⟩`.

use crate::geometry::{ops, trig::DOMAIN_SLACK, Curvature, GeometryError, ManifoldPoint};
use rayon::prelude::*;

type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, PartialEq)]
pub struct GyroHyperplane {
    p: ManifoldPoint,
    a: Vec<f64>,
}

impl GyroHyperplane {
    pub fn new(p: ManifoldPoint, a: Vec<f64>) -> Result<Self> {
        if a.len() != p.dim() {
            return Err(GeometryError::Shape(format!(
                "normal of dimension {} for offset of dimension {}",
                a.len(),
                p.dim()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidPoint(
                "non-finite hyperplane normal".into(),
            ));
        }
        if ops::norm(&a) == 0.0 {
            return Err(GeometryError::Degenerate(
                "hyperplane normal is zero".into(),
            ));
        }
        Ok(Self { p, a })
    }

    pub fn offset(&self) -> &ManifoldPoint {
        &self.p
    }

    pub fn normal(&self) -> &[f64] {
        &self.a
    }
}

/// Signed argument `2s / (D‖a‖)` of the inverse sine, with `w = -p ⊕ z`.
fn sine_argument(k: f64, w: &[f64], a: &[f64]) -> f64 {
    let s = ops::dot(w, a);
    let den = 1.0 + k * ops::norm_sq(w);
    2.0 * s / (den * ops::norm(a))
}

fn check_pair(z: &ManifoldPoint, h: &GyroHyperplane) -> Result<()> {
    if z.curvature() != h.p.curvature() || z.dim() != h.p.dim() {
        return Err(GeometryError::Shape(format!(
            "point (k={}, d={}) vs hyperplane (k={}, d={})",
            z.curvature().value(),
            z.dim(),
            h.p.curvature().value(),
            h.p.dim()
        )));
    }
    Ok(())
}

fn checked_argument(z: &ManifoldPoint, h: &GyroHyperplane) -> Result<f64> {
    check_pair(z, h)?;
    let k = z.curvature().value();
    let w = ops::mobius_add(k, &h.p.negated().into_coords(), z.coords());
    let q = sine_argument(k, &w, &h.a);
    if k > 0.0 && (k.sqrt() * q).abs() > 1.0 + DOMAIN_SLACK {
        return Err(GeometryError::Domain {
            branch: "asin_k",
            arg: k.sqrt() * q,
        });
    }
    Ok(q)
}

/// Geodesic distance from `z` to the hyperplane.
pub fn hyperplane_distance(z: &ManifoldPoint, h: &GyroHyperplane) -> Result<f64> {
    let q = checked_argument(z, h)?;
    Ok(ops::asin_s(z.curvature().value(), q.abs()))
}

/// `sign(⟨-p ⊕ z, a⟩) · ‖a‖ · distance(z, H)`.
pub fn gyroplane_feature(z: &ManifoldPoint, h: &GyroHyperplane) -> Result<f64> {
    let q = checked_argument(z, h)?;
    Ok(ops::norm(&h.a) * ops::asin_s(z.curvature().value(), q))
}

/// `m` hyperplanes sharing curvature and dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GyroplaneLayer {
    k: Curvature,
    hyperplanes: Vec<GyroHyperplane>,
}

impl GyroplaneLayer {
    pub fn new(k: Curvature, hyperplanes: Vec<GyroHyperplane>) -> Result<Self> {
        let first = hyperplanes.first().ok_or(GeometryError::EmptyInput)?;
        let d = first.p.dim();
        if hyperplanes
            .iter()
            .any(|h| h.p.curvature() != k || h.p.dim() != d)
        {
            return Err(GeometryError::Shape(
                "hyperplanes disagree on curvature or dimension".into(),
            ));
        }
        Ok(Self { k, hyperplanes })
    }

    pub fn curvature(&self) -> Curvature {
        self.k
    }

    pub fn hyperplanes(&self) -> &[GyroHyperplane] {
        &self.hyperplanes
    }

    pub fn width(&self) -> usize {
        self.hyperplanes.len()
    }

    pub fn dim(&self) -> usize {
        self.hyperplanes[0].p.dim()
    }

    /// Offsets and normals as row-major `m × d` blocks.
    pub fn to_flat(&self) -> (Vec<f64>, Vec<f64>) {
        let offsets = self
            .hyperplanes
            .iter()
            .flat_map(|h| h.p.coords().to_vec())
            .collect();
        let normals = self.hyperplanes.iter().flat_map(|h| h.a.clone()).collect();
        (offsets, normals)
    }
}

pub fn gyroplane_forward(z: &ManifoldPoint, layer: &GyroplaneLayer) -> Result<Vec<f64>> {
    layer
        .hyperplanes
        .iter()
        .map(|h| gyroplane_feature(z, h))
        .collect()
}

/// Coordinate gradients of `Σ_j upstream_j · feature_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GyroplaneGrads {
    pub z: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
}

pub fn gyroplane_backward(
    z: &ManifoldPoint,
    layer: &GyroplaneLayer,
    upstream: &[f64],
) -> Result<GyroplaneGrads> {
    if upstream.len() != layer.width() {
        return Err(GeometryError::Shape(format!(
            "{} upstream values for {} hyperplanes",
            upstream.len(),
            layer.width()
        )));
    }
    if let Some(g) = upstream.iter().find(|g| !g.is_finite()) {
        return Err(GeometryError::InvalidPoint(format!(
            "non-finite upstream gradient {g}"
        )));
    }
    let k = layer.k.value();
    let d = layer.dim();
    let mut gz = vec![0.0; d];
    let mut ga = Vec::with_capacity(layer.width());
    let mut gp = Vec::with_capacity(layer.width());
    for (h, &g) in layer.hyperplanes.iter().zip(upstream) {
        check_pair(z, h)?;
        let mut a_j = vec![0.0; d];
        let mut p_j = vec![0.0; d];
        feature_vjp(
            k,
            z.coords(),
            h.p.coords(),
            &h.a,
            g,
            &mut gz,
            &mut p_j,
            &mut a_j,
        );
        ga.push(a_j);
        gp.push(p_j);
    }
    Ok(GyroplaneGrads {
        z: gz,
        a: ga,
        p: gp,
    })
}

/// Unchecked feature on raw coordinates.
pub fn feature_raw(k: f64, z: &[f64], p: &[f64], a: &[f64]) -> f64 {
    let w = ops::mobius_add(k, &ops::neg(p), z);
    ops::norm(a) * ops::asin_s(k, sine_argument(k, &w, a))
}

/// Accumulates `g ·` (∂feature/∂z, ∂feature/∂p, ∂feature/∂a) into the
/// output buffers.
#[allow(clippy::too_many_arguments)]
pub fn feature_vjp(
    k: f64,
    z: &[f64],
    p: &[f64],
    a: &[f64],
    g: f64,
    gz: &mut [f64],
    gp: &mut [f64],
    ga: &mut [f64],
) {
    if g == 0.0 {
        return;
    }
    let x = ops::neg(p);
    let y = z;
    let w = ops::mobius_add(k, &x, y);
    let s = ops::dot(&w, a);
    let w2 = ops::norm_sq(&w);
    let dd = 1.0 + k * w2;
    let na = ops::norm(a);
    let q = 2.0 * s / (dd * na);
    let asin_q = ops::asin_s(k, q);
    // d asin_s / dq, floored where the sphere branch saturates.
    let f_q = na / (1.0 - k * q * q).max(1e-12).sqrt();

    let c_a = 2.0 / (dd * na);
    let c_w = -2.0 * s / (dd * dd * na) * 2.0 * k;
    let c_aa = -2.0 * s / (dd * na * na * na);
    let gw: Vec<f64> = (0..w.len())
        .map(|i| g * f_q * (c_a * a[i] + c_w * w[i]))
        .collect();
    for i in 0..a.len() {
        ga[i] += g * (f_q * (c_a * w[i] + c_aa * a[i]) + asin_q * a[i] / na);
    }

    let (gx, gy) = mobius_add_vjp(k, &x, y, &w, &gw);
    for i in 0..gz.len() {
        gz[i] += gy[i];
        gp[i] -= gx[i];
    }
}

/// Vector-Jacobian product of `out = x ⊕_k y` given `g = ∂L/∂out`.
pub fn mobius_add_vjp(
    k: f64,
    x: &[f64],
    y: &[f64],
    out: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let xy = ops::dot(x, y);
    let x2 = ops::norm_sq(x);
    let y2 = ops::norm_sq(y);
    let a = 1.0 - 2.0 * k * xy - k * y2;
    let b = 1.0 + k * x2;
    let den = 1.0 - 2.0 * k * xy + k * k * x2 * y2;
    let g_den = -ops::dot(g, out) / den;
    let g_n: Vec<f64> = g.iter().map(|v| v / den).collect();
    let g_a = ops::dot(&g_n, x);
    let g_b = ops::dot(&g_n, y);
    let mut gx = vec![0.0; x.len()];
    let mut gy = vec![0.0; y.len()];
    for i in 0..x.len() {
        gx[i] = a * g_n[i] - 2.0 * k * y[i] * g_a
            + 2.0 * k * x[i] * g_b
            + g_den * (-2.0 * k * y[i] + 2.0 * k * k * y2 * x[i]);
        gy[i] = b * g_n[i] - 2.0 * k * (x[i] + y[i]) * g_a
            + g_den * (-2.0 * k * x[i] + 2.0 * k * k * x2 * y[i]);
    }
    (gx, gy)
}

/// Batched forward: `zs` is `B × d`, `offsets` and `normals` are `m × d`;
/// returns `B × m` features.
pub fn forward_batch(k: f64, d: usize, zs: &[f64], offsets: &[f64], normals: &[f64]) -> Vec<f64> {
    let m = offsets.len() / d;
    let mut out = vec![0.0; zs.len() / d * m];
    out.par_chunks_mut(m)
        .zip(zs.par_chunks(d))
        .for_each(|(row, z)| {
            for (j, f) in row.iter_mut().enumerate() {
                let r = j * d..(j + 1) * d;
                *f = feature_raw(k, z, &offsets[r.clone()], &normals[r]);
            }
        });
    out
}

/// Batched backward for [`forward_batch`]. Returns the `B × d` input
/// gradient and accumulates parameter gradients in sample order.
pub fn backward_batch(
    k: f64,
    d: usize,
    zs: &[f64],
    offsets: &[f64],
    normals: &[f64],
    upstream: &[f64],
    g_offsets: &mut [f64],
    g_normals: &mut [f64],
) -> Vec<f64> {
    let m = offsets.len() / d;
    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = zs
        .par_chunks(d)
        .zip(upstream.par_chunks(m))
        .map(|(z, up)| {
            let mut gz = vec![0.0; d];
            let mut gp = vec![0.0; m * d];
            let mut ga = vec![0.0; m * d];
            for j in 0..m {
                let r = j * d..(j + 1) * d;
                feature_vjp(
                    k,
                    z,
                    &offsets[r.clone()],
                    &normals[r.clone()],
                    up[j],
                    &mut gz,
                    &mut gp[r.clone()],
                    &mut ga[r],
                );
            }
            (gz, gp, ga)
        })
        .collect();
    let mut gzs = Vec::with_capacity(zs.len());
    for (gz, gp, ga) in per_sample {
        gzs.extend(gz);
        for (acc, v) in g_offsets.iter_mut().zip(&gp) {
            *acc += v;
        }
        for (acc, v) in g_normals.iter_mut().zip(&ga) {
            *acc += v;
        }
    }
    gzs
}
