//! Adam, with a Riemannian variant for parameters tagged as manifold points.
//!
//! Manifold parameters hold one point per row. Their coordinate gradient is
//! rescaled by the inverse metric `1/λ²`, the Adam direction is applied
//! through the exponential map and the first moment is carried to the new
//! point by the origin-factored transport `λ_p / λ_new`.

use super::network::{Grads, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::{check_coords, ops};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Maximum number of step halvings when an update would leave the chart.
pub const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    skipped: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            skipped: 0,
            m: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Steps skipped because of non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(
        &mut self,
        step: u64,
        skipped: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Result<()> {
        let same = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
        };
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::Shape(
                "optimizer state does not match the parameters".into(),
            ));
        }
        self.step = step;
        self.skipped = skipped;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update of every trainable parameter. Non-finite gradients skip
    /// the whole step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if !grads.all_finite() {
            self.skipped += 1;
            return Err(Error::Numeric(format!(
                "non-finite gradient; step skipped ({} so far)",
                self.skipped
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, param) in store.iter_mut().enumerate() {
            if !param.trainable() {
                continue;
            }
            let g = grads.get(id);
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            match param.kind {
                ParamKind::Euclidean => {
                    for i in 0..g.len() {
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        param.value[i] -= c.lr * mh / (vh.sqrt() + c.eps);
                    }
                }
                ParamKind::Manifold { curvature: k } => {
                    let d = *param.shape.last().unwrap_or(&1);
                    for row in 0..param.value.len() / d {
                        let r = row * d..(row + 1) * d;
                        riemannian_row(
                            k,
                            &c,
                            bc1,
                            bc2,
                            &mut param.value[r.clone()],
                            &g[r.clone()],
                            &mut m[r.clone()],
                            &mut v[r],
                        )
                        .map_err(|e| Error::Numeric(format!("{}: {e}", param.name)))?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn riemannian_row(
    k: f64,
    c: &AdamConfig,
    bc1: f64,
    bc2: f64,
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
) -> std::result::Result<(), String> {
    let lam = ops::lambda(k, p);
    let inv_metric = 1.0 / (lam * lam);
    let mut dir = vec![0.0; p.len()];
    for i in 0..p.len() {
        let rg = g[i] * inv_metric;
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * rg;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * rg * rg;
        dir[i] = -c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
    }
    let mut scale = 1.0;
    for _ in 0..=MAX_HALVINGS {
        let step: Vec<f64> = dir.iter().map(|s| s * scale).collect();
        let in_chart = k <= 0.0 || k.sqrt() * lam * ops::norm(&step) / 2.0 < FRAC_PI_2;
        if in_chart {
            let next = ops::project(k, &ops::exp_map(k, p, &step));
            if check_coords(k, &next).is_ok() {
                let transport = lam / ops::lambda(k, &next);
                m.iter_mut().for_each(|mi| *mi *= transport);
                p.copy_from_slice(&next);
                assert!(
                    check_coords(k, p).is_ok(),
                    "manifold parameter left its domain"
                );
                return Ok(());
            }
        }
        scale *= 0.5;
    }
    Err(format!(
        "update left the chart after {MAX_HALVINGS} halvings"
    ))
}
