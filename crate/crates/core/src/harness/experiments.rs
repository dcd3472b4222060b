//! Reconstruction scoring, latent interpolation and SVDD score grids.

use super::data::{ImageSet, Label};
use super::metrics::{anomaly_mass, eval_metrics, localize, recon_threshold, AnomalyReport, Threshold};
use crate::error::{Error, Result};
use crate::geometry::{check_coords, ops};
use crate::nn::{Likelihood, Tensor};
use crate::spvae::SpVaeModel;
use crate::svdd::SvddModel;
use serde::{Deserialize, Serialize};

/// Per-pixel error used for thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    #[default]
    Squared,
    /// Bernoulli negative log-likelihood of the pixel.
    Bernoulli,
}

/// Posterior-mean reconstruction errors of the images at `indices`,
/// computed in batches of `batch`.
pub fn pixel_errors(
    model: &SpVaeModel,
    set: &ImageSet,
    indices: &[usize],
    metric: ErrorMetric,
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch.max(1)) {
        let x = set.tensor(chunk);
        let (x_hat, sq) = model.reconstruct(&x)?;
        for b in 0..chunk.len() {
            let e = match metric {
                ErrorMetric::Squared => sq.sample(b).to_vec(),
                ErrorMetric::Bernoulli => x_hat
                    .sample(b)
                    .iter()
                    .zip(x.sample(b))
                    .map(|(&p, &t)| Likelihood::Bernoulli.pixel_nll(p, t))
                    .collect(),
            };
            out.push(e);
        }
    }
    Ok(out)
}

/// Result of thresholding test errors against reference statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Pixel threshold from the reference errors.
    pub pixel: Threshold,
    /// Threshold on image anomaly mass from the reference images.
    pub image: Threshold,
    pub masses: Vec<f64>,
    pub flags: Vec<bool>,
    pub masks: Vec<Vec<bool>>,
}

/// Pixel masks at `τ = μ + 1.5σ` of the reference pixel errors; images are
/// flagged when their anomaly mass exceeds `μ + 1.5σ` of the reference
/// masses.
pub fn detect(reference: &[Vec<f64>], test: &[Vec<f64>]) -> Result<Detection> {
    let all: Vec<f64> = reference.iter().flatten().copied().collect();
    let pixel = recon_threshold(&all)?;
    let ref_mass: Vec<f64> = reference.iter().map(|e| anomaly_mass(e, pixel.tau)).collect();
    let image = recon_threshold(&ref_mass)?;
    let masses: Vec<f64> = test.iter().map(|e| anomaly_mass(e, pixel.tau)).collect();
    let flags = masses.iter().map(|&m| m > image.tau).collect();
    let masks = test.iter().map(|e| localize(e, pixel.tau)).collect();
    Ok(Detection {
        pixel,
        image,
        masses,
        flags,
        masks,
    })
}

/// Scores `test` against `reference` with the model and compares to the
/// ground truth of `set`.
pub fn evaluate_reconstruction(
    model: &SpVaeModel,
    set: &ImageSet,
    reference: &[usize],
    test: &[usize],
    metric: ErrorMetric,
) -> Result<(Detection, AnomalyReport)> {
    let masks = set
        .masks()
        .ok_or_else(|| Error::Config("evaluation needs ground-truth masks".into()))?;
    let ref_err = pixel_errors(model, set, reference, metric, 256)?;
    let test_err = pixel_errors(model, set, test, metric, 256)?;
    let det = detect(&ref_err, &test_err)?;
    let truth: Vec<bool> = test.iter().map(|&i| set.label(i) == Some(Label::Anomalous)).collect();
    let true_masks: Vec<Vec<bool>> = test.iter().map(|&i| masks[i].clone()).collect();
    let report = eval_metrics(&det.flags, &truth, &det.masks, &true_masks)?;
    Ok((det, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationMode {
    Geodesic,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation {
    pub mode: InterpolationMode,
    pub t: Vec<f64>,
    pub latents: Vec<Vec<f64>>,
    /// `[n, 1, H, W]` decoded frames.
    pub frames: Tensor,
    /// Linear-mode points pulled back inside the ball.
    pub clamped: usize,
}

/// Radial clamp to `1 − 1e-6` of the ball radius for points outside it.
fn clamp_to_ball(k: f64, z: &mut [f64]) -> bool {
    if k >= 0.0 {
        return false;
    }
    let limit = (1.0 - 1e-6) * ops::ball_radius(k);
    let n = ops::norm(z);
    if n >= limit {
        z.iter_mut().for_each(|v| *v *= limit / n);
        true
    } else {
        false
    }
}

/// Decodes `n` points between the posterior means of two images.
pub fn interpolate_pair(
    model: &SpVaeModel,
    x_a: &[f64],
    x_b: &[f64],
    n: usize,
    mode: InterpolationMode,
) -> Result<Interpolation> {
    if n < 2 {
        return Err(Error::Config(format!("interpolation needs at least 2 points, got {n}")));
    }
    let s = model.config().image_size;
    let pair = Tensor::new(vec![2, 1, s, s], [x_a, x_b].concat())?;
    let means = model.posterior_params(&pair)?;
    let (za, zb) = (&means[0].0, &means[1].0);
    let k = model.curvature();
    let mut clamped = 0;
    let t: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let latents: Vec<Vec<f64>> = t
        .iter()
        .enumerate()
        .map(|(i, &ti)| {
            if i == 0 {
                return za.clone();
            }
            if i == n - 1 {
                return zb.clone();
            }
            match mode {
                InterpolationMode::Geodesic => ops::project(k, &ops::geodesic(k, za, zb, ti)),
                InterpolationMode::Linear => {
                    let mut z: Vec<f64> = za.iter().zip(zb).map(|(a, b)| (1.0 - ti) * a + ti * b).collect();
                    if clamp_to_ball(k, &mut z) {
                        clamped += 1;
                    }
                    z
                }
            }
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} linear interpolation points left the ball and were clamped");
    }
    let mut frames = Vec::with_capacity(n * s * s);
    for z in &latents {
        check_coords(k, z)?;
        frames.extend(model_decode(model, z)?);
    }
    Ok(Interpolation {
        mode,
        t,
        latents,
        frames: Tensor::new(vec![n, 1, s, s], frames)?,
        clamped,
    })
}

fn model_decode(model: &SpVaeModel, z: &[f64]) -> Result<Vec<f64>> {
    let k = crate::geometry::Curvature::new(model.curvature())?;
    let p = crate::geometry::ManifoldPoint::new(k, z.to_vec())?;
    Ok(model.decode(&[p])?.into_data())
}

pub fn interpolation_csv(runs: &[Interpolation]) -> String {
    let d = runs.first().and_then(|r| r.latents.first()).map_or(0, Vec::len);
    let mut out = String::from("mode,step,t");
    for j in 0..d {
        out.push_str(&format!(",z{j}"));
    }
    out.push('\n');
    for r in runs {
        let mode = match r.mode {
            InterpolationMode::Geodesic => "geodesic",
            InterpolationMode::Linear => "linear",
        };
        for (i, (t, z)) in r.t.iter().zip(&r.latents).enumerate() {
            out.push_str(&format!("{mode},{i},{t}"));
            for v in z {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// SVDD scores on a `resolution × resolution` grid over `[lo, hi]²`,
/// skipping nodes outside the model's space.
pub fn score_grid(model: &SvddModel, bounds: (f64, f64), resolution: usize) -> Result<Vec<GridPoint>> {
    if model.config().latent_dim != 2 {
        return Err(Error::Config(format!(
            "score grids need a 2-D latent space, model has {}",
            model.config().latent_dim
        )));
    }
    if resolution < 2 || !(bounds.0 < bounds.1) {
        return Err(Error::Config("grid needs resolution ≥ 2 and lo < hi".into()));
    }
    let k = model.curvature();
    let step = (bounds.1 - bounds.0) / (resolution - 1) as f64;
    let mut out = Vec::new();
    for i in 0..resolution {
        for j in 0..resolution {
            let z = [bounds.0 + step * j as f64, bounds.0 + step * i as f64];
            if check_coords(k.value(), &z).is_err() {
                continue;
            }
            out.push(GridPoint {
                x: z[0],
                y: z[1],
                score: model.score_point(&z)?,
            });
        }
    }
    Ok(out)
}

pub fn grid_csv(points: &[GridPoint]) -> String {
    let mut out = String::from("x,y,score\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.x, p.y, p.score));
    }
    out
}
