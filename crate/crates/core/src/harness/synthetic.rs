//! Procedural textures with planted local defects.

use super::data::{ImageSet, Label, Provenance};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Stripes,
    Grid,
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defect {
    /// Thin dark line segment.
    Scratch,
    /// Dark disk.
    Hole,
    /// Bright irregular stain made of overlapping disks.
    Blot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub size: usize,
    pub texture: Texture,
    pub defect: Defect,
    /// Fraction of the way from the background to black (dark defects) or
    /// white (bright defects).
    pub intensity: f64,
    /// Bounds on the defect area as a fraction of the image.
    pub min_area: f64,
    pub max_area: f64,
    /// When set, anomalous images are whole images of this texture instead
    /// of defects; their mask covers the full image.
    pub outlier_texture: Option<Texture>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_normal: 100,
            n_anomalous: 10,
            size: 32,
            texture: Texture::Stripes,
            defect: Defect::Scratch,
            intensity: 0.8,
            min_area: 0.01,
            max_area: 0.10,
            outlier_texture: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 8 {
            return bad(format!("image size {} is below 8", self.size));
        }
        if self.n_normal + self.n_anomalous == 0 {
            return bad("the spec asks for no images".into());
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return bad(format!("defect intensity {} outside (0, 1]", self.intensity));
        }
        if !(self.min_area > 0.0 && self.min_area <= self.max_area && self.max_area < 0.5) {
            return bad(format!(
                "defect area bounds [{}, {}] must satisfy 0 < min ≤ max < 0.5",
                self.min_area, self.max_area
            ));
        }
        let px = (self.size * self.size) as f64;
        if (self.max_area * px).floor() < (self.min_area * px).ceil() {
            return bad("defect area bounds admit no pixel count".into());
        }
        Ok(())
    }
}

/// Jittered texture parameters for one image.
struct TextureParams {
    texture: Texture,
    freq: f64,
    angle: f64,
    phase: (f64, f64),
    contrast: f64,
    offset: f64,
    blobs: Vec<(f64, f64, f64, f64)>,
}

fn texture_params(texture: Texture, size: usize, rng: &mut SeededRng) -> TextureParams {
    let s = size as f64;
    let blobs = if texture == Texture::Blobs {
        (0..6)
            .map(|_| {
                (
                    rng.range(0.0, s),
                    rng.range(0.0, s),
                    rng.range(0.12, 0.22) * s,
                    rng.range(-1.0, 1.0),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    TextureParams {
        texture,
        freq: rng.range(0.9, 1.1) * 4.0 / s,
        angle: rng.range(-0.15, 0.15) + if texture == Texture::Stripes { 0.4 } else { 0.0 },
        phase: (rng.range(0.0, 2.0 * PI), rng.range(0.0, 2.0 * PI)),
        contrast: rng.range(0.18, 0.24),
        offset: rng.range(0.45, 0.55),
        blobs,
    }
}

fn render(p: &TextureParams, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    let (ca, sa) = (p.angle.cos(), p.angle.sin());
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64, r as f64);
            let u = x * ca + y * sa;
            let v = -x * sa + y * ca;
            let w = 2.0 * PI * p.freq;
            let t = match p.texture {
                Texture::Stripes => (w * u + p.phase.0).sin(),
                Texture::Grid => 0.5 * ((w * u + p.phase.0).sin() + (w * v + p.phase.1).sin()),
                Texture::Blobs => {
                    let mut acc = 0.0;
                    for &(bx, by, rad, amp) in &p.blobs {
                        let d2 = (x - bx).powi(2) + (y - by).powi(2);
                        acc += amp * (-d2 / (2.0 * rad * rad)).exp();
                    }
                    acc.clamp(-1.0, 1.0)
                }
            };
            out.push((p.offset + p.contrast * t).clamp(0.0, 1.0));
        }
    }
    out
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((px - a.0 - t * dx).powi(2) + (py - a.1 - t * dy).powi(2)).sqrt()
}

fn defect_mask(defect: Defect, size: usize, rng: &mut SeededRng) -> Vec<bool> {
    let s = size as f64;
    let mut mask = vec![false; size * size];
    let margin = 0.15 * s;
    match defect {
        Defect::Scratch => {
            let half = rng.range(0.6, 1.1);
            let len = rng.range(0.3, 0.7) * s;
            let theta = rng.range(0.0, PI);
            let cx = rng.range(margin, s - margin);
            let cy = rng.range(margin, s - margin);
            let a = (cx - 0.5 * len * theta.cos(), cy - 0.5 * len * theta.sin());
            let b = (cx + 0.5 * len * theta.cos(), cy + 0.5 * len * theta.sin());
            for r in 0..size {
                for c in 0..size {
                    mask[r * size + c] = segment_distance(c as f64 + 0.5, r as f64 + 0.5, a, b) <= half;
                }
            }
        }
        Defect::Hole | Defect::Blot => {
            let n = if defect == Defect::Hole { 1 } else { 3 };
            let cx = rng.range(margin, s - margin);
            let cy = rng.range(margin, s - margin);
            let base = rng.range(0.06, 0.14) * s;
            let disks: Vec<(f64, f64, f64)> = (0..n)
                .map(|i| {
                    if i == 0 {
                        (cx, cy, base)
                    } else {
                        (
                            cx + rng.range(-0.8, 0.8) * base,
                            cy + rng.range(-0.8, 0.8) * base,
                            base * rng.range(0.5, 0.9),
                        )
                    }
                })
                .collect();
            for r in 0..size {
                for c in 0..size {
                    let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                    mask[r * size + c] = disks.iter().any(|&(dx, dy, rad)| (x - dx).powi(2) + (y - dy).powi(2) <= rad * rad);
                }
            }
        }
    }
    mask
}

/// Draws defect masks until the area lands inside the bounds.
fn bounded_mask(spec: &SyntheticSpec, rng: &mut SeededRng) -> Result<Vec<bool>> {
    let px = (spec.size * spec.size) as f64;
    let (lo, hi) = ((spec.min_area * px).ceil() as usize, (spec.max_area * px).floor() as usize);
    for _ in 0..1000 {
        let m = defect_mask(spec.defect, spec.size, rng);
        let area = m.iter().filter(|&&b| b).count();
        if (lo..=hi).contains(&area) {
            return Ok(m);
        }
    }
    Err(Error::Config(format!(
        "could not place a {:?} defect with area in [{lo}, {hi}] pixels",
        spec.defect
    )))
}

fn apply_defect(img: &mut [f64], mask: &[bool], defect: Defect, intensity: f64) {
    for (v, &m) in img.iter_mut().zip(mask) {
        if m {
            *v = match defect {
                Defect::Scratch | Defect::Hole => *v * (1.0 - intensity),
                Defect::Blot => *v + (1.0 - *v) * intensity,
            };
        }
    }
}

/// Normal images first, then anomalous ones; ids are `normal-NNNNN` and
/// `anomalous-NNNNN`.
pub fn gen_synthetic(spec: &SyntheticSpec, rng: &mut SeededRng) -> Result<ImageSet> {
    spec.validate()?;
    let n = spec.n_normal + spec.n_anomalous;
    let px = spec.size * spec.size;
    let mut ids = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..spec.n_normal {
        let p = texture_params(spec.texture, spec.size, rng);
        ids.push(format!("normal-{i:05}"));
        images.push(render(&p, spec.size));
        masks.push(vec![false; px]);
        labels.push(Label::Normal);
    }
    for i in 0..spec.n_anomalous {
        let (img, mask) = match spec.outlier_texture {
            Some(t) => (render(&texture_params(t, spec.size, rng), spec.size), vec![true; px]),
            None => {
                let mut img = render(&texture_params(spec.texture, spec.size, rng), spec.size);
                let mask = bounded_mask(spec, rng)?;
                apply_defect(&mut img, &mask, spec.defect, spec.intensity);
                (img, mask)
            }
        };
        ids.push(format!("anomalous-{i:05}"));
        images.push(img);
        masks.push(mask);
        labels.push(Label::Anomalous);
    }
    ImageSet::new(
        spec.size,
        spec.size,
        ids,
        images,
        Some(masks),
        Some(labels),
        Provenance {
            source: "synthetic".into(),
            seed: Some(rng.seed()),
            note: Some(format!("{:?} texture, {:?} defects", spec.texture, spec.defect)),
        },
    )
}
