//! Wrapped normal distributions on projected spaces.
//!
//! A draw takes `v0 ~ N(0, diag σ²)` in metric-normalised coordinates of the
//! tangent space at the origin, transports it to `μ` and applies the
//! exponential map, which works out to `z = μ ⊕ exp0(v0 / 2)`. The geodesic
//! distance from `μ` to `z` is then exactly `r = ‖v0‖`, and the density with
//! respect to the Riemannian volume is
//!
//! `log N(v0; 0, σ²) − (d − 1) · log(sin_k(√|k| r) / (√|k| r))`.

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::geometry::{ops, Curvature, GeometryError, ManifoldPoint};
use crate::rng::SeededRng;
use std::f64::consts::PI;

/// Draws that land past the chart of the projected sphere are redrawn this
/// many times before giving up.
pub const MAX_RESAMPLES: usize = 100;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct WrappedNormal {
    mu: ManifoldPoint,
    sigma: Vec<f64>,
}

impl WrappedNormal {
    pub fn new(mu: ManifoldPoint, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != mu.dim() {
            return Err(Error::Shape(format!(
                "sigma of length {} for a mean of dimension {}",
                sigma.len(),
                mu.dim()
            )));
        }
        if sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Domain("sigma must be finite and positive".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn mean(&self) -> &ManifoldPoint {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn curvature(&self) -> Curvature {
        self.mu.curvature()
    }
}

/// Zero-mean isotropic wrapped normal used as the latent prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentPrior {
    k: Curvature,
    dim: usize,
    sigma0: f64,
}

impl LatentPrior {
    pub fn new(k: Curvature, dim: usize, sigma0: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("prior dimension must be at least 1".into()));
        }
        if !(sigma0.is_finite() && sigma0 > 0.0) {
            return Err(Error::Config(format!(
                "prior sigma0 {sigma0} must be positive"
            )));
        }
        Ok(Self { k, dim, sigma0 })
    }

    pub fn curvature(&self) -> Curvature {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn as_wrapped_normal(&self) -> WrappedNormal {
        WrappedNormal {
            mu: ManifoldPoint::origin(self.k, self.dim),
            sigma: vec![self.sigma0; self.dim],
        }
    }
}

/// True when a draw with geodesic radius `r` stays inside the chart (for
/// `k > 0`, radii reach up to the antipode `π/√k`).
pub fn radius_in_chart(k: f64, r: f64) -> bool {
    k <= 0.0 || k.sqrt() * r < PI
}

/// Reparameterised sample: returns `(z, v0)` with `v0 = σ ⊙ ε`.
pub fn sample_with_noise<T: Real>(k: f64, mu: &[T], sigma: &[T], eps: &[f64]) -> (Vec<T>, Vec<T>) {
    let v0: Vec<T> = sigma.iter().zip(eps).map(|(&s, &e)| s * e).collect();
    let half: Vec<T> = v0.iter().map(|&v| v * 0.5).collect();
    let z = ops::mobius_add(k, mu, &ops::exp0(k, &half));
    (ops::project(k, &z), v0)
}

/// Log-density in terms of the origin-tangent coordinates `v0`.
pub fn log_prob_from_noise<T: Real>(k: f64, sigma: &[T], v0: &[T]) -> T {
    let d = v0.len();
    let mut acc = v0[0].lift(-(d as f64) * HALF_LN_2PI);
    for (&s, &v) in sigma.iter().zip(v0) {
        let t = v / s;
        acc = acc - s.ln() - t * t * 0.5;
    }
    if d > 1 && k != 0.0 {
        let r = ops::norm(v0);
        acc = acc - ops::sinc_s(k, r).ln() * (d as f64 - 1.0);
    }
    acc
}

/// Recovers `v0 = λ_μ · log_μ(z)`.
pub fn noise_of<T: Real>(k: f64, mu: &[T], z: &[T]) -> Vec<T> {
    let lam = ops::lambda(k, mu);
    ops::scale(&ops::log_map(k, mu, z), lam)
}

pub fn log_prob<T: Real>(k: f64, mu: &[T], sigma: &[T], z: &[T]) -> T {
    log_prob_from_noise(k, sigma, &noise_of(k, mu, z))
}

/// Prior log-density, with `v0 = 2 log0(z)`.
pub fn prior_log_prob_raw<T: Real>(k: f64, sigma0: f64, z: &[T]) -> T {
    let v0: Vec<T> = ops::log0(k, z).into_iter().map(|v| v * 2.0).collect();
    let sig: Vec<T> = v0.iter().map(|v| v.lift(sigma0)).collect();
    log_prob_from_noise(k, &sig, &v0)
}

/// Draws `z ~ q`, returning it with the reparameterisation noise `v0`.
pub fn wn_sample(q: &WrappedNormal, rng: &mut SeededRng) -> Result<(ManifoldPoint, Vec<f64>)> {
    let k = q.curvature().value();
    for attempt in 0..=MAX_RESAMPLES {
        let eps = rng.normals(q.sigma.len());
        let (z, v0) = sample_with_noise(k, q.mu.coords(), &q.sigma, &eps);
        if !radius_in_chart(k, ops::norm(&v0)) {
            log::warn!("wrapped-normal draw {attempt} left the chart; resampling");
            continue;
        }
        return Ok((ManifoldPoint::new(q.curvature(), z)?, v0));
    }
    Err(Error::Numeric(format!(
        "wrapped-normal sampling left the chart {MAX_RESAMPLES} times"
    )))
}

fn check_point(q: &WrappedNormal, z: &ManifoldPoint) -> Result<()> {
    if z.curvature() != q.curvature() || z.dim() != q.mu.dim() {
        return Err(Error::Shape("point and distribution disagree".into()));
    }
    if q.curvature().value() > 0.0 {
        let den = ops::mobius_denominator(
            q.curvature().value(),
            &q.mu.negated().into_coords(),
            z.coords(),
        );
        if den.abs() < 1e-300 {
            return Err(GeometryError::Domain {
                branch: "wn_log_prob",
                arg: den,
            }
            .into());
        }
    }
    Ok(())
}

pub fn wn_log_prob(q: &WrappedNormal, z: &ManifoldPoint) -> Result<f64> {
    check_point(q, z)?;
    Ok(log_prob(
        q.curvature().value(),
        q.mu.coords(),
        &q.sigma,
        z.coords(),
    ))
}

pub fn prior_log_prob(prior: &LatentPrior, z: &ManifoldPoint) -> Result<f64> {
    wn_log_prob(&prior.as_wrapped_normal(), z)
}

/// Monte-Carlo `KL(q ‖ prior)` with its standard error.
pub fn kl_mc(
    q: &WrappedNormal,
    prior: &LatentPrior,
    n: usize,
    rng: &mut SeededRng,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Config("kl_mc needs at least one draw".into()));
    }
    if prior.curvature() != q.curvature() || prior.dim() != q.mu.dim() {
        return Err(Error::Shape("prior and posterior disagree".into()));
    }
    let k = q.curvature().value();
    let mut terms = Vec::with_capacity(n);
    for _ in 0..n {
        let (z, v0) = wn_sample(q, rng)?;
        let lq = log_prob_from_noise(k, &q.sigma, &v0);
        let lp = prior_log_prob_raw(k, prior.sigma0(), z.coords());
        terms.push(lq - lp);
    }
    Ok(mean_and_standard_error(&terms))
}

pub fn mean_and_standard_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::geometry::{gyro_distance, karcher_mean};

    fn kc(k: f64) -> Curvature {
        Curvature::new(k).unwrap()
    }

    #[test]
    fn tiny_sigma_concentrates_on_the_mean() {
        let mu = ManifoldPoint::new(kc(-1.0), vec![0.3, -0.2]).unwrap();
        let q = WrappedNormal::new(mu.clone(), vec![1e-8; 2]).unwrap();
        let mut rng = SeededRng::new(1);
        let (z, _) = wn_sample(&q, &mut rng).unwrap();
        assert!(gyro_distance(&z, &mu).unwrap() <= 1e-6);
    }

    #[test]
    fn flat_sample_is_a_translation() {
        let mu = ManifoldPoint::new(kc(0.0), vec![1.0, -2.0, 0.5]).unwrap();
        let q = WrappedNormal::new(mu, vec![0.3, 1.2, 0.7]).unwrap();
        let mut rng = SeededRng::new(2);
        let (z, v0) = wn_sample(&q, &mut rng).unwrap();
        for i in 0..3 {
            assert_eq!(z.coords()[i], q.mean().coords()[i] + v0[i] * 0.5);
        }
    }

    #[test]
    fn sample_radius_equals_noise_norm() {
        for k in [-1.0, -0.3, 0.6] {
            let mu = ManifoldPoint::new(kc(k), vec![0.2, 0.1, -0.3]).unwrap();
            let q = WrappedNormal::new(mu.clone(), vec![0.5, 0.4, 0.8]).unwrap();
            let mut rng = SeededRng::new(3);
            for _ in 0..20 {
                let (z, v0) = wn_sample(&q, &mut rng).unwrap();
                let r = gyro_distance(&mu, &z).unwrap();
                assert!((r - ops::norm(&v0)).abs() < 1e-9);
                let back = noise_of(k, mu.coords(), z.coords());
                for (a, b) in back.iter().zip(&v0) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn flat_log_prob_is_gaussian() {
        let prior = LatentPrior::new(kc(0.0), 2, 1.0).unwrap();
        let z = ManifoldPoint::new(kc(0.0), vec![0.3, -0.4]).unwrap();
        // v0 = 2z.
        let v2 = 4.0 * 0.25;
        let expected = -(2.0 * PI).ln() - 0.5 * v2;
        assert!((prior_log_prob(&prior, &z).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn prior_is_the_centered_wrapped_normal() {
        let prior = LatentPrior::new(kc(-0.7), 3, 0.8).unwrap();
        let z = ManifoldPoint::new(kc(-0.7), vec![0.1, 0.5, -0.2]).unwrap();
        assert_eq!(
            prior_log_prob(&prior, &z).unwrap(),
            wn_log_prob(&prior.as_wrapped_normal(), &z).unwrap()
        );
        let o = ManifoldPoint::origin(kc(-0.7), 3);
        assert!(prior_log_prob(&prior, &o).unwrap() > prior_log_prob(&prior, &z).unwrap());
    }

    #[test]
    fn isotropic_density_is_rotation_invariant() {
        let k = -1.0;
        let mu = ManifoldPoint::new(kc(k), vec![0.3, 0.2]).unwrap();
        let q = WrappedNormal::new(mu.clone(), vec![0.5, 0.5]).unwrap();
        let delta = [0.2, 0.1];
        let rotated = [-0.1, 0.2];
        let a = ManifoldPoint::new(kc(k), ops::mobius_add(k, mu.coords(), &delta)).unwrap();
        let b = ManifoldPoint::new(kc(k), ops::mobius_add(k, mu.coords(), &rotated)).unwrap();
        assert!((wn_log_prob(&q, &a).unwrap() - wn_log_prob(&q, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kl_of_prior_with_itself_vanishes() {
        let prior = LatentPrior::new(kc(-1.0), 2, 0.7).unwrap();
        let mut rng = SeededRng::new(4);
        let (est, se) = kl_mc(&prior.as_wrapped_normal(), &prior, 500, &mut rng).unwrap();
        assert!(est.abs() <= 3.0 * se + 1e-12, "{est} ± {se}");
    }

    #[test]
    fn kl_matches_flat_closed_form() {
        let prior = LatentPrior::new(kc(0.0), 2, 1.0).unwrap();
        let mu = ManifoldPoint::new(kc(0.0), vec![0.4, -0.1]).unwrap();
        let sigma = vec![0.6, 1.3];
        let q = WrappedNormal::new(mu.clone(), sigma.clone()).unwrap();
        let closed: f64 = (0..2)
            .map(|i| {
                let m = 2.0 * mu.coords()[i];
                -sigma[i].ln() + (sigma[i] * sigma[i] + m * m) / 2.0 - 0.5
            })
            .sum();
        let mut rng = SeededRng::new(5);
        let (est, se) = kl_mc(&q, &prior, 4000, &mut rng).unwrap();
        assert!((est - closed).abs() <= 3.0 * se, "{est} ± {se} vs {closed}");
    }

    #[test]
    fn empirical_karcher_mean_of_samples_is_near_the_mean() {
        let k = kc(-1.0);
        let q = WrappedNormal::new(ManifoldPoint::origin(k, 2), vec![0.5, 0.5]).unwrap();
        let mut rng = SeededRng::new(6);
        let pts: Vec<_> = (0..4000)
            .map(|_| wn_sample(&q, &mut rng).unwrap().0)
            .collect();
        let m = karcher_mean(&pts, &vec![1.0; pts.len()]).unwrap();
        assert!(ops::norm(m.coords()) < 0.02);
    }

    #[test]
    fn sphere_draws_past_the_antipode_are_redrawn() {
        let q = WrappedNormal::new(ManifoldPoint::origin(kc(4.0), 2), vec![3.0, 3.0]).unwrap();
        let mut rng = SeededRng::new(7);
        for _ in 0..50 {
            let (_, v0) = wn_sample(&q, &mut rng).unwrap();
            assert!(radius_in_chart(4.0, ops::norm(&v0)));
        }
    }

    #[test]
    fn generic_log_prob_agrees_with_tape() {
        let k = 0.9;
        let mu = [0.1, -0.3];
        let sigma = [0.4, 0.6];
        let z = [0.3, 0.2];
        let tape = Tape::new();
        let (mv, sv, zv) = (tape.vars(&mu), tape.vars(&sigma), tape.vars(&z));
        let lp = log_prob(k, &mv, &sv, &zv);
        assert_eq!(lp.value(), log_prob(k, &mu, &sigma, &z));
        let g = tape.gradient(lp);
        let h = 1e-6;
        for i in 0..2 {
            let mut a = mu;
            let mut b = mu;
            a[i] += h;
            b[i] -= h;
            let fd = (log_prob(k, &a, &sigma, &z) - log_prob(k, &b, &sigma, &z)) / (2.0 * h);
            assert!((g[mv[i].index()] - fd).abs() < 1e-6);
        }
    }
}
