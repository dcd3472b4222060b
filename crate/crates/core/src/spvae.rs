//! Variational autoencoder with a constant-curvature latent space.
//!
//! The encoder is an ordinary network whose last layer emits `2d` values per
//! sample: a tangent vector `u` mapped to the mean `μ = exp0(u)` and a raw
//! scale turned into `σ = softplus(s) + 1e-6`. The posterior is a wrapped
//! normal; its reparameterised draw is fed to a gyroplane layer whose
//! features go through the decoder network.

use crate::autodiff::{Real, Tape};
use crate::checkpoint::{self, Manifest};
use crate::distributions::{
    log_prob_from_noise, mean_and_standard_error, prior_log_prob_raw, radius_in_chart,
    sample_with_noise, LatentPrior, WrappedNormal, MAX_RESAMPLES,
};
use crate::error::{Error, Result};
use crate::geometry::{ops, Curvature, ManifoldPoint};
use crate::gyroplane;
use crate::nn::{
    Adam, AdamConfig, Grads, LayerSpec, Likelihood, Mode, Network, ParamKind, ParamSlot, ParamStore,
    Tensor,
};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

/// Floor added to the softplus scale.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Fraction of the chart half-width allowed for the mean head when `k > 0`.
pub const MEAN_CLAMP_FRACTION: f64 = 0.99;
/// Largest `√|k|·‖u‖` allowed for the mean head when `k < 0`.
pub const MEAN_CLAMP_HYPERBOLIC: f64 = 15.0;
pub const BETA_MIN: f64 = 1e-6;
pub const BETA_MAX: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpVaeConfig {
    pub curvature: f64,
    pub latent_dim: usize,
    /// Width of the fully connected layers; 0 removes them.
    pub hidden: usize,
    /// Channels of the stride-2 convolution stages; empty for a dense model.
    pub channels: Vec<usize>,
    /// Number of gyroplanes, i.e. the decoder input width.
    pub gyro_width: usize,
    pub image_size: usize,
    pub beta0: f64,
    pub nu: f64,
    pub kappa: f64,
    pub sigma0: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub lookahead_epochs: usize,
    pub n_mc_eval: usize,
    pub likelihood: Likelihood,
    pub seed: u64,
}

impl Default for SpVaeConfig {
    fn default() -> Self {
        Self {
            curvature: -1.0,
            latent_dim: 6,
            hidden: 400,
            channels: vec![16, 32, 64, 128],
            gyro_width: 128,
            image_size: 32,
            beta0: 1e-2,
            nu: 10.0,
            kappa: 0.5,
            sigma0: 1.0,
            batch_size: 128,
            lr: 1e-4,
            max_epochs: 500,
            warmup_epochs: 150,
            lookahead_epochs: 80,
            n_mc_eval: 16,
            likelihood: Likelihood::Bernoulli,
            seed: 0,
        }
    }
}

impl SpVaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        Curvature::new(self.curvature).map_err(|e| Error::Config(e.to_string()))?;
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if self.gyro_width == 0 || self.batch_size == 0 || self.n_mc_eval == 0 {
            return bad("gyro_width, batch_size and n_mc_eval must be positive".into());
        }
        for (name, v) in [
            ("beta0", self.beta0),
            ("nu", self.nu),
            ("kappa", self.kappa),
            ("sigma0", self.sigma0),
            ("lr", self.lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if let Likelihood::Gaussian { sigma } = self.likelihood {
            if !(sigma.is_finite() && sigma > 0.0) {
                return bad(format!("gaussian likelihood sigma must be positive, got {sigma}"));
            }
        }
        let factor = 1usize << self.channels.len();
        if self.image_size == 0 || self.image_size % factor != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of {factor} for {} conv stages",
                self.image_size,
                self.channels.len()
            ));
        }
        if self.channels.contains(&0) {
            return bad("conv channels must be positive".into());
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![1, self.image_size, self.image_size]
    }

    fn encoder_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut c_in = 1;
        for &c in &self.channels {
            specs.push(LayerSpec::conv_down(c_in, c, false));
            specs.push(LayerSpec::batch_norm(c));
            specs.push(LayerSpec::leaky_relu());
            c_in = c;
        }
        specs.push(LayerSpec::Flatten);
        let side = self.image_size >> self.channels.len();
        let flat = c_in * side * side;
        let head = 2 * self.latent_dim;
        if self.hidden > 0 {
            specs.push(LayerSpec::Dense {
                input: flat,
                output: self.hidden,
                bias: false,
            });
            specs.push(LayerSpec::batch_norm(self.hidden));
            specs.push(LayerSpec::leaky_relu());
            specs.push(LayerSpec::dense(self.hidden, head));
        } else {
            specs.push(LayerSpec::dense(flat, head));
        }
        specs
    }

    fn decoder_specs(&self) -> Vec<LayerSpec> {
        let side = self.image_size >> self.channels.len();
        let c_top = self.channels.last().copied().unwrap_or(1);
        let flat = c_top * side * side;
        let mut specs = Vec::new();
        if self.hidden > 0 {
            specs.push(LayerSpec::leaky_relu());
            specs.push(LayerSpec::Dense {
                input: self.gyro_width,
                output: self.hidden,
                bias: false,
            });
            specs.push(LayerSpec::batch_norm(self.hidden));
            specs.push(LayerSpec::leaky_relu());
        }
        let width = if self.hidden > 0 { self.hidden } else { self.gyro_width };
        if self.channels.is_empty() {
            specs.push(LayerSpec::dense(width, flat));
            specs.push(LayerSpec::Reshape {
                shape: self.image_shape(),
            });
        } else {
            specs.push(LayerSpec::Dense {
                input: width,
                output: flat,
                bias: false,
            });
            specs.push(LayerSpec::batch_norm(flat));
            specs.push(LayerSpec::leaky_relu());
            specs.push(LayerSpec::Reshape {
                shape: vec![c_top, side, side],
            });
            let n = self.channels.len();
            for i in (1..n).rev() {
                specs.push(LayerSpec::conv_up(self.channels[i], self.channels[i - 1], false));
                specs.push(LayerSpec::batch_norm(self.channels[i - 1]));
                specs.push(LayerSpec::leaky_relu());
            }
            specs.push(LayerSpec::conv_up(self.channels[0], 1, true));
        }
        specs.push(LayerSpec::Sigmoid);
        specs
    }
}

/// KL weight with the reconstruction-triggered multiplicative schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta: f64,
    pub active: bool,
    pub nu: f64,
    pub kappa: f64,
}

impl BetaSchedule {
    pub fn new(beta0: f64, nu: f64, kappa: f64) -> Self {
        Self {
            beta: beta0.clamp(BETA_MIN, BETA_MAX),
            active: false,
            nu,
            kappa,
        }
    }

    /// Applies one epoch's update from the epoch-mean reconstruction error
    /// and returns the new weight.
    pub fn update(&mut self, c_hat: f64) -> f64 {
        let target = self.kappa * self.kappa;
        if !self.active && c_hat <= target {
            self.active = true;
        }
        if self.active {
            self.beta = (self.beta * (self.nu * (c_hat - target)).exp()).clamp(BETA_MIN, BETA_MAX);
        }
        self.beta
    }
}

/// One evaluation of the β-weighted objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub recon: f64,
    pub kl: f64,
    pub kl_se: f64,
    pub beta: f64,
    pub total: f64,
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
    pub val_total: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,recon,kl,beta,total,val_total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.recon, r.kl, r.beta, r.total, r.val_total
        ));
    }
    out
}

/// Values of the latent head for one sample.
#[derive(Debug, Clone)]
pub struct LatentDraw<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    pub z: Vec<T>,
    pub v0: Vec<T>,
    /// `log q(z) − log p(z)` at the drawn point.
    pub kl: T,
    pub clamped: bool,
}

fn mean_limit(k: f64) -> Option<f64> {
    if k > 0.0 {
        Some(MEAN_CLAMP_FRACTION * FRAC_PI_2 / k.sqrt())
    } else if k < 0.0 {
        Some(MEAN_CLAMP_HYPERBOLIC / (-k).sqrt())
    } else {
        None
    }
}

/// Maps the mean-head output to a point, clamping its norm to the chart.
pub fn head_mean<T: Real>(k: f64, u: &[T]) -> (Vec<T>, bool) {
    if let Some(limit) = mean_limit(k) {
        let n = ops::norm(u);
        if n.value() > limit {
            let scaled = ops::scale(u, n.lift(limit) / n);
            return (ops::project(k, &ops::exp0(k, &scaled)), true);
        }
    }
    (ops::project(k, &ops::exp0(k, u)), false)
}

pub fn head_sigma<T: Real>(s: &[T]) -> Vec<T> {
    s.iter().map(|&v| v.softplus() + SIGMA_FLOOR).collect()
}

/// Full latent path for one sample: head values `[u, s]` (length `2d`),
/// standard-normal noise `eps`, prior scale `sigma0`.
pub fn latent_draw<T: Real>(k: f64, head: &[T], eps: &[f64], sigma0: f64) -> LatentDraw<T> {
    let d = head.len() / 2;
    let (mu, clamped) = head_mean(k, &head[..d]);
    let sigma = head_sigma(&head[d..]);
    let (z, v0) = sample_with_noise(k, &mu, &sigma, eps);
    let kl = log_prob_from_noise(k, &sigma, &v0) - prior_log_prob_raw(k, sigma0, &z);
    LatentDraw {
        mu,
        sigma,
        z,
        v0,
        kl,
        clamped,
    }
}

/// Noise whose scaled radius stays inside the chart.
fn draw_noise(k: f64, sigma: &[f64], rng: &mut SeededRng) -> Result<Vec<f64>> {
    for attempt in 0..=MAX_RESAMPLES {
        let eps = rng.normals(sigma.len());
        let r = sigma.iter().zip(&eps).map(|(s, e)| (s * e).powi(2)).sum::<f64>().sqrt();
        if radius_in_chart(k, r) {
            return Ok(eps);
        }
        log::warn!("latent draw {attempt} left the chart; resampling");
    }
    Err(Error::Numeric(format!(
        "latent sampling left the chart {MAX_RESAMPLES} times"
    )))
}

/// Batch statistics of one gradient evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Reconstruction loss per sample.
    pub recon: f64,
    /// Mean KL per sample.
    pub kl: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
struct Snapshot {
    store: ParamStore,
    optimizer: Adam,
    beta: BetaSchedule,
    epoch: usize,
}

#[derive(Debug, Clone)]
pub struct SpVaeModel {
    config: SpVaeConfig,
    store: ParamStore,
    encoder: Network,
    decoder: Network,
    offsets: usize,
    normals: usize,
    prior: LatentPrior,
    beta: BetaSchedule,
    optimizer: Adam,
    epoch: usize,
    best_val: Option<f64>,
}

impl SpVaeModel {
    pub fn new(config: SpVaeConfig) -> Result<Self> {
        config.validate()?;
        let k = config.curvature;
        let d = config.latent_dim;
        let m = config.gyro_width;
        let mut rng = SeededRng::new(config.seed).substream(0);
        let mut store = ParamStore::new();
        let encoder = Network::build("encoder", &config.image_shape(), config.encoder_specs(), &mut store, &mut rng)?;
        let offsets = store.add(
            "gyro.offsets",
            vec![m, d],
            ParamKind::Manifold { curvature: k },
            ParamSlot::Weight,
            rng.normals(m * d).into_iter().map(|v| 1e-2 * v).collect(),
        );
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let normals = store.add(
            "gyro.normals",
            vec![m, d],
            ParamKind::Euclidean,
            ParamSlot::Weight,
            rng.normals(m * d).into_iter().map(|v| v * inv_sqrt_d).collect(),
        );
        let decoder = Network::build("decoder", &[m], config.decoder_specs(), &mut store, &mut rng)?;
        if decoder.output_shape() != config.image_shape().as_slice() {
            return Err(Error::Shape(format!(
                "decoder produces {:?}, images are {:?}",
                decoder.output_shape(),
                config.image_shape()
            )));
        }
        let prior = LatentPrior::new(Curvature::new(k)?, d, config.sigma0)?;
        let optimizer = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &store,
        );
        let beta = BetaSchedule::new(config.beta0, config.nu, config.kappa);
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            offsets,
            normals,
            prior,
            beta,
            optimizer,
            epoch: 0,
            best_val: None,
        })
    }

    pub fn config(&self) -> &SpVaeConfig {
        &self.config
    }

    pub fn curvature(&self) -> f64 {
        self.config.curvature
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn beta(&self) -> &BetaSchedule {
        &self.beta
    }

    pub fn prior(&self) -> &LatentPrior {
        &self.prior
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    /// Number of completed training epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Raises or lowers the epoch budget, e.g. before resuming training.
    pub fn set_max_epochs(&mut self, max_epochs: usize) {
        self.config.max_epochs = max_epochs;
    }

    /// Offsets and normals of the gyroplane layer, each `m × d`.
    pub fn gyroplanes(&self) -> (&[f64], &[f64]) {
        (self.store.value(self.offsets), self.store.value(self.normals))
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let expected = self.config.image_shape();
        if x.shape().len() != 4 || x.shape()[1..] != expected[..] {
            return Err(Error::Shape(format!(
                "expected images [B, {}, {}, {}], got {:?}",
                expected[0],
                expected[1],
                expected[2],
                x.shape()
            )));
        }
        if x.batch() == 0 {
            return Err(Error::EmptyInput("empty image batch".into()));
        }
        Ok(())
    }

    /// Raw head output `B × 2d` with running statistics.
    fn head_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        self.encoder.forward_eval(&self.store, x)
    }

    /// Posterior mean and scale per sample, without sampling.
    pub fn posterior_params(&self, x: &Tensor) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let head = self.head_eval(x)?;
        let k = self.config.curvature;
        let d = self.config.latent_dim;
        let mut clamped = 0;
        let out = (0..head.batch())
            .map(|b| {
                let h = head.sample(b);
                let (mu, c) = head_mean(k, &h[..d]);
                clamped += c as usize;
                (mu, head_sigma(&h[d..]))
            })
            .collect();
        if clamped > 0 {
            log::warn!("mean head clamped to the chart for {clamped} samples");
        }
        Ok(out)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Vec<WrappedNormal>> {
        let k = Curvature::new(self.config.curvature)?;
        self.posterior_params(x)?
            .into_iter()
            .map(|(mu, sigma)| {
                let point = ManifoldPoint::new(k, mu)?;
                debug_assert!(point.coords().iter().all(|v| v.is_finite()));
                WrappedNormal::new(point, sigma)
            })
            .collect()
    }

    /// Posterior means as points.
    pub fn encode_means(&self, x: &Tensor) -> Result<Vec<ManifoldPoint>> {
        Ok(self.encode(x)?.into_iter().map(|q| q.mean().clone()).collect())
    }

    fn features(&self, zs: &[f64]) -> Result<Tensor> {
        let d = self.config.latent_dim;
        let m = self.config.gyro_width;
        let (p, a) = self.gyroplanes();
        let f = gyroplane::forward_batch(self.config.curvature, d, zs, p, a);
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite gyroplane features".into()));
        }
        Tensor::new(vec![zs.len() / d, m], f)
    }

    fn decode_flat(&self, zs: &[f64]) -> Result<Tensor> {
        let feats = self.features(zs)?;
        self.decoder.forward_eval(&self.store, &feats)
    }

    /// Decodes latent points into images in `(0, 1)`.
    pub fn decode(&self, zs: &[ManifoldPoint]) -> Result<Tensor> {
        if zs.is_empty() {
            return Err(Error::EmptyInput("no latent points to decode".into()));
        }
        let k = Curvature::new(self.config.curvature)?;
        let mut flat = Vec::with_capacity(zs.len() * self.config.latent_dim);
        for z in zs {
            if z.curvature() != k || z.dim() != self.config.latent_dim {
                return Err(Error::Shape(format!(
                    "latent point of dimension {} at curvature {}, model expects {} at {}",
                    z.dim(),
                    z.curvature().value(),
                    self.config.latent_dim,
                    k.value()
                )));
            }
            flat.extend_from_slice(z.coords());
        }
        self.decode_flat(&flat)
    }

    /// Monte-Carlo β-weighted objective with running statistics.
    pub fn elbo(&self, x: &Tensor, n_mc: usize, rng: &mut SeededRng) -> Result<ElboReport> {
        if n_mc == 0 {
            return Err(Error::Config("elbo needs at least one draw".into()));
        }
        let k = self.config.curvature;
        let d = self.config.latent_dim;
        let params = self.posterior_params(x)?;
        let mut recon = 0.0;
        let mut kl_terms = Vec::with_capacity(params.len() * n_mc);
        for _ in 0..n_mc {
            let mut zs = Vec::with_capacity(params.len() * d);
            for (mu, sigma) in &params {
                let eps = draw_noise(k, sigma, rng)?;
                let (z, v0) = sample_with_noise(k, mu, sigma, &eps);
                kl_terms.push(log_prob_from_noise(k, sigma, &v0) - prior_log_prob_raw(k, self.config.sigma0, &z));
                zs.extend(z);
            }
            let x_hat = self.decode_flat(&zs)?;
            recon += self.config.likelihood.nll(&x_hat, x)?.0;
        }
        let recon = recon / n_mc as f64;
        let (kl, kl_se) = mean_and_standard_error(&kl_terms);
        let beta = self.beta.beta;
        Ok(ElboReport {
            recon,
            kl,
            kl_se,
            beta,
            total: recon + beta * kl,
            epoch: self.epoch,
        })
    }

    /// Decodes posterior means; returns the reconstruction and the
    /// per-pixel squared error.
    pub fn reconstruct(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let params = self.posterior_params(x)?;
        let zs: Vec<f64> = params.into_iter().flat_map(|(mu, _)| mu).collect();
        let x_hat = self.decode_flat(&zs)?;
        let err: Vec<f64> = x_hat.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).collect();
        let err = Tensor::new(x.shape().to_vec(), err)?;
        Ok((x_hat, err))
    }

    /// Loss and parameter gradients for a batch with fixed noise (one
    /// vector of `d` standard normals per sample).
    pub fn loss_and_grads(
        &mut self,
        x: &Tensor,
        eps: &[Vec<f64>],
        beta: f64,
        mode: Mode,
    ) -> Result<(StepStats, Grads)> {
        if eps.len() != x.batch() {
            return Err(Error::Shape(format!(
                "{} noise vectors for {} samples",
                eps.len(),
                x.batch()
            )));
        }
        let mut next = eps.iter();
        self.loss_and_grads_with(x, beta, mode, &mut |_| Ok(next.next().cloned().unwrap_or_default()))
    }

    /// As [`Self::loss_and_grads`], with noise produced per sample from the
    /// sample's posterior scale.
    fn loss_and_grads_with(
        &mut self,
        x: &Tensor,
        beta: f64,
        mode: Mode,
        noise: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<(StepStats, Grads)> {
        self.check_images(x)?;
        let batch = x.batch();
        let k = self.config.curvature;
        let d = self.config.latent_dim;
        let sigma0 = self.config.sigma0;
        let (head, mut enc_tape) = self.encoder.forward(&mut self.store, x, mode)?;

        struct Latent {
            tape: Tape,
            head: Vec<usize>,
            z: Vec<usize>,
            kl: usize,
        }
        let mut latents = Vec::with_capacity(batch);
        let mut zs = Vec::with_capacity(batch * d);
        let mut kl_sum = 0.0;
        let mut clamped = 0;
        for b in 0..batch {
            let sigma = head_sigma(&head.sample(b)[d..]);
            let eps = noise(&sigma)?;
            let tape = Tape::new();
            let (head_idx, z_idx, kl_idx) = {
                let h = tape.vars(head.sample(b));
                let draw = latent_draw(k, &h, &eps, sigma0);
                zs.extend(draw.z.iter().map(|v| v.value()));
                kl_sum += draw.kl.value();
                clamped += draw.clamped as usize;
                (
                    h.iter().map(|v| v.index()).collect(),
                    draw.z.iter().map(|v| v.index()).collect(),
                    draw.kl.index(),
                )
            };
            latents.push(Latent {
                tape,
                head: head_idx,
                z: z_idx,
                kl: kl_idx,
            });
        }
        if clamped > 0 {
            log::warn!("mean head clamped to the chart for {clamped} samples");
        }
        if !zs.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite latent sample".into()));
        }
        let feats = self.features(&zs)?;
        let (x_hat, mut dec_tape) = self.decoder.forward(&mut self.store, &feats, mode)?;
        let (recon, g_xhat) = self.config.likelihood.nll(&x_hat, x)?;
        let kl = kl_sum / batch as f64;

        let mut grads = self.store.zero_grads();
        let g_feats = self.decoder.backward(&self.store, &mut dec_tape, &g_xhat, &mut grads)?;
        let mut g_off = std::mem::take(&mut grads.0[self.offsets]);
        let mut g_nrm = std::mem::take(&mut grads.0[self.normals]);
        let (p, a) = self.gyroplanes();
        let g_z = gyroplane::backward_batch(k, d, &zs, p, a, g_feats.data(), &mut g_off, &mut g_nrm);
        grads.0[self.offsets] = g_off;
        grads.0[self.normals] = g_nrm;

        let kl_seed = beta / batch as f64;
        let mut g_head = Vec::with_capacity(batch * 2 * d);
        for (b, lat) in latents.iter().enumerate() {
            let mut seeds: Vec<(usize, f64)> = lat.z.iter().zip(&g_z[b * d..(b + 1) * d]).map(|(&i, &g)| (i, g)).collect();
            seeds.push((lat.kl, kl_seed));
            let adj = lat.tape.backward(&seeds);
            g_head.extend(lat.head.iter().map(|&i| adj[i]));
        }
        let g_head = Tensor::new(vec![batch, 2 * d], g_head)?;
        self.encoder.backward(&self.store, &mut enc_tape, &g_head, &mut grads)?;
        Ok((
            StepStats {
                recon,
                kl,
                loss: recon + beta * kl,
            },
            grads,
        ))
    }

    /// Total loss at fixed noise, for gradient checks.
    pub fn loss_at(&mut self, x: &Tensor, eps: &[Vec<f64>], beta: f64) -> Result<f64> {
        Ok(self.loss_and_grads(x, eps, beta, Mode::Eval)?.0.loss)
    }

    /// One optimizer step on a batch with fresh noise.
    pub fn train_step(&mut self, x: &Tensor, rng: &mut SeededRng) -> Result<StepStats> {
        let k = self.config.curvature;
        let beta = self.beta.beta;
        let (stats, grads) =
            self.loss_and_grads_with(x, beta, Mode::Train, &mut |sigma| draw_noise(k, sigma, rng))?;
        if !stats.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", stats.loss)));
        }
        self.optimizer.step(&mut self.store, &grads)?;
        Ok(stats)
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            store: self.store.clone(),
            optimizer: self.optimizer.clone(),
            beta: self.beta,
            epoch: self.epoch,
        }
    }

    fn restore(&mut self, s: Snapshot) {
        self.store = s.store;
        self.optimizer = s.optimizer;
        self.beta = s.beta;
        self.epoch = s.epoch;
    }

    /// Trains until `max_epochs` or early stopping and leaves the model at
    /// its best-validation epoch. Without a validation set the training
    /// objective is used. On a numeric failure the model is reset to the
    /// best state seen so far and the error is returned.
    pub fn fit(&mut self, train: &Tensor, valid: Option<&Tensor>) -> Result<Vec<HistoryRow>> {
        self.check_images(train)?;
        if let Some(v) = valid {
            self.check_images(v)?;
        }
        let n = train.batch();
        let pixels = self.config.pixels() as f64;
        let mut history = Vec::new();
        let mut best = self.snapshot();
        let mut best_val = self.best_val.unwrap_or(f64::INFINITY);
        let mut best_epoch = self.epoch;
        let root = SeededRng::new(self.config.seed);
        while self.epoch < self.config.max_epochs {
            let epoch = self.epoch + 1;
            let mut rng = root.substream(1 + 2 * epoch as u64);
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let (mut recon, mut kl, mut total, mut seen) = (0.0, 0.0, 0.0, 0usize);
            let beta_used = self.beta.beta;
            for chunk in order.chunks(self.config.batch_size) {
                if chunk.len() < 2 && n >= 2 {
                    continue;
                }
                let xb = train.select(chunk);
                let stats = match self.train_step(&xb, &mut rng) {
                    Ok(s) => s,
                    Err(e @ Error::Numeric(_)) => {
                        self.restore(best);
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                let w = chunk.len() as f64;
                recon += stats.recon * w;
                kl += stats.kl * w;
                total += stats.loss * w;
                seen += chunk.len();
            }
            let seen = seen.max(1) as f64;
            let (recon, kl, total) = (recon / seen, kl / seen, total / seen);
            self.epoch = epoch;
            self.beta.update(recon / pixels);
            let val_total = match valid {
                Some(v) => {
                    let mut vrng = root.substream(2 + 2 * epoch as u64);
                    let mut report = self.elbo(v, self.config.n_mc_eval, &mut vrng)?;
                    report.total = report.recon + beta_used * report.kl;
                    report.total
                }
                None => total,
            };
            history.push(HistoryRow {
                epoch,
                recon,
                kl,
                beta: beta_used,
                total,
                val_total,
            });
            log::info!(
                "epoch {epoch}: recon {recon:.4} kl {kl:.4} beta {beta_used:.3e} total {total:.4} val {val_total:.4}"
            );
            if !val_total.is_finite() {
                self.restore(best);
                return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
            }
            if val_total < best_val {
                best_val = val_total;
                best_epoch = epoch;
                self.best_val = Some(best_val);
                best = self.snapshot();
            } else if epoch >= self.config.warmup_epochs && epoch - best_epoch >= self.config.lookahead_epochs {
                log::info!("early stop at epoch {epoch}; best epoch {best_epoch}");
                break;
            }
        }
        self.restore(best);
        Ok(history)
    }

    pub fn save(&self, dir: &Path, metrics: serde_json::Value) -> Result<Manifest> {
        let (params, optimizer, blob) = checkpoint::pack(&self.store, Some(&self.optimizer));
        let mut layers = BTreeMap::new();
        layers.insert("encoder".to_string(), self.encoder.specs());
        layers.insert("decoder".to_string(), self.decoder.specs());
        let manifest = Manifest {
            format: String::new(),
            version: 0,
            model: "spvae".into(),
            curvature: self.config.curvature,
            config: to_value(&self.config)?,
            layers,
            params,
            optimizer,
            state: serde_json::json!({
                "beta": to_value(&self.beta)?,
                "epoch": self.epoch,
                "best_val": self.best_val,
            }),
            metrics,
            blob_len: 0,
            blob_sha256: String::new(),
        };
        checkpoint::save(dir, manifest, &blob)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, blob) = checkpoint::load(dir)?;
        if manifest.model != "spvae" {
            return Err(Error::Config(format!("checkpoint holds a {} model", manifest.model)));
        }
        let config: SpVaeConfig = from_value(manifest.config.clone())?;
        let mut model = Self::new(config)?;
        checkpoint::unpack_store(&mut model.store, &manifest.params, &blob)?;
        if let Some(o) = &manifest.optimizer {
            checkpoint::unpack_optimizer(&mut model.optimizer, o, &manifest.params, &blob)?;
        }
        let state = &manifest.state;
        model.beta = from_value(state["beta"].clone())?;
        model.epoch = from_value(state["epoch"].clone())?;
        model.best_val = from_value(state["best_val"].clone())?;
        Ok(model)
    }
}

pub(crate) fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::State(format!("serialisation: {e}")))
}

pub(crate) fn from_value<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Config(format!("checkpoint state: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(k: f64) -> SpVaeConfig {
        SpVaeConfig {
            curvature: k,
            latent_dim: 2,
            hidden: 0,
            channels: vec![],
            gyro_width: 5,
            image_size: 4,
            batch_size: 8,
            lr: 1e-2,
            n_mc_eval: 4,
            seed: 3,
            ..SpVaeConfig::default()
        }
    }

    fn images(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        let data = (0..n * size * size).map(|_| rng.range(0.05, 0.95)).collect();
        Tensor::new(vec![n, 1, size, size], data).unwrap()
    }

    #[test]
    fn beta_schedule_responds_to_the_sign_of_the_gap() {
        let mut s = BetaSchedule::new(0.01, 2.0, 0.5);
        assert_eq!(s.update(1.0), 0.01);
        assert!(!s.active);
        assert_eq!(s.update(0.25), 0.01);
        assert!(s.active);
        assert!(s.update(0.3) > 0.01);
        let b = s.beta;
        assert!(s.update(0.2) < b);
        let mut hi = BetaSchedule::new(1.0, 1e3, 0.1);
        hi.update(0.0);
        hi.update(10.0);
        assert_eq!(hi.beta, BETA_MAX);
    }

    #[test]
    fn zero_heads_give_origin_and_constant_sigma() {
        let mut model = SpVaeModel::new(micro(-1.0)).unwrap();
        for p in model.store.iter_mut() {
            if p.name.starts_with("encoder") {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let q = model.encode(&images(3, 4, 1)).unwrap();
        for post in q {
            assert!(post.mean().is_origin());
            let s0 = 2f64.ln() + SIGMA_FLOOR;
            assert!(post.sigma().iter().all(|s| (s - s0).abs() < 1e-15));
        }
    }

    #[test]
    fn large_heads_are_clamped_into_the_chart() {
        for k in [1.0, -1.0] {
            let (mu, clamped) = head_mean(k, &[100.0, 0.0]);
            assert!(clamped);
            assert!(ManifoldPoint::new(Curvature::new(k).unwrap(), mu).is_ok());
        }
    }

    #[test]
    fn decoding_is_deterministic_and_image_shaped() {
        let model = SpVaeModel::new(micro(1.0)).unwrap();
        let k = Curvature::new(1.0).unwrap();
        let z = vec![ManifoldPoint::new(k, vec![0.3, -0.4]).unwrap()];
        let a = model.decode(&z).unwrap();
        assert_eq!(a.shape(), &[1, 1, 4, 4]);
        assert_eq!(a, model.decode(&z).unwrap());
        assert!(a.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn origin_with_zero_offsets_decodes_the_bias_image() {
        let mut model = SpVaeModel::new(micro(-1.0)).unwrap();
        let off = model.offsets;
        model.store.get_mut(off).value.iter_mut().for_each(|v| *v = 0.0);
        let origin = ManifoldPoint::origin(Curvature::new(-1.0).unwrap(), 2);
        let feats = model.features(origin.coords()).unwrap();
        assert!(feats.data().iter().all(|f| *f == 0.0));
        let img = model.decode(&[origin]).unwrap();
        let bias_id = model.store.find("decoder.0.bias").unwrap();
        for (p, b) in img.data().iter().zip(model.store.value(bias_id)) {
            assert!((p - crate::nn::layers::sigmoid(*b)).abs() < 1e-15);
        }
    }

    #[test]
    fn elbo_decomposes_and_is_finite() {
        for k in [-1.0, 0.0, 1.0] {
            let model = SpVaeModel::new(micro(k)).unwrap();
            let r = model.elbo(&images(6, 4, 2), 3, &mut SeededRng::new(1)).unwrap();
            assert!(r.total.is_finite());
            assert!((r.total - (r.recon + r.beta * r.kl)).abs() <= 1e-12 * r.total.abs().max(1.0));
        }
    }

    #[test]
    fn zero_beta_is_the_autoencoder_loss() {
        let mut model = SpVaeModel::new(micro(-1.0)).unwrap();
        let x = images(4, 4, 5);
        let eps = vec![vec![0.3, -0.2]; 4];
        let (s, _) = model.loss_and_grads(&x, &eps, 0.0, Mode::Eval).unwrap();
        assert_eq!(s.loss, s.recon);
    }

    #[test]
    fn gradients_match_finite_differences_on_a_micro_model() {
        for k in [-1.0, 0.0, 0.7] {
            let mut model = SpVaeModel::new(micro(k)).unwrap();
            let x = images(3, 4, 9);
            let mut rng = SeededRng::new(4);
            let eps: Vec<Vec<f64>> = (0..3).map(|_| rng.normals(2)).collect();
            let beta = 0.7;
            let (_, g) = model.loss_and_grads(&x, &eps, beta, Mode::Eval).unwrap();
            for id in 0..model.store.len() {
                let n = model.store.get(id).value.len();
                for i in (0..n).step_by(n.div_ceil(6).max(1)) {
                    let h = 1e-6;
                    let orig = model.store.get(id).value[i];
                    model.store.get_mut(id).value[i] = orig + h;
                    let up = model.loss_at(&x, &eps, beta).unwrap();
                    model.store.get_mut(id).value[i] = orig - h;
                    let dn = model.loss_at(&x, &eps, beta).unwrap();
                    model.store.get_mut(id).value[i] = orig;
                    let fd = (up - dn) / (2.0 * h);
                    let an = g.get(id)[i];
                    let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
                    assert!(err < 1e-5, "k={k} {} [{i}]: {an} vs {fd}", model.store.get(id).name);
                }
            }
        }
    }

    #[test]
    fn short_run_is_finite_and_reproducible() {
        let x = images(16, 4, 11);
        let run = || {
            let mut m = SpVaeModel::new(SpVaeConfig { max_epochs: 2, ..micro(-1.0) }).unwrap();
            let h = m.fit(&x, Some(&x.select(&[0, 1, 2, 3]))).unwrap();
            (h, m.store.clone())
        };
        let (h1, s1) = run();
        let (h2, s2) = run();
        assert_eq!(h1, h2);
        assert_eq!(s1, s2);
        assert!(h1.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn reconstruction_error_is_squared_difference() {
        let model = SpVaeModel::new(micro(0.0)).unwrap();
        let x = images(2, 4, 12);
        let (x_hat, err) = model.reconstruct(&x).unwrap();
        for ((a, b), e) in x_hat.data().iter().zip(x.data()).zip(err.data()) {
            assert_eq!(*e, (a - b).powi(2));
        }
        assert_eq!(model.reconstruct(&x).unwrap().1, err);
    }

    #[test]
    fn wrong_image_shape_is_a_shape_error() {
        let model = SpVaeModel::new(micro(0.0)).unwrap();
        assert!(matches!(model.reconstruct(&images(1, 8, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SpVaeModel::new(SpVaeConfig { latent_dim: 0, ..micro(0.0) }).is_err());
        assert!(SpVaeModel::new(SpVaeConfig { kappa: 0.0, ..micro(0.0) }).is_err());
        assert!(SpVaeModel::new(SpVaeConfig { image_size: 30, ..SpVaeConfig::default() }).is_err());
    }

    #[test]
    fn checkpoint_round_trip_keeps_schedule_state() {
        let x = images(8, 4, 13);
        let mut m = SpVaeModel::new(SpVaeConfig { max_epochs: 1, ..micro(1.0) }).unwrap();
        m.fit(&x, None).unwrap();
        m.beta.active = true;
        m.beta.beta = 0.123;
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), serde_json::Value::Null).unwrap();
        let back = SpVaeModel::load(dir.path()).unwrap();
        assert_eq!(back.beta, m.beta);
        assert_eq!(back.epoch, 1);
        assert_eq!(back.store, m.store);
        assert_eq!(back.optimizer, m.optimizer);
    }
}
