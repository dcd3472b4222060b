//! One-class Deep SVDD with embeddings on a constant-curvature space.
//!
//! The encoder has no bias terms and no normalisation layers, so it cannot
//! map every input to the center by a constant shift. An autoencoder with a
//! gyroplane-headed decoder pretrains it; the center is then the Karcher mean
//! of the training embeddings and stays fixed while the encoder is tuned to
//! pull embeddings towards it.

use crate::autodiff::{Real, Tape};
use crate::checkpoint::{self, Manifest};
use crate::error::{Error, Result};
use crate::geometry::{karcher_mean_with, ops, Curvature, KarcherOptions, ManifoldPoint};
use crate::gyroplane;
use crate::nn::{
    Adam, AdamConfig, Grads, LayerSpec, Likelihood, Mode, Network, ParamKind, ParamSlot, ParamStore,
    Tensor,
};
use crate::rng::SeededRng;
use crate::spvae::{from_value, head_mean, to_value};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvddConfig {
    pub curvature: f64,
    pub latent_dim: usize,
    pub channels: Vec<usize>,
    pub hidden: usize,
    /// Gyroplanes in the pretraining decoder.
    pub gyro_width: usize,
    pub image_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub lr: f64,
    /// Finetuning learning rate once `lr_drop_epoch` epochs have passed.
    pub lr_after: f64,
    pub lr_drop_epoch: usize,
    pub weight_decay: f64,
    pub percentile: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SvddConfig {
    fn default() -> Self {
        Self {
            curvature: -1.0,
            latent_dim: 2,
            channels: vec![16, 32, 64],
            hidden: 128,
            gyro_width: 32,
            image_size: 32,
            pretrain_epochs: 20,
            finetune_epochs: 20,
            lr: 1e-4,
            lr_after: 1e-5,
            lr_drop_epoch: 250,
            weight_decay: 5e-7,
            percentile: 90.0,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl SvddConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        Curvature::new(self.curvature).map_err(|e| Error::Config(e.to_string()))?;
        if self.latent_dim == 0 || self.gyro_width == 0 || self.batch_size == 0 {
            return bad("latent_dim, gyro_width and batch_size must be positive".into());
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return bad(format!("percentile {} outside (0, 100]", self.percentile));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be nonnegative", self.weight_decay));
        }
        for (name, v) in [("lr", self.lr), ("lr_after", self.lr_after)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let factor = 1usize << self.channels.len();
        if self.image_size == 0 || self.image_size % factor != 0 || self.channels.contains(&0) {
            return bad(format!(
                "image_size {} incompatible with channels {:?}",
                self.image_size, self.channels
            ));
        }
        Ok(())
    }

    fn image_shape(&self) -> Vec<usize> {
        vec![1, self.image_size, self.image_size]
    }

    fn encoder_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut c_in = 1;
        for &c in &self.channels {
            specs.push(LayerSpec::conv_down(c_in, c, false));
            specs.push(LayerSpec::leaky_relu());
            c_in = c;
        }
        specs.push(LayerSpec::Flatten);
        let side = self.image_size >> self.channels.len();
        let mut width = c_in * side * side;
        if self.hidden > 0 {
            specs.push(LayerSpec::Dense {
                input: width,
                output: self.hidden,
                bias: false,
            });
            specs.push(LayerSpec::leaky_relu());
            width = self.hidden;
        }
        specs.push(LayerSpec::Dense {
            input: width,
            output: self.latent_dim,
            bias: false,
        });
        specs
    }

    fn decoder_specs(&self) -> Vec<LayerSpec> {
        let side = self.image_size >> self.channels.len();
        let c_top = self.channels.last().copied().unwrap_or(1);
        let flat = c_top * side * side;
        let mut specs = vec![LayerSpec::leaky_relu()];
        let mut width = self.gyro_width;
        if self.hidden > 0 {
            specs.push(LayerSpec::dense(width, self.hidden));
            specs.push(LayerSpec::leaky_relu());
            width = self.hidden;
        }
        specs.push(LayerSpec::dense(width, flat));
        if self.channels.is_empty() {
            specs.push(LayerSpec::Reshape {
                shape: self.image_shape(),
            });
        } else {
            specs.push(LayerSpec::leaky_relu());
            specs.push(LayerSpec::Reshape {
                shape: vec![c_top, side, side],
            });
            for i in (1..self.channels.len()).rev() {
                specs.push(LayerSpec::conv_up(self.channels[i], self.channels[i - 1], true));
                specs.push(LayerSpec::leaky_relu());
            }
            specs.push(LayerSpec::conv_up(self.channels[0], 1, true));
        }
        specs.push(LayerSpec::Sigmoid);
        specs
    }
}

/// Per-epoch finetuning objective: `distance` is the mean squared geodesic
/// distance to the center, `decay` the weight penalty `λ·Σ‖w‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRow {
    pub epoch: usize,
    pub distance: f64,
    pub decay: f64,
    pub total: f64,
}

/// Nearest-rank percentile: the value at 1-indexed rank `ceil(q/100·N)` of
/// the ascending sort.
pub fn set_radius(scores: &[f64], percentile: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores to take a percentile of".into()));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Config(format!("percentile {percentile} outside (0, 100]")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone)]
pub struct SvddModel {
    config: SvddConfig,
    store: ParamStore,
    encoder: Network,
    center: Option<ManifoldPoint>,
    radius: Option<f64>,
}

impl SvddModel {
    pub fn new(config: SvddConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed).substream(0);
        let mut store = ParamStore::new();
        let encoder = Network::build("encoder", &config.image_shape(), config.encoder_specs(), &mut store, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            center: None,
            radius: None,
        })
    }

    pub fn config(&self) -> &SvddConfig {
        &self.config
    }

    pub fn curvature(&self) -> Curvature {
        Curvature::new(self.config.curvature).expect("validated curvature")
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn center(&self) -> Option<&ManifoldPoint> {
        self.center.as_ref()
    }

    pub fn radius(&self) -> Option<f64> {
        self.radius
    }

    pub fn set_center(&mut self, c: ManifoldPoint) -> Result<()> {
        if c.curvature() != self.curvature() || c.dim() != self.config.latent_dim {
            return Err(Error::Shape("center does not live in the latent space".into()));
        }
        self.center = Some(c);
        Ok(())
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

    /// Embeddings as a flat `B × d` array.
    pub fn embed_flat(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_images(x)?;
        let head = self.encoder.forward_eval(&self.store, x)?;
        let k = self.config.curvature;
        let mut clamped = 0;
        let mut out = Vec::with_capacity(head.len());
        for b in 0..head.batch() {
            let (z, c) = head_mean(k, head.sample(b));
            clamped += c as usize;
            out.extend(z);
        }
        if clamped > 0 {
            log::warn!("embedding head clamped to the chart for {clamped} samples");
        }
        Ok(out)
    }

    pub fn embed(&self, x: &Tensor) -> Result<Vec<ManifoldPoint>> {
        let k = self.curvature();
        self.embed_flat(x)?
            .chunks(self.config.latent_dim)
            .map(|z| Ok(ManifoldPoint::new(k, z.to_vec())?))
            .collect()
    }

    /// Trains the encoder as the front half of an autoencoder. The decoder
    /// is thrown away afterwards. Returns the per-epoch reconstruction loss.
    pub fn pretrain_autoencoder(&mut self, train: &Tensor) -> Result<Vec<f64>> {
        self.check_images(train)?;
        let k = self.config.curvature;
        let d = self.config.latent_dim;
        let m = self.config.gyro_width;
        let keep = self.store.len();
        let mut rng = SeededRng::new(self.config.seed).substream(1);
        let offsets = self.store.add(
            "pretrain.gyro.offsets",
            vec![m, d],
            ParamKind::Manifold { curvature: k },
            ParamSlot::Weight,
            rng.normals(m * d).into_iter().map(|v| 1e-2 * v).collect(),
        );
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let normals = self.store.add(
            "pretrain.gyro.normals",
            vec![m, d],
            ParamKind::Euclidean,
            ParamSlot::Weight,
            rng.normals(m * d).into_iter().map(|v| v * inv_sqrt_d).collect(),
        );
        let decoder = Network::build("pretrain.decoder", &[m], self.config.decoder_specs(), &mut self.store, &mut rng)?;
        let mut opt = Adam::new(
            AdamConfig {
                lr: self.config.lr,
                ..AdamConfig::default()
            },
            &self.store,
        );
        let n = train.batch();
        let mut history = Vec::with_capacity(self.config.pretrain_epochs);
        let result = (|| -> Result<()> {
            for epoch in 0..self.config.pretrain_epochs {
                let mut order: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut order);
                let (mut total, mut seen) = (0.0, 0usize);
                for chunk in order.chunks(self.config.batch_size) {
                    let x = train.select(chunk);
                    let (head, mut enc_tape) = self.encoder.forward(&mut self.store, &x, Mode::Train)?;
                    let mut grads = self.store.zero_grads();
                    // Per-sample tapes through the exp-map head.
                    let mut zs = Vec::with_capacity(chunk.len() * d);
                    let mut tapes = Vec::with_capacity(chunk.len());
                    for b in 0..chunk.len() {
                        let tape = Tape::new();
                        let (h_idx, z_idx) = {
                            let h = tape.vars(head.sample(b));
                            let (z, _) = head_mean(k, &h);
                            zs.extend(z.iter().map(|v| v.value()));
                            (
                                h.iter().map(|v| v.index()).collect::<Vec<_>>(),
                                z.iter().map(|v| v.index()).collect::<Vec<_>>(),
                            )
                        };
                        tapes.push((tape, h_idx, z_idx));
                    }
                    let (p, a) = (self.store.value(offsets), self.store.value(normals));
                    let feats = Tensor::new(vec![chunk.len(), m], gyroplane::forward_batch(k, d, &zs, p, a))?;
                    let (x_hat, mut dec_tape) = decoder.forward(&mut self.store, &feats, Mode::Train)?;
                    let (loss, g_xhat) = Likelihood::Bernoulli.nll(&x_hat, &x)?;
                    if !loss.is_finite() {
                        return Err(Error::Numeric(format!("pretraining loss {loss} at epoch {}", epoch + 1)));
                    }
                    let g_feats = decoder.backward(&self.store, &mut dec_tape, &g_xhat, &mut grads)?;
                    let mut g_off = std::mem::take(&mut grads.0[offsets]);
                    let mut g_nrm = std::mem::take(&mut grads.0[normals]);
                    let (p, a) = (self.store.value(offsets), self.store.value(normals));
                    let g_z = gyroplane::backward_batch(k, d, &zs, p, a, g_feats.data(), &mut g_off, &mut g_nrm);
                    grads.0[offsets] = g_off;
                    grads.0[normals] = g_nrm;
                    let g_head = head_adjoints(&tapes, &g_z, d);
                    let g_head = Tensor::new(vec![chunk.len(), d], g_head)?;
                    self.encoder.backward(&self.store, &mut enc_tape, &g_head, &mut grads)?;
                    opt.step(&mut self.store, &grads)?;
                    total += loss * chunk.len() as f64;
                    seen += chunk.len();
                }
                let mean = total / seen.max(1) as f64;
                log::info!("pretrain epoch {}: recon {mean:.4}", epoch + 1);
                history.push(mean);
            }
            Ok(())
        })();
        self.store.truncate(keep);
        result.map(|_| history)
    }

    /// Center = Karcher mean of the training embeddings (uniform weights).
    pub fn init_center(&mut self, train: &Tensor) -> Result<ManifoldPoint> {
        let points = self.embed(train)?;
        let weights = vec![1.0; points.len()];
        let opts = KarcherOptions {
            max_iter: 1000,
            ..KarcherOptions::default()
        };
        let c = karcher_mean_with(&points, &weights, opts)?;
        self.center = Some(c.clone());
        Ok(c)
    }

    fn decay(&self) -> f64 {
        let sq: f64 = self
            .store
            .iter()
            .filter(|p| p.slot == ParamSlot::Weight)
            .flat_map(|p| p.value.iter())
            .map(|w| w * w)
            .sum();
        self.config.weight_decay * sq
    }

    /// Objective and gradient on one batch: mean squared distance to the
    /// center plus the weight penalty.
    pub fn objective_and_grads(&mut self, x: &Tensor) -> Result<(FinetuneRow, Grads)> {
        self.check_images(x)?;
        let c = self
            .center
            .clone()
            .ok_or_else(|| Error::State("center not initialised".into()))?;
        let k = self.config.curvature;
        let d = self.config.latent_dim;
        let batch = x.batch();
        let (head, mut tape) = self.encoder.forward(&mut self.store, x, Mode::Train)?;
        let mut dist = 0.0;
        let mut g_head = Vec::with_capacity(batch * d);
        for b in 0..batch {
            let t = Tape::new();
            let h = t.vars(head.sample(b));
            let (z, _) = head_mean(k, &h);
            let cv: Vec<_> = c.coords().iter().map(|&v| h[0].lift(v)).collect();
            let dd = ops::distance(k, &z, &cv);
            let sq = dd * dd;
            dist += sq.value();
            let adj = t.backward(&[(sq.index(), 1.0 / batch as f64)]);
            g_head.extend(h.iter().map(|v| adj[v.index()]));
        }
        let mut grads = self.store.zero_grads();
        let g_head = Tensor::new(vec![batch, d], g_head)?;
        self.encoder.backward(&self.store, &mut tape, &g_head, &mut grads)?;
        let lambda = self.config.weight_decay;
        for (id, p) in self.store.iter().enumerate() {
            if p.slot == ParamSlot::Weight {
                for (g, w) in grads.get_mut(id).iter_mut().zip(&p.value) {
                    *g += 2.0 * lambda * w;
                }
            }
        }
        let distance = dist / batch as f64;
        let decay = self.decay();
        Ok((
            FinetuneRow {
                epoch: 0,
                distance,
                decay,
                total: distance + decay,
            },
            grads,
        ))
    }

    /// Tunes the encoder towards the fixed center.
    pub fn finetune(&mut self, train: &Tensor) -> Result<Vec<FinetuneRow>> {
        self.check_images(train)?;
        if self.center.is_none() {
            return Err(Error::State("center not initialised".into()));
        }
        let mut rng = SeededRng::new(self.config.seed).substream(2);
        let mut opt = Adam::new(
            AdamConfig {
                lr: self.config.lr,
                ..AdamConfig::default()
            },
            &self.store,
        );
        let n = train.batch();
        let mut history = Vec::with_capacity(self.config.finetune_epochs);
        for epoch in 1..=self.config.finetune_epochs {
            opt.config.lr = if epoch > self.config.lr_drop_epoch {
                self.config.lr_after
            } else {
                self.config.lr
            };
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let (mut dist, mut seen) = (0.0, 0usize);
            for chunk in order.chunks(self.config.batch_size) {
                let (row, grads) = self.objective_and_grads(&train.select(chunk))?;
                if !row.total.is_finite() {
                    return Err(Error::Numeric(format!("finetuning loss {} at epoch {epoch}", row.total)));
                }
                opt.step(&mut self.store, &grads)?;
                dist += row.distance * chunk.len() as f64;
                seen += chunk.len();
            }
            let distance = dist / seen.max(1) as f64;
            let decay = self.decay();
            log::info!("finetune epoch {epoch}: distance {distance:.5} decay {decay:.3e}");
            history.push(FinetuneRow {
                epoch,
                distance,
                decay,
                total: distance + decay,
            });
        }
        Ok(history)
    }

    /// Geodesic distance of a latent point to the center.
    pub fn score_point(&self, z: &[f64]) -> Result<f64> {
        let c = self
            .center
            .as_ref()
            .ok_or_else(|| Error::State("center not initialised".into()))?;
        Ok(ops::distance(self.config.curvature, z, c.coords()))
    }

    /// Anomaly score per image.
    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        let d = self.config.latent_dim;
        self.embed_flat(x)?.chunks(d).map(|z| self.score_point(z)).collect()
    }

    /// Sets the decision radius from reference scores; returns it.
    pub fn fit_radius(&mut self, scores: &[f64]) -> Result<f64> {
        let r = set_radius(scores, self.config.percentile)?;
        self.radius = Some(r);
        Ok(r)
    }

    /// Pretraining, center initialisation and finetuning in sequence.
    pub fn train(&mut self, train: &Tensor) -> Result<(Vec<f64>, Vec<FinetuneRow>)> {
        let pre = self.pretrain_autoencoder(train)?;
        self.init_center(train)?;
        let fine = self.finetune(train)?;
        Ok((pre, fine))
    }

    pub fn save(&self, dir: &Path, metrics: serde_json::Value) -> Result<Manifest> {
        let (params, _, blob) = checkpoint::pack(&self.store, None);
        let mut layers = BTreeMap::new();
        layers.insert("encoder".to_string(), self.encoder.specs());
        let manifest = Manifest {
            format: String::new(),
            version: 0,
            model: "svdd".into(),
            curvature: self.config.curvature,
            config: to_value(&self.config)?,
            layers,
            params,
            optimizer: None,
            state: serde_json::json!({
                "center": self.center.as_ref().map(|c| c.coords().to_vec()),
                "radius": self.radius,
            }),
            metrics,
            blob_len: 0,
            blob_sha256: String::new(),
        };
        checkpoint::save(dir, manifest, &blob)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, blob) = checkpoint::load(dir)?;
        if manifest.model != "svdd" {
            return Err(Error::Config(format!("checkpoint holds a {} model", manifest.model)));
        }
        let mut model = Self::new(from_value(manifest.config.clone())?)?;
        checkpoint::unpack_store(&mut model.store, &manifest.params, &blob)?;
        let center: Option<Vec<f64>> = from_value(manifest.state["center"].clone())?;
        if let Some(c) = center {
            model.set_center(ManifoldPoint::new(model.curvature(), c)?)?;
        }
        model.radius = from_value(manifest.state["radius"].clone())?;
        Ok(model)
    }
}

fn head_adjoints(tapes: &[(Tape, Vec<usize>, Vec<usize>)], g_z: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(tapes.len() * d);
    for (b, (tape, h, z)) in tapes.iter().enumerate() {
        let seeds: Vec<(usize, f64)> = z.iter().zip(&g_z[b * d..(b + 1) * d]).map(|(&i, &g)| (i, g)).collect();
        let adj = tape.backward(&seeds);
        out.extend(h.iter().map(|&i| adj[i]));
    }
    out
}
