//! Parameter storage, sequential networks and their gradient tapes.

use super::layers::{
    batch_to_channel_major, channel_to_batch_major, col2im, gemm, im2col, shape_error, sigmoid,
    ConvGeometry, LayerSpec, ParamSlot,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};

/// Geometry a parameter lives on. Manifold parameters are stored as rows of
/// points (`shape = [n, d]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParamKind {
    Euclidean,
    Manifold { curvature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub slot: ParamSlot,
    pub value: Vec<f64>,
}

impl Param {
    pub fn trainable(&self) -> bool {
        !self.slot.is_buffer()
    }
}

/// All parameters and buffers of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        kind: ParamKind,
        slot: ParamSlot,
        value: Vec<f64>,
    ) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            kind,
            slot,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param {
        &mut self.params[id]
    }

    pub fn value(&self, id: usize) -> &[f64] {
        &self.params[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Drops every parameter registered after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.params.truncate(len);
    }

    /// Total number of stored scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zeroed gradient buffers shaped like the store.
    pub fn zero_grads(&self) -> Grads {
        Grads(
            self.params
                .iter()
                .map(|p| vec![0.0; p.value.len()])
                .collect(),
        )
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn get(&self, id: usize) -> &[f64] {
        &self.0[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.0[id]
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.0.iter_mut().flatten() {
            *v *= s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-statistic updates, recorded tape.
    Train,
    /// Running statistics; the tape is still recorded so gradients can flow.
    Eval,
}

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    params: Vec<usize>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

/// A chain of layers with parameters registered in a shared store.
#[derive(Debug, Clone)]
pub struct Network {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

#[derive(Debug)]
enum Cache {
    Dense {
        x: Vec<f64>,
    },
    Conv {
        cols: Vec<f64>,
    },
    ConvT {
        xm: Vec<f64>,
    },
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: Vec<f64>,
    },
    Sigmoid {
        y: Vec<f64>,
    },
    Shape,
}

/// Per-layer caches recorded by a forward pass, consumed by one backward.
#[derive(Debug)]
pub struct GradientTape {
    batch: usize,
    caches: Vec<Cache>,
    consumed: bool,
}

impl GradientTape {
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

impl Network {
    /// Validates the shape chain and registers freshly initialised
    /// parameters named `{name}.{layer}.{slot}`.
    pub fn build(
        name: &str,
        input_shape: &[usize],
        specs: Vec<LayerSpec>,
        store: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let out = spec
                .output_shape(&shape)
                .map_err(|m| shape_error(i, &spec, m))?;
            let std = (2.0 / spec.fan_in() as f64).sqrt();
            let mut params = Vec::new();
            for (slot, pshape) in spec.parameter_shapes() {
                let n: usize = pshape.iter().product();
                let value = match slot {
                    ParamSlot::Weight => (0..n).map(|_| rng.normal() * std).collect(),
                    ParamSlot::Gamma | ParamSlot::RunningVar => vec![1.0; n],
                    _ => vec![0.0; n],
                };
                params.push(store.add(
                    format!("{name}.{i}.{}", slot.name()),
                    pshape,
                    ParamKind::Euclidean,
                    slot,
                    value,
                ));
            }
            layers.push(Layer {
                spec,
                params,
                in_shape: shape,
                out_shape: out.clone(),
            });
            shape = out;
        }
        Ok(Self {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map_or(&self.input_shape, |l| &l.out_shape)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Store ids of every parameter the network owns.
    pub fn param_ids(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().copied())
            .collect()
    }

    pub fn forward(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, GradientTape)> {
        let mut updates = Vec::new();
        let out = self.run(store, x, mode, &mut updates)?;
        for (id, ch, value) in updates {
            store.get_mut(id).value[ch] = value;
        }
        Ok(out)
    }

    /// Forward with running statistics; the store is left untouched.
    pub fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(store, x, Mode::Eval, &mut Vec::new())?.0)
    }

    fn run(
        &self,
        store: &ParamStore,
        x: &Tensor,
        mode: Mode,
        updates: &mut Vec<(usize, usize, f64)>,
    ) -> Result<(Tensor, GradientTape)> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "{}: expected [B, {:?}], got {:?}",
                self.name,
                self.input_shape,
                x.shape()
            )));
        }
        let batch = x.batch();
        let mut data = x.data().to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = forward_layer(layer, store, data, batch, mode, updates);
            data = out;
            caches.push(cache);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.output_shape());
        Ok((
            Tensor::new(shape, data)?,
            GradientTape {
                batch,
                caches,
                consumed: false,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient. A tape can be consumed only once.
    pub fn backward(
        &self,
        store: &ParamStore,
        tape: &mut GradientTape,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        if tape.consumed {
            return Err(Error::State(format!(
                "{}: backward called twice on the same forward pass",
                self.name
            )));
        }
        let batch = tape.batch;
        let mut expected = vec![batch];
        expected.extend_from_slice(self.output_shape());
        if grad_out.shape() != expected.as_slice() {
            return Err(Error::Shape(format!(
                "{}: output gradient {:?}, expected {expected:?}",
                self.name,
                grad_out.shape()
            )));
        }
        tape.consumed = true;
        let mut g = grad_out.data().to_vec();
        for (layer, cache) in self.layers.iter().zip(tape.caches.iter_mut()).rev() {
            g = backward_layer(layer, store, cache, g, batch, grads);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.input_shape);
        Tensor::new(shape, g)
    }
}

fn forward_layer(
    layer: &Layer,
    store: &ParamStore,
    x: Vec<f64>,
    batch: usize,
    mode: Mode,
    updates: &mut Vec<(usize, usize, f64)>,
) -> (Vec<f64>, Cache) {
    match &layer.spec {
        LayerSpec::Dense {
            input,
            output,
            bias,
        } => {
            let mut y = vec![0.0; batch * output];
            if *bias {
                let b = store.value(layer.params[1]);
                for row in y.chunks_mut(*output) {
                    row.copy_from_slice(b);
                }
            }
            let w = store.value(layer.params[0]);
            gemm(
                batch,
                *input,
                *output,
                &x,
                false,
                w,
                true,
                if *bias { 1.0 } else { 0.0 },
                &mut y,
            );
            (y, Cache::Dense { x })
        }
        LayerSpec::Conv2d {
            out_channels, bias, ..
        } => {
            let g = conv_geometry(layer);
            let cols = im2col(&x, batch, &g);
            let plane = g.ho * g.wo;
            let mut ym = vec![0.0; out_channels * batch * plane];
            gemm(
                *out_channels,
                g.rows(),
                batch * plane,
                store.value(layer.params[0]),
                false,
                &cols,
                false,
                0.0,
                &mut ym,
            );
            let mut y = channel_to_batch_major(&ym, batch, *out_channels, plane);
            if *bias {
                add_channel_bias(&mut y, store.value(layer.params[1]), plane);
            }
            (y, Cache::Conv { cols })
        }
        LayerSpec::ConvTranspose2d {
            in_channels,
            out_channels,
            bias,
            ..
        } => {
            let g = conv_transpose_geometry(layer);
            let in_plane = g.ho * g.wo;
            let xm = batch_to_channel_major(&x, batch, *in_channels, in_plane);
            let mut cols = vec![0.0; g.rows() * batch * in_plane];
            gemm(
                g.rows(),
                *in_channels,
                batch * in_plane,
                store.value(layer.params[0]),
                true,
                &xm,
                false,
                0.0,
                &mut cols,
            );
            let mut y = col2im(&cols, batch, &g);
            if *bias {
                add_channel_bias(&mut y, store.value(layer.params[1]), g.h * g.w);
            }
            let _ = out_channels;
            (y, Cache::ConvT { xm })
        }
        LayerSpec::BatchNorm {
            features,
            momentum,
            eps,
        } => {
            let c = *features;
            let plane = layer.in_shape[1..].iter().product::<usize>();
            let count = (batch * plane) as f64;
            let batch_stats = mode == Mode::Train;
            let (mean, var) = if batch_stats {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..batch {
                    for ch in 0..c {
                        mean[ch] += x[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..batch {
                    for ch in 0..c {
                        var[ch] += x[(b * c + ch) * plane..][..plane]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let unbias = if count > 1.0 {
                    count / (count - 1.0)
                } else {
                    1.0
                };
                let rm = store.value(layer.params[2]);
                let rv = store.value(layer.params[3]);
                for ch in 0..c {
                    updates.push((
                        layer.params[2],
                        ch,
                        momentum * rm[ch] + (1.0 - momentum) * mean[ch],
                    ));
                    updates.push((
                        layer.params[3],
                        ch,
                        momentum * rv[ch] + (1.0 - momentum) * var[ch] * unbias,
                    ));
                }
                (mean, var)
            } else {
                (
                    store.value(layer.params[2]).to_vec(),
                    store.value(layer.params[3]).to_vec(),
                )
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let gamma = store.value(layer.params[0]);
            let beta = store.value(layer.params[1]);
            let mut xhat = x;
            let mut y = vec![0.0; xhat.len()];
            for b in 0..batch {
                for ch in 0..c {
                    let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                    for (h, o) in xhat[r.clone()].iter_mut().zip(&mut y[r]) {
                        *h = (*h - mean[ch]) * inv_std[ch];
                        *o = gamma[ch] * *h + beta[ch];
                    }
                }
            }
            (
                y,
                Cache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats,
                },
            )
        }
        LayerSpec::LeakyRelu { slope } => {
            let y = x
                .iter()
                .map(|&v| if v > 0.0 { v } else { slope * v })
                .collect();
            (y, Cache::LeakyRelu { x })
        }
        LayerSpec::Sigmoid => {
            let y: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
            (y.clone(), Cache::Sigmoid { y })
        }
        LayerSpec::Flatten | LayerSpec::Reshape { .. } => (x, Cache::Shape),
    }
}

fn conv_geometry(layer: &Layer) -> ConvGeometry {
    let LayerSpec::Conv2d {
        kernel,
        stride,
        padding,
        ..
    } = layer.spec
    else {
        unreachable!()
    };
    ConvGeometry {
        channels: layer.in_shape[0],
        h: layer.in_shape[1],
        w: layer.in_shape[2],
        kernel,
        stride,
        padding,
        ho: layer.out_shape[1],
        wo: layer.out_shape[2],
    }
}

/// The transposed convolution is the adjoint of a convolution from its
/// output shape to its input shape.
fn conv_transpose_geometry(layer: &Layer) -> ConvGeometry {
    let LayerSpec::ConvTranspose2d {
        kernel,
        stride,
        padding,
        ..
    } = layer.spec
    else {
        unreachable!()
    };
    ConvGeometry {
        channels: layer.out_shape[0],
        h: layer.out_shape[1],
        w: layer.out_shape[2],
        kernel,
        stride,
        padding,
        ho: layer.in_shape[1],
        wo: layer.in_shape[2],
    }
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], plane: usize) {
    let c = bias.len();
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_bias_grad(g: &[f64], channels: usize, plane: usize, out: &mut [f64]) {
    for (i, chunk) in g.chunks(plane).enumerate() {
        out[i % channels] += chunk.iter().sum::<f64>();
    }
}

fn backward_layer(
    layer: &Layer,
    store: &ParamStore,
    cache: &mut Cache,
    g: Vec<f64>,
    batch: usize,
    grads: &mut Grads,
) -> Vec<f64> {
    match (&layer.spec, cache) {
        (
            LayerSpec::Dense {
                input,
                output,
                bias,
            },
            Cache::Dense { x },
        ) => {
            gemm(
                *output,
                batch,
                *input,
                &g,
                true,
                x,
                false,
                1.0,
                grads.get_mut(layer.params[0]),
            );
            if *bias {
                let gb = grads.get_mut(layer.params[1]);
                for row in g.chunks(*output) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
            }
            let mut gx = vec![0.0; batch * input];
            gemm(
                batch,
                *output,
                *input,
                &g,
                false,
                store.value(layer.params[0]),
                false,
                0.0,
                &mut gx,
            );
            gx
        }
        (
            LayerSpec::Conv2d {
                out_channels, bias, ..
            },
            Cache::Conv { cols },
        ) => {
            let geo = conv_geometry(layer);
            let plane = geo.ho * geo.wo;
            if *bias {
                channel_bias_grad(&g, *out_channels, plane, grads.get_mut(layer.params[1]));
            }
            let gm = batch_to_channel_major(&g, batch, *out_channels, plane);
            gemm(
                *out_channels,
                batch * plane,
                geo.rows(),
                &gm,
                false,
                cols,
                true,
                1.0,
                grads.get_mut(layer.params[0]),
            );
            let mut gcols = std::mem::take(cols);
            gemm(
                geo.rows(),
                *out_channels,
                batch * plane,
                store.value(layer.params[0]),
                true,
                &gm,
                false,
                0.0,
                &mut gcols,
            );
            col2im(&gcols, batch, &geo)
        }
        (
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                bias,
                ..
            },
            Cache::ConvT { xm },
        ) => {
            let geo = conv_transpose_geometry(layer);
            let in_plane = geo.ho * geo.wo;
            if *bias {
                channel_bias_grad(
                    &g,
                    *out_channels,
                    geo.h * geo.w,
                    grads.get_mut(layer.params[1]),
                );
            }
            let gcols = im2col(&g, batch, &geo);
            gemm(
                *in_channels,
                batch * in_plane,
                geo.rows(),
                xm,
                false,
                &gcols,
                true,
                1.0,
                grads.get_mut(layer.params[0]),
            );
            let mut gxm = vec![0.0; in_channels * batch * in_plane];
            gemm(
                *in_channels,
                geo.rows(),
                batch * in_plane,
                store.value(layer.params[0]),
                false,
                &gcols,
                false,
                0.0,
                &mut gxm,
            );
            channel_to_batch_major(&gxm, batch, *in_channels, in_plane)
        }
        (
            LayerSpec::BatchNorm { features, .. },
            Cache::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            },
        ) => {
            let c = *features;
            let plane = layer.in_shape[1..].iter().product::<usize>();
            let count = (batch * plane) as f64;
            let gamma = store.value(layer.params[0]);
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for b in 0..batch {
                for ch in 0..c {
                    let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                    for (gv, h) in g[r.clone()].iter().zip(&xhat[r]) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * h;
                    }
                }
            }
            {
                let gg = grads.get_mut(layer.params[0]);
                for ch in 0..c {
                    gg[ch] += sum_gx[ch];
                }
            }
            {
                let gb = grads.get_mut(layer.params[1]);
                for ch in 0..c {
                    gb[ch] += sum_g[ch];
                }
            }
            let mut gx = g;
            for b in 0..batch {
                for ch in 0..c {
                    let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                    let scale = gamma[ch] * inv_std[ch];
                    for (gv, h) in gx[r.clone()].iter_mut().zip(&xhat[r]) {
                        *gv = if *batch_stats {
                            scale * (*gv - sum_g[ch] / count - h * sum_gx[ch] / count)
                        } else {
                            scale * *gv
                        };
                    }
                }
            }
            gx
        }
        (LayerSpec::LeakyRelu { slope }, Cache::LeakyRelu { x }) => g
            .iter()
            .zip(x.iter())
            .map(|(&gv, &xv)| if xv > 0.0 { gv } else { slope * gv })
            .collect(),
        (LayerSpec::Sigmoid, Cache::Sigmoid { y }) => g
            .iter()
            .zip(y.iter())
            .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
            .collect(),
        (LayerSpec::Flatten | LayerSpec::Reshape { .. }, Cache::Shape) => g,
        _ => unreachable!("cache recorded by a different layer kind"),
    }
}
