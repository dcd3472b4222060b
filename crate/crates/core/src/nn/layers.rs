//! Layer specifications and their numeric kernels.
//!
//! Activations are `[batch, ...]` row-major; images are `[batch, C, H, W]`.
//! Convolutions are lowered to matrix products through im2col, with the
//! transposed convolution implemented as the adjoint of a convolution.

use crate::error::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        bias: bool,
    },
    /// Normalises each channel (dim 1) over the batch and spatial axes.
    BatchNorm {
        features: usize,
        momentum: f64,
        eps: f64,
    },
    LeakyRelu {
        slope: f64,
    },
    Sigmoid,
    Flatten,
    /// Per-sample target shape.
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn dense(input: usize, output: usize) -> Self {
        LayerSpec::Dense {
            input,
            output,
            bias: true,
        }
    }

    /// 3×3, stride 2, padding 1: halves the spatial size.
    pub fn conv_down(in_channels: usize, out_channels: usize, bias: bool) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 2,
            padding: 1,
            bias,
        }
    }

    /// 3×3, stride 2, padding 1, output padding 1: doubles the spatial size.
    pub fn conv_up(in_channels: usize, out_channels: usize, bias: bool) -> Self {
        LayerSpec::ConvTranspose2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 2,
            padding: 1,
            output_padding: 1,
            bias,
        }
    }

    pub fn batch_norm(features: usize) -> Self {
        LayerSpec::BatchNorm {
            features,
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn leaky_relu() -> Self {
        LayerSpec::LeakyRelu { slope: 0.01 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::ConvTranspose2d { .. } => "conv_transpose2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let numel: usize = input.iter().product();
        match self {
            LayerSpec::Dense {
                input: i, output, ..
            } => {
                if input.len() != 1 || input[0] != *i {
                    return Err(format!("dense expects [{i}], got {input:?}"));
                }
                Ok(vec![*output])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                check_kernel(*kernel, *stride)?;
                let [c, h, w] = image_shape(input, *in_channels)?;
                let _ = c;
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(format!(
                        "conv2d kernel {kernel} larger than padded input {input:?}"
                    ));
                }
                Ok(vec![
                    *out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
                ..
            } => {
                check_kernel(*kernel, *stride)?;
                if output_padding >= stride {
                    return Err("output padding must be smaller than the stride".into());
                }
                let [_, h, w] = image_shape(input, *in_channels)?;
                let grow = |n: usize| {
                    ((n - 1) * stride + kernel + output_padding).checked_sub(2 * padding)
                };
                match (grow(h), grow(w)) {
                    (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(vec![*out_channels, ho, wo]),
                    _ => Err(format!(
                        "conv_transpose2d produces an empty output from {input:?}"
                    )),
                }
            }
            LayerSpec::BatchNorm { features, .. } => {
                if input.is_empty() || input[0] != *features {
                    return Err(format!(
                        "batch_norm over {features} features, got {input:?}"
                    ));
                }
                Ok(input.to_vec())
            }
            LayerSpec::LeakyRelu { .. } | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![numel]),
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != numel {
                    return Err(format!("cannot reshape {input:?} into {shape:?}"));
                }
                Ok(shape.clone())
            }
        }
    }

    /// `(role, shape)` of each parameter the layer owns, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(ParamSlot, Vec<usize>)> {
        match self {
            LayerSpec::Dense {
                input,
                output,
                bias,
            } => {
                let mut v = vec![(ParamSlot::Weight, vec![*output, *input])];
                if *bias {
                    v.push((ParamSlot::Bias, vec![*output]));
                }
                v
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![(
                    ParamSlot::Weight,
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                )];
                if *bias {
                    v.push((ParamSlot::Bias, vec![*out_channels]));
                }
                v
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![(
                    ParamSlot::Weight,
                    vec![*in_channels, *out_channels, *kernel, *kernel],
                )];
                if *bias {
                    v.push((ParamSlot::Bias, vec![*out_channels]));
                }
                v
            }
            LayerSpec::BatchNorm { features, .. } => vec![
                (ParamSlot::Gamma, vec![*features]),
                (ParamSlot::Beta, vec![*features]),
                (ParamSlot::RunningMean, vec![*features]),
                (ParamSlot::RunningVar, vec![*features]),
            ],
            _ => Vec::new(),
        }
    }

    /// Fan-in used for weight initialisation.
    pub fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Dense { input, .. } => *input,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerSpec::ConvTranspose2d {
                in_channels,
                kernel,
                stride,
                ..
            } => (in_channels * kernel * kernel / (stride * stride)).max(1),
            _ => 1,
        }
    }
}

fn check_kernel(kernel: usize, stride: usize) -> std::result::Result<(), String> {
    if kernel % 2 == 0 || stride == 0 {
        return Err(format!(
            "kernel {kernel} must be odd and stride {stride} positive"
        ));
    }
    Ok(())
}

fn image_shape(input: &[usize], channels: usize) -> std::result::Result<[usize; 3], String> {
    match input {
        [c, h, w] if *c == channels => Ok([*c, *h, *w]),
        _ => Err(format!("expected [{channels}, H, W], got {input:?}")),
    }
}

/// Role of a parameter within its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSlot {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamSlot {
    pub fn name(self) -> &'static str {
        match self {
            ParamSlot::Weight => "weight",
            ParamSlot::Bias => "bias",
            ParamSlot::Gamma => "gamma",
            ParamSlot::Beta => "beta",
            ParamSlot::RunningMean => "running_mean",
            ParamSlot::RunningVar => "running_var",
        }
    }

    /// Buffers are state, not trainable parameters.
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamSlot::RunningMean | ParamSlot::RunningVar)
    }
}

/// `C[m×n] = op(A) · op(B) + beta · C`, where `op(A)` is `m×k` and `op(B)`
/// is `k×n`; `ta`/`tb` select the transposed storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the row-major (or transposed)
    // layouts of slices whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a convolution from `[C, H, W]` to `[_, Ho, Wo]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Input index read by output position `(oy, ox)` for tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

/// Unfolds a `[B, C, H, W]` batch into `[C·K·K, B·Ho·Wo]` columns.
pub fn im2col(x: &[f64], batch: usize, g: &ConvGeometry) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let ncols = batch * plane;
    let mut cols = vec![0.0; g.rows() * ncols];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let src = &x[(b * g.channels + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        for ox in 0..g.wo {
                            if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                                dst[b * plane + oy * g.wo + ox] = src[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, summing overlapping taps.
pub fn col2im(cols: &[f64], batch: usize, g: &ConvGeometry) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let ncols = batch * plane;
    let mut x = vec![0.0; batch * g.channels * g.h * g.w];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let dst = &mut x[(b * g.channels + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        for ox in 0..g.wo {
                            if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                                dst[iy * g.w + ix] += src[b * plane + oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[B, C, P] -> [C, B·P]`.
pub fn batch_to_channel_major(x: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[c * batch * plane + b * plane..][..plane]
                .copy_from_slice(&x[(b * channels + c) * plane..][..plane]);
        }
    }
    out
}

/// `[C, B·P] -> [B, C, P]`.
pub fn channel_to_batch_major(x: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(b * channels + c) * plane..][..plane]
                .copy_from_slice(&x[c * batch * plane + b * plane..][..plane]);
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn shape_error(index: usize, spec: &LayerSpec, msg: impl std::fmt::Display) -> Error {
    Error::Shape(format!("layer {index} ({}): {msg}", spec.name()))
}
