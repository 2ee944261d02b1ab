//! Naive reference kernels and an executable network built from a model.
//!
//! Tensors are dense `f32` arrays with a dimension list. Spatial tensors are
//! `[channels, height, width]`; fully-connected layers flatten. Layer
//! geometry is recovered from the byte sizes in the model file (4 bytes per
//! element), with square feature maps:
//!
//! - conv: output side `sqrt(out / filters)`, padding chosen so the output
//!   side is reached, split evenly with the extra row at the bottom/right;
//! - pool: stride `in_side / out_side`, window `in_side - (out_side - 1) * stride`;
//! - relu, lrn, dropout: shape preserving.
//!
//! Weights are drawn from a generator seeded by the layer name, so every
//! process that builds the same model gets bit-identical weights.

use std::collections::HashMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{BranchyModel, LayerKind, LayerSpec, ModelError};

pub const LRN_K: f32 = 2.0;
pub const LRN_ALPHA: f32 = 1e-4;
pub const LRN_BETA: f32 = 0.75;
pub const LRN_SIZE: usize = 5;
pub const DROPOUT_SCALE: f32 = 2.0;

const BYTES_PER_ELEMENT: u64 = 4;
const WEIGHT_SEED: u64 = 0x005e_ed0f_ed6e;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("layer `{layer}`: {reason}")]
    Shape { layer: String, reason: String },
    #[error("tensor has no elements")]
    Empty,
    #[error("tensor dims {dims:?} describe {expected} elements but data has {got}")]
    DataLength {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn shape_err(layer: &str, reason: impl Into<String>) -> KernelError {
    KernelError::Shape {
        layer: layer.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, KernelError> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(KernelError::DataLength {
                dims,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; n],
        }
    }

    /// Uniform values in `[0, 1)` from a seeded generator.
    pub fn random(dims: Vec<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.gen::<f32>()).collect();
        Tensor { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * BYTES_PER_ELEMENT as usize
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.dims, self.data)
    }
}

pub fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Geometry of a direct convolution over a `[c, h, w]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn weight_len(&self) -> usize {
        self.filters * self.in_channels * self.kernel * self.kernel
    }
}

/// Direct convolution; `weights` is `[filters, in_channels, k, k]`.
/// Positions outside the input read as zero.
pub fn conv2d(input: &[f32], weights: &[f32], bias: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let k = g.kernel;
    let mut out = vec![0.0f32; g.filters * g.out_h * g.out_w];
    for f in 0..g.filters {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = bias[f];
                for c in 0..g.in_channels {
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            let x = input[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                            let w = weights[((f * g.in_channels + c) * k + ky) * k + kx];
                            acc += x * w;
                        }
                    }
                }
                out[(f * g.out_h + oy) * g.out_w + ox] = acc;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Window max; windows are clipped at the input border.
pub fn max_pool(input: &[f32], g: &PoolGeometry) -> Vec<f32> {
    let mut out = vec![0.0f32; g.channels * g.out_h * g.out_w];
    for c in 0..g.channels {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut m = f32::NEG_INFINITY;
                for iy in oy * g.stride..(oy * g.stride + g.window).min(g.in_h) {
                    for ix in ox * g.stride..(ox * g.stride + g.window).min(g.in_w) {
                        m = m.max(input[(c * g.in_h + iy) * g.in_w + ix]);
                    }
                }
                out[(c * g.out_h + oy) * g.out_w + ox] = m;
            }
        }
    }
    out
}

/// Cross-channel LRN: `x / (k + alpha * Σ x²)^beta` over the
/// [`LRN_SIZE`] channels centred on each element.
pub fn lrn(input: &[f32], channels: usize, plane: usize) -> Vec<f32> {
    let half = LRN_SIZE / 2;
    let mut out = vec![0.0f32; input.len()];
    for c in 0..channels {
        let lo = c.saturating_sub(half);
        let hi = (c + half).min(channels - 1);
        for i in 0..plane {
            let mut sq = 0.0f32;
            for n in lo..=hi {
                let v = input[n * plane + i];
                sq += v * v;
            }
            out[c * plane + i] = input[c * plane + i] / (LRN_K + LRN_ALPHA * sq).powf(LRN_BETA);
        }
    }
    out
}

fn dropout_keeps(i: usize) -> bool {
    // splitmix64 finaliser, low bit
    let mut z = (i as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) & 1 == 0
}

/// Multiplies by a fixed keep mask scaled by [`DROPOUT_SCALE`].
pub fn dropout(input: &[f32]) -> Vec<f32> {
    input
        .iter()
        .enumerate()
        .map(|(i, &v)| if dropout_keeps(i) { v * DROPOUT_SCALE } else { 0.0 })
        .collect()
}

/// `weights` is `[outputs, inputs]` row-major.
pub fn dense(input: &[f32], weights: &[f32], bias: &[f32]) -> Vec<f32> {
    let n = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &weights[o * n..(o + 1) * n];
            row.iter().zip(input).fold(b, |acc, (w, x)| acc + w * x)
        })
        .collect()
}

/// Argmax class and its softmax probability.
pub fn classify(logits: &[f32]) -> (usize, f32) {
    let (class, &max) =
        logits.iter().enumerate().fold(
            (0, &f32::NEG_INFINITY),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        );
    let denom: f32 = logits.iter().map(|&v| (v - max).exp()).sum();
    (class, 1.0 / denom)
}

#[derive(Debug, Clone)]
enum Op {
    Conv {
        geometry: ConvGeometry,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    Relu,
    Pool(PoolGeometry),
    Lrn,
    Dropout,
    Dense {
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
}

/// One executable layer with fixed input and output dims.
#[derive(Debug, Clone)]
pub struct LayerOp {
    name: String,
    op: Op,
    in_dims: Vec<usize>,
    out_dims: Vec<usize>,
}

fn exact_sqrt(v: usize) -> Option<usize> {
    let r = (v as f64).sqrt().round() as usize;
    (r * r == v).then_some(r)
}

fn elements(layer: &LayerSpec, bytes: u64, what: &str) -> Result<usize, KernelError> {
    if !bytes.is_multiple_of(BYTES_PER_ELEMENT) {
        return Err(shape_err(
            &layer.name,
            format!("{what} of {bytes} bytes is not a whole number of f32 elements"),
        ));
    }
    Ok((bytes / BYTES_PER_ELEMENT) as usize)
}

fn layer_seed(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    }) ^ WEIGHT_SEED
}

fn init_params(name: &str, weight_len: usize, bias_len: usize, fan_in: usize) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(name));
    let limit = (6.0 / fan_in.max(1) as f32).sqrt();
    let weights = (0..weight_len).map(|_| rng.gen_range(-limit..limit)).collect();
    let bias = (0..bias_len).map(|_| rng.gen_range(-0.05..0.05)).collect();
    (weights, bias)
}

impl LayerOp {
    /// Builds the op for `layer` fed by a tensor of `in_dims`.
    pub fn build(layer: &LayerSpec, in_dims: &[usize]) -> Result<LayerOp, KernelError> {
        let in_elems: usize = in_dims.iter().product();
        if in_elems == 0 {
            return Err(shape_err(&layer.name, "empty input tensor"));
        }
        if elements(layer, layer.input_bytes, "input")? != in_elems {
            return Err(shape_err(
                &layer.name,
                format!(
                    "expects {} input bytes but receives dims {in_dims:?}",
                    layer.input_bytes
                ),
            ));
        }
        let out_elems = elements(layer, layer.output_bytes, "output")?;
        if out_elems == 0 {
            return Err(shape_err(&layer.name, "empty output tensor"));
        }
        let same_shape = |kind: &str| -> Result<Vec<usize>, KernelError> {
            if out_elems != in_elems {
                return Err(shape_err(
                    &layer.name,
                    format!("{kind} must preserve size ({in_elems} -> {out_elems} elements)"),
                ));
            }
            Ok(in_dims.to_vec())
        };

        let (op, out_dims) = match layer.kind {
            LayerKind::Convolution => {
                let c = layer.conv.expect("validated conv layer");
                let channels = c.input_feature_maps as usize;
                let (in_h, in_w) = match *in_dims {
                    [ch, h, w] if ch == channels => (h, w),
                    _ => {
                        let side = in_elems
                            .is_multiple_of(channels)
                            .then(|| exact_sqrt(in_elems / channels))
                            .flatten()
                            .ok_or_else(|| {
                                shape_err(
                                    &layer.name,
                                    format!("{in_elems} elements are not {channels} square maps"),
                                )
                            })?;
                        (side, side)
                    }
                };
                let filters = c.num_filters as usize;
                let out_side = (out_elems % filters == 0)
                    .then(|| exact_sqrt(out_elems / filters))
                    .flatten()
                    .ok_or_else(|| {
                        shape_err(
                            &layer.name,
                            format!("{out_elems} output elements are not {filters} square maps"),
                        )
                    })?;
                let kernel = c.filter_size as usize;
                let stride = c.stride as usize;
                let pad = |inp: usize| ((out_side - 1) * stride + kernel).saturating_sub(inp) / 2;
                let geometry = ConvGeometry {
                    in_channels: channels,
                    in_h,
                    in_w,
                    filters,
                    kernel,
                    stride,
                    pad_top: pad(in_h),
                    pad_left: pad(in_w),
                    out_h: out_side,
                    out_w: out_side,
                };
                let fan_in = channels * kernel * kernel;
                let (weights, bias) = init_params(&layer.name, geometry.weight_len(), filters, fan_in);
                (
                    Op::Conv {
                        geometry,
                        weights,
                        bias,
                    },
                    vec![filters, out_side, out_side],
                )
            }
            LayerKind::Pooling => {
                let [channels, in_h, in_w] = *in_dims else {
                    return Err(shape_err(
                        &layer.name,
                        format!("pooling needs a [c, h, w] input, got {in_dims:?}"),
                    ));
                };
                let out_side = (out_elems % channels == 0)
                    .then(|| exact_sqrt(out_elems / channels))
                    .flatten()
                    .ok_or_else(|| {
                        shape_err(
                            &layer.name,
                            format!("{out_elems} output elements are not {channels} square maps"),
                        )
                    })?;
                if out_side > in_h || out_side > in_w {
                    return Err(shape_err(&layer.name, "pooling cannot enlarge maps"));
                }
                let stride = (in_h / out_side).max(1);
                let window = in_h.saturating_sub((out_side - 1) * stride).max(1);
                let g = PoolGeometry {
                    channels,
                    in_h,
                    in_w,
                    window,
                    stride,
                    out_h: out_side,
                    out_w: out_side,
                };
                (Op::Pool(g), vec![channels, out_side, out_side])
            }
            LayerKind::Relu => (Op::Relu, same_shape("relu")?),
            LayerKind::LocalResponseNormalization => (Op::Lrn, same_shape("lrn")?),
            LayerKind::Dropout => (Op::Dropout, same_shape("dropout")?),
            LayerKind::FullyConnected => {
                let (weights, bias) = init_params(&layer.name, out_elems * in_elems, out_elems, in_elems);
                (Op::Dense { weights, bias }, vec![out_elems])
            }
        };
        Ok(LayerOp {
            name: layer.name.clone(),
            op,
            in_dims: in_dims.to_vec(),
            out_dims,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dims(&self) -> &[usize] {
        &self.in_dims
    }

    pub fn out_dims(&self) -> &[usize] {
        &self.out_dims
    }

    pub fn run(&self, input: &Tensor) -> Result<Tensor, KernelError> {
        if input.len() != self.in_dims.iter().product::<usize>() {
            return Err(shape_err(
                &self.name,
                format!("expected dims {:?}, got {:?}", self.in_dims, input.dims()),
            ));
        }
        let x = input.data();
        let data = match &self.op {
            Op::Conv {
                geometry,
                weights,
                bias,
            } => conv2d(x, weights, bias, geometry),
            Op::Relu => relu(x),
            Op::Pool(g) => max_pool(x, g),
            Op::Lrn => {
                let (channels, plane) = match *self.in_dims {
                    [c, h, w] => (c, h * w),
                    _ => (x.len(), 1),
                };
                lrn(x, channels, plane)
            }
            Op::Dropout => dropout(x),
            Op::Dense { weights, bias } => dense(x, weights, bias),
        };
        Ok(Tensor {
            dims: self.out_dims.clone(),
            data,
        })
    }
}

/// Every layer of a model, ready to execute along any exit chain.
#[derive(Debug, Clone)]
pub struct Network {
    input_dims: Vec<usize>,
    ops: Vec<LayerOp>,
    chains: Vec<Vec<usize>>,
}

impl Network {
    pub fn build(model: &BranchyModel) -> Result<Network, KernelError> {
        let first = model.chain(1)?.next().expect("non-empty chain");
        let in_elems = elements(first, model.input_bytes(), "model input")?;
        let input_dims = match (first.kind, first.conv) {
            (LayerKind::Convolution, Some(c)) => {
                let maps = c.input_feature_maps as usize;
                let side = (in_elems % maps == 0)
                    .then(|| exact_sqrt(in_elems / maps))
                    .flatten()
                    .ok_or_else(|| shape_err(&first.name, "model input is not square feature maps"))?;
                vec![maps, side, side]
            }
            _ => vec![in_elems],
        };

        let mut ops: Vec<LayerOp> = Vec::new();
        let mut by_name: HashMap<String, usize> = HashMap::new();
        let mut chains = Vec::with_capacity(model.num_exits());
        for exit in 1..=model.num_exits() {
            let mut dims = input_dims.clone();
            let mut chain = Vec::new();
            for layer in model.chain(exit)? {
                let idx = match by_name.get(&layer.name) {
                    Some(&idx) => {
                        if ops[idx].in_dims != dims {
                            return Err(shape_err(
                                &layer.name,
                                format!(
                                    "shared by exits with different inputs {:?} and {dims:?}",
                                    ops[idx].in_dims
                                ),
                            ));
                        }
                        idx
                    }
                    None => {
                        ops.push(LayerOp::build(layer, &dims)?);
                        by_name.insert(layer.name.clone(), ops.len() - 1);
                        ops.len() - 1
                    }
                };
                dims = ops[idx].out_dims.clone();
                chain.push(idx);
            }
            chains.push(chain);
        }
        Ok(Network {
            input_dims,
            ops,
            chains,
        })
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn chain_len(&self, exit: usize) -> Option<usize> {
        exit.checked_sub(1).and_then(|i| self.chains.get(i)).map(Vec::len)
    }

    /// Dims of the tensor entering chain position `position` (0-based) of `exit`;
    /// `position == len` gives the final output dims.
    pub fn dims_at(&self, exit: usize, position: usize) -> Option<&[usize]> {
        let chain = self.chains.get(exit.checked_sub(1)?)?;
        if position == 0 {
            Some(&self.input_dims)
        } else {
            chain.get(position - 1).map(|&i| self.ops[i].out_dims.as_slice())
        }
    }

    /// Runs chain positions `positions` (0-based, half-open) of `exit`.
    pub fn run(&self, exit: usize, positions: Range<usize>, input: Tensor) -> Result<Tensor, KernelError> {
        let chain = exit
            .checked_sub(1)
            .and_then(|i| self.chains.get(i))
            .ok_or(ModelError::ExitOutOfRange {
                exit,
                num_exits: self.chains.len(),
            })?;
        if positions.start > positions.end || positions.end > chain.len() {
            return Err(ModelError::IntervalOutOfRange {
                exit,
                start: positions.start,
                end: positions.end,
                len: chain.len(),
            }
            .into());
        }
        let expected = self.dims_at(exit, positions.start).expect("in range");
        if input.dims() != expected {
            return Err(KernelError::Shape {
                layer: format!("exit {exit} position {}", positions.start),
                reason: format!("expected input dims {expected:?}, got {:?}", input.dims()),
            });
        }
        chain[positions].iter().try_fold(input, |x, &i| self.ops[i].run(&x))
    }

    /// Full local inference on `exit`.
    pub fn infer(&self, exit: usize, input: Tensor) -> Result<(usize, f32), KernelError> {
        let len = self.chain_len(exit).ok_or(ModelError::ExitOutOfRange {
            exit,
            num_exits: self.chains.len(),
        })?;
        let out = self.run(exit, 0..len, input)?;
        Ok(classify(out.data()))
    }
}
