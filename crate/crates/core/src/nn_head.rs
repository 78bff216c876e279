//! Projection head: valid 1-D convolutions along time (feature dimensions as
//! channels), ReLU, flatten, dense layers, scalar output. Forward and
//! reverse-mode backward are written out by hand and are generic over the
//! float type so gradient checks can run in `f64` while training runs in
//! `f32`.
//!
//! Conv weights are exposed with logical shape `[out, in, kernel]` but are
//! stored in `[out][kernel][in]` memory order: a receptive-field window of a
//! row-major `[T, C]` input is then one contiguous `kernel * in` slice. The
//! windows of an utterance form a strided `[T', kernel * in]` view without
//! copying, and each stage is a single matrix product against the
//! `[out, kernel * in]` weight matrix.

use std::fmt::Debug;
use std::iter::Sum;
use std::path::{Path, PathBuf};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut2, LinalgScalar, ShapeBuilder};
use num_traits::Float;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{self, StoreError, UtteranceFeatures};

/// Float types the head can run in.
pub trait Real: Float + LinalgScalar + Sum + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeadError {
    #[error("invalid head config: {0}")]
    InvalidConfig(String),
    #[error("input has {got} frames but kernel needs at least {kernel}")]
    TooShort { got: usize, kernel: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

impl ConvStage {
    pub const fn new(out_channels: usize, kernel_size: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel_size,
            stride,
        }
    }

    /// Output length of a valid convolution, `None` when the input is
    /// shorter than the kernel.
    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        (input_len >= self.kernel_size).then(|| (input_len - self.kernel_size) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_frames: usize,
    pub input_dim: usize,
    pub conv_stages: Vec<ConvStage>,
    /// Hidden dense widths; the width-1 linear output layer is implicit.
    pub dense_widths: Vec<usize>,
}

pub const DEFAULT_CONV_STAGES: [ConvStage; 4] = [
    ConvStage::new(256, 3, 2),
    ConvStage::new(128, 3, 2),
    ConvStage::new(64, 3, 2),
    ConvStage::new(32, 3, 2),
];
pub const DEFAULT_DENSE_WIDTHS: [usize; 1] = [128];

impl HeadConfig {
    /// The default architecture for `[frames, dim]` inputs.
    pub fn default_for(input_frames: usize, input_dim: usize) -> Self {
        Self {
            input_frames,
            input_dim,
            conv_stages: DEFAULT_CONV_STAGES.to_vec(),
            dense_widths: DEFAULT_DENSE_WIDTHS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        if self.input_frames == 0 || self.input_dim == 0 {
            return Err(HeadError::InvalidConfig("empty input geometry".into()));
        }
        for (i, s) in self.conv_stages.iter().enumerate() {
            if s.kernel_size == 0 || s.stride == 0 || s.out_channels == 0 {
                return Err(HeadError::InvalidConfig(format!(
                    "conv stage {i} has a zero field: {s:?}"
                )));
            }
        }
        if let Some(i) = self.dense_widths.iter().position(|&w| w == 0) {
            return Err(HeadError::InvalidConfig(format!("dense layer {i} has width 0")));
        }
        self.stage_lengths()?;
        Ok(())
    }

    /// Time length entering each conv stage followed by the final length.
    pub fn stage_lengths(&self) -> Result<Vec<usize>, HeadError> {
        let mut lens = vec![self.input_frames];
        let mut t = self.input_frames;
        for (i, s) in self.conv_stages.iter().enumerate() {
            t = s.output_len(t).ok_or_else(|| {
                HeadError::InvalidConfig(format!(
                    "conv stage {i}: length {t} shorter than kernel {}",
                    s.kernel_size
                ))
            })?;
            lens.push(t);
        }
        Ok(lens)
    }

    /// Channel count entering each conv stage followed by the final count.
    pub fn stage_channels(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.conv_stages.iter().map(|s| s.out_channels))
            .collect()
    }

    pub fn flatten_len(&self) -> Result<usize, HeadError> {
        let t = *self.stage_lengths()?.last().expect("non-empty");
        Ok(t * self.stage_channels().last().expect("non-empty"))
    }

    /// `(in, out)` of every dense layer including the output layer.
    pub fn dense_shapes(&self) -> Result<Vec<(usize, usize)>, HeadError> {
        let mut fan_in = self.flatten_len()?;
        let mut shapes = Vec::with_capacity(self.dense_widths.len() + 1);
        for &w in self.dense_widths.iter().chain(std::iter::once(&1)) {
            shapes.push((fan_in, w));
            fan_in = w;
        }
        Ok(shapes)
    }

    pub fn param_count(&self) -> Result<usize, HeadError> {
        let channels = self.stage_channels();
        let conv: usize = self
            .conv_stages
            .iter()
            .zip(&channels)
            .map(|(s, &c_in)| s.out_channels * c_in * s.kernel_size + s.out_channels)
            .sum();
        let dense: usize = self.dense_shapes()?.iter().map(|(i, o)| i * o + o).sum();
        Ok(conv + dense)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<F> {
    /// Logical `[out, in, kernel]`, memory order `[out][kernel][in]`.
    pub weight: Array3<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<F> {
    /// `[out, in]`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

fn conv_weight_zeros<F: Real>(out: usize, c_in: usize, kernel: usize) -> Array3<F> {
    Array3::zeros((out, kernel, c_in)).permuted_axes([0, 2, 1])
}

fn memory_slice<F, D: ndarray::Dimension>(a: &ndarray::Array<F, D>) -> &[F] {
    a.as_slice_memory_order().expect("parameter tensors are contiguous")
}

fn memory_slice_mut<F, D: ndarray::Dimension>(a: &mut ndarray::Array<F, D>) -> &mut [F] {
    a.as_slice_memory_order_mut().expect("parameter tensors are contiguous")
}

/// Weights and biases of every stage. Gradients and Adam moments use the
/// same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    pub conv: Vec<ConvParams<F>>,
    pub dense: Vec<DenseParams<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn zeros(config: &HeadConfig) -> Result<Self, HeadError> {
        config.validate()?;
        let channels = config.stage_channels();
        let conv = config
            .conv_stages
            .iter()
            .zip(&channels)
            .map(|(s, &c_in)| ConvParams {
                weight: conv_weight_zeros(s.out_channels, c_in, s.kernel_size),
                bias: Array1::zeros(s.out_channels),
            })
            .collect();
        let dense = config
            .dense_shapes()?
            .into_iter()
            .map(|(i, o)| DenseParams {
                weight: Array2::zeros((o, i)),
                bias: Array1::zeros(o),
            })
            .collect();
        Ok(Self { conv, dense })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv: self
                .conv
                .iter()
                .map(|c| {
                    let (o, i, k) = c.weight.dim();
                    ConvParams {
                        weight: conv_weight_zeros(o, i, k),
                        bias: Array1::zeros(c.bias.len()),
                    }
                })
                .collect(),
            dense: self
                .dense
                .iter()
                .map(|d| DenseParams {
                    weight: Array2::zeros(d.weight.dim()),
                    bias: Array1::zeros(d.bias.len()),
                })
                .collect(),
        }
    }

    /// Checks tensor shapes against `config`.
    pub fn check(&self, config: &HeadConfig) -> Result<(), HeadError> {
        config.validate()?;
        let dense_shapes = config.dense_shapes()?;
        if self.conv.len() != config.conv_stages.len() || self.dense.len() != dense_shapes.len() {
            return Err(HeadError::Shape("stage count differs from config".into()));
        }
        let channels = config.stage_channels();
        for (i, (a, s)) in self.conv.iter().zip(&config.conv_stages).enumerate() {
            let expected = (s.out_channels, channels[i], s.kernel_size);
            if a.weight.dim() != expected || a.bias.len() != s.out_channels {
                return Err(HeadError::Shape(format!(
                    "conv stage {i}: weight {:?}, expected {expected:?}",
                    a.weight.dim()
                )));
            }
            if !a.weight.view().permuted_axes([0, 2, 1]).is_standard_layout() {
                return Err(HeadError::Shape(format!("conv stage {i}: unexpected memory layout")));
            }
        }
        for (i, (a, &(fan_in, out))) in self.dense.iter().zip(&dense_shapes).enumerate() {
            if a.weight.dim() != (out, fan_in) || a.bias.len() != out {
                return Err(HeadError::Shape(format!(
                    "dense layer {i}: weight {:?}, expected {:?}",
                    a.weight.dim(),
                    (out, fan_in)
                )));
            }
        }
        Ok(())
    }

    /// Every tensor as a flat slice in memory order: conv weight, conv bias
    /// per stage, then dense weight, dense bias per layer.
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out = Vec::with_capacity(2 * (self.conv.len() + self.dense.len()));
        for c in &self.conv {
            out.push(memory_slice(&c.weight));
            out.push(memory_slice(&c.bias));
        }
        for d in &self.dense {
            out.push(memory_slice(&d.weight));
            out.push(memory_slice(&d.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::with_capacity(2 * (self.conv.len() + self.dense.len()));
        for c in &mut self.conv {
            out.push(memory_slice_mut(&mut c.weight));
            out.push(memory_slice_mut(&mut c.bias));
        }
        for d in &mut self.dense {
            out.push(memory_slice_mut(&mut d.weight));
            out.push(memory_slice_mut(&mut d.bias));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn fill(&mut self, value: F) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        let mut out = ParamSet::<G> {
            conv: self
                .conv
                .iter()
                .map(|c| {
                    let (o, i, k) = c.weight.dim();
                    ConvParams {
                        weight: conv_weight_zeros(o, i, k),
                        bias: Array1::zeros(c.bias.len()),
                    }
                })
                .collect(),
            dense: self
                .dense
                .iter()
                .map(|d| DenseParams {
                    weight: Array2::zeros(d.weight.dim()),
                    bias: Array1::zeros(d.bias.len()),
                })
                .collect(),
        };
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = G::from_f64(s.as_f64());
            }
        }
        out
    }
}

/// He-style uniform init: weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)),
/// biases zero. Draws run in logical index order, stage by stage.
pub fn init_params<F: Real>(config: &HeadConfig, seed: u64) -> Result<ParamSet<F>, HeadError> {
    let mut params = ParamSet::<F>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in &mut params.conv {
        let (_, c_in, k) = c.weight.dim();
        let bound = (6.0 / (c_in * k) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        c.weight
            .iter_mut()
            .for_each(|w| *w = F::from_f64(dist.sample(&mut rng)));
    }
    for d in &mut params.dense {
        let bound = (6.0 / d.weight.ncols() as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        d.weight
            .iter_mut()
            .for_each(|w| *w = F::from_f64(dist.sample(&mut rng)));
    }
    Ok(params)
}

/// Dot product with eight independent partial sums in a fixed order, so
/// results are deterministic and the loop vectorizes.
#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for j in 0..8 {
            acc[j] = acc[j] + ca[j] * cb[j];
        }
    }
    let mut tail = F::zero();
    for j in chunks * 8..a.len() {
        tail = tail + a[j] * b[j];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
fn relu<F: Real>(v: F) -> F {
    if v > F::zero() {
        v
    } else {
        F::zero()
    }
}

/// Valid 1-D convolution along time: `input` is `[T, C_in]`, `weight` is
/// `[C_out, C_in, K]`; returns `[floor((T - K) / S) + 1, C_out]`.
pub fn conv1d_forward<F: Real>(
    input: ArrayView2<'_, F>,
    weight: ArrayView3<'_, F>,
    bias: ArrayView1<'_, F>,
    stride: usize,
) -> Result<Array2<F>, HeadError> {
    let (c_out, c_in, kernel) = weight.dim();
    let (t, channels) = input.dim();
    if channels != c_in {
        return Err(HeadError::Shape(format!(
            "input has {channels} channels, weight expects {c_in}"
        )));
    }
    if bias.len() != c_out {
        return Err(HeadError::Shape(format!(
            "bias has {} entries, weight has {c_out} outputs",
            bias.len()
        )));
    }
    if stride == 0 || kernel == 0 {
        return Err(HeadError::Shape("zero stride or kernel".into()));
    }
    if t < kernel {
        return Err(HeadError::TooShort { got: t, kernel });
    }
    // [out][kernel][in] view; borrowed when the weight already has that layout
    let okc = weight.permuted_axes([0, 2, 1]);
    let owned;
    let w = match okc.as_slice() {
        Some(s) => s,
        None => {
            owned = okc.iter().copied().collect::<Vec<F>>();
            &owned
        }
    };
    let input_std;
    let x = match input.as_slice() {
        Some(s) => s,
        None => {
            input_std = input.iter().copied().collect::<Vec<F>>();
            &input_std
        }
    };
    let bias: Vec<F> = bias.iter().copied().collect();
    Ok(conv_forward_raw(x, t, c_in, w, &bias, kernel, stride))
}

fn conv_forward_raw<F: Real>(
    x: &[F],
    t: usize,
    c_in: usize,
    w: &[F],
    bias: &[F],
    kernel: usize,
    stride: usize,
) -> Array2<F> {
    let c_out = bias.len();
    let t_out = (t - kernel) / stride + 1;
    let window = kernel * c_in;
    let cols = windows(x, t_out, window, stride * c_in);
    let w = ArrayView2::from_shape((c_out, window), w).expect("weight matches geometry");
    let mut out = Array2::from_shape_fn((t_out, c_out), |(_, o)| bias[o]);
    general_mat_mul(F::one(), &cols, &w.t(), F::one(), &mut out);
    out
}

/// Every receptive-field window of a row-major `[T, C]` input as the rows of
/// a `[t_out, window]` view; rows overlap when `step < window`.
fn windows<F>(x: &[F], t_out: usize, window: usize, step: usize) -> ArrayView2<'_, F> {
    let used = (t_out - 1) * step + window;
    ArrayView2::from_shape((t_out, window).strides((step, 1)), &x[..used]).expect("windows lie inside the input")
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    /// Input to each conv stage (`[T_i, C_i]`); entry 0 is the features.
    pub conv_inputs: Vec<Array2<F>>,
    /// Pre-activation output of each conv stage.
    pub conv_pre: Vec<Array2<F>>,
    /// Input to each dense layer; entry 0 is the flattened conv output.
    pub dense_inputs: Vec<Array1<F>>,
    /// Pre-activation output of each dense layer (the last is the prediction).
    pub dense_pre: Vec<Array1<F>>,
}

impl<F: Real> ForwardCache<F> {
    pub fn prediction(&self) -> F {
        self.dense_pre.last().expect("output layer")[0]
    }
}

/// Maps one `[T, D]` feature matrix to a scalar.
pub fn head_forward<F: Real>(
    features: ArrayView2<'_, F>,
    params: &ParamSet<F>,
    config: &HeadConfig,
) -> Result<(F, ForwardCache<F>), HeadError> {
    if features.dim() != (config.input_frames, config.input_dim) {
        return Err(HeadError::Shape(format!(
            "features {:?}, config expects ({}, {})",
            features.dim(),
            config.input_frames,
            config.input_dim
        )));
    }
    params.check(config)?;
    Ok(forward_unchecked(features, params, config))
}

fn forward_unchecked<F: Real>(
    features: ArrayView2<'_, F>,
    params: &ParamSet<F>,
    config: &HeadConfig,
) -> (F, ForwardCache<F>) {
    let n_conv = config.conv_stages.len();
    let mut conv_inputs = Vec::with_capacity(n_conv + 1);
    let mut conv_pre = Vec::with_capacity(n_conv);
    conv_inputs.push(features.as_standard_layout().into_owned());
    for (stage, p) in config.conv_stages.iter().zip(&params.conv) {
        let x = conv_inputs.last().expect("non-empty");
        let (t, c_in) = x.dim();
        let pre = conv_forward_raw(
            x.as_slice().expect("standard layout"),
            t,
            c_in,
            memory_slice(&p.weight),
            memory_slice(&p.bias),
            stage.kernel_size,
            stage.stride,
        );
        let post = pre.mapv(relu);
        conv_pre.push(pre);
        conv_inputs.push(post);
    }
    let last = conv_inputs.pop().expect("non-empty");
    let flat = Array1::from_vec(last.into_raw_vec_and_offset().0);

    let mut dense_inputs = Vec::with_capacity(params.dense.len());
    let mut dense_pre = Vec::with_capacity(params.dense.len());
    let mut h = flat;
    let n_dense = params.dense.len();
    for (i, d) in params.dense.iter().enumerate() {
        let w = memory_slice(&d.weight);
        let (out_w, in_w) = d.weight.dim();
        let x = h.as_slice().expect("contiguous");
        let pre: Array1<F> = (0..out_w)
            .map(|o| d.bias[o] + dot(x, &w[o * in_w..(o + 1) * in_w]))
            .collect();
        let next = if i + 1 < n_dense { pre.mapv(relu) } else { pre.clone() };
        dense_inputs.push(h);
        dense_pre.push(pre);
        h = next;
    }
    let cache = ForwardCache {
        conv_inputs,
        conv_pre,
        dense_inputs,
        dense_pre,
    };
    (cache.prediction(), cache)
}

/// Convenience wrapper returning only the prediction.
pub fn predict<F: Real>(
    features: ArrayView2<'_, F>,
    params: &ParamSet<F>,
    config: &HeadConfig,
) -> Result<F, HeadError> {
    head_forward(features, params, config).map(|(p, _)| p)
}

/// Gradient of the prediction w.r.t. every parameter, times `upstream`.
pub fn head_backward<F: Real>(
    cache: &ForwardCache<F>,
    params: &ParamSet<F>,
    config: &HeadConfig,
    upstream: F,
) -> Result<ParamSet<F>, HeadError> {
    let mut grads = params.zeros_like();
    head_backward_into(cache, params, config, upstream, &mut grads)?;
    Ok(grads)
}

fn check_cache<F: Real>(cache: &ForwardCache<F>, params: &ParamSet<F>, config: &HeadConfig) -> Result<(), HeadError> {
    params.check(config)?;
    let lens = config.stage_lengths()?;
    let chans = config.stage_channels();
    let dense = config.dense_shapes()?;
    let ok = cache.conv_inputs.len() == config.conv_stages.len()
        && cache.conv_pre.len() == config.conv_stages.len()
        && cache.dense_inputs.len() == dense.len()
        && cache.dense_pre.len() == dense.len()
        && cache
            .conv_inputs
            .iter()
            .enumerate()
            .all(|(i, x)| x.dim() == (lens[i], chans[i]))
        && cache
            .conv_pre
            .iter()
            .enumerate()
            .all(|(i, x)| x.dim() == (lens[i + 1], chans[i + 1]))
        && cache
            .dense_inputs
            .iter()
            .zip(&dense)
            .all(|(x, &(i, _))| x.len() == i)
        && cache
            .dense_pre
            .iter()
            .zip(&dense)
            .all(|(x, &(_, o))| x.len() == o);
    if ok {
        Ok(())
    } else {
        Err(HeadError::Shape("forward cache does not match params/config".into()))
    }
}

/// Like [`head_backward`] but accumulates into `grads`, which must share
/// the params' shapes. Used by the trainer to sum over a mini-batch.
pub fn head_backward_into<F: Real>(
    cache: &ForwardCache<F>,
    params: &ParamSet<F>,
    config: &HeadConfig,
    upstream: F,
    grads: &mut ParamSet<F>,
) -> Result<(), HeadError> {
    check_cache(cache, params, config)?;
    grads.check(config)?;

    // dense layers, output first
    let n_dense = params.dense.len();
    let mut g_out: Vec<F> = vec![upstream];
    for i in (0..n_dense).rev() {
        let d = &params.dense[i];
        let gd = &mut grads.dense[i];
        let (out_w, in_w) = d.weight.dim();
        if i + 1 < n_dense {
            for (g, &pre) in g_out.iter_mut().zip(cache.dense_pre[i].iter()) {
                if pre <= F::zero() {
                    *g = F::zero();
                }
            }
        }
        let x = cache.dense_inputs[i].as_slice().expect("contiguous");
        let w = memory_slice(&d.weight);
        let gw = memory_slice_mut(&mut gd.weight);
        let mut g_in = vec![F::zero(); in_w];
        for o in 0..out_w {
            let g = g_out[o];
            gd.bias[o] = gd.bias[o] + g;
            if g != F::zero() {
                axpy(g, x, &mut gw[o * in_w..(o + 1) * in_w]);
                axpy(g, &w[o * in_w..(o + 1) * in_w], &mut g_in);
            }
        }
        g_out = g_in;
    }

    // g_out is now the gradient w.r.t. the flattened conv output, which is
    // the post-ReLU output of the last stage in [T][C] order
    let mut g_post = g_out;
    for s in (0..config.conv_stages.len()).rev() {
        let stage = config.conv_stages[s];
        let pre = cache.conv_pre[s].as_slice().expect("contiguous");
        let mut g_pre = g_post;
        for (g, &p) in g_pre.iter_mut().zip(pre) {
            if p <= F::zero() {
                *g = F::zero();
            }
        }
        let x_arr = &cache.conv_inputs[s];
        let (t_in, c_in) = x_arr.dim();
        let x = x_arr.as_slice().expect("contiguous");
        let c_out = stage.out_channels;
        let window = stage.kernel_size * c_in;
        let t_out = pre.len() / c_out;
        let w = memory_slice(&params.conv[s].weight);
        let gc = &mut grads.conv[s];
        let gw = memory_slice_mut(&mut gc.weight);
        let step = stage.stride * c_in;
        let g = ArrayView2::from_shape((t_out, c_out), &g_pre[..]).expect("gradient matches geometry");
        for row in g.rows() {
            for (b, &v) in gc.bias.iter_mut().zip(row) {
                *b = *b + v;
            }
        }
        let cols = windows(x, t_out, window, step);
        let mut gw = ArrayViewMut2::from_shape((c_out, window), gw).expect("weight matches geometry");
        general_mat_mul(F::one(), &g.t(), &cols, F::one(), &mut gw);
        // the features themselves need no gradient
        if s == 0 {
            break;
        }
        let w = ArrayView2::from_shape((c_out, window), w).expect("weight matches geometry");
        let g_cols = g.dot(&w);
        let mut g_in = vec![F::zero(); t_in * c_in];
        for (ti, row) in g_cols.rows().into_iter().enumerate() {
            let dst = &mut g_in[ti * step..ti * step + window];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
        g_post = g_in;
    }
    Ok(())
}

/// Intermediate values of a mini-batch forward pass. Conv tensors stack the
/// batch along time (`[B * T_i, C_i]`, utterance-major); dense tensors are
/// `[B, width]`.
#[derive(Debug, Clone)]
pub struct BatchCache<F> {
    pub batch: usize,
    pub conv_inputs: Vec<Array2<F>>,
    pub conv_pre: Vec<Array2<F>>,
    pub dense_inputs: Vec<Array2<F>>,
    pub dense_pre: Vec<Array2<F>>,
}

impl<F: Real> BatchCache<F> {
    pub fn predictions(&self) -> Vec<F> {
        self.dense_pre.last().expect("output layer").column(0).to_vec()
    }
}

/// Copies the receptive-field windows of every utterance in a stacked
/// `[B * t_in, c_in]` input into one `[B * t_out, kernel * c_in]` matrix.
fn im2col<F: Real>(x: &Array2<F>, batch: usize, t_in: usize, t_out: usize, stage: ConvStage) -> Array2<F> {
    let c_in = x.ncols();
    let window = stage.kernel_size * c_in;
    let step = stage.stride * c_in;
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((batch * t_out, window));
    for b in 0..batch {
        let sample = &xs[b * t_in * c_in..(b + 1) * t_in * c_in];
        let rows = windows(sample, t_out, window, step);
        cols.slice_mut(ndarray::s![b * t_out..(b + 1) * t_out, ..]).assign(&rows);
    }
    cols
}

/// Mini-batch version of [`head_forward`]: the same function applied to
/// every utterance, computed with one matrix product per stage.
pub fn head_forward_batch<F: Real>(
    features: &[ArrayView2<'_, F>],
    params: &ParamSet<F>,
    config: &HeadConfig,
) -> Result<BatchCache<F>, HeadError> {
    if features.is_empty() {
        return Err(HeadError::Shape("empty batch".into()));
    }
    let geometry = (config.input_frames, config.input_dim);
    if let Some(f) = features.iter().find(|f| f.dim() != geometry) {
        return Err(HeadError::Shape(format!("features {:?}, config expects {geometry:?}", f.dim())));
    }
    params.check(config)?;
    let batch = features.len();
    let lens = config.stage_lengths()?;

    let mut input = Array2::zeros((batch * config.input_frames, config.input_dim));
    for (b, f) in features.iter().enumerate() {
        input
            .slice_mut(ndarray::s![b * config.input_frames..(b + 1) * config.input_frames, ..])
            .assign(f);
    }
    let mut conv_inputs = vec![input];
    let mut conv_pre = Vec::with_capacity(config.conv_stages.len());
    for (s, (stage, p)) in config.conv_stages.iter().zip(&params.conv).enumerate() {
        let x = conv_inputs.last().expect("non-empty");
        let cols = im2col(x, batch, lens[s], lens[s + 1], *stage);
        let w = ArrayView2::from_shape((stage.out_channels, cols.ncols()), memory_slice(&p.weight))
            .expect("weight matches geometry");
        let mut pre = Array2::from_shape_fn((cols.nrows(), stage.out_channels), |(_, o)| p.bias[o]);
        general_mat_mul(F::one(), &cols, &w.t(), F::one(), &mut pre);
        conv_inputs.push(pre.mapv(relu));
        conv_pre.push(pre);
    }
    let last = conv_inputs.pop().expect("non-empty");
    let flat_len = last.len() / batch;
    let mut h = last.into_shape_with_order((batch, flat_len)).expect("utterance-major stack");

    let n_dense = params.dense.len();
    let mut dense_inputs = Vec::with_capacity(n_dense);
    let mut dense_pre = Vec::with_capacity(n_dense);
    for (i, d) in params.dense.iter().enumerate() {
        let mut pre = Array2::from_shape_fn((batch, d.bias.len()), |(_, o)| d.bias[o]);
        general_mat_mul(F::one(), &h, &d.weight.t(), F::one(), &mut pre);
        let next = if i + 1 < n_dense { pre.mapv(relu) } else { pre.clone() };
        dense_inputs.push(h);
        dense_pre.push(pre);
        h = next;
    }
    Ok(BatchCache {
        batch,
        conv_inputs,
        conv_pre,
        dense_inputs,
        dense_pre,
    })
}

/// Accumulates `sum_b upstream[b] * d prediction_b / d params` into `grads`.
pub fn head_backward_batch<F: Real>(
    cache: &BatchCache<F>,
    params: &ParamSet<F>,
    config: &HeadConfig,
    upstream: &[F],
    grads: &mut ParamSet<F>,
) -> Result<(), HeadError> {
    params.check(config)?;
    grads.check(config)?;
    let batch = cache.batch;
    if upstream.len() != batch {
        return Err(HeadError::Shape(format!("{} upstream gradients for a batch of {batch}", upstream.len())));
    }
    let lens = config.stage_lengths()?;
    let n_dense = params.dense.len();
    if cache.dense_pre.len() != n_dense || cache.conv_pre.len() != config.conv_stages.len() {
        return Err(HeadError::Shape("batch cache does not match params/config".into()));
    }

    let mut g_out = Array2::from_shape_vec((batch, 1), upstream.to_vec()).expect("column");
    for i in (0..n_dense).rev() {
        if i + 1 < n_dense {
            g_out.zip_mut_with(&cache.dense_pre[i], |g, &pre| {
                if pre <= F::zero() {
                    *g = F::zero();
                }
            });
        }
        let gd = &mut grads.dense[i];
        for row in g_out.rows() {
            for (b, &v) in gd.bias.iter_mut().zip(row) {
                *b = *b + v;
            }
        }
        general_mat_mul(F::one(), &g_out.t(), &cache.dense_inputs[i], F::one(), &mut gd.weight);
        g_out = g_out.dot(&params.dense[i].weight);
    }

    let mut g_post = g_out.into_raw_vec_and_offset().0;
    for s in (0..config.conv_stages.len()).rev() {
        let stage = config.conv_stages[s];
        let pre = &cache.conv_pre[s];
        let (rows, c_out) = pre.dim();
        let mut g = Array2::from_shape_vec((rows, c_out), g_post).expect("stacked gradient");
        g.zip_mut_with(pre, |g, &p| {
            if p <= F::zero() {
                *g = F::zero();
            }
        });
        let gc = &mut grads.conv[s];
        for row in g.rows() {
            for (b, &v) in gc.bias.iter_mut().zip(row) {
                *b = *b + v;
            }
        }
        let x = &cache.conv_inputs[s];
        let cols = im2col(x, batch, lens[s], lens[s + 1], stage);
        let window = cols.ncols();
        let mut gw = ArrayViewMut2::from_shape((c_out, window), memory_slice_mut(&mut gc.weight))
            .expect("weight matches geometry");
        general_mat_mul(F::one(), &g.t(), &cols, F::one(), &mut gw);
        if s == 0 {
            break;
        }
        let w = ArrayView2::from_shape((c_out, window), memory_slice(&params.conv[s].weight))
            .expect("weight matches geometry");
        let g_cols = g.dot(&w);
        let (t_in, t_out, c_in) = (lens[s], lens[s + 1], x.ncols());
        let step = stage.stride * c_in;
        let mut g_in = vec![F::zero(); batch * t_in * c_in];
        for b in 0..batch {
            let dst_sample = &mut g_in[b * t_in * c_in..(b + 1) * t_in * c_in];
            for ti in 0..t_out {
                let src = g_cols.row(b * t_out + ti);
                let dst = &mut dst_sample[ti * step..ti * step + window];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
        }
        g_post = g_in;
    }
    Ok(())
}

/// Mean squared error and its gradient w.r.t. the predictions.
pub fn mse_loss<F: Real>(predictions: &[F], targets: &[F]) -> Result<(F, Vec<F>), HeadError> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(HeadError::Shape(format!(
            "mse over {} predictions and {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let n = F::from_f64(predictions.len() as f64);
    let two = F::from_f64(2.0);
    let mut loss = F::zero();
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let diff = p - y;
            loss = loss + diff * diff;
            two * diff / n
        })
        .collect();
    Ok((loss / n, grad))
}

pub const CHECKPOINT_MODEL_ID: &str = "projection-head";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("config sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
    #[error("checkpoint holds {got} values, config needs {expected}")]
    Length { got: usize, expected: usize },
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Saves `params` as a feature-store file (one stored row of all tensors
/// concatenated, each in logical index order) plus a JSON sidecar with the
/// config next to it.
pub fn save_checkpoint(
    params: &ParamSet<f32>,
    config: &HeadConfig,
    destination: &Path,
) -> Result<(), CheckpointError> {
    params.check(config)?;
    let mut flat = Vec::with_capacity(params.len());
    for c in &params.conv {
        flat.extend(c.weight.iter().copied());
        flat.extend(c.bias.iter().copied());
    }
    for d in &params.dense {
        flat.extend(d.weight.iter().copied());
        flat.extend(d.bias.iter().copied());
    }
    let n = flat.len();
    let mut layers = std::collections::BTreeMap::new();
    layers.insert(1u16, Array2::from_shape_vec((1, n), flat).expect("1 x n"));
    let utt = destination
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let features = UtteranceFeatures::new(utt, CHECKPOINT_MODEL_ID, layers)?;
    feature_store::write_feature_file(&features, destination)?;
    let sidecar = sidecar_path(destination);
    let json = serde_json::to_string_pretty(config).expect("config serializes");
    std::fs::write(&sidecar, json).map_err(|e| CheckpointError::Sidecar {
        path: sidecar.clone(),
        reason: e.to_string(),
    })?;
    Ok(())
}

pub fn load_checkpoint(source: &Path) -> Result<(ParamSet<f32>, HeadConfig), CheckpointError> {
    let sidecar = sidecar_path(source);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| CheckpointError::Sidecar {
        path: sidecar.clone(),
        reason: e.to_string(),
    })?;
    let config: HeadConfig = serde_json::from_str(&text).map_err(|e| CheckpointError::Sidecar {
        path: sidecar.clone(),
        reason: e.to_string(),
    })?;
    let row = feature_store::read_feature_layer(source, 1)?;
    let mut params = ParamSet::<f32>::zeros(&config)?;
    if row.len() != params.len() {
        return Err(CheckpointError::Length {
            got: row.len(),
            expected: params.len(),
        });
    }
    let mut values = row.iter().copied();
    for c in &mut params.conv {
        c.weight.iter_mut().for_each(|w| *w = values.next().expect("length checked"));
        c.bias.iter_mut().for_each(|w| *w = values.next().expect("length checked"));
    }
    for d in &mut params.dense {
        d.weight.iter_mut().for_each(|w| *w = values.next().expect("length checked"));
        d.bias.iter_mut().for_each(|w| *w = values.next().expect("length checked"));
    }
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::Rng;

    fn tiny_config() -> HeadConfig {
        HeadConfig {
            input_frames: 6,
            input_dim: 2,
            conv_stages: vec![ConvStage::new(3, 2, 2)],
            dense_widths: vec![4],
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Array2<f64> {
        Array::from_shape_fn((t, d), |_| rng.gen_range(-1.0..1.0))
    }

    fn random_params(config: &HeadConfig, rng: &mut ChaCha8Rng) -> ParamSet<f64> {
        let mut p = init_params::<f64>(config, rng.gen()).unwrap();
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        p
    }

    /// Straightforward re-implementation used as a forward oracle: indexes
    /// weights logically and loops naively.
    fn naive_conv(x: &Array2<f64>, w: &Array3<f64>, b: &Array1<f64>, stride: usize) -> Array2<f64> {
        let (c_out, c_in, k) = w.dim();
        let t_out = (x.nrows() - k) / stride + 1;
        let mut out = Array2::zeros((t_out, c_out));
        for t in 0..t_out {
            for o in 0..c_out {
                let mut acc = b[o];
                for c in 0..c_in {
                    for kk in 0..k {
                        acc += x[[t * stride + kk, c]] * w[[o, c, kk]];
                    }
                }
                out[[t, o]] = acc;
            }
        }
        out
    }

    #[allow(clippy::needless_range_loop)]
    fn naive_forward(x: &Array2<f64>, p: &ParamSet<f64>, cfg: &HeadConfig) -> f64 {
        let mut h = x.clone();
        for (s, c) in cfg.conv_stages.iter().zip(&p.conv) {
            h = naive_conv(&h, &c.weight, &c.bias, s.stride).mapv(|v| v.max(0.0));
        }
        let mut v: Vec<f64> = h.iter().copied().collect();
        for (i, d) in p.dense.iter().enumerate() {
            let mut next = vec![0.0; d.weight.nrows()];
            for o in 0..d.weight.nrows() {
                let mut acc = d.bias[o];
                for j in 0..d.weight.ncols() {
                    acc += d.weight[[o, j]] * v[j];
                }
                next[o] = if i + 1 < p.dense.len() { acc.max(0.0) } else { acc };
            }
            v = next;
        }
        v[0]
    }

    #[test]
    fn identity_kernel() {
        let x = array![[5.0f64], [-2.0], [7.0]];
        let w = Array3::from_elem((1, 1, 1), 1.0);
        let out = conv1d_forward(x.view(), w.view(), array![0.0].view(), 1).unwrap();
        assert_eq!(out, array![[5.0], [-2.0], [7.0]]);
    }

    #[test]
    fn length_law() {
        assert_eq!(ConvStage::new(1, 3, 2).output_len(5), Some(2));
        assert_eq!(ConvStage::new(1, 3, 2).output_len(2), None);
        let x = Array2::<f64>::zeros((5, 1));
        let out = conv1d_forward(x.view(), Array3::zeros((1, 1, 3)).view(), array![0.0].view(), 2).unwrap();
        assert_eq!(out.nrows(), 2);
        assert!(matches!(
            conv1d_forward(
                Array2::<f64>::zeros((2, 1)).view(),
                Array3::zeros((1, 1, 3)).view(),
                array![0.0].view(),
                1
            ),
            Err(HeadError::TooShort { got: 2, kernel: 3 })
        ));
        assert!(matches!(
            conv1d_forward(
                Array2::<f64>::zeros((4, 2)).view(),
                Array3::zeros((1, 1, 3)).view(),
                array![0.0].view(),
                1
            ),
            Err(HeadError::Shape(_))
        ));
    }

    #[test]
    fn conv_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 7, 2);
        let w = Array::from_shape_fn((3, 2, 3), |_| rng.gen_range(-1.0..1.0));
        let b = Array::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let fast = conv1d_forward(x.view(), w.view(), b.view(), 2).unwrap();
        let slow = naive_conv(&x, &w, &b, 2);
        assert_eq!(fast.dim(), (3, 3));
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn default_head_is_lightweight() {
        let cfg = HeadConfig::default_for(399, 768);
        let n = cfg.param_count().unwrap();
        assert!(n < 1_500_000, "{n}");
        // first conv: 256 * 768 * 3 + 256
        assert_eq!(590_080, 256 * 768 * 3 + 256);
        assert_eq!(ParamSet::<f32>::zeros(&cfg).unwrap().len(), n);
        assert_eq!(cfg.stage_lengths().unwrap(), vec![399, 199, 99, 49, 24]);
    }

    #[test]
    fn config_rejects_short_input() {
        let cfg = HeadConfig::default_for(10, 4);
        assert!(matches!(cfg.validate(), Err(HeadError::InvalidConfig(_))));
        let mut cfg = tiny_config();
        cfg.conv_stages[0].stride = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = HeadConfig {
            input_frames: 1,
            input_dim: 768,
            conv_stages: vec![],
            dense_widths: vec![16],
        };
        let a = init_params::<f32>(&cfg, 1).unwrap();
        assert_eq!(a, init_params::<f32>(&cfg, 1).unwrap());
        assert_ne!(a, init_params::<f32>(&cfg, 2).unwrap());
        let bound = (6.0f64 / 768.0).sqrt() as f32;
        assert!((bound - 0.0884).abs() < 1e-4);
        assert!(a.dense[0].weight.iter().all(|w| w.abs() <= bound));
        assert!(a.dense[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_params_predict_zero() {
        let cfg = tiny_config();
        let p = ParamSet::<f64>::zeros(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_matrix(&mut rng, 6, 2);
        assert_eq!(predict(x.view(), &p, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn output_layer_is_linear() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = random_params(&cfg, &mut rng);
        let x = random_matrix(&mut rng, 6, 2);
        let y1 = predict(x.view(), &p, &cfg).unwrap();
        let last = p.dense.last_mut().unwrap();
        last.weight.mapv_inplace(|v| 2.0 * v);
        last.bias.mapv_inplace(|v| 2.0 * v);
        let y2 = predict(x.view(), &p, &cfg).unwrap();
        assert!((y2 - 2.0 * y1).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let cfg = HeadConfig {
                input_frames: rng.gen_range(12..30),
                input_dim: rng.gen_range(1..6),
                conv_stages: vec![
                    ConvStage::new(rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..3)),
                    ConvStage::new(rng.gen_range(1..5), rng.gen_range(1..3), rng.gen_range(1..3)),
                ],
                dense_widths: vec![rng.gen_range(1..6)],
            };
            let p = random_params(&cfg, &mut rng);
            let x = random_matrix(&mut rng, cfg.input_frames, cfg.input_dim);
            let fast = predict(x.view(), &p, &cfg).unwrap();
            assert!((fast - naive_forward(&x, &p, &cfg)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = HeadConfig::default_for(50, 16);
        let p = init_params::<f32>(&cfg, 3).unwrap();
        let x = Array2::from_shape_fn((50, 16), |(t, d)| ((t * 16 + d) as f32).sin());
        let a = predict(x.view(), &p, &cfg).unwrap();
        let b = predict(x.view(), &p, &cfg).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn backward_trivial_cases() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&cfg, &mut rng);
        let x = random_matrix(&mut rng, 6, 2);
        let (_, cache) = head_forward(x.view(), &p, &cfg).unwrap();
        let g0 = head_backward(&cache, &p, &cfg, 0.0).unwrap();
        assert!(g0.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        let g = head_backward(&cache, &p, &cfg, 0.37).unwrap();
        assert_eq!(g.dense.last().unwrap().bias[0], 0.37);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let cfg = tiny_config();
        let p = ParamSet::<f64>::zeros(&cfg).unwrap();
        let x = Array2::zeros((6, 2));
        let (_, cache) = head_forward(x.view(), &p, &cfg).unwrap();
        let other = HeadConfig {
            dense_widths: vec![5],
            ..cfg
        };
        let q = ParamSet::<f64>::zeros(&other).unwrap();
        assert!(head_backward(&cache, &q, &other, 1.0).is_err());
    }

    #[test]
    fn tiny_head_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = random_params(&cfg, &mut rng);
        let x = random_matrix(&mut rng, 6, 2);
        let (_, cache) = head_forward(x.view(), &p, &cfg).unwrap();
        let analytic = head_backward(&cache, &p, &cfg, 1.0).unwrap();
        let h = 1e-5;
        let mut probe = p.clone();
        let n_tensors = p.tensors().len();
        for ti in 0..n_tensors {
            for j in 0..p.tensors()[ti].len() {
                let orig = p.tensors()[ti][j];
                probe.tensors_mut()[ti][j] = orig + h;
                let up = predict(x.view(), &probe, &cfg).unwrap();
                probe.tensors_mut()[ti][j] = orig - h;
                let down = predict(x.view(), &probe, &cfg).unwrap();
                probe.tensors_mut()[ti][j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.tensors()[ti][j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                assert!(rel < 1e-5, "tensor {ti} index {j}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn mse_loss_examples() {
        let (l, g) = mse_loss(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
        let (l, g) = mse_loss(&[3.0f64], &[1.0]).unwrap();
        assert_eq!((l, g), (4.0, vec![4.0]));
        let (l, g) = mse_loss(&[1.0f64, 2.0, 3.0], &[2.0, 2.0, 5.0]).unwrap();
        assert!((l - 5.0 / 3.0).abs() < 1e-15);
        let want = [-2.0 / 3.0, 0.0, -4.0 / 3.0];
        assert!(g.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(mse_loss::<f64>(&[], &[]).is_err());
        assert!(mse_loss(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = HeadConfig::default_for(50, 16);
        let p = init_params::<f32>(&cfg, 8).unwrap();
        let path = dir.path().join("head.sslf");
        save_checkpoint(&p, &cfg, &path).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("head.json")).unwrap()).unwrap();
        for key in ["input_frames", "input_dim", "conv_stages", "dense_widths"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let (q, cfg2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(p, q);
        let header = feature_store::read_header(&path).unwrap();
        assert_eq!(header.model_id, CHECKPOINT_MODEL_ID);
    }

    #[test]
    fn cast_preserves_layout() {
        let cfg = tiny_config();
        let p = init_params::<f32>(&cfg, 2).unwrap();
        let q: ParamSet<f64> = p.cast();
        q.check(&cfg).unwrap();
        assert_eq!(q.conv[0].weight[[1, 0, 1]], p.conv[0].weight[[1, 0, 1]] as f64);
    }

    #[test]
    fn batch_matches_per_utterance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg = HeadConfig {
            input_frames: 11,
            input_dim: 3,
            conv_stages: vec![ConvStage::new(4, 3, 2), ConvStage::new(5, 2, 1)],
            dense_widths: vec![6, 3],
        };
        let p = random_params(&cfg, &mut rng);
        let xs: Vec<Array2<f64>> = (0..5).map(|_| random_matrix(&mut rng, 11, 3)).collect();
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let upstream: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let cache = head_forward_batch(&views, &p, &cfg).unwrap();
        let mut batch_grads = p.zeros_like();
        head_backward_batch(&cache, &p, &cfg, &upstream, &mut batch_grads).unwrap();

        let mut single_grads = p.zeros_like();
        for ((x, &u), &pred) in xs.iter().zip(&upstream).zip(&cache.predictions()) {
            let (y, c) = head_forward(x.view(), &p, &cfg).unwrap();
            assert!((y - pred).abs() < 1e-12, "{y} vs {pred}");
            head_backward_into(&c, &p, &cfg, u, &mut single_grads).unwrap();
        }
        for (a, b) in batch_grads.tensors().iter().zip(single_grads.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
        assert!(head_forward_batch::<f64>(&[], &p, &cfg).is_err());
        assert!(head_backward_batch(&cache, &p, &cfg, &upstream[..4], &mut batch_grads).is_err());
    }
}
