//! Dense tensor substrate for the generator: storage, transposed convolution
//! with up-sampling, fully-connected maps, activations and channel
//! normalization, each with the backward pieces the generator chains together.
//!
//! Layout is row-major with channels first: `[C, H, W]` for images, `[C, L]`
//! for sounds and `[D]` for plain vectors. A 1-D signal is handled as a 2-D
//! one of height 1.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} entries but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading extent, treated as the channel axis.
    pub fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Tensor {
        self.map(|v| v * alpha)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Spatial extents of a channels-first shape, as (height, width).
pub(crate) fn spatial_extent(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        2 => Ok((1, shape[1])),
        3 => Ok((shape[1], shape[2])),
        n => Err(Error::shape(format!(
            "expected a [C, L] or [C, H, W] tensor, got rank {n} shape {shape:?}"
        ))),
    }
}

/// Kernel extents of a `[out, in, k]` or `[out, in, kh, kw]` bank, as (kh, kw).
pub(crate) fn kernel_extent(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        3 => Ok((1, shape[2])),
        4 => Ok((shape[2], shape[3])),
        n => Err(Error::shape(format!(
            "expected a rank 3 or 4 kernel bank, got rank {n} shape {shape:?}"
        ))),
    }
}

/// Output (height, width) of a transposed convolution; 1-D signals keep a
/// unit height.
fn output_extent(input: &[usize], up: usize) -> (usize, usize) {
    let (h, w) = (input[input.len() - 2], input[input.len() - 1]);
    if input.len() == 2 {
        (1, w * up)
    } else {
        (h * up, w * up)
    }
}

/// Output shape of a transposed convolution.
pub(crate) fn deconv_output_shape(
    input: &[usize],
    out_channels: usize,
    up: usize,
) -> Result<Vec<usize>> {
    let (h, w) = spatial_extent(input)?;
    Ok(if input.len() == 2 {
        vec![out_channels, w * up]
    } else {
        vec![out_channels, h * up, w * up]
    })
}

/// Translation-invariant basis functions of one deconvolution layer.
///
/// `kernels` is `[out_channels_below, in_channels_above, kh, kw]`, or
/// `[out, in, k]` for 1-D signals.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub up_factor: usize,
}

impl KernelBank {
    pub fn new(kernels: Tensor, bias: Tensor, up_factor: usize) -> Result<Self> {
        if up_factor == 0 {
            return Err(Error::invalid("up_factor must be at least 1"));
        }
        let (kh, kw) = kernel_extent(kernels.shape())?;
        if kh == 0 || kw == 0 || kernels.shape()[0] == 0 || kernels.shape()[1] == 0 {
            return Err(Error::invalid("kernel extents must be at least 1"));
        }
        if bias.numel() != kernels.shape()[0] {
            return Err(Error::shape(format!(
                "bias has {} entries for {} output channels",
                bias.numel(),
                kernels.shape()[0]
            )));
        }
        Ok(KernelBank {
            kernels,
            bias,
            up_factor,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }
}

/// Transposed convolution: every input coefficient stamps a copy of its
/// kernel into the output, copies `up_factor` apart, overlaps summed.
///
/// The stamp of input position `i` is centered on output position
/// `i * up_factor`: kernel tap `a` lands on `i * up_factor + a - k / 2`.
/// The output extent is exactly `input extent * up_factor`; taps falling
/// outside it are cropped.
pub fn deconvolve(input: &Tensor, bank: &KernelBank) -> Result<Tensor> {
    deconv_forward(input, &bank.kernels, &bank.bias, bank.up_factor)
}

fn check_deconv(input: &[usize], kernels: &[usize]) -> Result<()> {
    spatial_extent(input)?;
    kernel_extent(kernels)?;
    if input.len() + 1 != kernels.len() {
        return Err(Error::shape(format!(
            "spatial rank: input {input:?} does not match kernel bank {kernels:?}"
        )));
    }
    if input[0] != kernels[1] {
        return Err(Error::shape(format!(
            "channel axis: input has {} channels, kernel bank expects {}",
            input[0], kernels[1]
        )));
    }
    Ok(())
}

pub(crate) fn deconv_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    up: usize,
) -> Result<Tensor> {
    check_deconv(input.shape(), kernels.shape())?;
    let (h, w) = spatial_extent(input.shape())?;
    let (kh, kw) = kernel_extent(kernels.shape())?;
    let (co_n, ci_n) = (kernels.shape()[0], kernels.shape()[1]);
    let (oh, ow) = output_extent(input.shape(), up);
    let (ph, pw) = (kh / 2, kw / 2);
    let out_shape = deconv_output_shape(input.shape(), co_n, up)?;
    let mut out = Tensor::zeros(&out_shape);
    {
        let o = out.data_mut();
        for co in 0..co_n {
            o[co * oh * ow..(co + 1) * oh * ow].fill(bias.data()[co]);
        }
    }
    let x = input.data();
    let k = kernels.data();
    let o = out.data_mut();
    for ci in 0..ci_n {
        for i in 0..h {
            for j in 0..w {
                let v = x[(ci * h + i) * w + j];
                if v == 0.0 {
                    continue;
                }
                let (b_lo, b_hi, x0) = tap_range(j * up, pw, kw, ow);
                for a in 0..kh {
                    let y = (i * up + a) as isize - ph as isize;
                    if y < 0 || y as usize >= oh {
                        continue;
                    }
                    let y = y as usize;
                    for co in 0..co_n {
                        let krow = ((co * ci_n + ci) * kh + a) * kw;
                        let orow = (co * oh + y) * ow;
                        let ks = &k[krow + b_lo..krow + b_hi];
                        let os = &mut o[orow + x0..orow + x0 + (b_hi - b_lo)];
                        for (ov, kv) in os.iter_mut().zip(ks) {
                            *ov += v * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// In-bounds kernel taps `[lo, hi)` along one axis for a stamp centered at
/// `center`, and the output index of tap `lo`.
#[inline]
fn tap_range(center: usize, pad: usize, k: usize, extent: usize) -> (usize, usize, usize) {
    let lo = pad.saturating_sub(center);
    let start = center as isize - pad as isize;
    let hi = ((extent as isize - start).max(0) as usize).min(k);
    let first = (start + lo as isize) as usize;
    (lo, hi.max(lo), first)
}

/// Input gradient of [`deconv_forward`]: correlate the output gradient with
/// each kernel at the stamp positions.
pub(crate) fn deconv_backward_input(
    d_out: &Tensor,
    kernels: &Tensor,
    up: usize,
    in_shape: &[usize],
) -> Result<Tensor> {
    check_deconv(in_shape, kernels.shape())?;
    let expected = deconv_output_shape(in_shape, kernels.shape()[0], up)?;
    if d_out.shape() != expected.as_slice() {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match layer output {:?}",
            d_out.shape(),
            expected
        )));
    }
    let (h, w) = spatial_extent(in_shape)?;
    let (kh, kw) = kernel_extent(kernels.shape())?;
    let (co_n, ci_n) = (kernels.shape()[0], kernels.shape()[1]);
    let (oh, ow) = output_extent(in_shape, up);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut d_in = Tensor::zeros(in_shape);
    let g = d_out.data();
    let k = kernels.data();
    let di = d_in.data_mut();
    for ci in 0..ci_n {
        for i in 0..h {
            for j in 0..w {
                let (b_lo, b_hi, x0) = tap_range(j * up, pw, kw, ow);
                let mut acc = 0.0;
                for a in 0..kh {
                    let y = (i * up + a) as isize - ph as isize;
                    if y < 0 || y as usize >= oh {
                        continue;
                    }
                    let y = y as usize;
                    for co in 0..co_n {
                        let krow = ((co * ci_n + ci) * kh + a) * kw;
                        let orow = (co * oh + y) * ow;
                        let ks = &k[krow + b_lo..krow + b_hi];
                        let gs = &g[orow + x0..orow + x0 + (b_hi - b_lo)];
                        acc += ks.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                di[(ci * h + i) * w + j] = acc;
            }
        }
    }
    Ok(d_in)
}

/// Kernel gradient of [`deconv_forward`], accumulated into `d_kernels`.
pub(crate) fn deconv_backward_kernels(
    input: &Tensor,
    d_out: &Tensor,
    up: usize,
    d_kernels: &mut Tensor,
) -> Result<()> {
    check_deconv(input.shape(), d_kernels.shape())?;
    let (h, w) = spatial_extent(input.shape())?;
    let (kh, kw) = kernel_extent(d_kernels.shape())?;
    let (co_n, ci_n) = (d_kernels.shape()[0], d_kernels.shape()[1]);
    let (oh, ow) = output_extent(input.shape(), up);
    let (ph, pw) = (kh / 2, kw / 2);
    let x = input.data();
    let g = d_out.data();
    let dk = d_kernels.data_mut();
    for ci in 0..ci_n {
        for i in 0..h {
            for j in 0..w {
                let v = x[(ci * h + i) * w + j];
                if v == 0.0 {
                    continue;
                }
                let (b_lo, b_hi, x0) = tap_range(j * up, pw, kw, ow);
                for a in 0..kh {
                    let y = (i * up + a) as isize - ph as isize;
                    if y < 0 || y as usize >= oh {
                        continue;
                    }
                    let y = y as usize;
                    for co in 0..co_n {
                        let krow = ((co * ci_n + ci) * kh + a) * kw;
                        let orow = (co * oh + y) * ow;
                        let ks = &mut dk[krow + b_lo..krow + b_hi];
                        let gs = &g[orow + x0..orow + x0 + (b_hi - b_lo)];
                        for (kv, gv) in ks.iter_mut().zip(gs) {
                            *kv += v * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Per-channel sum, the bias gradient of both layer kinds.
pub(crate) fn channel_sums(d_out: &Tensor, acc: &mut Tensor) {
    let c = acc.numel();
    let per = d_out.numel() / c;
    for (ch, slot) in acc.data_mut().iter_mut().enumerate() {
        *slot += d_out.data()[ch * per..(ch + 1) * per].iter().sum::<f64>();
    }
}

/// Fully-connected map `W x + b` with `W` stored `[out, in]`.
pub(crate) fn dense_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    out_shape: &[usize],
) -> Result<Tensor> {
    let (out_n, in_n) = (weight.shape()[0], weight.shape()[1]);
    if input.numel() != in_n {
        return Err(Error::shape(format!(
            "fully-connected input has {} entries, weight expects {}",
            input.numel(),
            in_n
        )));
    }
    let x = input.data();
    let data = weight
        .data()
        .chunks_exact(in_n)
        .zip(bias.data())
        .map(|(row, b)| b + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect::<Vec<_>>();
    debug_assert_eq!(data.len(), out_n);
    Tensor::new(out_shape.to_vec(), data)
}

pub(crate) fn dense_backward_input(d_out: &Tensor, weight: &Tensor, in_shape: &[usize]) -> Tensor {
    let in_n = weight.shape()[1];
    let mut d_in = vec![0.0; in_n];
    for (row, g) in weight.data().chunks_exact(in_n).zip(d_out.data()) {
        if *g == 0.0 {
            continue;
        }
        for (d, w) in d_in.iter_mut().zip(row) {
            *d += g * w;
        }
    }
    Tensor {
        shape: in_shape.to_vec(),
        data: d_in,
    }
}

pub(crate) fn dense_backward_weight(input: &Tensor, d_out: &Tensor, d_weight: &mut Tensor) {
    let in_n = input.numel();
    for (row, g) in d_weight.data_mut().chunks_exact_mut(in_n).zip(d_out.data()) {
        for (d, x) in row.iter_mut().zip(input.data()) {
            *d += g * x;
        }
    }
}

/// Element-wise non-linearity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub const DEFAULT_LEAK: f64 = 0.2;

    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::LeakyRelu(a) if !(a > 0.0 && a < 1.0) => Err(Error::invalid(format!(
                "leaky relu slope must lie in (0, 1), got {a}"
            ))),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at pre-activation `x` whose image is `y`. relu'(0) = 0.
    #[inline]
    pub fn derivative(&self, x: f64, y: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn is_piecewise_linear(&self) -> bool {
        !matches!(self, Activation::Tanh)
    }

    pub fn name(&self) -> String {
        match *self {
            Activation::Identity => "identity".into(),
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu(a) => format!("leaky_relu:{a}"),
            Activation::Tanh => "tanh".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let act = match s {
            "identity" => Activation::Identity,
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "leaky_relu" => Activation::LeakyRelu(Self::DEFAULT_LEAK),
            other => match other.strip_prefix("leaky_relu:") {
                Some(a) => Activation::LeakyRelu(
                    a.parse()
                        .map_err(|_| Error::format(format!("bad leaky relu slope {a:?}")))?,
                ),
                None => return Err(Error::format(format!("unknown activation {other:?}"))),
            },
        };
        act.validate()?;
        Ok(act)
    }
}

pub fn activate(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// Chain an output gradient back through an activation.
pub(crate) fn activation_backward(
    kind: Activation,
    pre: &Tensor,
    post: &Tensor,
    d_post: &Tensor,
) -> Tensor {
    let data = pre
        .data()
        .iter()
        .zip(post.data())
        .zip(d_post.data())
        .map(|((&x, &y), &g)| g * kind.derivative(x, y))
        .collect();
    Tensor {
        shape: pre.shape.clone(),
        data,
    }
}

/// Batch statistics retained for the normalization backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    /// Standardized inputs, per example.
    pub x_hat: Vec<Tensor>,
    /// `1 / sqrt(var + eps)` per channel.
    pub inv_std: Vec<f64>,
}

/// Per-channel batch normalization: each channel is standardized with the
/// mean and variance pooled over the batch and all spatial positions, then
/// scaled by `gain` and shifted by `shift`.
pub fn normalize_channels(
    batch: &[Tensor],
    gain: &[f64],
    shift: &[f64],
    eps: f64,
) -> Result<(Vec<Tensor>, NormCache)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::invalid("normalization needs a batch of at least one example"))?;
    if eps <= 0.0 {
        return Err(Error::invalid("normalization epsilon must be positive"));
    }
    let c = first.channels();
    if gain.len() != c || shift.len() != c {
        return Err(Error::shape(format!(
            "normalization parameters have {}/{} entries for {} channels",
            gain.len(),
            shift.len(),
            c
        )));
    }
    if batch.iter().any(|t| t.shape() != first.shape()) {
        return Err(Error::shape("normalization batch members differ in shape"));
    }
    let per = first.numel() / c;
    let count = (per * batch.len()) as f64;
    let mut inv_std = vec![0.0; c];
    let mut mean = vec![0.0; c];
    for ch in 0..c {
        let m = batch
            .iter()
            .map(|t| t.data()[ch * per..(ch + 1) * per].iter().sum::<f64>())
            .sum::<f64>()
            / count;
        let var = batch
            .iter()
            .map(|t| {
                t.data()[ch * per..(ch + 1) * per]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / count;
        mean[ch] = m;
        inv_std[ch] = 1.0 / (var + eps).sqrt();
    }
    let mut x_hat = Vec::with_capacity(batch.len());
    let mut out = Vec::with_capacity(batch.len());
    for t in batch {
        let mut xh = t.clone();
        let mut y = t.clone();
        for ch in 0..c {
            for idx in ch * per..(ch + 1) * per {
                let h = (t.data[idx] - mean[ch]) * inv_std[ch];
                xh.data[idx] = h;
                y.data[idx] = gain[ch] * h + shift[ch];
            }
        }
        x_hat.push(xh);
        out.push(y);
    }
    Ok((out, NormCache { x_hat, inv_std }))
}

/// Backward pass of [`normalize_channels`]. Returns input gradients and
/// accumulates into `d_gain` / `d_shift`.
pub fn normalize_channels_backward(
    cache: &NormCache,
    gain: &[f64],
    d_out: &[Tensor],
    d_gain: &mut [f64],
    d_shift: &mut [f64],
) -> Vec<Tensor> {
    let c = gain.len();
    let per = cache.x_hat[0].numel() / c;
    let count = (per * d_out.len()) as f64;
    let mut mean_g = vec![0.0; c];
    let mut mean_gx = vec![0.0; c];
    for (g, xh) in d_out.iter().zip(&cache.x_hat) {
        for ch in 0..c {
            for idx in ch * per..(ch + 1) * per {
                mean_g[ch] += g.data[idx];
                mean_gx[ch] += g.data[idx] * xh.data[idx];
            }
        }
    }
    for ch in 0..c {
        d_shift[ch] += mean_g[ch];
        d_gain[ch] += mean_gx[ch];
        mean_g[ch] /= count;
        mean_gx[ch] /= count;
    }
    d_out
        .iter()
        .zip(&cache.x_hat)
        .map(|(g, xh)| {
            let mut d = g.clone();
            for ch in 0..c {
                let scale = gain[ch] * cache.inv_std[ch];
                for idx in ch * per..(ch + 1) * per {
                    d.data[idx] = scale * (g.data[idx] - mean_g[ch] - xh.data[idx] * mean_gx[ch]);
                }
            }
            d
        })
        .collect()
}
