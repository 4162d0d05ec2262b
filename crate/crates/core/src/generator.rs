//! The top-down generator network `Y = f(Z; W)`.
//!
//! Each layer computes `Z_below = act(norm?(W_l Z_above + b_l))`, where the
//! linear part is either a fully-connected map or a transposed convolution.
//! [`forward_batch`] records every intermediate in a [`ForwardCache`]; the
//! latent gradient ([`backward_data`]) and the weight gradient
//! ([`backward_weights`]) both run through [`chain_rule`], so the
//! layer-to-layer derivative code exists exactly once.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{
    self, activation_backward, channel_sums, deconv_backward_input, deconv_backward_kernels,
    deconv_forward, deconv_output_shape, dense_backward_input, dense_backward_weight,
    dense_forward, normalize_channels, normalize_channels_backward, spatial_extent, Activation,
    NormCache, Tensor,
};

/// Variance floor of channel normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Standard deviation of freshly initialized weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Fully-connected map from the flattened input onto `out_shape`.
    Dense { out_shape: Vec<usize> },
    /// Transposed convolution; `kernel` is `[k]` for 1-D or `[kh, kw]`.
    Deconv {
        out_channels: usize,
        kernel: Vec<usize>,
        up_factor: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
    pub normalize: bool,
    /// When false the bias is held at its initial zero and gets no gradient.
    pub bias: bool,
}

impl LayerSpec {
    pub fn dense(out_shape: &[usize], activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Dense {
                out_shape: out_shape.to_vec(),
            },
            activation,
            normalize: false,
            bias: true,
        }
    }

    pub fn deconv(
        out_channels: usize,
        kernel: &[usize],
        up_factor: usize,
        activation: Activation,
    ) -> Self {
        LayerSpec {
            kind: LayerKind::Deconv {
                out_channels,
                kernel: kernel.to_vec(),
                up_factor,
            },
            activation,
            normalize: false,
            bias: true,
        }
    }

    pub fn normalized(mut self, on: bool) -> Self {
        self.normalize = on;
        self
    }

    pub fn with_bias(mut self, on: bool) -> Self {
        self.bias = on;
        self
    }
}

/// Layered description of the network. Input and output shapes of every
/// layer are derived from `latent_shape` at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    latent_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
}

impl NetSpec {
    pub fn new(latent_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        if latent_shape.is_empty() || latent_shape.contains(&0) {
            return Err(Error::shape(format!(
                "invalid latent shape {latent_shape:?}"
            )));
        }
        let mut shapes = vec![latent_shape.clone()];
        for (idx, layer) in layers.iter().enumerate() {
            layer.activation.validate()?;
            let input = shapes.last().unwrap();
            let out = match &layer.kind {
                LayerKind::Dense { out_shape } => {
                    if out_shape.is_empty() || out_shape.contains(&0) {
                        return Err(Error::shape(format!(
                            "layer {idx}: invalid output shape {out_shape:?}"
                        )));
                    }
                    out_shape.clone()
                }
                LayerKind::Deconv {
                    out_channels,
                    kernel,
                    up_factor,
                } => {
                    spatial_extent(input).map_err(|e| Error::shape(format!("layer {idx}: {e}")))?;
                    if kernel.len() + 1 != input.len() {
                        return Err(Error::shape(format!(
                            "layer {idx}: kernel {kernel:?} does not fit input {input:?}"
                        )));
                    }
                    if *up_factor == 0 || *out_channels == 0 || kernel.contains(&0) {
                        return Err(Error::invalid(format!(
                            "layer {idx}: extents and up factor must be at least 1"
                        )));
                    }
                    deconv_output_shape(input, *out_channels, *up_factor)?
                }
            };
            shapes.push(out);
        }
        Ok(NetSpec {
            latent_shape,
            layers,
            shapes,
        })
    }

    pub fn latent_shape(&self) -> &[usize] {
        &self.latent_shape
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_shape.iter().product()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn output_dim(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Input shape of layer `idx`.
    pub fn input_shape(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    /// Output shape of layer `idx`.
    pub fn layer_output_shape(&self, idx: usize) -> &[usize] {
        &self.shapes[idx + 1]
    }

    pub fn is_fully_convolutional(&self) -> bool {
        self.layers
            .iter()
            .all(|l| matches!(l.kind, LayerKind::Deconv { .. }))
    }

    pub fn has_normalization(&self) -> bool {
        self.layers.iter().any(|l| l.normalize)
    }

    /// Same layers driven by a latent map of a different spatial extent.
    pub fn with_latent_shape(&self, latent_shape: Vec<usize>) -> Result<Self> {
        NetSpec::new(latent_shape, self.layers.clone())
    }

    /// Parameter shapes of layer `idx`: (weight, bias).
    pub fn param_shapes(&self, idx: usize) -> (Vec<usize>, Vec<usize>) {
        let input = &self.shapes[idx];
        let output = &self.shapes[idx + 1];
        match &self.layers[idx].kind {
            LayerKind::Dense { out_shape } => {
                let out_n: usize = out_shape.iter().product();
                let in_n: usize = input.iter().product();
                (vec![out_n, in_n], vec![out_n])
            }
            LayerKind::Deconv {
                out_channels,
                kernel,
                ..
            } => {
                let mut w = vec![*out_channels, input[0]];
                w.extend_from_slice(kernel);
                (w, vec![output[0]])
            }
        }
    }

    /// Texture model: 7x7 latent map, five 5x5 deconvolutions with up-sampling
    /// 2, 512 channels halving per layer, RGB tanh output at 224x224.
    pub fn texture() -> Self {
        let relu = Activation::Relu;
        NetSpec::new(
            vec![1, 7, 7],
            vec![
                LayerSpec::deconv(512, &[5, 5], 2, relu),
                LayerSpec::deconv(256, &[5, 5], 2, relu),
                LayerSpec::deconv(128, &[5, 5], 2, relu),
                LayerSpec::deconv(64, &[5, 5], 2, relu),
                LayerSpec::deconv(3, &[5, 5], 2, Activation::Tanh).with_bias(false),
            ],
        )
        .expect("texture preset is consistent")
    }

    /// Sound model: length-6 latent sequence, four 1x25 deconvolutions with
    /// up-sampling 10, 256 channels halving, mono tanh output of 60000 samples.
    pub fn sound() -> Self {
        let relu = Activation::Relu;
        NetSpec::new(
            vec![1, 6],
            vec![
                LayerSpec::deconv(256, &[25], 10, relu),
                LayerSpec::deconv(128, &[25], 10, relu),
                LayerSpec::deconv(64, &[25], 10, relu),
                LayerSpec::deconv(1, &[25], 10, Activation::Tanh).with_bias(false),
            ],
        )
        .expect("sound preset is consistent")
    }

    /// Object model: fully-connected layer from a `d`-vector to a 512x4x4 map,
    /// then four 5x5 deconvolutions up to a 64x64 RGB image; leaky relu 0.2.
    pub fn object64(latent_dim: usize) -> Result<Self> {
        let leaky = Activation::LeakyRelu(Activation::DEFAULT_LEAK);
        NetSpec::new(
            vec![latent_dim],
            vec![
                LayerSpec::dense(&[512, 4, 4], leaky),
                LayerSpec::deconv(256, &[5, 5], 2, leaky),
                LayerSpec::deconv(128, &[5, 5], 2, leaky),
                LayerSpec::deconv(64, &[5, 5], 2, leaky),
                LayerSpec::deconv(3, &[5, 5], 2, Activation::Tanh).with_bias(false),
            ],
        )
    }

    pub fn preset(name: &str, latent_dim: Option<usize>) -> Result<Self> {
        match name {
            "texture" => Ok(NetSpec::texture()),
            "sound" => Ok(NetSpec::sound()),
            "object-64" => NetSpec::object64(latent_dim.unwrap_or(100)),
            other => Err(Error::format(format!("unknown network preset {other:?}"))),
        }
    }

    /// Canonical text form: one `key = value` line per record.
    pub fn to_text(&self) -> String {
        let mut s = format!("latent_shape = {}\n", join_shape(&self.latent_shape));
        for (idx, layer) in self.layers.iter().enumerate() {
            let input = &self.shapes[idx];
            let body = match &layer.kind {
                LayerKind::Dense { out_shape } => format!(
                    "dense in={} out={}",
                    input.iter().product::<usize>(),
                    join_shape(out_shape)
                ),
                LayerKind::Deconv {
                    out_channels,
                    kernel,
                    up_factor,
                } => format!(
                    "deconv in={} out={} kernel={} up={}",
                    input[0],
                    out_channels,
                    join_shape(kernel),
                    up_factor
                ),
            };
            s.push_str(&format!(
                "layer = {body} activation={} normalize={} bias={}\n",
                layer.activation.name(),
                layer.normalize,
                layer.bias
            ));
        }
        s.push_str(&format!(
            "output_shape = {}\n",
            join_shape(self.output_shape())
        ));
        s
    }

    /// Parse the canonical text form. Accepts the records in any
    /// interleaving with other keys, taking layers in order of appearance.
    pub fn from_text(text: &str) -> Result<Self> {
        let entries: Vec<(String, String)> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Error::format(format!("expected key = value, got {l:?}")))
            })
            .collect::<Result<_>>()?;
        NetSpec::from_entries(entries.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub(crate) fn from_entries<'a>(
        entries: impl Iterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut latent = None;
        let mut output = None;
        let mut layers = Vec::new();
        let mut declared_inputs = Vec::new();
        for (key, value) in entries {
            match key {
                "latent_shape" => latent = Some(parse_shape(value)?),
                "output_shape" => output = Some(parse_shape(value)?),
                "layer" => {
                    let (layer, input) = parse_layer(value)?;
                    layers.push(layer);
                    declared_inputs.push(input);
                }
                _ => {}
            }
        }
        let latent =
            latent.ok_or_else(|| Error::format("network description lacks latent_shape"))?;
        let spec = NetSpec::new(latent, layers)?;
        for (idx, declared) in declared_inputs.iter().enumerate() {
            let input = spec.input_shape(idx);
            let actual = match spec.layers[idx].kind {
                LayerKind::Dense { .. } => input.iter().product(),
                LayerKind::Deconv { .. } => input[0],
            };
            if *declared != actual {
                return Err(Error::format(format!(
                    "layer {idx} declares input extent {declared}, network provides {actual}"
                )));
            }
        }
        if let Some(out) = output {
            if out != spec.output_shape() {
                return Err(Error::format(format!(
                    "declared output shape {:?} differs from composed shape {:?}",
                    out,
                    spec.output_shape()
                )));
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for NetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

pub fn join_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::format(format!("bad shape {s:?}")))
        })
        .collect()
}

fn parse_layer(s: &str) -> Result<(LayerSpec, usize)> {
    let mut parts = s.split_whitespace();
    let kind = parts
        .next()
        .ok_or_else(|| Error::format("empty layer record"))?;
    let mut fields = std::collections::HashMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad layer field {p:?}")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::format(format!("layer record {s:?} lacks {k}")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(format!("layer field {k} is not an integer")))
    };
    let activation = Activation::parse(get("activation")?)?;
    let normalize = match fields.get("normalize").copied().unwrap_or("false") {
        "true" | "1" => true,
        "false" | "0" => false,
        other => return Err(Error::format(format!("bad normalize flag {other:?}"))),
    };
    let bias = match fields.get("bias").copied().unwrap_or("true") {
        "true" | "1" => true,
        "false" | "0" => false,
        other => return Err(Error::format(format!("bad bias flag {other:?}"))),
    };
    let input = int("in")?;
    let kind = match kind {
        "dense" => LayerKind::Dense {
            out_shape: parse_shape(get("out")?)?,
        },
        "deconv" => LayerKind::Deconv {
            out_channels: int("out")?,
            kernel: parse_shape(get("kernel")?)?,
            up_factor: int("up")?,
        },
        other => return Err(Error::format(format!("unknown layer kind {other:?}"))),
    };
    Ok((
        LayerSpec {
            kind,
            activation,
            normalize,
            bias,
        },
        input,
    ))
}

/// Parameters of one layer. `gain`/`shift` exist only on normalized layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gain: Option<Tensor>,
    pub shift: Option<Tensor>,
}

/// All network parameters, ordered top (latent side) to bottom. The same
/// type carries gradients and momentum velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub layers: Vec<LayerParams>,
}

impl Weights {
    pub fn zeros(spec: &NetSpec) -> Self {
        let layers = (0..spec.layers().len())
            .map(|idx| {
                let (w, b) = spec.param_shapes(idx);
                let norm = spec.layers()[idx].normalize;
                let c = spec.layer_output_shape(idx)[0];
                LayerParams {
                    weight: Tensor::zeros(&w),
                    bias: Tensor::zeros(&b),
                    gain: norm.then(|| Tensor::zeros(&[c])),
                    shift: norm.then(|| Tensor::zeros(&[c])),
                }
            })
            .collect();
        Weights { layers }
    }

    /// Gaussian weights with standard deviation `std`, zero biases, unit
    /// normalization gains.
    pub fn init<R: Rng + ?Sized>(spec: &NetSpec, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut w = Weights::zeros(spec);
        for layer in &mut w.layers {
            layer
                .weight
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = normal.sample(rng));
            if let Some(g) = layer.gain.as_mut() {
                g.data_mut().fill(1.0);
            }
        }
        w
    }

    pub fn zeros_like(&self) -> Self {
        let mut w = self.clone();
        w.tensors_mut()
            .into_iter()
            .for_each(|t| t.data_mut().fill(0.0));
        w
    }

    /// Every parameter tensor with a stable name, in storage order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (idx, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{idx}.weight"), &l.weight));
            out.push((format!("layer{idx}.bias"), &l.bias));
            if let Some(g) = &l.gain {
                out.push((format!("layer{idx}.gain"), g));
            }
            if let Some(s) = &l.shift {
                out.push((format!("layer{idx}.shift"), s));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(g) = l.gain.as_mut() {
                out.push(g);
            }
            if let Some(s) = l.shift.as_mut() {
                out.push(s);
            }
        }
        out
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Weights) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(alpha));
    }

    pub fn dot(&self, other: &Weights) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn check(&self, spec: &NetSpec) -> Result<()> {
        if self.layers.len() != spec.layers().len() {
            return Err(Error::shape(format!(
                "weights have {} layers, network has {}",
                self.layers.len(),
                spec.layers().len()
            )));
        }
        for (idx, l) in self.layers.iter().enumerate() {
            let (w, b) = spec.param_shapes(idx);
            if l.weight.shape() != w.as_slice() || l.bias.shape() != b.as_slice() {
                return Err(Error::shape(format!(
                    "layer {idx}: parameters {:?}/{:?}, expected {:?}/{:?}",
                    l.weight.shape(),
                    l.bias.shape(),
                    w,
                    b
                )));
            }
            let norm = spec.layers()[idx].normalize;
            if norm != (l.gain.is_some() && l.shift.is_some()) {
                return Err(Error::shape(format!(
                    "layer {idx}: normalization parameters do not match the network"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<Tensor>,
    pre: Vec<Tensor>,
    normed: Option<(Vec<Tensor>, NormCache)>,
    post: Vec<Tensor>,
}

/// Intermediates of one forward pass over a mini-batch.
#[derive(Debug, Clone)]
pub struct ForwardCache<'a> {
    spec: &'a NetSpec,
    weights: &'a Weights,
    layers: Vec<LayerCache>,
}

impl<'a> ForwardCache<'a> {
    pub fn batch_size(&self) -> usize {
        self.layers[0].input.len()
    }

    pub fn output(&self) -> &[Tensor] {
        &self.layers.last().unwrap().post
    }

    pub fn latents(&self) -> &[Tensor] {
        &self.layers[0].input
    }

    /// Pre-activations and activations of layer `idx`.
    pub fn layer(&self, idx: usize) -> (&[Tensor], &[Tensor]) {
        let l = &self.layers[idx];
        let pre = match &l.normed {
            Some((n, _)) => n.as_slice(),
            None => l.pre.as_slice(),
        };
        (pre, &l.post)
    }

    pub fn spec(&self) -> &NetSpec {
        self.spec
    }

    pub fn weights(&self) -> &Weights {
        self.weights
    }
}

fn linear_forward(spec: &NetSpec, idx: usize, p: &LayerParams, x: &Tensor) -> Result<Tensor> {
    match &spec.layers()[idx].kind {
        LayerKind::Dense { out_shape } => dense_forward(x, &p.weight, &p.bias, out_shape),
        LayerKind::Deconv { up_factor, .. } => deconv_forward(x, &p.weight, &p.bias, *up_factor),
    }
}

/// Evaluate `f(Z; W)` for every latent of a mini-batch.
pub fn forward_batch<'a>(
    spec: &'a NetSpec,
    weights: &'a Weights,
    latents: &[Tensor],
) -> Result<(Vec<Tensor>, ForwardCache<'a>)> {
    if latents.is_empty() {
        return Err(Error::invalid("forward pass over an empty batch"));
    }
    weights.check(spec)?;
    for z in latents {
        if z.shape() != spec.latent_shape() {
            return Err(Error::shape(format!(
                "layer 0: latent shape {:?}, network expects {:?}",
                z.shape(),
                spec.latent_shape()
            )));
        }
    }
    let mut layers = Vec::with_capacity(spec.layers().len());
    let mut current = latents.to_vec();
    for (idx, (layer, p)) in spec.layers().iter().zip(&weights.layers).enumerate() {
        let pre = current
            .par_iter()
            .map(|x| linear_forward(spec, idx, p, x))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::shape(format!("layer {idx}: {e}")))?;
        let normed = if layer.normalize {
            let gain = p.gain.as_ref().unwrap().data();
            let shift = p.shift.as_ref().unwrap().data();
            Some(normalize_channels(&pre, gain, shift, NORM_EPS)?)
        } else {
            None
        };
        let act_in = normed.as_ref().map(|(n, _)| n).unwrap_or(&pre);
        let post: Vec<Tensor> = act_in
            .par_iter()
            .map(|t| tensor::activate(t, layer.activation))
            .collect();
        let input = std::mem::replace(&mut current, post.clone());
        layers.push(LayerCache {
            input,
            pre,
            normed,
            post,
        });
    }
    Ok((
        current,
        ForwardCache {
            spec,
            weights,
            layers,
        },
    ))
}

/// Single-example forward pass.
pub fn forward<'a>(
    spec: &'a NetSpec,
    weights: &'a Weights,
    latent: &Tensor,
) -> Result<(Tensor, ForwardCache<'a>)> {
    let (mut out, cache) = forward_batch(spec, weights, std::slice::from_ref(latent))?;
    Ok((out.pop().unwrap(), cache))
}

/// Back-propagate output gradients `d_out` through the cached pass.
///
/// Walks the layers bottom-up applying the layer-to-layer chain rule. When
/// `grads` is given, every layer's parameter gradient (summed over the
/// batch in ascending example order) is accumulated into it. Returns the
/// latent gradients when `need_latent` is set, otherwise an empty vector.
pub fn chain_rule(
    cache: &ForwardCache<'_>,
    d_out: &[Tensor],
    mut grads: Option<&mut Weights>,
    need_latent: bool,
) -> Result<Vec<Tensor>> {
    let spec = cache.spec;
    if d_out.len() != cache.batch_size() {
        return Err(Error::shape(format!(
            "gradient batch of {} for a cached batch of {}",
            d_out.len(),
            cache.batch_size()
        )));
    }
    for (g, y) in d_out.iter().zip(cache.output()) {
        if g.shape() != y.shape() {
            return Err(Error::shape(format!(
                "output gradient {:?} does not match cached output {:?}",
                g.shape(),
                y.shape()
            )));
        }
    }
    let mut delta = d_out.to_vec();
    for idx in (0..spec.layers().len()).rev() {
        let layer = &spec.layers()[idx];
        let lc = &cache.layers[idx];
        let p = &cache.weights.layers[idx];
        let act_in = lc.normed.as_ref().map(|(n, _)| n).unwrap_or(&lc.pre);
        let d_act: Vec<Tensor> = act_in
            .par_iter()
            .zip(&lc.post)
            .zip(&delta)
            .map(|((x, y), g)| activation_backward(layer.activation, x, y, g))
            .collect();
        let d_pre = match &lc.normed {
            Some((_, nc)) => {
                let gain = p.gain.as_ref().unwrap().data();
                let c = gain.len();
                let mut d_gain = vec![0.0; c];
                let mut d_shift = vec![0.0; c];
                let d = normalize_channels_backward(nc, gain, &d_act, &mut d_gain, &mut d_shift);
                if let Some(g) = grads.as_deref_mut() {
                    let gl = &mut g.layers[idx];
                    for (a, b) in gl.gain.as_mut().unwrap().data_mut().iter_mut().zip(&d_gain) {
                        *a += b;
                    }
                    for (a, b) in gl
                        .shift
                        .as_mut()
                        .unwrap()
                        .data_mut()
                        .iter_mut()
                        .zip(&d_shift)
                    {
                        *a += b;
                    }
                }
                d
            }
            None => d_act,
        };
        if let Some(g) = grads.as_deref_mut() {
            accumulate_param_grads(spec, idx, lc, &d_pre, &mut g.layers[idx])?;
        }
        if idx == 0 && !need_latent {
            return Ok(Vec::new());
        }
        let in_shape = spec.input_shape(idx);
        delta = d_pre
            .par_iter()
            .map(|g| match &layer.kind {
                LayerKind::Dense { .. } => Ok(dense_backward_input(g, &p.weight, in_shape)),
                LayerKind::Deconv { up_factor, .. } => {
                    deconv_backward_input(g, &p.weight, *up_factor, in_shape)
                }
            })
            .collect::<Result<_>>()?;
    }
    Ok(delta)
}

/// Examples whose weight gradients are materialized at once.
const GRAD_CHUNK: usize = 8;

fn accumulate_param_grads(
    spec: &NetSpec,
    idx: usize,
    lc: &LayerCache,
    d_pre: &[Tensor],
    out: &mut LayerParams,
) -> Result<()> {
    let kind = &spec.layers()[idx].kind;
    // Per-example gradients are summed in ascending example order whatever
    // the thread count.
    for (inputs, grads) in lc.input.chunks(GRAD_CHUNK).zip(d_pre.chunks(GRAD_CHUNK)) {
        let per_example: Vec<Tensor> = inputs
            .par_iter()
            .zip(grads)
            .map(|(x, g)| {
                let mut dw = Tensor::zeros(out.weight.shape());
                match kind {
                    LayerKind::Dense { .. } => dense_backward_weight(x, g, &mut dw),
                    LayerKind::Deconv { up_factor, .. } => {
                        deconv_backward_kernels(x, g, *up_factor, &mut dw)?
                    }
                }
                Ok(dw)
            })
            .collect::<Result<_>>()?;
        for dw in &per_example {
            out.weight.axpy(1.0, dw);
        }
    }
    if spec.layers()[idx].bias {
        for g in d_pre {
            channel_sums(g, &mut out.bias);
        }
    }
    Ok(())
}

/// Latent gradients `(df/dZ)^T dY` for each batch member.
pub fn backward_data(cache: &ForwardCache<'_>, d_out: &[Tensor]) -> Result<Vec<Tensor>> {
    chain_rule(cache, d_out, None, true)
}

/// Parameter gradients `sum_i (df(Z_i)/dW)^T dY_i`.
pub fn backward_weights(cache: &ForwardCache<'_>, d_out: &[Tensor]) -> Result<Weights> {
    let mut grads = cache.weights.zeros_like();
    chain_rule(cache, d_out, Some(&mut grads), false)?;
    Ok(grads)
}

/// Both gradients from one pass.
pub fn backward(cache: &ForwardCache<'_>, d_out: &[Tensor]) -> Result<(Vec<Tensor>, Weights)> {
    let mut grads = cache.weights.zeros_like();
    let dz = chain_rule(cache, d_out, Some(&mut grads), true)?;
    Ok((dz, grads))
}

/// Run a fully-convolutional network on a latent map larger than the one it
/// was trained on, producing a proportionally larger signal.
pub fn expand_synthesize(weights: &Weights, spec: &NetSpec, latent: &Tensor) -> Result<Tensor> {
    if !spec.is_fully_convolutional() {
        return Err(Error::invalid(
            "expansion needs a fully convolutional network (no fully-connected layer)",
        ));
    }
    let trained = spec.latent_shape();
    let big = latent.shape();
    if big.len() != trained.len()
        || big[0] != trained[0]
        || big[1..].iter().zip(&trained[1..]).any(|(b, t)| b < t)
    {
        return Err(Error::shape(format!(
            "expansion latent {big:?} must keep {} channels and cover the trained extent {trained:?}",
            trained[0]
        )));
    }
    let wide = spec.with_latent_shape(big.to_vec())?;
    let (out, _) = forward(&wide, weights, latent)?;
    Ok(out)
}

/// Jacobian `W_delta` (D x d, row-major) and offset `b_delta` of the linear
/// piece of a piecewise-linear network containing `latent`, so that
/// `f(Z') = W_delta Z' + b_delta` for every `Z'` sharing its activation
/// pattern. Rows come from one latent back-propagation per output unit.
pub fn local_linear_map(
    latent: &Tensor,
    weights: &Weights,
    spec: &NetSpec,
) -> Result<(Vec<f64>, Tensor)> {
    if let Some(idx) = spec
        .layers()
        .iter()
        .position(|l| !l.activation.is_piecewise_linear())
    {
        return Err(Error::invalid(format!(
            "layer {idx} uses tanh; the network is not piecewise linear"
        )));
    }
    if spec.has_normalization() {
        return Err(Error::invalid(
            "batch normalization couples examples; the network is not piecewise linear per example",
        ));
    }
    let (y, cache) = forward(spec, weights, latent)?;
    let (d, big_d) = (spec.latent_dim(), spec.output_dim());
    let rows: Vec<Vec<f64>> = (0..big_d)
        .into_par_iter()
        .map(|j| {
            let mut probe = Tensor::zeros(spec.output_shape());
            probe.data_mut()[j] = 1.0;
            chain_rule(&cache, std::slice::from_ref(&probe), None, true)
                .map(|mut dz| dz.pop().unwrap().into_data())
        })
        .collect::<Result<_>>()?;
    let mut jac = Vec::with_capacity(big_d * d);
    rows.into_iter().for_each(|r| jac.extend(r));
    let mut offset = y;
    for (j, o) in offset.data_mut().iter_mut().enumerate() {
        *o -= jac[j * d..(j + 1) * d]
            .iter()
            .zip(latent.data())
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
    Ok((jac, offset))
}
