//! Helpers shared by the integration tests: random small networks, central
//! finite differences, and the synthetic 16x16 image benchmark.

#![allow(dead_code)]

use std::sync::Arc;

use abp::generator::{backward_data, backward_weights, forward_batch, LayerSpec, NetSpec, Weights};
use abp::inference::{grad_log_joint_z, log_joint, Sample};
use abp::latent_tools::sample_prior;
use abp::observation::{make_pepper_mask, make_sensing_matrix, ObservationModel};
use abp::tensor::{Activation, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-5;

pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central<F: FnMut(f64) -> f64>(mut f: F) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

pub const ACTIVATIONS: [Activation; 4] = [
    Activation::Identity,
    Activation::Relu,
    Activation::LeakyRelu(0.2),
    Activation::Tanh,
];

/// A small random network. `idx` cycles the depth (1 to 3 layers), the
/// activation kind and whether a vector or spatial latent is used; every
/// fourth net normalizes its first layer.
pub fn random_net(idx: usize, rng: &mut ChaCha8Rng) -> NetSpec {
    let depth = 1 + idx % 3;
    let act = ACTIVATIONS[idx % 4];
    let normalize = idx % 4 == 1 && depth > 1;
    let vector_latent = (idx / 2).is_multiple_of(2);
    let mut layers = Vec::new();
    let latent = if vector_latent {
        let c = rng.random_range(1..=3);
        layers.push(LayerSpec::dense(&[c, 2, 3], act).normalized(normalize));
        vec![rng.random_range(2..=4)]
    } else {
        let c = rng.random_range(1..=3);
        layers.push(LayerSpec::deconv(c, &[3, 3], 1 + idx % 2, act).normalized(normalize));
        vec![2, 2, 3]
    };
    for l in 1..depth {
        let out = if l + 1 == depth { 1 + idx % 2 } else { 2 };
        let kernel = if l % 2 == 0 { vec![3, 3] } else { vec![2, 3] };
        layers.push(LayerSpec::deconv(out, &kernel, 1 + (idx + l) % 2, act));
    }
    NetSpec::new(latent, layers).unwrap()
}

/// Weights with unit-scale kernels and random biases and gains so every
/// parameter has a non-trivial gradient.
pub fn random_weights(spec: &NetSpec, rng: &mut ChaCha8Rng) -> Weights {
    let mut w = Weights::init(spec, 0.7, rng);
    for t in w.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
    w
}

/// The observation model selected by `idx`: full, pepper-masked or
/// projected.
pub fn random_observation(idx: usize, shape: &[usize], rng: &mut ChaCha8Rng) -> ObservationModel {
    let numel: usize = shape.iter().product();
    match idx % 3 {
        0 => ObservationModel::Full,
        1 => ObservationModel::masked(make_pepper_mask(shape, 0.4, rng).unwrap()).unwrap(),
        _ => {
            let k = (numel / 2).max(1);
            ObservationModel::projected(Arc::new(make_sensing_matrix(k, numel, 0.5, rng).unwrap()))
                .unwrap()
        }
    }
}

/// Worst relative errors of `backward_data`, `backward_weights` and
/// `grad_log_joint_z` against central differences for net `idx`.
pub struct GradReport {
    pub data: f64,
    pub weights: f64,
    pub log_joint: f64,
}

pub fn check_gradients(idx: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_net(idx, &mut rng);
    let w = random_weights(&spec, &mut rng);
    let batch = if spec.has_normalization() { 3 } else { 2 };
    let latents: Vec<Tensor> = (0..batch)
        .map(|_| randn(spec.latent_shape(), 1.0, &mut rng))
        .collect();
    let probes: Vec<Tensor> = (0..batch)
        .map(|_| randn(spec.output_shape(), 1.0, &mut rng))
        .collect();

    // L = sum_b <probe_b, f(Z_b; W)>
    let objective = |w: &Weights, z: &[Tensor]| -> f64 {
        let (out, _) = forward_batch(&spec, w, z).unwrap();
        out.iter().zip(&probes).map(|(y, p)| y.dot(p)).sum()
    };

    let (_, cache) = forward_batch(&spec, &w, &latents).unwrap();
    let dz = backward_data(&cache, &probes).unwrap();
    let dw = backward_weights(&cache, &probes).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for b in 0..batch {
        for j in 0..latents[b].numel() {
            analytic.push(dz[b].data()[j]);
            numeric.push(central(|h| {
                let mut z = latents.clone();
                z[b].data_mut()[j] += h;
                objective(&w, &z)
            }));
        }
    }
    let data = rel_err(&analytic, &numeric);

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let n_tensors = w.tensors().len();
    for t in 0..n_tensors {
        let len = w.tensors()[t].numel();
        for j in 0..len {
            analytic.push(dw.tensors()[t].data()[j]);
            numeric.push(central(|h| {
                let mut wp = w.clone();
                wp.tensors_mut()[t].data_mut()[j] += h;
                objective(&wp, &latents)
            }));
        }
    }
    let weights = rel_err(&analytic, &numeric);

    let truth = randn(spec.output_shape(), 0.5, &mut rng);
    let model = random_observation(idx, spec.output_shape(), &mut rng);
    let sample = Sample::observe(&truth, model).unwrap();
    let sigma = 0.3;
    let z = &latents[0];
    let g = grad_log_joint_z(&sample.obs, z, &w, &spec, &sample.model, sigma).unwrap();
    let numeric: Vec<f64> = (0..z.numel())
        .map(|j| {
            central(|h| {
                let mut zp = z.clone();
                zp.data_mut()[j] += h;
                log_joint(&sample.obs, &zp, &w, &spec, &sample.model, sigma).unwrap()
            })
        })
        .collect();
    let log_joint_err = rel_err(g.data(), &numeric);

    GradReport {
        data,
        weights,
        log_joint: log_joint_err,
    }
}

/// Ground-truth generator of the synthetic benchmark: a dense layer from a
/// 4-vector to an 8x8x8 map, then a 5x5 deconvolution with up-sampling 2 to
/// a 16x16 grayscale image. Layers carry no bias.
pub fn synthetic_spec(latent_dim: usize) -> NetSpec {
    NetSpec::new(
        vec![latent_dim],
        vec![
            LayerSpec::dense(&[8, 8, 8], Activation::LeakyRelu(0.2)).with_bias(false),
            LayerSpec::deconv(1, &[5, 5], 2, Activation::Tanh).with_bias(false),
        ],
    )
    .unwrap()
}

pub const SYNTHETIC_D: usize = 4;

pub fn synthetic_truth() -> Weights {
    let spec = synthetic_spec(SYNTHETIC_D);
    let mut w = Weights::zeros(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (layer, std) in w.layers.iter_mut().zip([0.5, 0.15]) {
        let normal = Normal::new(0.0, std).unwrap();
        layer
            .weight
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = normal.sample(&mut rng));
    }
    w
}

/// `n` noise-free images `f(Z_i; W*)` with `Z_i ~ N(0, I_4)` drawn from
/// `seed`.
pub fn synthetic_images(n: usize, seed: u64) -> Vec<Tensor> {
    let spec = synthetic_spec(SYNTHETIC_D);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<Tensor> = (0..n)
        .map(|_| sample_prior(&[SYNTHETIC_D], &mut rng))
        .collect();
    forward_batch(&spec, &synthetic_truth(), &z).unwrap().0
}

pub const TRAIN_SEED: u64 = 7;
pub const TEST_SEED: u64 = 99;
