//! Posterior inference of latent factors: the complete-data log-density,
//! its latent gradient, and the Langevin / gradient-descent transitions
//! that explain an observation away starting from a warm chain.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generator::{backward_data, forward, forward_batch, NetSpec, Weights};
use crate::observation::{loss_and_grad, Observation, ObservationModel};
use crate::tensor::Tensor;

/// One training or test signal as the learner sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Observation,
    pub model: ObservationModel,
}

impl Sample {
    pub fn full(signal: Tensor) -> Self {
        Sample {
            obs: Observation { data: signal },
            model: ObservationModel::Full,
        }
    }

    pub fn observe(signal: &Tensor, model: ObservationModel) -> Result<Self> {
        Ok(Sample {
            obs: model.observe(signal)?,
            model,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    Langevin,
    /// Langevin without the noise term.
    GradientDescent,
}

impl InferMode {
    pub fn name(&self) -> &'static str {
        match self {
            InferMode::Langevin => "langevin",
            InferMode::GradientDescent => "gradient_descent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "langevin" => Ok(InferMode::Langevin),
            "gradient_descent" => Ok(InferMode::GradientDescent),
            other => Err(Error::format(format!("unknown inference mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferConfig {
    pub steps: usize,
    pub step_size: f64,
    pub sigma: f64,
    pub mode: InferMode,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig::texture()
    }
}

impl InferConfig {
    pub const SIGMA: f64 = 0.3;

    /// l = 10 steps of size 0.1.
    pub fn texture() -> Self {
        InferConfig {
            steps: 10,
            step_size: 0.1,
            sigma: Self::SIGMA,
            mode: InferMode::Langevin,
        }
    }

    /// l = 30 steps of size 0.3.
    pub fn object() -> Self {
        InferConfig {
            steps: 30,
            step_size: 0.3,
            ..InferConfig::texture()
        }
    }

    /// Test-time reconstruction: 300 steps of size 0.05 from a prior draw.
    pub fn test_time() -> Self {
        InferConfig {
            steps: 300,
            step_size: 0.05,
            ..InferConfig::texture()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// A latent vector and the number of learning iterations its chain has run.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub chain_age: usize,
}

impl LatentState {
    pub fn new(z: Tensor) -> Self {
        LatentState { z, chain_age: 0 }
    }
}

/// `log p(Y, Z; W)` up to a constant:
/// `-loss(Y, f(Z; W)) / (2 sigma^2) - ||Z||^2 / 2`.
pub fn log_joint(
    obs: &Observation,
    z: &Tensor,
    w: &Weights,
    spec: &NetSpec,
    model: &ObservationModel,
    sigma: f64,
) -> Result<f64> {
    let (y, _) = forward(spec, w, z)?;
    let (loss, _) = loss_and_grad(obs, &y, model)?;
    Ok(-loss / (2.0 * sigma * sigma) - 0.5 * z.norm_sq())
}

/// Latent gradient of [`log_joint`]: the residual pulled back through the
/// observation model and the network, scaled by `1 / sigma^2`, minus `Z`.
pub fn grad_log_joint_z(
    obs: &Observation,
    z: &Tensor,
    w: &Weights,
    spec: &NetSpec,
    model: &ObservationModel,
    sigma: f64,
) -> Result<Tensor> {
    let (y, cache) = forward(spec, w, z)?;
    let (_, d_loss) = loss_and_grad(obs, &y, model)?;
    let mut dz = backward_data(&cache, std::slice::from_ref(&d_loss))?;
    Ok(drift(z, &dz.pop().unwrap(), sigma))
}

/// Turn a latent loss gradient into the log-posterior gradient.
fn drift(z: &Tensor, d_loss_dz: &Tensor, sigma: f64) -> Tensor {
    let mut g = d_loss_dz.scaled(-1.0 / (2.0 * sigma * sigma));
    g.axpy(-1.0, z);
    g
}

/// `Z' = Z + s U + (s^2 / 2) grad`, `U ~ N(0, I)`.
pub fn langevin_step<R: Rng + ?Sized>(z: &Tensor, grad: &Tensor, step: f64, rng: &mut R) -> Tensor {
    let mut next = z.clone();
    let half = 0.5 * step * step;
    for (v, g) in next.data_mut().iter_mut().zip(grad.data()) {
        let u: f64 = StandardNormal.sample(rng);
        *v += step * u + half * g;
    }
    next
}

/// Deterministic ascent step of size `s^2 / 2`.
pub fn gradient_step(z: &Tensor, grad: &Tensor, step: f64) -> Tensor {
    let mut next = z.clone();
    next.axpy(0.5 * step * step, grad);
    next
}

/// Run `cfg.steps` transitions from the current latent (warm start).
pub fn infer<R: Rng + Send>(
    sample: &Sample,
    state: &LatentState,
    w: &Weights,
    spec: &NetSpec,
    cfg: &InferConfig,
    rng: &mut R,
) -> Result<LatentState> {
    let mut states = vec![state.clone()];
    infer_batch(
        std::slice::from_ref(sample),
        &mut states,
        w,
        spec,
        cfg,
        std::slice::from_mut(rng),
    )?;
    Ok(states.pop().unwrap())
}

/// Joint transitions for a mini-batch; member `i` uses `rngs[i]`.
///
/// All members share one forward pass per step. Without channel
/// normalization the members are independent and the result equals running
/// [`infer`] on each one separately.
pub fn infer_batch<R: Rng + Send>(
    samples: &[Sample],
    states: &mut [LatentState],
    w: &Weights,
    spec: &NetSpec,
    cfg: &InferConfig,
    rngs: &mut [R],
) -> Result<()> {
    cfg.validate()?;
    if samples.len() != states.len() || samples.len() != rngs.len() {
        return Err(Error::invalid(format!(
            "batch of {} samples, {} states and {} random streams",
            samples.len(),
            states.len(),
            rngs.len()
        )));
    }
    if samples.is_empty() {
        return Ok(());
    }
    for _ in 0..cfg.steps {
        let latents: Vec<Tensor> = states.iter().map(|s| s.z.clone()).collect();
        let (outputs, cache) = forward_batch(spec, w, &latents)?;
        let d_out = outputs
            .par_iter()
            .zip(samples)
            .map(|(y, s)| loss_and_grad(&s.obs, y, &s.model).map(|(_, g)| g))
            .collect::<Result<Vec<_>>>()?;
        let dz = backward_data(&cache, &d_out)?;
        states
            .par_iter_mut()
            .zip(rngs.par_iter_mut())
            .zip(&dz)
            .for_each(|((state, rng), g)| {
                let grad = drift(&state.z, g, cfg.sigma);
                state.z = match cfg.mode {
                    InferMode::Langevin => langevin_step(&state.z, &grad, cfg.step_size, rng),
                    InferMode::GradientDescent => gradient_step(&state.z, &grad, cfg.step_size),
                };
            });
        if let Some(bad) = states.iter().position(|s| !s.z.is_finite()) {
            return Err(Error::numerical(format!(
                "latent of batch member {bad} became non-finite"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::LayerSpec;
    use crate::tensor::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_setup(d: usize, big_d: usize, seed: u64) -> (NetSpec, Weights, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = NetSpec::new(
            vec![d],
            vec![LayerSpec::dense(&[big_d], Activation::Identity)],
        )
        .unwrap();
        let w = Weights::init(&spec, 1.0, &mut rng);
        (spec, w, rng)
    }

    fn randn(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec((0..n).map(|_| StandardNormal.sample(rng)).collect())
    }

    #[test]
    fn log_joint_values() {
        let (spec, w, mut rng) = linear_setup(2, 3, 41);
        let z0 = Tensor::zeros(&[2]);
        let y = forward(&spec, &w, &z0).unwrap().0;
        let s = Sample::full(y.clone());
        assert_eq!(
            log_joint(&s.obs, &z0, &w, &spec, &s.model, 0.3).unwrap(),
            0.0
        );

        let scalar =
            NetSpec::new(vec![1], vec![LayerSpec::dense(&[1], Activation::Identity)]).unwrap();
        let w1 = Weights::zeros(&scalar);
        let obs = Observation {
            data: Tensor::scalar(0.3),
        };
        let v = log_joint(
            &obs,
            &Tensor::scalar(0.0),
            &w1,
            &scalar,
            &ObservationModel::Full,
            0.3,
        )
        .unwrap();
        assert!((v + 0.5).abs() < 1e-12);

        // Fixed residual: larger latents lower the value through the prior.
        let z = randn(2, &mut rng);
        let obs = Observation {
            data: Tensor::scalar(0.7),
        };
        let spec2 =
            NetSpec::new(vec![2], vec![LayerSpec::dense(&[1], Activation::Identity)]).unwrap();
        let w2 = Weights::zeros(&spec2);
        let small = log_joint(&obs, &z, &w2, &spec2, &ObservationModel::Full, 0.3).unwrap();
        let big = log_joint(
            &obs,
            &z.scaled(1.5),
            &w2,
            &spec2,
            &ObservationModel::Full,
            0.3,
        )
        .unwrap();
        assert!(big < small);
    }

    #[test]
    fn gradient_closed_forms() {
        let (spec, w, mut rng) = linear_setup(3, 5, 42);
        let z = randn(3, &mut rng);
        let y_hat = forward(&spec, &w, &z).unwrap().0;
        let s = Sample::full(y_hat);
        let g = grad_log_joint_z(&s.obs, &z, &w, &spec, &s.model, 0.3).unwrap();
        assert!(g.max_abs_diff(&z.scaled(-1.0)) < 1e-12);

        let y = randn(5, &mut rng);
        let s = Sample::full(y.clone());
        let sigma = 0.3;
        let g = grad_log_joint_z(&s.obs, &z, &w, &spec, &s.model, sigma).unwrap();
        let wm = w.layers[0].weight.data();
        let resid: Vec<f64> = (0..5)
            .map(|r| y.data()[r] - (0..3).map(|c| wm[r * 3 + c] * z.data()[c]).sum::<f64>())
            .collect();
        for c in 0..3 {
            let expect = (0..5).map(|r| wm[r * 3 + c] * resid[r]).sum::<f64>() / (sigma * sigma)
                - z.data()[c];
            assert!((g.data()[c] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn langevin_step_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let z = randn(4, &mut rng);
        let grad = randn(4, &mut rng);
        let next = langevin_step(&z, &grad, 1e-9, &mut rng);
        let bound = 1e-8 * (1.0 + grad.norm() + 10.0);
        assert!(next.sub(&z).unwrap().norm() < bound);

        let s = 0.3;
        let next = gradient_step(&z, &z.scaled(-1.0), s);
        assert!(next.max_abs_diff(&z.scaled(1.0 - s * s / 2.0)) < 1e-15);
    }

    #[test]
    fn zero_steps_leave_state_alone() {
        let (spec, w, mut rng) = linear_setup(2, 3, 44);
        let state = LatentState::new(randn(2, &mut rng));
        let s = Sample::full(randn(3, &mut rng));
        let cfg = InferConfig {
            steps: 0,
            ..InferConfig::texture()
        };
        assert_eq!(infer(&s, &state, &w, &spec, &cfg, &mut rng).unwrap(), state);
    }

    #[test]
    fn gradient_descent_is_deterministic_and_ascending() {
        let (spec, w, mut rng) = linear_setup(3, 6, 45);
        let s = Sample::full(randn(6, &mut rng));
        let state = LatentState::new(randn(3, &mut rng));
        let cfg = InferConfig {
            steps: 50,
            step_size: 0.01,
            sigma: 0.5,
            mode: InferMode::GradientDescent,
        };
        let a = infer(
            &s,
            &state,
            &w,
            &spec,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let b = infer(
            &s,
            &state,
            &w,
            &spec,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(a, b);
        let before = log_joint(&s.obs, &state.z, &w, &spec, &s.model, 0.5).unwrap();
        let after = log_joint(&s.obs, &a.z, &w, &spec, &s.model, 0.5).unwrap();
        assert!(after >= before - 1e-9);
    }

    #[test]
    fn batch_matches_individual_chains() {
        let (spec, w, mut rng) = linear_setup(2, 4, 46);
        let samples: Vec<_> = (0..3).map(|_| Sample::full(randn(4, &mut rng))).collect();
        let init: Vec<_> = (0..3)
            .map(|_| LatentState::new(randn(2, &mut rng)))
            .collect();
        let cfg = InferConfig {
            steps: 5,
            ..InferConfig::texture()
        };
        let mut batch = init.clone();
        let mut rngs: Vec<_> = (0..3).map(|i| ChaCha8Rng::seed_from_u64(100 + i)).collect();
        infer_batch(&samples, &mut batch, &w, &spec, &cfg, &mut rngs).unwrap();
        for i in 0..3 {
            let mut r = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let single = infer(&samples[i], &init[i], &w, &spec, &cfg, &mut r).unwrap();
            assert_eq!(single.z, batch[i].z);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = InferConfig {
            step_size: 0.0,
            ..InferConfig::texture()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(InferMode::parse("langevin").unwrap(), InferMode::Langevin);
        assert!(InferMode::parse("hmc").is_err());
    }
}
