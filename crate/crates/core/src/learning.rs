//! Alternating back-propagation: per-example Langevin inference of latent
//! factors (warm-started across iterations) alternating with one momentum
//! step on the network weights along the learning gradient. Also the joint
//! gradient-descent variant that moves weights and latents together.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generator::{backward, backward_weights, forward_batch, NetSpec, Weights, INIT_STD};
use crate::inference::{infer_batch, InferConfig, LatentState, Sample};
use crate::latent_tools::sample_prior;
use crate::observation::loss_and_grad;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// Datasets up to this size are trained full-batch.
pub const FULL_BATCH_LIMIT: usize = 512;

/// Mini-batch size used above [`FULL_BATCH_LIMIT`] unless configured.
pub const DEFAULT_MINI_BATCH: usize = 64;

/// Per-example loss beyond which training aborts.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub infer: InferConfig,
    /// 0 selects full batch up to [`FULL_BATCH_LIMIT`] examples.
    pub batch_size: usize,
    pub seed: u64,
    pub init_std: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            iterations: 600,
            learning_rate: 1e-4,
            momentum: 0.5,
            infer: InferConfig::texture(),
            batch_size: 0,
            seed: 0,
            init_std: INIT_STD,
        }
    }
}

impl Hyper {
    pub fn effective_batch(&self, n: usize) -> usize {
        match self.batch_size {
            0 if n <= FULL_BATCH_LIMIT => n,
            0 => DEFAULT_MINI_BATCH,
            b => b.min(n),
        }
    }

    /// Step sizes adjusted for an observation model that multiplies the
    /// loss curvature by `gain`: the learning rate by `1/gain`, the Langevin
    /// step by `1/sqrt(gain)`. A gain of 1 leaves the settings unchanged.
    pub fn rescaled_for_gain(&self, gain: f64) -> Result<Hyper> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::invalid(format!(
                "curvature gain must be positive, got {gain}"
            )));
        }
        let mut h = self.clone();
        h.learning_rate /= gain;
        h.infer.step_size /= gain.sqrt();
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        self.infer.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean over examples of the observation-model loss.
    pub mean_loss: f64,
    /// Mean of `||Z||^2 / d`.
    pub mean_latent_sq: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<IterationRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "iteration,loss,mean_latent_sq,grad_norm";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e}",
                r.iteration, r.mean_loss, r.mean_latent_sq, r.grad_norm
            );
        }
        s
    }

    /// Trailing moving average of the loss with the given window, per record.
    pub fn smoothed_loss(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        let losses: Vec<f64> = self.records.iter().map(|r| r.mean_loss).collect();
        (0..losses.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window);
                losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }
}

/// Sum over a batch of the weight gradient of `log p(Y_i, Z_i; W)`:
/// `(1 / sigma^2) (df(Z_i)/dW)^T (pulled-back residual_i)`, the ascent
/// direction. Also returns each example's loss.
pub fn learning_gradient(
    samples: &[Sample],
    latents: &[Tensor],
    w: &Weights,
    spec: &NetSpec,
    sigma: f64,
) -> Result<(Weights, Vec<f64>)> {
    let (outputs, cache) = forward_batch(spec, w, latents)?;
    let (losses, d_out) = loss_grads(samples, &outputs)?;
    let mut grad = backward_weights(&cache, &d_out)?;
    grad.scale(-1.0 / (2.0 * sigma * sigma));
    Ok((grad, losses))
}

fn loss_grads(samples: &[Sample], outputs: &[Tensor]) -> Result<(Vec<f64>, Vec<Tensor>)> {
    if samples.len() != outputs.len() {
        return Err(Error::invalid("sample and latent batches differ in length"));
    }
    let pairs = outputs
        .par_iter()
        .zip(samples)
        .map(|(y, s)| loss_and_grad(&s.obs, y, &s.model))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Momentum ascent: `v' = m v + dW`, `W' = W + lr v'`.
pub fn sgd_momentum(
    w: &mut Weights,
    grad: &Weights,
    velocity: &mut Weights,
    learning_rate: f64,
    momentum: f64,
) {
    velocity.scale(momentum);
    velocity.axpy(1.0, grad);
    w.axpy(learning_rate, velocity);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Inference steps on every latent, then one weight update.
    Alternating,
    /// One simultaneous gradient step on weights and latents.
    Joint,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub weights: Weights,
    pub velocity: Weights,
    pub latents: Vec<LatentState>,
    pub iteration: usize,
    pub history: TrainHistory,
}

impl TrainState {
    /// Fresh weights and prior-drawn latents, all keyed by `hyper.seed`.
    pub fn init(spec: &NetSpec, n: usize, hyper: &Hyper) -> Self {
        let mut wrng = stream(hyper.seed, Purpose::WeightInit, 0, 0);
        let weights = Weights::init(spec, hyper.init_std, &mut wrng);
        let latents = (0..n)
            .map(|i| {
                let mut r = stream(hyper.seed, Purpose::LatentInit, i, 0);
                LatentState::new(sample_prior(spec.latent_shape(), &mut r))
            })
            .collect();
        TrainState {
            velocity: weights.zeros_like(),
            weights,
            latents,
            iteration: 0,
            history: TrainHistory::default(),
        }
    }

    pub fn latent_tensors(&self) -> Vec<Tensor> {
        self.latents.iter().map(|s| s.z.clone()).collect()
    }
}

/// Drives training one iteration at a time.
pub struct Trainer<'a> {
    pub spec: &'a NetSpec,
    pub dataset: &'a [Sample],
    pub hyper: Hyper,
    pub schedule: Schedule,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        spec: &'a NetSpec,
        dataset: &'a [Sample],
        hyper: Hyper,
        schedule: Schedule,
    ) -> Result<Self> {
        let state = TrainState::init(spec, dataset.len(), &hyper);
        Trainer::resume(spec, dataset, hyper, schedule, state)
    }

    pub fn resume(
        spec: &'a NetSpec,
        dataset: &'a [Sample],
        hyper: Hyper,
        schedule: Schedule,
        state: TrainState,
    ) -> Result<Self> {
        hyper.validate()?;
        if dataset.is_empty() {
            return Err(Error::invalid("training needs at least one example"));
        }
        if state.latents.len() != dataset.len() {
            return Err(Error::invalid(format!(
                "{} latents for {} examples",
                state.latents.len(),
                dataset.len()
            )));
        }
        state.weights.check(spec)?;
        Ok(Trainer {
            spec,
            dataset,
            hyper,
            schedule,
            state,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.iteration >= self.hyper.iterations
    }

    /// One learning iteration over every mini-batch.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let t = self.state.iteration;
        let n = self.dataset.len();
        let batch = self.hyper.effective_batch(n);
        let mut loss_sum = 0.0;
        let mut grad_norm_sum = 0.0;
        let mut batches = 0;
        for start in (0..n).step_by(batch) {
            let end = (start + batch).min(n);
            let (loss, gnorm) = match self.schedule {
                Schedule::Alternating => self.alternating_batch(start, end, t)?,
                Schedule::Joint => self.joint_batch(start, end, t)?,
            };
            loss_sum += loss;
            grad_norm_sum += gnorm;
            batches += 1;
        }
        let d = self.spec.latent_dim() as f64;
        let record = IterationRecord {
            iteration: t + 1,
            mean_loss: loss_sum / n as f64,
            mean_latent_sq: self
                .state
                .latents
                .iter()
                .map(|s| s.z.norm_sq() / d)
                .sum::<f64>()
                / n as f64,
            grad_norm: grad_norm_sum / batches as f64,
        };
        self.state.history.records.push(record);
        self.state.iteration += 1;
        Ok(record)
    }

    pub fn run(mut self) -> Result<TrainState> {
        while !self.finished() {
            self.step()?;
        }
        Ok(self.state)
    }

    fn alternating_batch(&mut self, start: usize, end: usize, t: usize) -> Result<(f64, f64)> {
        let samples = &self.dataset[start..end];
        let states = &mut self.state.latents[start..end];
        let mut rngs: Vec<_> = (start..end)
            .map(|i| stream(self.hyper.seed, Purpose::Langevin, i, t))
            .collect();
        infer_batch(
            samples,
            states,
            &self.state.weights,
            self.spec,
            &self.hyper.infer,
            &mut rngs,
        )?;
        states.iter_mut().for_each(|s| s.chain_age += 1);
        let latents: Vec<Tensor> = states.iter().map(|s| s.z.clone()).collect();
        let (grad, losses) = learning_gradient(
            samples,
            &latents,
            &self.state.weights,
            self.spec,
            self.hyper.infer.sigma,
        )?;
        check_losses(&losses, start, t)?;
        sgd_momentum(
            &mut self.state.weights,
            &grad,
            &mut self.state.velocity,
            self.hyper.learning_rate,
            self.hyper.momentum,
        );
        if !self.state.weights.is_finite() {
            return Err(Error::numerical(format!(
                "iteration {}: weights became non-finite",
                t + 1
            )));
        }
        Ok((losses.iter().sum(), grad.norm()))
    }

    fn joint_batch(&mut self, start: usize, end: usize, t: usize) -> Result<(f64, f64)> {
        let samples = &self.dataset[start..end];
        let sigma = self.hyper.infer.sigma;
        let latents: Vec<Tensor> = self.state.latents[start..end]
            .iter()
            .map(|s| s.z.clone())
            .collect();
        let (outputs, cache) = forward_batch(self.spec, &self.state.weights, &latents)?;
        let (losses, d_out) = loss_grads(samples, &outputs)?;
        check_losses(&losses, start, t)?;
        let (dz, mut grad) = backward(&cache, &d_out)?;
        grad.scale(-1.0 / (2.0 * sigma * sigma));
        let half = 0.5 * self.hyper.infer.step_size * self.hyper.infer.step_size;
        for (state, g) in self.state.latents[start..end].iter_mut().zip(&dz) {
            let mut drift = g.scaled(-1.0 / (2.0 * sigma * sigma));
            drift.axpy(-1.0, &state.z);
            state.z.axpy(half, &drift);
            state.chain_age += 1;
        }
        sgd_momentum(
            &mut self.state.weights,
            &grad,
            &mut self.state.velocity,
            self.hyper.learning_rate,
            self.hyper.momentum,
        );
        if !self.state.weights.is_finite() {
            return Err(Error::numerical(format!(
                "iteration {}: weights became non-finite",
                t + 1
            )));
        }
        Ok((losses.iter().sum(), grad.norm()))
    }
}

fn check_losses(losses: &[f64], offset: usize, t: usize) -> Result<()> {
    if let Some((i, l)) = losses
        .iter()
        .enumerate()
        .find(|(_, l)| !l.is_finite() || **l > DIVERGENCE_LIMIT)
    {
        return Err(Error::numerical(format!(
            "iteration {}, example {}: loss {l:e} diverged",
            t + 1,
            offset + i
        )));
    }
    Ok(())
}

/// Alternating back-propagation from scratch; deterministic given `hyper.seed`.
pub fn abp_train(dataset: &[Sample], spec: &NetSpec, hyper: &Hyper) -> Result<TrainState> {
    Trainer::new(spec, dataset, hyper.clone(), Schedule::Alternating)?.run()
}

/// Joint gradient descent on weights and latents.
pub fn joint_gd_train(dataset: &[Sample], spec: &NetSpec, hyper: &Hyper) -> Result<TrainState> {
    Trainer::new(spec, dataset, hyper.clone(), Schedule::Joint)?.run()
}

/// Test-time inference with fixed weights: every example's chain starts from
/// its own prior draw. Streams are keyed by `seed` and the example index.
pub fn infer_from_prior(
    samples: &[Sample],
    w: &Weights,
    spec: &NetSpec,
    cfg: &InferConfig,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let mut states: Vec<LatentState> = (0..samples.len())
        .map(|i| {
            LatentState::new(sample_prior(
                spec.latent_shape(),
                &mut stream(seed, Purpose::LatentInit, i, 0),
            ))
        })
        .collect();
    let mut rngs: Vec<_> = (0..samples.len())
        .map(|i| stream(seed, Purpose::Langevin, i, 0))
        .collect();
    infer_batch(samples, &mut states, w, spec, cfg, &mut rngs)?;
    Ok(states.into_iter().map(|s| s.z).collect())
}

/// `f(Z_i; W)` for each latent.
pub fn reconstruct(w: &Weights, spec: &NetSpec, latents: &[Tensor]) -> Result<Vec<Tensor>> {
    if latents.is_empty() {
        return Ok(Vec::new());
    }
    Ok(forward_batch(spec, w, latents)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::LayerSpec;
    use crate::tensor::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(d: usize, big_d: usize) -> NetSpec {
        NetSpec::new(
            vec![d],
            vec![LayerSpec::dense(&[big_d], Activation::Identity)],
        )
        .unwrap()
    }

    #[test]
    fn rescaling_divides_steps() {
        let h = Hyper::default().rescaled_for_gain(4.0).unwrap();
        assert_eq!(h.learning_rate, 2.5e-5);
        assert_eq!(h.infer.step_size, 0.05);
        assert_eq!(
            Hyper::default().rescaled_for_gain(1.0).unwrap(),
            Hyper::default()
        );
        assert!(Hyper::default().rescaled_for_gain(0.0).is_err());
    }

    #[test]
    fn momentum_recursion() {
        let spec = linear(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let w0 = Weights::init(&spec, 1.0, &mut rng);
        let g = Weights::init(&spec, 1.0, &mut rng);

        let mut w = w0.clone();
        let mut v = w0.zeros_like();
        sgd_momentum(&mut w, &g, &mut v, 0.1, 0.0);
        let mut expect = w0.clone();
        expect.axpy(0.1, &g);
        assert_eq!(w, expect);

        let mut v = w0.zeros_like();
        let mut w = w0.clone();
        sgd_momentum(&mut w, &g, &mut v, 0.1, 0.5);
        assert_eq!(v, g);
        sgd_momentum(&mut w, &g, &mut v, 0.1, 0.5);
        let mut g15 = g.clone();
        g15.scale(1.5);
        assert!(v
            .tensors()
            .iter()
            .zip(g15.tensors())
            .all(|(a, b)| a.max_abs_diff(b) < 1e-15));

        let mut w = w0.clone();
        let mut v = w0.zeros_like();
        sgd_momentum(&mut w, &g, &mut v, 0.0, 0.5);
        assert_eq!(w, w0);
    }

    #[test]
    fn learning_gradient_closed_form() {
        let spec = linear(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let w = Weights::init(&spec, 1.0, &mut rng);
        let z = sample_prior(&[2], &mut rng);
        let y = sample_prior(&[3], &mut rng);
        let sigma = 0.3;
        let (g, _) = learning_gradient(
            &[Sample::full(y.clone())],
            std::slice::from_ref(&z),
            &w,
            &spec,
            sigma,
        )
        .unwrap();
        let wm = w.layers[0].weight.data();
        for r in 0..3 {
            let resid = y.data()[r] - (0..2).map(|c| wm[r * 2 + c] * z.data()[c]).sum::<f64>();
            for c in 0..2 {
                let expect = resid * z.data()[c] / (sigma * sigma);
                assert!((g.layers[0].weight.data()[r * 2 + c] - expect).abs() < 1e-10);
            }
        }

        let exact = reconstruct(&w, &spec, std::slice::from_ref(&z))
            .unwrap()
            .pop()
            .unwrap();
        let (g0, losses) =
            learning_gradient(&[Sample::full(exact)], &[z], &w, &spec, sigma).unwrap();
        assert_eq!(g0.norm(), 0.0);
        assert_eq!(losses, vec![0.0]);
    }

    #[test]
    fn history_csv_and_smoothing() {
        let mut h = TrainHistory::default();
        for i in 0..4 {
            h.records.push(IterationRecord {
                iteration: i + 1,
                mean_loss: (4 - i) as f64,
                mean_latent_sq: 1.0,
                grad_norm: 0.5,
            });
        }
        let csv = h.to_csv();
        assert!(csv.starts_with(TrainHistory::CSV_HEADER));
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(h.smoothed_loss(2), vec![4.0, 3.5, 2.5, 1.5]);
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let spec = linear(1, 2);
        let data = vec![Sample::full(Tensor::from_vec(vec![1e4, -1e4]))];
        let hyper = Hyper {
            iterations: 2,
            ..Hyper::default()
        };
        let err = abp_train(&data, &spec, &hyper).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(err.to_string().contains("example 0"));
        assert!(abp_train(&[], &spec, &hyper).is_err());
    }

    #[test]
    fn batch_sizing() {
        let h = Hyper::default();
        assert_eq!(h.effective_batch(64), 64);
        assert_eq!(h.effective_batch(1000), DEFAULT_MINI_BATCH);
        let h = Hyper {
            batch_size: 16,
            ..Hyper::default()
        };
        assert_eq!(h.effective_batch(10), 10);
    }
}
