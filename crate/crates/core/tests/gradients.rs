mod common;

use abp::generator::Weights;
use abp::inference::{log_joint, Sample};
use abp::learning::learning_gradient;
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_nets_match_finite_differences() {
    for idx in 0..20 {
        let r = check_gradients(idx, 100 + idx as u64);
        assert!(r.data < 1e-6, "net {idx}: backward_data {:e}", r.data);
        assert!(
            r.weights < 1e-6,
            "net {idx}: backward_weights {:e}",
            r.weights
        );
        assert!(
            r.log_joint < 1e-6,
            "net {idx}: grad_log_joint_z {:e}",
            r.log_joint
        );
    }
}

#[test]
fn learning_gradient_is_derivative_of_summed_log_joint() {
    for idx in [0, 4, 8] {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + idx as u64);
        let spec = random_net(idx, &mut rng);
        let w = random_weights(&spec, &mut rng);
        let samples: Vec<Sample> = (0..3)
            .map(|i| {
                let truth = randn(spec.output_shape(), 0.5, &mut rng);
                Sample::observe(
                    &truth,
                    random_observation(idx + i, spec.output_shape(), &mut rng),
                )
                .unwrap()
            })
            .collect();
        let latents: Vec<_> = (0..3)
            .map(|_| randn(spec.latent_shape(), 1.0, &mut rng))
            .collect();
        let (grad, _) = learning_gradient(&samples, &latents, &w, &spec, 0.3).unwrap();
        let total = |w: &Weights| -> f64 {
            samples
                .iter()
                .zip(&latents)
                .map(|(s, z)| log_joint(&s.obs, z, w, &spec, &s.model, 0.3).unwrap())
                .sum()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for t in 0..w.tensors().len() {
            for j in 0..w.tensors()[t].numel() {
                analytic.push(grad.tensors()[t].data()[j]);
                let mut plus = w.clone();
                plus.tensors_mut()[t].data_mut()[j] += FD_STEP;
                let mut minus = w.clone();
                minus.tensors_mut()[t].data_mut()[j] -= FD_STEP;
                numeric.push((total(&plus) - total(&minus)) / (2.0 * FD_STEP));
            }
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "net {idx}: learning gradient {err:e}");
    }
}
