//! Dynamic textures: a first-order vector auto-regression on latent
//! sequences, `Z_{t+1} = A Z_t + eta_t`, driven through a learned generator.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::generator::{forward_batch, NetSpec, Weights};
use crate::linalg::Matrix;
use crate::linear_baselines::sweep_in_place;
use crate::tensor::Tensor;

/// Frames discarded at the start of a synthesized sequence.
pub const BURN_IN: usize = 15;

/// Pivots below this fraction of the largest Gram diagonal count as singular.
const GRAM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct VARModel {
    /// d x d transition.
    pub a: Matrix,
    /// d x d innovation covariance.
    pub q: Matrix,
}

impl VARModel {
    pub fn new(a: Matrix, q: Matrix) -> Result<Self> {
        if !a.is_square() || !q.is_square() || a.rows() != q.rows() {
            return Err(Error::shape(format!(
                "transition {}x{} and covariance {}x{}",
                a.rows(),
                a.cols(),
                q.rows(),
                q.cols()
            )));
        }
        if q.max_asymmetry() > 1e-12 {
            return Err(Error::invalid("innovation covariance is not symmetric"));
        }
        Ok(VARModel { a, q })
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }
}

/// Least-squares fit of `A` on consecutive rows of `z_seq` (T x d), with
/// `Q` the second moment of the residuals over the `T - 1` transitions.
/// No intercept: latents are zero-mean under the prior.
pub fn fit_var(z_seq: &Matrix) -> Result<VARModel> {
    let (t, d) = (z_seq.rows(), z_seq.cols());
    if d == 0 || t < d + 2 {
        return Err(Error::invalid(format!(
            "a {d}-dimensional VAR needs at least {} frames, got {t}",
            d + 2
        )));
    }
    // Joint Gram of (Z_t, Z_{t+1}); sweeping the Z_t block regresses
    // Z_{t+1} on Z_t.
    let mut gram = Matrix::zeros(2 * d, 2 * d);
    for s in 0..t - 1 {
        let (x, y) = (z_seq.row(s), z_seq.row(s + 1));
        for i in 0..2 * d {
            let vi = if i < d { x[i] } else { y[i - d] };
            for j in 0..2 * d {
                let vj = if j < d { x[j] } else { y[j - d] };
                gram[(i, j)] += vi * vj;
            }
        }
    }
    let scale = (0..d).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    for k in 0..d {
        if gram[(k, k)].abs() <= GRAM_TOL * scale || scale == 0.0 {
            return Err(Error::numerical(format!(
                "regressor Gram matrix is singular at coordinate {k} (constant or degenerate sequence)"
            )));
        }
        sweep_in_place(&mut gram, k)?;
    }
    let a = gram.block(d, 2 * d, 0, d);
    let mut q = Matrix::zeros(d, d);
    for s in 0..t - 1 {
        let pred = a.matvec(z_seq.row(s));
        let eta: Vec<f64> = z_seq
            .row(s + 1)
            .iter()
            .zip(&pred)
            .map(|(y, p)| y - p)
            .collect();
        for i in 0..d {
            for j in 0..d {
                q[(i, j)] += eta[i] * eta[j];
            }
        }
    }
    let q = q.scaled(1.0 / (t - 1) as f64);
    let q = Matrix::from_fn(d, d, |i, j| 0.5 * (q[(i, j)] + q[(j, i)]));
    VARModel::new(a, q)
}

/// Stack latents (each flattened) into a T x d matrix.
pub fn latents_to_matrix(latents: &[Tensor]) -> Result<Matrix> {
    let d = latents
        .first()
        .ok_or_else(|| Error::invalid("empty latent sequence"))?
        .numel();
    let mut data = Vec::with_capacity(latents.len() * d);
    for z in latents {
        if z.numel() != d {
            return Err(Error::shape(format!(
                "latent of size {} in a sequence of size {d}",
                z.numel()
            )));
        }
        data.extend_from_slice(z.data());
    }
    Matrix::from_vec(latents.len(), d, data)
}

/// Run the VAR from `Z_0 ~ N(0, I)` for `frames` steps, drop the first
/// `burn_in` states and render the rest through the generator.
pub fn synthesize_dynamic<R: Rng + ?Sized>(
    weights: &Weights,
    spec: &NetSpec,
    var: &VARModel,
    frames: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    let d = spec.latent_dim();
    if var.dim() != d {
        return Err(Error::shape(format!(
            "VAR of dimension {} for a network with {d} latent factors",
            var.dim()
        )));
    }
    let chol = var.q.cholesky_psd(1e-10)?;
    let mut z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let mut kept = Vec::with_capacity(frames.saturating_sub(burn_in));
    for t in 0..frames {
        if t >= burn_in {
            kept.push(Tensor::new(spec.latent_shape().to_vec(), z.clone())?);
        }
        let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let drift = var.a.matvec(&z);
        let noise = chol.matvec(&u);
        z = drift.iter().zip(&noise).map(|(a, b)| a + b).collect();
    }
    if kept.is_empty() {
        return Ok(Vec::new());
    }
    let (frames, _) = forward_batch(spec, weights, &kept)?;
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::LayerSpec;
    use crate::tensor::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn simulate(a: &Matrix, noise_std: f64, t: usize, seed: u64) -> Matrix {
        let d = a.rows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut data = Vec::new();
        for _ in 0..t {
            data.extend_from_slice(&z);
            let next = a.matvec(&z);
            z = next
                .into_iter()
                .map(|v| v + noise_std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>();
        }
        Matrix::from_vec(t, d, data).unwrap()
    }

    #[test]
    fn identity_sequence_is_exact() {
        let seq = Matrix::from_vec(6, 1, vec![0.7; 6]).unwrap();
        let var = fit_var(&seq).unwrap();
        assert_eq!(var.a.data(), &[1.0]);
        assert_eq!(var.q.data(), &[0.0]);
    }

    #[test]
    fn noise_free_transition_recovered() {
        let a = Matrix::from_rows(&[
            vec![0.9, 0.2, 0.0],
            vec![-0.2, 0.9, 0.1],
            vec![0.0, 0.0, 0.8],
        ])
        .unwrap();
        let var = fit_var(&simulate(&a, 0.0, 40, 3)).unwrap();
        assert!(var.a.sub(&a).unwrap().frobenius() < 1e-8);
        assert!(var.q.frobenius() < 1e-12);
    }

    #[test]
    fn scalar_ar_estimate_in_band() {
        let a = Matrix::from_rows(&[vec![0.9]]).unwrap();
        let var = fit_var(&simulate(&a, 0.1, 5000, 4)).unwrap();
        assert!((var.a[(0, 0)] - 0.9).abs() < 0.03);
        assert!((var.q[(0, 0)] - 0.01).abs() < 0.002);
    }

    #[test]
    fn residuals_orthogonal_to_regressors() {
        let a = Matrix::from_rows(&[vec![0.5, 0.1], vec![0.0, 0.7]]).unwrap();
        let seq = simulate(&a, 0.3, 500, 5);
        let var = fit_var(&seq).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let cross: f64 = (0..499)
                    .map(|s| {
                        let pred = var.a.matvec(seq.row(s));
                        (seq.row(s + 1)[i] - pred[i]) * seq.row(s)[j]
                    })
                    .sum();
                assert!(cross.abs() < 1e-8 * 500.0);
            }
        }
    }

    #[test]
    fn degenerate_sequences_rejected() {
        assert!(fit_var(&Matrix::from_vec(3, 2, vec![0.0; 6]).unwrap()).is_err());
        assert!(fit_var(&Matrix::from_vec(10, 2, vec![1.0; 20]).unwrap()).is_err());
        assert!(fit_var(&Matrix::zeros(2, 1)).is_err());
    }

    fn tiny_net() -> (NetSpec, Weights) {
        let spec = NetSpec::new(
            vec![2],
            vec![LayerSpec::dense(&[1, 3, 3], Activation::Tanh)],
        )
        .unwrap();
        let w = Weights::init(&spec, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        (spec, w)
    }

    #[test]
    fn frozen_dynamics_repeat_first_frame() {
        let (spec, w) = tiny_net();
        let var = VARModel::new(Matrix::identity(2), Matrix::zeros(2, 2)).unwrap();
        let frames =
            synthesize_dynamic(&w, &spec, &var, 5, 0, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(frames.len(), 5);
        for f in &frames[1..] {
            assert_eq!(f, &frames[0]);
        }
        let none = synthesize_dynamic(
            &w,
            &spec,
            &var,
            BURN_IN,
            BURN_IN,
            &mut ChaCha8Rng::seed_from_u64(7),
        )
        .unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn frames_in_tanh_range() {
        let (spec, w) = tiny_net();
        let var = VARModel::new(
            Matrix::identity(2).scaled(1.05),
            Matrix::identity(2).scaled(0.5),
        )
        .unwrap();
        let frames = synthesize_dynamic(
            &w,
            &spec,
            &var,
            60,
            BURN_IN,
            &mut ChaCha8Rng::seed_from_u64(8),
        )
        .unwrap();
        assert_eq!(frames.len(), 45);
        assert!(frames
            .iter()
            .all(|f| f.data().iter().all(|v| v.abs() <= 1.0)));
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let (spec, w) = tiny_net();
        let var = VARModel::new(Matrix::identity(2), Matrix::identity(2).scaled(-1.0)).unwrap();
        assert!(
            synthesize_dynamic(&w, &spec, &var, 20, 0, &mut ChaCha8Rng::seed_from_u64(9)).is_err()
        );
    }
}
