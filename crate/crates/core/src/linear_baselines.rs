//! Linear factor analysis and PCA.
//!
//! The sweep operator does the regressions: sweeping the joint Gram matrix
//! of `(Z, Y)` on the `Y` block regresses `Z` on `Y` (the posterior), and
//! sweeping the expected Gram matrix on the `Z` block regresses `Y` on `Z`
//! (the M-step). These closed forms also serve as oracles for the
//! non-linear engine run on a linear generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};

/// Pivots at or below this magnitude are rejected.
pub const PIVOT_TOL: f64 = 1e-12;

/// Sweep `a` on pivot `k`:
/// `a'_kk = -1/a_kk`, `a'_ik = a_ik/a_kk`, `a'_kj = a_kj/a_kk`,
/// `a'_ij = a_ij - a_ik a_kj / a_kk`.
pub fn sweep(a: &Matrix, k: usize) -> Result<Matrix> {
    let mut out = a.clone();
    sweep_in_place(&mut out, k)?;
    Ok(out)
}

pub fn sweep_in_place(a: &mut Matrix, k: usize) -> Result<()> {
    pivot_transform(a, k, 1.0)
}

/// Undo [`sweep`] on pivot `k`: as the forward sweep, but the pivot row and
/// column are divided by `-a_kk`.
pub fn reverse_sweep(a: &Matrix, k: usize) -> Result<Matrix> {
    let mut out = a.clone();
    pivot_transform(&mut out, k, -1.0)?;
    Ok(out)
}

fn pivot_transform(a: &mut Matrix, k: usize, sign: f64) -> Result<()> {
    if !a.is_square() || k >= a.rows() {
        return Err(Error::invalid(format!(
            "pivot {k} outside a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let pivot = a[(k, k)];
    if pivot.abs() <= PIVOT_TOL {
        return Err(Error::numerical(format!(
            "sweep pivot {k} is {pivot:e}, too close to zero"
        )));
    }
    let col: Vec<f64> = (0..n).map(|i| a[(i, k)]).collect();
    let row: Vec<f64> = (0..n).map(|j| a[(k, j)]).collect();
    for i in 0..n {
        if i == k {
            continue;
        }
        for j in 0..n {
            if j == k {
                continue;
            }
            a[(i, j)] -= col[i] * row[j] / pivot;
        }
    }
    for i in 0..n {
        if i != k {
            a[(i, k)] = sign * col[i] / pivot;
            a[(k, i)] = sign * row[i] / pivot;
        }
    }
    a[(k, k)] = -1.0 / pivot;
    Ok(())
}

/// Sweep every pivot in `pivots`, in order.
pub fn sweep_all(a: &Matrix, pivots: impl IntoIterator<Item = usize>) -> Result<Matrix> {
    let mut out = a.clone();
    for k in pivots {
        sweep_in_place(&mut out, k)?;
    }
    Ok(out)
}

/// `Y = W Z + eps`, `Z ~ N(0, I_d)`, `eps ~ N(0, sigma2 I_D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FAModel {
    /// D x d loading matrix.
    pub w: Matrix,
    pub sigma2: f64,
}

impl FAModel {
    pub fn new(w: Matrix, sigma2: f64) -> Result<Self> {
        if sigma2.is_nan() || sigma2 <= 0.0 {
            return Err(Error::invalid(format!(
                "noise variance must be positive, got {sigma2}"
            )));
        }
        Ok(FAModel { w, sigma2 })
    }

    pub fn latent_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn data_dim(&self) -> usize {
        self.w.rows()
    }

    /// Marginal covariance `W W^T + sigma2 I`.
    pub fn covariance(&self) -> Matrix {
        let mut c = self.w.matmul(&self.w.transpose()).expect("conformable");
        for i in 0..c.rows() {
            c[(i, i)] += self.sigma2;
        }
        c
    }

    /// Joint second-moment matrix of `(Z, Y)`:
    /// `[[I, W^T], [W, W W^T + sigma2 I]]`.
    pub fn joint_gram(&self) -> Matrix {
        let (d, big_d) = (self.latent_dim(), self.data_dim());
        let cov = self.covariance();
        Matrix::from_fn(d + big_d, d + big_d, |i, j| match (i < d, j < d) {
            (true, true) => f64::from(u8::from(i == j)),
            (true, false) => self.w[(j - d, i)],
            (false, true) => self.w[(i - d, j)],
            (false, false) => cov[(i - d, j - d)],
        })
    }

    /// Gaussian log-likelihood of the rows of `data` (n x D).
    pub fn log_likelihood(&self, data: &Matrix) -> Result<f64> {
        let n = data.rows() as f64;
        let big_d = self.data_dim();
        if data.cols() != big_d {
            return Err(Error::shape(format!(
                "data has {} columns, model has {}",
                data.cols(),
                big_d
            )));
        }
        let cov = self.covariance();
        let log_det = cov.log_det_spd()?;
        let neg_inv = sweep_all(&cov, 0..big_d)?;
        let syy = second_moment(data);
        let mut tr = 0.0;
        for i in 0..big_d {
            for j in 0..big_d {
                tr -= neg_inv[(i, j)] * syy[(j, i)];
            }
        }
        Ok(-0.5 * n * (big_d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + tr))
    }
}

/// `(1/n) sum_i Y_i Y_i^T` for the rows of `data`.
pub fn second_moment(data: &Matrix) -> Matrix {
    let n = data.rows() as f64;
    data.transpose()
        .matmul(data)
        .expect("conformable")
        .scaled(1.0 / n)
}

/// Posterior `[Z | Y] ~ N(beta Y, V)`, read off the joint Gram matrix after
/// sweeping its `Y` block: `beta = S_ZY S_YY^-1`,
/// `V = S_ZZ - S_ZY S_YY^-1 S_YZ`. `beta` is d x D.
pub fn fa_posterior(model: &FAModel) -> Result<(Matrix, Matrix)> {
    let (d, big_d) = (model.latent_dim(), model.data_dim());
    let swept = sweep_all(&model.joint_gram(), d..d + big_d)?;
    let beta = swept.block(0, d, d, d + big_d);
    let v = swept.block(0, d, 0, d);
    Ok((beta, v))
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: FAModel,
    /// Observed-data log-likelihood at the initial model and after each iteration.
    pub log_likelihoods: Vec<f64>,
}

/// Rubin-Thayer EM for factor analysis with isotropic noise.
///
/// E-step: `E[Z_i] = beta Y_i`, `E[Z_i Z_i^T] = V + beta Y_i Y_i^T beta^T`.
/// M-step: sweep the expected Gram matrix on its `Z` block, giving
/// `W = S_YZ S_ZZ^-1` and `Sigma = S_YY - S_YZ S_ZZ^-1 S_ZY`; `sigma2` is
/// the mean diagonal of `Sigma`. `data` (n x D) must be centered.
pub fn fa_em_fit(data: &Matrix, d: usize, iterations: usize, seed: u64) -> Result<EmFit> {
    let (n, big_d) = (data.rows(), data.cols());
    if d == 0 || n < d {
        return Err(Error::invalid(format!(
            "need 1 <= d <= n, got d = {d}, n = {n}"
        )));
    }
    let syy = second_moment(data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 0.1).expect("finite std");
    let w0 = Matrix::from_fn(big_d, d, |_, _| init.sample(&mut rng));
    let mean_var = syy.trace() / big_d as f64;
    let mut model = FAModel::new(w0, mean_var)?;
    let mut lls = vec![model.log_likelihood(data)?];
    for _ in 0..iterations {
        let (beta, v) = fa_posterior(&model)?;
        let szy = beta.matmul(&syy)?;
        let szz = v.add(&szy.matmul(&beta.transpose())?)?;
        let gram = Matrix::from_fn(d + big_d, d + big_d, |i, j| match (i < d, j < d) {
            (true, true) => szz[(i, j)],
            (true, false) => szy[(i, j - d)],
            (false, true) => szy[(j, i - d)],
            (false, false) => syy[(i - d, j - d)],
        });
        let swept = sweep_all(&gram, 0..d)?;
        let w = swept.block(d, d + big_d, 0, d);
        let sigma = swept.block(d, d + big_d, d, d + big_d);
        let sigma2 = sigma.trace() / big_d as f64;
        model = FAModel::new(w, sigma2)
            .map_err(|_| Error::numerical("EM drove the noise variance to zero"))?;
        lls.push(model.log_likelihood(data)?);
    }
    Ok(EmFit {
        model,
        log_likelihoods: lls,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaFit {
    pub mean: Vec<f64>,
    /// D x d, orthonormal columns in order of decreasing variance.
    pub components: Matrix,
    pub variances: Vec<f64>,
}

/// Relative eigenvalue floor used to decide the rank of the data.
const RANK_TOL: f64 = 1e-10;

/// Top-`d` principal directions of the rows of `data` (n x D). Uses the
/// n x n Gram matrix when there are fewer examples than dimensions.
pub fn pca_fit(data: &Matrix, d: usize) -> Result<PcaFit> {
    let (n, big_d) = (data.rows(), data.cols());
    if d == 0 || n < d {
        return Err(Error::invalid(format!(
            "need 1 <= d <= n, got d = {d}, n = {n}"
        )));
    }
    let mean: Vec<f64> = (0..big_d)
        .map(|j| (0..n).map(|i| data[(i, j)]).sum::<f64>() / n as f64)
        .collect();
    let centered = Matrix::from_fn(n, big_d, |i, j| data[(i, j)] - mean[j]);
    let (values, components) = if big_d <= n {
        let cov = second_moment(&centered);
        let (vals, vecs) = symmetric_eigen(&cov, 1e-12)?;
        check_rank(&vals, d)?;
        (vals[..d].to_vec(), vecs.block(0, big_d, 0, d))
    } else {
        let gram = centered
            .matmul(&centered.transpose())?
            .scaled(1.0 / n as f64);
        let (vals, vecs) = symmetric_eigen(&gram, 1e-12)?;
        check_rank(&vals, d)?;
        let mut comps = Matrix::zeros(big_d, d);
        for k in 0..d {
            let u: Vec<f64> = (0..n).map(|i| vecs[(i, k)]).collect();
            let dir = centered.matvec_t(&u);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, v) in dir.into_iter().enumerate() {
                comps[(j, k)] = v / norm;
            }
        }
        (vals[..d].to_vec(), comps)
    };
    Ok(PcaFit {
        mean,
        components,
        variances: values,
    })
}

fn check_rank(values: &[f64], d: usize) -> Result<()> {
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let rank = values
        .iter()
        .filter(|&&v| v > RANK_TOL * top && v > 0.0)
        .count();
    if d > rank {
        return Err(Error::invalid(format!(
            "requested {d} components but the data has rank {rank}"
        )));
    }
    Ok(())
}

/// `mean + C C^T (y - mean)`.
pub fn pca_reconstruct(y: &[f64], fit: &PcaFit) -> Result<Vec<f64>> {
    if y.len() != fit.mean.len() {
        return Err(Error::shape(format!(
            "signal has {} entries, fit expects {}",
            y.len(),
            fit.mean.len()
        )));
    }
    let centered: Vec<f64> = y.iter().zip(&fit.mean).map(|(a, b)| a - b).collect();
    let coeffs = fit.components.matvec_t(&centered);
    let back = fit.components.matvec(&coeffs);
    Ok(back.iter().zip(&fit.mean).map(|(a, b)| a + b).collect())
}

/// Mean vector and covariance of a set of inferred latents, for comparing
/// their aggregate against the N(0, I) prior.
pub fn latent_moments(latents: &[Vec<f64>]) -> Result<(Vec<f64>, Matrix)> {
    let first = latents
        .first()
        .ok_or_else(|| Error::invalid("latent moments of an empty set"))?;
    let d = first.len();
    let n = latents.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|k| latents.iter().map(|z| z[k]).sum::<f64>() / n)
        .collect();
    let cov = Matrix::from_fn(d, d, |i, j| {
        latents
            .iter()
            .map(|z| (z[i] - mean[i]) * (z[j] - mean[j]))
            .sum::<f64>()
            / n
    });
    Ok((mean, cov))
}
