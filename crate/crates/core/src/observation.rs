//! Observation models: what part of a signal the learner gets to see, and
//! the squared-error loss with its gradient in the predicted signal.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::{spatial_extent, Tensor};

/// Side length of the pepper occlusion patches.
pub const PEPPER_PATCH: usize = 3;

/// Default entry standard deviation of a sensing matrix.
pub const SENSING_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum ObservationModel {
    /// Every entry observed.
    Full,
    /// Binary indicator with the data's shape; 1 = observed, 0 = occluded.
    Masked(Tensor),
    /// Linear projection `S Y` with `S` of shape K x D.
    Projected(Arc<Matrix>),
}

/// Observed data. For a masked model, occluded entries hold 0 and carry no
/// information; for a projected model this is the K-vector `S Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub data: Tensor,
}

impl ObservationModel {
    pub fn masked(mask: Tensor) -> Result<Self> {
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        Ok(ObservationModel::Masked(mask))
    }

    pub fn projected(sensing: Arc<Matrix>) -> Result<Self> {
        if sensing.rows() == 0 || sensing.rows() > sensing.cols() {
            return Err(Error::invalid(format!(
                "sensing matrix must have 1 <= K <= D, got {}x{}",
                sensing.rows(),
                sensing.cols()
            )));
        }
        if sensing.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sensing matrix has non-finite entries"));
        }
        Ok(ObservationModel::Projected(sensing))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ObservationModel::Full => "full",
            ObservationModel::Masked(_) => "masked",
            ObservationModel::Projected(_) => "projected",
        }
    }

    /// Apply the model to a complete signal.
    pub fn observe(&self, signal: &Tensor) -> Result<Observation> {
        let data = match self {
            ObservationModel::Full => signal.clone(),
            ObservationModel::Masked(mask) => {
                check_same(mask, signal, "mask")?;
                let data = signal
                    .data()
                    .iter()
                    .zip(mask.data())
                    .map(|(v, m)| if *m == 0.0 { 0.0 } else { *v })
                    .collect();
                Tensor::new(signal.shape().to_vec(), data)?
            }
            ObservationModel::Projected(s) => {
                check_projection(s, signal)?;
                Tensor::from_vec(s.matvec(signal.data()))
            }
        };
        Ok(Observation { data })
    }

    /// Number of scalar measurements the loss sums over.
    pub fn observed_count(&self, signal_len: usize) -> usize {
        match self {
            ObservationModel::Full => signal_len,
            ObservationModel::Masked(m) => m.data().iter().filter(|&&v| v != 0.0).count(),
            ObservationModel::Projected(s) => s.rows(),
        }
    }

    /// Factor by which the model scales the curvature of the loss in the
    /// signal: the mean squared column norm of `S` for a projection, 1
    /// otherwise. Masks never amplify, so they report 1.
    pub fn curvature_gain(&self) -> f64 {
        match self {
            ObservationModel::Full | ObservationModel::Masked(_) => 1.0,
            ObservationModel::Projected(s) => {
                s.data().iter().map(|v| v * v).sum::<f64>() / s.cols() as f64
            }
        }
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what} shape {:?} differs from signal shape {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_projection(s: &Matrix, signal: &Tensor) -> Result<()> {
    if s.cols() != signal.numel() {
        return Err(Error::shape(format!(
            "sensing matrix has {} columns for a signal of {} entries",
            s.cols(),
            signal.numel()
        )));
    }
    Ok(())
}

/// Squared-error loss of a predicted signal against an observation, and
/// its gradient with respect to the prediction.
///
/// * full: `||Y - Yhat||^2`, gradient `-2 (Y - Yhat)`
/// * masked: the same sum restricted to observed entries; zero gradient at
///   occluded entries
/// * projected: `||SY - S Yhat||^2`, gradient `-2 S^T (SY - S Yhat)`
pub fn loss_and_grad(
    obs: &Observation,
    predicted: &Tensor,
    model: &ObservationModel,
) -> Result<(f64, Tensor)> {
    match model {
        ObservationModel::Full => {
            check_same(&obs.data, predicted, "observation")?;
            let mut grad = predicted.clone();
            let mut loss = 0.0;
            for (g, y) in grad.data_mut().iter_mut().zip(obs.data.data()) {
                let r = y - *g;
                loss += r * r;
                *g = -2.0 * r;
            }
            Ok((loss, grad))
        }
        ObservationModel::Masked(mask) => {
            check_same(&obs.data, predicted, "observation")?;
            check_same(mask, predicted, "mask")?;
            let mut grad = predicted.clone();
            let mut loss = 0.0;
            for ((g, y), m) in grad
                .data_mut()
                .iter_mut()
                .zip(obs.data.data())
                .zip(mask.data())
            {
                if *m == 0.0 {
                    *g = 0.0;
                } else {
                    let r = y - *g;
                    loss += r * r;
                    *g = -2.0 * r;
                }
            }
            Ok((loss, grad))
        }
        ObservationModel::Projected(s) => {
            check_projection(s, predicted)?;
            if obs.data.numel() != s.rows() {
                return Err(Error::shape(format!(
                    "projected observation has {} entries, sensing matrix has {} rows",
                    obs.data.numel(),
                    s.rows()
                )));
            }
            let proj = s.matvec(predicted.data());
            let resid: Vec<f64> = obs
                .data
                .data()
                .iter()
                .zip(&proj)
                .map(|(a, b)| a - b)
                .collect();
            let loss = resid.iter().map(|r| r * r).sum();
            let back = s.matvec_t(&resid);
            let grad = Tensor::new(
                predicted.shape().to_vec(),
                back.into_iter().map(|v| -2.0 * v).collect(),
            )?;
            Ok((loss, grad))
        }
    }
}

/// Occlusion mask built from randomly centered 3x3 patches (cropped at the
/// border), placed until the occluded fraction first reaches `coverage`.
/// The same spatial mask is replicated across channels. Returns the mask
/// and the patch centers in placement order.
pub fn make_pepper_mask_with_patches<R: Rng + ?Sized>(
    shape: &[usize],
    coverage: f64,
    rng: &mut R,
) -> Result<(Tensor, Vec<(usize, usize)>)> {
    if !(0.0..=1.0).contains(&coverage) {
        return Err(Error::invalid(format!(
            "coverage must lie in [0, 1], got {coverage}"
        )));
    }
    let (h, w) = spatial_extent(shape)?;
    let area = h * w;
    let mut occluded = vec![false; area];
    let mut count = 0usize;
    let mut patches = Vec::new();
    let half = PEPPER_PATCH / 2;
    while coverage > 0.0 && (count as f64) < coverage * area as f64 {
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        patches.push((cy, cx));
        for y in cy.saturating_sub(half)..(cy + half + 1).min(h) {
            for x in cx.saturating_sub(half)..(cx + half + 1).min(w) {
                if !occluded[y * w + x] {
                    occluded[y * w + x] = true;
                    count += 1;
                }
            }
        }
    }
    Ok((replicate(shape, &occluded), patches))
}

pub fn make_pepper_mask<R: Rng + ?Sized>(
    shape: &[usize],
    coverage: f64,
    rng: &mut R,
) -> Result<Tensor> {
    make_pepper_mask_with_patches(shape, coverage, rng).map(|(m, _)| m)
}

/// A single `side x side` occluded square at a uniformly random in-bounds
/// position.
pub fn make_region_mask<R: Rng + ?Sized>(
    shape: &[usize],
    side: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let (h, w) = spatial_extent(shape)?;
    if side == 0 || side > h || side > w {
        return Err(Error::invalid(format!(
            "region side {side} does not fit a {h}x{w} domain"
        )));
    }
    let y0 = rng.random_range(0..=h - side);
    let x0 = rng.random_range(0..=w - side);
    let mut occluded = vec![false; h * w];
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            occluded[y * w + x] = true;
        }
    }
    Ok(replicate(shape, &occluded))
}

fn replicate(shape: &[usize], occluded: &[bool]) -> Tensor {
    let channels = shape[0];
    let mut data = Vec::with_capacity(channels * occluded.len());
    for _ in 0..channels {
        data.extend(occluded.iter().map(|&o| if o { 0.0 } else { 1.0 }));
    }
    Tensor::new(shape.to_vec(), data).expect("mask matches shape")
}

/// K x D matrix of i.i.d. N(0, std^2) entries.
pub fn make_sensing_matrix<R: Rng + ?Sized>(
    k: usize,
    d: usize,
    std: f64,
    rng: &mut R,
) -> Result<Matrix> {
    if k == 0 || d == 0 {
        return Err(Error::invalid("sensing matrix extents must be at least 1"));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    Matrix::from_vec(k, d, (0..k * d).map(|_| normal.sample(rng)).collect())
}

/// Entries over which a recovery error is averaged.
#[derive(Debug, Clone, Copy)]
pub enum Region<'a> {
    All,
    /// Entries where the mask is 0.
    OccludedOnly(&'a Tensor),
}

/// Mean absolute difference over the region, relative to the pixel range
/// width 2 of signals scaled to [-1, 1].
pub fn recovery_error(truth: &Tensor, recovered: &Tensor, region: Region<'_>) -> Result<f64> {
    check_same(truth, recovered, "recovered signal")?;
    let (sum, count) = match region {
        Region::All => (
            truth
                .data()
                .iter()
                .zip(recovered.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>(),
            truth.numel(),
        ),
        Region::OccludedOnly(mask) => {
            check_same(mask, truth, "mask")?;
            truth
                .data()
                .iter()
                .zip(recovered.data())
                .zip(mask.data())
                .filter(|(_, m)| **m == 0.0)
                .fold((0.0, 0usize), |(s, c), ((a, b), _)| {
                    (s + (a - b).abs(), c + 1)
                })
        }
    };
    if count == 0 {
        return Err(Error::invalid("recovery error over an empty region"));
    }
    Ok(sum / count as f64 / 2.0)
}

/// Keep observed entries of the input, fill occluded ones from the
/// reconstruction.
pub fn composite(observed: &Tensor, reconstruction: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_same(observed, reconstruction, "reconstruction")?;
    check_same(mask, observed, "mask")?;
    let data = observed
        .data()
        .iter()
        .zip(reconstruction.data())
        .zip(mask.data())
        .map(|((o, r), m)| if *m == 0.0 { *r } else { *o })
        .collect();
    Tensor::new(observed.shape().to_vec(), data)
}
