//! Prior draws and latent-space geometry: sphere interpolation and latent
//! grids for browsing a learned model.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// i.i.d. standard-normal latent of the given shape.
pub fn sample_prior<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Below this `sin(angle)` the endpoints count as collinear.
const COLLINEAR_SIN: f64 = 1e-10;

/// Spherical interpolation at constant angular speed between `a` and `b`;
/// falls back to linear interpolation for (anti)collinear endpoints.
pub fn slerp(a: &Tensor, b: &Tensor, t: f64) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "interpolating {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 && nb == 0.0 {
        return Err(Error::invalid(
            "cannot interpolate between two zero vectors",
        ));
    }
    let lerp = |wa: f64, wb: f64| {
        let mut out = a.scaled(wa);
        out.axpy(wb, b);
        out
    };
    if na == 0.0 || nb == 0.0 {
        return Ok(lerp(1.0 - t, t));
    }
    let cos = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    let sin = omega.sin();
    if sin < COLLINEAR_SIN {
        return Ok(lerp(1.0 - t, t));
    }
    Ok(lerp(
        ((1.0 - t) * omega).sin() / sin,
        (t * omega).sin() / sin,
    ))
}

/// How a latent grid is laid out.
#[derive(Debug, Clone)]
pub enum GridSpec {
    /// Cartesian grid over `[lo, hi]^2` for a 2-dimensional latent.
    Range { lo: f64, hi: f64 },
    /// Corners in order top-left, top-right, bottom-left, bottom-right.
    Corners([Tensor; 4]),
}

/// `steps x steps` latents in row-major order.
///
/// Range mode puts coordinate 0 along rows and coordinate 1 along columns.
/// Corner mode slerps down the left and right edges, then across each row.
pub fn latent_grid(grid: &GridSpec, steps: usize) -> Result<Vec<Tensor>> {
    if steps < 2 {
        return Err(Error::invalid(
            "a latent grid needs at least 2 steps per side",
        ));
    }
    let frac = |i: usize| i as f64 / (steps - 1) as f64;
    match grid {
        GridSpec::Range { lo, hi } => {
            let coord = |i: usize| {
                if i == steps - 1 {
                    *hi
                } else {
                    lo + (hi - lo) * frac(i)
                }
            };
            Ok((0..steps)
                .flat_map(|r| (0..steps).map(move |c| (r, c)))
                .map(|(r, c)| Tensor::from_vec(vec![coord(r), coord(c)]))
                .collect())
        }
        GridSpec::Corners([tl, tr, bl, br]) => {
            if tl.numel() < 2 {
                return Err(Error::invalid(
                    "corner interpolation needs latent dimension >= 2",
                ));
            }
            let mut out = Vec::with_capacity(steps * steps);
            for r in 0..steps {
                let left = slerp(tl, bl, frac(r))?;
                let right = slerp(tr, br, frac(r))?;
                for c in 0..steps {
                    out.push(slerp(&left, &right, frac(c))?);
                }
            }
            Ok(out)
        }
    }
}
