//! Generator networks learned by alternating back-propagation.
//!
//! A generator `Y = f(Z; W) + eps` with `Z ~ N(0, I)` is fitted by
//! alternating Langevin inference of each example's latent factors with
//! gradient steps on the network weights. Observation models cover complete,
//! occluded and linearly projected data.

pub mod cli;
pub mod dynamics;
mod error;
pub mod generator;
pub mod inference;
pub mod io;
pub mod latent_tools;
pub mod learning;
pub mod linalg;
pub mod linear_baselines;
pub mod observation;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use generator::{LayerSpec, NetSpec, Weights};
pub use inference::{InferConfig, InferMode, LatentState, Sample};
pub use learning::{Hyper, TrainState};
pub use observation::ObservationModel;
pub use tensor::{Activation, Tensor};
