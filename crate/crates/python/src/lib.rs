//! Python bindings for the `abp` engine.
//!
//! Signals and latents cross the boundary as flat lists of floats in the
//! row-major layout of the network's output and latent shapes.

use std::path::PathBuf;

use abp::inference::{InferConfig, Sample};
use abp::io::{load_checkpoint, save_checkpoint, Checkpoint, ObservationConfig};
use abp::learning::{abp_train, infer_from_prior, reconstruct, Hyper, TrainState};
use abp::linalg::Matrix;
use abp::linear_baselines::{pca_fit as core_pca_fit, pca_reconstruct};
use abp::observation::{recovery_error as core_recovery_error, Region};
use abp::{Error, NetSpec, Tensor, Weights};
use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensors(shape: &[usize], rows: Vec<Vec<f64>>) -> PyResult<Vec<Tensor>> {
    rows.into_iter()
        .map(|r| Tensor::new(shape.to_vec(), r).map_err(to_py))
        .collect()
}

fn rows(ts: Vec<Tensor>) -> Vec<Vec<f64>> {
    ts.into_iter().map(Tensor::into_data).collect()
}

/// A generator architecture.
#[pyclass(name = "Spec", module = "abp_py", from_py_object)]
#[derive(Clone)]
struct PySpec {
    inner: NetSpec,
}

#[pymethods]
impl PySpec {
    /// One of `texture`, `sound` or `object-64`.
    #[staticmethod]
    #[pyo3(signature = (name, latent_dim=None))]
    fn preset(name: &str, latent_dim: Option<usize>) -> PyResult<Self> {
        Ok(PySpec {
            inner: NetSpec::preset(name, latent_dim).map_err(to_py)?,
        })
    }

    /// Parses the canonical `latent_shape = ...` and `layer = ...` lines.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PySpec {
            inner: NetSpec::from_text(text).map_err(to_py)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn latent_shape(&self) -> Vec<usize> {
        self.inner.latent_shape().to_vec()
    }

    #[getter]
    fn output_shape(&self) -> Vec<usize> {
        self.inner.output_shape().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Spec(latent_shape={:?}, output_shape={:?}, layers={})",
            self.inner.latent_shape(),
            self.inner.output_shape(),
            self.inner.layers().len()
        )
    }
}

/// Trained weights together with the training state they came from.
#[pyclass(name = "Model", module = "abp_py")]
struct PyModel {
    spec: NetSpec,
    hyper: Hyper,
    state: TrainState,
}

impl PyModel {
    fn weights(&self) -> &Weights {
        &self.state.weights
    }
}

#[pymethods]
impl PyModel {
    /// Fits the generator to complete signals by alternating back-propagation.
    /// The GIL is released while training runs.
    #[staticmethod]
    #[pyo3(signature = (spec, signals, iterations=600, learning_rate=1e-4, momentum=0.5,
                        langevin_steps=10, step_size=0.1, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        spec: &PySpec,
        signals: Vec<Vec<f64>>,
        iterations: usize,
        learning_rate: f64,
        momentum: f64,
        langevin_steps: usize,
        step_size: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = spec.inner.clone();
        let samples: Vec<Sample> = tensors(spec.output_shape(), signals)?
            .into_iter()
            .map(Sample::full)
            .collect();
        let hyper = Hyper {
            iterations,
            learning_rate,
            momentum,
            infer: InferConfig {
                steps: langevin_steps,
                step_size,
                ..InferConfig::texture()
            },
            seed,
            ..Hyper::default()
        };
        let state = py
            .detach(|| abp_train(&samples, &spec, &hyper))
            .map_err(to_py)?;
        Ok(PyModel { spec, hyper, state })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        if !path.exists() {
            return Err(PyFileNotFoundError::new_err(format!(
                "no checkpoint at {}",
                path.display()
            )));
        }
        let ckpt = load_checkpoint(&path).map_err(to_py)?;
        let state = ckpt.train_state().map_err(to_py)?;
        Ok(PyModel {
            spec: ckpt.spec,
            hyper: ckpt.hyper,
            state,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ckpt = Checkpoint::from_training(
            &self.spec,
            &self.hyper,
            &ObservationConfig::default(),
            &self.state,
            Vec::new(),
        );
        save_checkpoint(&path, &ckpt).map_err(to_py)
    }

    #[getter]
    fn spec(&self) -> PySpec {
        PySpec {
            inner: self.spec.clone(),
        }
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.state.iteration
    }

    /// Mean per-example loss of every completed iteration.
    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.state
            .history
            .records
            .iter()
            .map(|r| r.mean_loss)
            .collect()
    }

    /// Latent factors inferred for the training signals.
    #[getter]
    fn latents(&self) -> Vec<Vec<f64>> {
        rows(self.state.latent_tensors())
    }

    /// `f(Z; W)` for each latent.
    fn generate(&self, latents: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let z = tensors(self.spec.latent_shape(), latents)?;
        Ok(rows(
            reconstruct(self.weights(), &self.spec, &z).map_err(to_py)?,
        ))
    }

    /// Draws `num` signals from the prior.
    #[pyo3(signature = (num, seed=0))]
    fn sample(&self, num: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let mut rng = abp::rng::stream(seed, abp::rng::Purpose::Synthesis, 0, 0);
        let z: Vec<Tensor> = (0..num)
            .map(|_| abp::latent_tools::sample_prior(self.spec.latent_shape(), &mut rng))
            .collect();
        Ok(rows(
            reconstruct(self.weights(), &self.spec, &z).map_err(to_py)?,
        ))
    }

    /// Test-time inference: Langevin chains from prior draws with the weights
    /// held fixed. Returns one latent per signal.
    #[pyo3(signature = (signals, steps=300, step_size=0.05, seed=0))]
    fn infer(
        &self,
        py: Python<'_>,
        signals: Vec<Vec<f64>>,
        steps: usize,
        step_size: f64,
        seed: u64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let samples: Vec<Sample> = tensors(self.spec.output_shape(), signals)?
            .into_iter()
            .map(Sample::full)
            .collect();
        let cfg = InferConfig {
            steps,
            step_size,
            ..InferConfig::test_time()
        };
        let z = py
            .detach(|| infer_from_prior(&samples, self.weights(), &self.spec, &cfg, seed))
            .map_err(to_py)?;
        Ok(rows(z))
    }
}

/// Fits PCA with `d` components to `train` and returns the reconstructions
/// of `test`.
#[pyfunction]
fn pca_reconstruction(
    train: Vec<Vec<f64>>,
    test: Vec<Vec<f64>>,
    d: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let data = Matrix::from_rows(&train).map_err(to_py)?;
    let fit = core_pca_fit(&data, d).map_err(to_py)?;
    test.iter()
        .map(|y| pca_reconstruct(y, &fit).map_err(to_py))
        .collect()
}

/// Mean absolute difference over all entries divided by the pixel range
/// width 2 of signals scaled to `[-1, 1]`.
#[pyfunction]
fn recovery_error(truth: Vec<f64>, recovered: Vec<f64>) -> PyResult<f64> {
    let a = Tensor::from_vec(truth);
    let b = Tensor::from_vec(recovered);
    core_recovery_error(&a, &b, Region::All).map_err(to_py)
}

/// Spherical interpolation between two latents.
#[pyfunction]
fn slerp(a: Vec<f64>, b: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    let out =
        abp::latent_tools::slerp(&Tensor::from_vec(a), &Tensor::from_vec(b), t).map_err(to_py)?;
    Ok(out.into_data())
}

#[pymodule]
fn abp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpec>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(pca_reconstruction, m)?)?;
    m.add_function(wrap_pyfunction!(recovery_error, m)?)?;
    m.add_function(wrap_pyfunction!(slerp, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
