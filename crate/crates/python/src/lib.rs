//! Python bindings: codebook fitting and assignment, bag-of-words histograms,
//! image rotation and perturbation, the losses, the plateau scheduler and the
//! command-line pipeline.

use candle_core::{Device, Tensor};
use clap::Parser;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use deepbow::backbone::bow_predict as core_bow_predict;
use deepbow::codebook::{self, FeatureProvenance, FeatureVectorSet, KMeansConfig};
use deepbow::image::{Image, RotationLabel};
use deepbow::optim::{PlateauConfig, PlateauSchedulerState};
use deepbow::perturb::PerturbConfig;
use deepbow::{cli, evaluation, losses, Error};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Tensor(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn candle_err(e: candle_core::Error) -> PyErr {
    err(e.into())
}

fn rows_to_flat(rows: &[Vec<f32>]) -> PyResult<(Vec<f32>, usize)> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok((rows.concat(), dim))
}

fn matrix(rows: &[Vec<f32>]) -> PyResult<Tensor> {
    let (flat, dim) = rows_to_flat(rows)?;
    Tensor::from_vec(flat, (rows.len(), dim), &Device::Cpu).map_err(candle_err)
}

fn scalar(t: Tensor) -> PyResult<f64> {
    t.to_scalar::<f32>().map(f64::from).map_err(candle_err)
}

/// Visual-word vocabulary: `k` centroids of dimension `dim`.
#[pyclass(name = "Codebook", module = "deepbow")]
struct PyCodebook {
    inner: codebook::Codebook,
}

#[pymethods]
impl PyCodebook {
    #[new]
    #[pyo3(signature = (centroids, tap = "tap"))]
    fn new(centroids: Vec<Vec<f32>>, tap: &str) -> PyResult<Self> {
        let (flat, dim) = rows_to_flat(&centroids)?;
        Ok(Self {
            inner: codebook::Codebook::from_centroids(flat, dim, tap).map_err(err)?,
        })
    }

    /// Mini-batch K-means with k-means++ seeding.
    #[staticmethod]
    #[pyo3(signature = (vectors, k, batch_size = 1000, epochs = 20, seed = 0, tap = "tap"))]
    fn fit(vectors: Vec<Vec<f32>>, k: usize, batch_size: usize, epochs: usize, seed: u64, tap: &str) -> PyResult<Self> {
        let (flat, dim) = rows_to_flat(&vectors)?;
        let prov = FeatureProvenance {
            tap: tap.to_string(),
            ..Default::default()
        };
        let set = FeatureVectorSet::from_rows(flat, dim, prov).map_err(err)?;
        let cfg = KMeansConfig {
            k,
            batch_size,
            epochs,
            seed,
            max_vectors: None,
            init_size: None,
        };
        Ok(Self {
            inner: codebook::minibatch_kmeans_fit(&set, &cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: codebook::Codebook::load(path.as_ref()).map_err(err)?,
        })
    }

    /// Writes the codebook and returns its sha256.
    fn save(&self, path: &str) -> PyResult<String> {
        self.inner.save(path.as_ref()).map_err(err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn tap(&self) -> String {
        self.inner.tap.clone()
    }

    #[getter]
    fn centroids(&self) -> Vec<Vec<f32>> {
        self.inner
            .centroids()
            .chunks(self.inner.dim())
            .map(<[f32]>::to_vec)
            .collect()
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    fn assign(&self, vector: Vec<f32>) -> PyResult<usize> {
        codebook::assign_nearest(&self.inner, &vector).map_err(err)
    }

    /// Sum of squared distances to the nearest centroid.
    fn objective(&self, vectors: Vec<Vec<f32>>) -> PyResult<f64> {
        let (flat, dim) = rows_to_flat(&vectors)?;
        let set = FeatureVectorSet::from_rows(flat, dim, FeatureProvenance::default()).map_err(err)?;
        codebook::kmeans_objective(&self.inner, &set).map_err(err)
    }

    /// Normalized word histogram of a channel-planar `C x H x W` feature map.
    fn histogram(&self, feature_map: Vec<f32>, shape: (usize, usize, usize)) -> PyResult<Vec<f32>> {
        let h = codebook::build_bow_histogram(&self.inner, &self.inner.tap, &feature_map, shape).map_err(err)?;
        Ok(h.into_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Codebook(k={}, dim={}, tap={:?})",
            self.inner.k(),
            self.inner.dim(),
            self.inner.tap
        )
    }
}

/// Reduce-on-plateau learning rate schedule.
#[pyclass(name = "PlateauScheduler", module = "deepbow")]
struct PyPlateauScheduler {
    inner: PlateauSchedulerState,
}

#[pymethods]
impl PyPlateauScheduler {
    #[new]
    #[pyo3(signature = (lr, patience = 10, factor = 0.1, threshold = 1e-4, min_lr = 1e-5))]
    fn new(lr: f64, patience: usize, factor: f64, threshold: f64, min_lr: f64) -> Self {
        let config = PlateauConfig {
            patience,
            factor,
            threshold,
            min_lr,
        };
        Self {
            inner: PlateauSchedulerState::new(lr, config),
        }
    }

    /// Records an epoch's monitored loss; returns the next learning rate.
    fn step(&mut self, loss: f64) -> PyResult<f64> {
        self.inner.step(loss).map_err(err)
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr
    }

    #[getter]
    fn epochs_since_improvement(&self) -> usize {
        self.inner.epochs_since_improvement
    }

    #[getter]
    fn reductions(&self) -> usize {
        self.inner.reductions
    }
}

fn image(pixels: Vec<u8>, height: usize, width: usize) -> PyResult<Image> {
    Image::new(height, width, pixels).map_err(err)
}

/// Rotates an interleaved RGB image counter-clockwise by `90 * rotation`
/// degrees. Pixels come back as `bytes`.
#[pyfunction]
fn rotate_image(pixels: Vec<u8>, size: usize, rotation: u8) -> PyResult<Vec<u8>> {
    let r = RotationLabel::new(rotation).map_err(err)?;
    Ok(deepbow::image::rotate_image(&image(pixels, size, size)?, r)
        .map_err(err)?
        .into_data())
}

/// Applies the pretext perturbation pipeline (or, with `classifier=True`,
/// the classifier augmentation) with a seeded generator.
#[pyfunction]
#[pyo3(signature = (pixels, height, width, seed, classifier = false))]
fn perturb_image(pixels: Vec<u8>, height: usize, width: usize, seed: u64, classifier: bool) -> PyResult<Vec<u8>> {
    let cfg = if classifier {
        PerturbConfig::classifier_augmentation()
    } else {
        PerturbConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(
        deepbow::perturb::perturb_image(&image(pixels, height, width)?, &cfg, &mut rng)
            .map_err(err)?
            .into_data(),
    )
}

/// `softmax(gamma * cos(feature, w_k))` for each feature row.
#[pyfunction]
fn bow_predict(features: Vec<Vec<f32>>, weight: Vec<Vec<f32>>, gamma: f32) -> PyResult<Vec<Vec<f32>>> {
    let g = Tensor::new(&[gamma], &Device::Cpu).map_err(candle_err)?;
    let p = core_bow_predict(&matrix(&features)?, &matrix(&weight)?, &g).map_err(err)?;
    p.to_vec2::<f32>().map_err(candle_err)
}

/// Batch mean of `-sum_k target_k log predicted_k`.
#[pyfunction]
fn soft_cross_entropy(predicted: Vec<Vec<f32>>, target: Vec<Vec<f32>>) -> PyResult<f64> {
    scalar(losses::soft_cross_entropy(&matrix(&predicted)?, &matrix(&target)?).map_err(err)?)
}

/// Batch mean of `-log softmax(logits)[label]`.
#[pyfunction]
fn hard_cross_entropy(logits: Vec<Vec<f32>>, labels: Vec<u32>) -> PyResult<f64> {
    scalar(losses::hard_cross_entropy(&matrix(&logits)?, &labels).map_err(err)?)
}

/// Fraction of rows whose argmax equals the label.
#[pyfunction]
fn top1_accuracy(logits: Vec<Vec<f32>>, labels: Vec<u32>) -> PyResult<f64> {
    let pred = evaluation::argmax_rows(&matrix(&logits)?).map_err(err)?;
    evaluation::top1_accuracy(&pred, &labels).map_err(err)
}

/// Runs a `deepbow` subcommand, e.g. `run(["train-rotnet", "--smoke"])`.
/// Returns `(message, run_directory)`.
#[pyfunction]
fn run(py: Python<'_>, args: Vec<String>) -> PyResult<(String, Option<String>)> {
    let cli = cli::Cli::try_parse_from(std::iter::once("deepbow".to_string()).chain(args))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = py.detach(|| cli::run(cli)).map_err(err)?;
    Ok((out.message, out.run_dir.map(|d| d.display().to_string())))
}

#[pymodule]
#[pyo3(name = "deepbow")]
fn deepbow_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyPlateauScheduler>()?;
    m.add_function(wrap_pyfunction!(rotate_image, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_image, m)?)?;
    m.add_function(wrap_pyfunction!(bow_predict, m)?)?;
    m.add_function(wrap_pyfunction!(soft_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(hard_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(top1_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
