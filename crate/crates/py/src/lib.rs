//! Python bindings: configuration, synthetic cubes, training, full-map
//! inference and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

use fdi_core::datacube::{generate_synthetic_cube, load_cube, save_cube, Normalizer};
use fdi_core::inference::{ensemble_average, full_map_inference};
use fdi_core::models::{build_model, load_weights, save_weights};
use fdi_core::pipeline::{build_datasets, draw_samples, evaluate, fit_training_normalizer, infer_days};
use fdi_core::trainer::{compute_metrics, predict, train, TrainHistory};
use fdi_core::{Error, ErrorClass};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Usage => PyValueError::new_err(msg),
        ErrorClass::Data => PyIOError::new_err(msg),
        ErrorClass::Numeric => PyArithmeticError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for fdi_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Run configuration. `toml` may be empty; overrides are `section.key=value`.
#[pyclass(module = "fdi", from_py_object)]
#[derive(Clone)]
struct RunConfig {
    inner: fdi_core::pipeline::RunConfig,
}

#[pymethods]
impl RunConfig {
    #[new]
    #[pyo3(signature = (toml = "", overrides = Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: fdi_core::pipeline::RunConfig::from_toml_str(toml, &overrides).py()?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(hash={})", &self.inner.hash()[..12])
    }
}

#[pyclass(module = "fdi", frozen)]
struct DataCube {
    inner: fdi_core::datacube::DataCube,
}

#[pymethods]
impl DataCube {
    #[staticmethod]
    fn generate(config: &RunConfig) -> PyResult<Self> {
        Ok(Self {
            inner: generate_synthetic_cube(&config.inner.cube).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_cube(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_cube(&self.inner, &path).py()
    }

    /// `(height, width, days)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.height(), self.inner.width(), self.inner.days())
    }

    #[getter]
    fn channels(&self) -> Vec<String> {
        self.inner.header.channels.clone()
    }

    fn fire_count(&self, day: usize) -> PyResult<usize> {
        self.check_day(day)?;
        Ok(self.inner.fire_count(day))
    }

    /// Row-major raster of one channel on one day.
    fn frame(&self, channel: usize, day: usize) -> PyResult<Vec<f32>> {
        self.check_day(day)?;
        if channel >= self.inner.channels.len() {
            return Err(PyIndexError::new_err(format!("channel {channel} out of range")));
        }
        Ok(self.inner.frame(channel, day).to_vec())
    }

    fn sample_count(&self, config: &RunConfig) -> PyResult<(usize, usize)> {
        let s = draw_samples(&self.inner, &config.inner.sampling).py()?;
        let fires = s.iter().filter(|s| s.label == fdi_core::sampling::FIRE).count();
        Ok((fires, s.len() - fires))
    }
}

impl DataCube {
    fn check_day(&self, day: usize) -> PyResult<()> {
        if day >= self.inner.days() {
            return Err(PyIndexError::new_err(format!("day {day} out of range")));
        }
        Ok(())
    }
}

#[pyclass(module = "fdi", frozen)]
struct FdiMap {
    inner: fdi_core::inference::FdiMap,
}

#[pymethods]
impl FdiMap {
    #[getter]
    fn date(&self) -> usize {
        self.inner.date
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.height, self.inner.width)
    }

    #[getter]
    fn model_id(&self) -> String {
        self.inner.model_id.clone()
    }

    /// Row-major values; NaN marks pixels outside the mask.
    fn values(&self) -> Vec<f32> {
        self.inner
            .values
            .iter()
            .zip(&self.inner.mask)
            .map(|(&v, &m)| if m { v } else { f32::NAN })
            .collect()
    }

    fn valid_count(&self) -> usize {
        self.inner.valid_count()
    }

    fn get(&self, x: usize, y: usize) -> Option<f32> {
        (x < self.inner.width && y < self.inner.height).then(|| self.inner.get(x, y)).flatten()
    }
}

/// A trained model with the normalizer fitted on its training years.
#[pyclass(module = "fdi", frozen)]
struct Model {
    bundle: fdi_core::models::ModelBundle,
    norm: Normalizer,
    history: Option<TrainHistory>,
}

#[pymethods]
impl Model {
    #[getter]
    fn architecture(&self) -> String {
        self.bundle.network.config.architecture.to_string()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.bundle.network.clone().param_count()
    }

    #[getter]
    fn best_epoch(&self) -> Option<usize> {
        self.history.as_ref().map(|h| h.best_epoch)
    }

    /// Per-epoch `(train_loss, val_loss, f1)`.
    fn history(&self) -> Vec<(f64, f64, f64)> {
        self.history
            .iter()
            .flat_map(|h| h.records.iter().map(|r| (r.train_loss, r.val_loss, r.f1)))
            .collect()
    }

    fn infer(&self, cube: &DataCube, date: usize) -> PyResult<FdiMap> {
        Ok(FdiMap {
            inner: full_map_inference(&self.bundle, &cube.inner, date, &self.norm).py()?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        save_weights(&self.bundle, &dir).py()?;
        let json = serde_json::to_string_pretty(&self.norm).map_err(|e| PyValueError::new_err(e.to_string()))?;
        std::fs::write(dir.join("normalizer.json"), json).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let bundle = load_weights(&dir, None).py()?;
        let text = std::fs::read_to_string(dir.join("normalizer.json")).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let norm = serde_json::from_str(&text).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self {
            bundle,
            norm,
            history: None,
        })
    }
}

/// Draws samples, fits the normalizer and trains one model (or every member
/// when `ensemble` is set). Returns the models and their test F1 scores.
#[pyfunction]
#[pyo3(signature = (config, cube, ensemble = false))]
fn train_models(py: Python<'_>, config: &RunConfig, cube: &DataCube, ensemble: bool) -> PyResult<Vec<(Model, f64)>> {
    let cfg = &config.inner;
    let c = &cube.inner;
    py.detach(|| -> fdi_core::Result<Vec<(Model, f64)>> {
        let mc = cfg.model_config()?;
        let samples = draw_samples(c, &cfg.sampling)?;
        let split = cfg.split_years(c)?;
        let norm = fit_training_normalizer(c, &split)?;
        let ds = build_datasets(c, &samples, &split, &norm, &mc)?;
        let trained = if ensemble {
            fdi_core::trainer::train_ensemble(&cfg.ensemble, &mc, &ds.train, &ds.val, &cfg.train)?
        } else {
            vec![train(&build_model(&mc)?, &ds.train, &ds.val, &cfg.train)?]
        };
        trained
            .into_iter()
            .map(|(bundle, history)| {
                let m = compute_metrics(&predict(&bundle.network, &ds.test, cfg.train.batch_size)?, &ds.test.labels())?;
                Ok((
                    Model {
                        bundle,
                        norm: norm.clone(),
                        history: Some(history),
                    },
                    m.f1,
                ))
            })
            .collect()
    })
    .py()
}

/// Infers every evaluation day for each model and returns the evaluation
/// report as a JSON string.
#[pyfunction]
fn evaluate_models(py: Python<'_>, config: &RunConfig, cube: &DataCube, models: Vec<Py<Model>>) -> PyResult<String> {
    let cfg = &config.inner;
    let c = &cube.inner;
    let models: Vec<&Model> = models.iter().map(|m| m.get()).collect();
    let report = py
        .detach(|| -> fdi_core::Result<_> {
            let days = cfg.eval_days(c)?;
            let maps = models
                .iter()
                .map(|m| infer_days(&m.bundle, c, &m.norm, &days, &cfg.eval))
                .collect::<fdi_core::Result<Vec<_>>>()?;
            evaluate(c, &maps, &days, &cfg.eval)
        })
        .py()?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Pixel-wise mean of member maps over the shared mask.
#[pyfunction]
fn average_maps(maps: Vec<Py<FdiMap>>) -> PyResult<FdiMap> {
    let owned: Vec<_> = maps.iter().map(|m| m.get().inner.clone()).collect();
    Ok(FdiMap {
        inner: ensemble_average(&owned).py()?,
    })
}

#[pymodule]
fn fdi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RunConfig>()?;
    m.add_class::<DataCube>()?;
    m.add_class::<FdiMap>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train_models, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_models, m)?)?;
    m.add_function(wrap_pyfunction!(average_maps, m)?)?;
    Ok(())
}
