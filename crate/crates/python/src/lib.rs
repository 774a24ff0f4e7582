//! Python bindings: datasets, simulation, features, similarity, detection
//! and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sonar_loop::detector::{self, ScoredPair};
use sonar_loop::evaluation::LabelConfig;
use sonar_loop::features::{self, FeatureKind};
use sonar_loop::io;
use sonar_loop::nalgebra::Vector3;
use sonar_loop::pipeline::{self, DetectConfig};
use sonar_loop::submap::CropMode;
use sonar_loop::synth::{Scenario, ScenarioName};

fn py_err(e: sonar_loop::Error) -> PyErr {
    match e {
        sonar_loop::Error::Io(e) => PyIOError::new_err(e.to_string()),
        sonar_loop::Error::MissingFile(p) => PyIOError::new_err(format!("missing required file {}", p.display())),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Six per-point feature maps of a point cloud.
#[pyclass(name = "FeatureSet", module = "sonar_loop_py", frozen)]
struct PyFeatureSet(features::FeatureSet);

#[pymethods]
impl PyFeatureSet {
    /// Map names in storage order.
    #[classattr]
    fn names() -> Vec<&'static str> {
        FeatureKind::ALL.iter().map(|k| k.column_name()).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// The named map as a list of floats.
    fn map(&self, name: &str) -> PyResult<Vec<f64>> {
        FeatureKind::ALL
            .iter()
            .find(|k| k.column_name() == name)
            .map(|k| self.0.map(*k).to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("unknown feature map '{name}'")))
    }

    /// Cloud similarity: the mean of the six map similarities.
    #[pyo3(signature = (other, epsilon=detector::DEFAULT_EPSILON))]
    fn similarity(&self, other: &PyFeatureSet, epsilon: f64) -> PyResult<f64> {
        detector::cloud_similarity(&self.0, &other.0, epsilon).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("FeatureSet(points={})", self.0.len())
    }
}

/// Sensor streams, optional truth poses and metadata.
#[pyclass(name = "Dataset", module = "sonar_loop_py", frozen)]
struct PyDataset(io::Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::load_dataset(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_dataset(&path, &self.0).map_err(py_err)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.0.metadata.name
    }

    #[getter]
    fn d(&self) -> Option<f64> {
        self.0.metadata.d
    }

    #[getter]
    fn imu_samples(&self) -> usize {
        self.0.imu.len()
    }

    #[getter]
    fn dvl_samples(&self) -> usize {
        self.0.dvl.len()
    }

    #[getter]
    fn pings(&self) -> usize {
        self.0.pings.len()
    }

    #[getter]
    fn has_truth(&self) -> bool {
        self.0.truth.is_some()
    }

    /// Scores every admissible submap pair. The result holds `scores` as
    /// `(i, j, gamma)` tuples and, when `gamma` is given, the flagged `loops`.
    #[pyo3(signature = (*, d=None, n=10, m=16, epsilon=detector::DEFAULT_EPSILON, gamma=None, crop="square", cap=Some(detector::DEFAULT_CAP), exclusion=None, seed=0, stride=1))]
    #[allow(clippy::too_many_arguments)]
    fn detect<'py>(
        &self,
        py: Python<'py>,
        d: Option<f64>,
        n: usize,
        m: usize,
        epsilon: f64,
        gamma: Option<f64>,
        crop: &str,
        cap: Option<usize>,
        exclusion: Option<usize>,
        seed: u64,
        stride: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let config = DetectConfig {
            n,
            d: d.or(self.0.metadata.d).unwrap_or(DetectConfig::default().d),
            m,
            epsilon,
            gamma,
            crop: crop.parse::<CropMode>().map_err(py_err)?,
            cap,
            exclusion,
            seed,
            stride,
            ..Default::default()
        };
        let detection = py
            .detach(|| pipeline::detect(&self.0, &config))
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let out = PyDict::new(py);
        let scores: Vec<(usize, usize, f64)> = detection.scores.iter().map(|s| (s.i, s.j, s.score)).collect();
        out.set_item("scores", scores)?;
        if let Some(loops) = detection.loops {
            let flagged: Vec<(usize, usize, f64)> =
                loops.iter().filter(|l| l.is_loop).map(|l| (l.i, l.j, l.score)).collect();
            out.set_item("loops", flagged)?;
        }
        out.set_item("submaps", detection.submaps)?;
        out.set_item("skipped", detection.skipped)?;
        out.set_item("exclusion", config.exclusion())?;
        Ok(out)
    }

    /// AP summary and PR curve of `scores` against the dataset's truth.
    #[pyo3(signature = (scores, *, d=None, exclusion=0, distance_2d=false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        scores: Vec<(usize, usize, f64)>,
        d: Option<f64>,
        exclusion: usize,
        distance_2d: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let truth = self
            .0
            .truth
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("dataset has no truth poses"))?;
        let d = d
            .or(self.0.metadata.d)
            .ok_or_else(|| PyValueError::new_err("no d given and the dataset metadata has none"))?;
        let scores: Vec<ScoredPair> = scores.into_iter().map(|(i, j, score)| ScoredPair { i, j, score }).collect();
        let truth = pipeline::ping_truth(truth, &self.0.pings).map_err(py_err)?;
        let label = LabelConfig {
            d,
            exclusion,
            planar: distance_2d,
        };
        let (curve, summary) = pipeline::evaluate(&scores, &truth, &label).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("ap", summary.ap)?;
        out.set_item("pairs", summary.pairs)?;
        out.set_item("positives", summary.positives)?;
        let curve: Vec<(f64, f64, f64)> = curve.iter().map(|p| (p.threshold, p.precision, p.recall)).collect();
        out.set_item("curve", curve)?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, pings={}, imu={}, dvl={}, truth={})",
            self.0.metadata.name,
            self.0.pings.len(),
            self.0.imu.len(),
            self.0.dvl.len(),
            self.0.truth.is_some()
        )
    }
}

/// Generates a synthetic survey: `pond`, `flats` or `abyss`.
#[pyfunction]
#[pyo3(signature = (scenario="pond", seed=0))]
fn simulate(py: Python<'_>, scenario: &str, seed: u64) -> PyResult<PyDataset> {
    let name: ScenarioName = scenario.parse().map_err(py_err)?;
    let scenario = Scenario::new(name);
    let survey = py.detach(|| scenario.generate(seed)).map_err(py_err)?;
    Ok(PyDataset(io::Dataset {
        imu: survey.imu,
        dvl: survey.dvl,
        pings: survey.pings,
        truth: Some(survey.truth),
        metadata: io::Metadata::new(name.as_str(), Some(scenario.d)),
    }))
}

/// Feature maps of a cloud given as `[x, y, z]` rows.
#[pyfunction]
#[pyo3(signature = (points, m=features::DEFAULT_NEIGHBORS))]
fn compute_features(py: Python<'_>, points: Vec<[f64; 3]>, m: usize) -> PyResult<PyFeatureSet> {
    let points: Vec<Vector3<f64>> = points.into_iter().map(Vector3::from).collect();
    py.detach(|| features::compute_feature_set(&points, m))
        .map(PyFeatureSet)
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, epsilon=detector::DEFAULT_EPSILON))]
fn point_similarity(a: f64, b: f64, epsilon: f64) -> f64 {
    detector::point_similarity(a, b, epsilon)
}

/// Mean point similarity over every cross pair of two feature maps.
#[pyfunction]
#[pyo3(signature = (x, y, epsilon=detector::DEFAULT_EPSILON))]
fn map_similarity(x: Vec<f64>, y: Vec<f64>, epsilon: f64) -> PyResult<f64> {
    detector::map_similarity(&x, &y, epsilon).map_err(py_err)
}

#[pymodule]
pub fn sonar_loop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureSet>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(compute_features, m)?)?;
    m.add_function(wrap_pyfunction!(point_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(map_similarity, m)?)?;
    Ok(())
}
