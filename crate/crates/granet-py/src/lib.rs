//! Python bindings: point cloud I/O, spatial queries, and the model with
//! its training/prediction pipeline.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use granet::config::{DataConfig, NetworkConfig, RunConfig, TrainConfig};
use granet::error::Error;
use granet::gradcheck::{self, CheckModule};
use granet::metrics::{report, ConfusionMatrix};
use granet::network::{Block, GraNetModel};
use granet::pipeline::{predict_cloud, prepare_blocks, synthetic_scene};
use granet::pointcloud::{self, ClassMap, PointCloud};
use granet::spatial;
use granet::training;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_xyz(points: Vec<(f64, f64, f64)>) -> Vec<[f64; 3]> {
    points.into_iter().map(|(x, y, z)| [x, y, z]).collect()
}

/// A labeled or unlabeled ALS point cloud.
#[pyclass(name = "PointCloud")]
struct PyPointCloud {
    inner: PointCloud,
}

#[pymethods]
impl PyPointCloud {
    /// Reads a whitespace .pts file; the label column is autodetected.
    #[staticmethod]
    #[pyo3(signature = (path, class_names=None))]
    fn read(path: String, class_names: Option<Vec<String>>) -> PyResult<Self> {
        let labeled = pointcloud::sniff_labels(&path).map_err(py_err)?;
        let class_map = match class_names {
            Some(names) => ClassMap::new(names).map_err(py_err)?,
            None => ClassMap::isprs(),
        };
        let inner = pointcloud::read_pts(&path, labeled, class_map).map_err(py_err)?;
        Ok(PyPointCloud { inner })
    }

    /// The bundled synthetic 3-class demo scene (4096 points).
    #[staticmethod]
    fn synthetic(seed: u64) -> Self {
        PyPointCloud {
            inner: synthetic_scene(seed),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn coords(&self) -> Vec<(f64, f64, f64)> {
        self.inner.points.iter().map(|p| (p.x, p.y, p.z)).collect()
    }

    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels()
    }

    fn class_names(&self) -> Vec<String> {
        self.inner.class_map.names().to_vec()
    }

    /// Per-point [x, y, z, intensity, return_number] vectors.
    fn feature_vectors(&self) -> Vec<[f64; 5]> {
        self.inner
            .points
            .iter()
            .map(|p| p.feature_vector())
            .collect()
    }

    fn write_labels(&self, predicted: Vec<usize>, path: String) -> PyResult<()> {
        pointcloud::write_labels(&self.inner, &predicted, path).map_err(py_err)
    }

    fn write_error_map(&self, predicted: Vec<usize>, path: String) -> PyResult<()> {
        pointcloud::write_error_map(&self.inner, &predicted, path).map_err(py_err)
    }

    /// Height-above-ground normalization over a square grid.
    #[pyo3(signature = (cell_size=25.0))]
    fn normalize_hag(&self, cell_size: f64) -> PyResult<Self> {
        Ok(PyPointCloud {
            inner: pointcloud::normalize_hag(&self.inner, cell_size).map_err(py_err)?,
        })
    }
}

/// The assembled network plus its configuration.
#[pyclass(name = "Model")]
struct PyModel {
    inner: GraNetModel,
}

#[pymethods]
impl PyModel {
    /// Builds a model from config text (the `[network]` section of the
    /// CLI config format); `None` gives the miniature demo configuration.
    #[new]
    #[pyo3(signature = (config_text=None))]
    fn new(config_text: Option<String>) -> PyResult<Self> {
        let cfg = match config_text {
            Some(text) => NetworkConfig::from_section_text(&text).map_err(py_err)?,
            None => NetworkConfig::miniature(),
        };
        Ok(PyModel {
            inner: GraNetModel::init(&cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: String) -> PyResult<Self> {
        Ok(PyModel {
            inner: granet::checkpoint::load(path).map_err(py_err)?,
        })
    }

    fn save(&mut self, path: String) -> PyResult<()> {
        granet::checkpoint::save(&mut self.inner, path).map_err(py_err)
    }

    fn config_text(&self) -> String {
        self.inner.config.to_section_text()
    }

    fn param_count(&mut self) -> usize {
        self.inner.param_count()
    }

    fn param_breakdown(&mut self) -> Vec<(String, usize)> {
        self.inner.param_breakdown()
    }

    /// Forward pass on one block: per-point class scores.
    /// `attributes` is one row per point (the non-coordinate features).
    fn forward(
        &mut self,
        xyz: Vec<(f64, f64, f64)>,
        attributes: Vec<Vec<f64>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let block = Block {
            xyz: to_xyz(xyz),
            attributes: attributes.concat(),
            labels: None,
        };
        let (tape, scores) = self
            .inner
            .forward(&block, granet::autodiff::Phase::Eval)
            .map_err(py_err)?;
        let t = tape.value(scores);
        let c = t.shape()[1];
        Ok(t.values().chunks(c).map(<[f64]>::to_vec).collect())
    }

    /// Whole-cloud prediction with tiling, coverage chunks, and overlap
    /// fusion. Returns one class index per point.
    #[pyo3(signature = (cloud, seed=7))]
    fn predict(&mut self, cloud: &PyPointCloud, seed: u64) -> PyResult<Vec<usize>> {
        let data = DataConfig::default();
        predict_cloud(&mut self.inner, &cloud.inner, &data, seed).map_err(py_err)
    }

    /// Short training run on a labeled cloud; returns per-epoch
    /// (train_loss, val_loss, val_oa) tuples.
    #[pyo3(signature = (cloud, epochs, seed=33, learning_rate=0.001))]
    fn fit(
        &mut self,
        cloud: &PyPointCloud,
        epochs: usize,
        seed: u64,
        learning_rate: f64,
    ) -> PyResult<Vec<(f64, f64, f64)>> {
        let data = DataConfig::default();
        let (_, blocks) =
            prepare_blocks(&cloud.inner, &self.inner.config, &data, seed).map_err(py_err)?;
        let cfg = TrainConfig {
            max_epochs: epochs,
            seed,
            learning_rate,
            ..TrainConfig::default()
        };
        let history = training::train(&mut self.inner, &blocks, &blocks, &cfg, None, |_| {})
            .map_err(py_err)?;
        Ok(history
            .epochs
            .iter()
            .map(|e| (e.train_loss, e.val_loss, e.val_oa))
            .collect())
    }
}

/// K nearest support points per query: (indices, distances) row pairs.
#[pyfunction]
fn knn(
    support: Vec<(f64, f64, f64)>,
    queries: Vec<(f64, f64, f64)>,
    k: usize,
) -> PyResult<(Vec<Vec<usize>>, Vec<Vec<f64>>)> {
    let support = to_xyz(support);
    let queries = to_xyz(queries);
    let ni = spatial::knn_search(&support, &queries, k).map_err(py_err)?;
    let mut idx = Vec::with_capacity(queries.len());
    let mut dist = Vec::with_capacity(queries.len());
    for i in 0..queries.len() {
        let (ri, rd) = ni.row(i);
        idx.push(ri.to_vec());
        dist.push(rd.to_vec());
    }
    Ok((idx, dist))
}

#[pyfunction]
fn farthest_point_sampling(points: Vec<(f64, f64, f64)>, m: usize) -> PyResult<Vec<usize>> {
    spatial::farthest_point_sampling(&to_xyz(points), m).map_err(py_err)
}

/// Tiles a cloud and returns the manifest text.
#[pyfunction]
#[pyo3(signature = (cloud, block=100.0, sub=25.0, stride=12.5))]
fn tile_manifest(cloud: &PyPointCloud, block: f64, sub: f64, stride: f64) -> PyResult<String> {
    let plan = spatial::tile_blocks(&cloud.inner, block, sub, stride).map_err(py_err)?;
    Ok(plan.to_manifest())
}

/// Confusion-matrix evaluation: returns (overall accuracy, average F1,
/// csv report).
#[pyfunction]
fn evaluate(
    truth: Vec<usize>,
    predicted: Vec<usize>,
    class_names: Vec<String>,
) -> PyResult<(f64, f64, String)> {
    let classes = ClassMap::new(class_names).map_err(py_err)?;
    let mut cm = ConfusionMatrix::new(classes.count());
    cm.accumulate(&truth, &predicted).map_err(py_err)?;
    let rep = report(&cm).map_err(py_err)?;
    Ok((rep.oa, rep.avg_f1, rep.to_csv(&classes)))
}

/// Finite-difference gradient checks; returns (name, max relative error).
#[pyfunction]
fn gradcheck_module(module: String) -> PyResult<Vec<(String, f64)>> {
    let m = CheckModule::parse(&module).map_err(py_err)?;
    gradcheck::run(m).map_err(py_err)
}

/// Parses a full CLI config and reports (network section, class count).
#[pyfunction]
fn parse_config(text: String) -> PyResult<(String, usize)> {
    let cfg = RunConfig::from_text(&text).map_err(py_err)?;
    Ok((cfg.network.to_section_text(), cfg.network.class_count))
}

#[pymodule]
fn granet_py(_py: Python<'_>, m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(knn, m)?)?;
    m.add_function(wrap_pyfunction!(farthest_point_sampling, m)?)?;
    m.add_function(wrap_pyfunction!(tile_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_module, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    Ok(())
}
