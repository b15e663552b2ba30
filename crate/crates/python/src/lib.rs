//! Python bindings: poses, cameras, meshes, rendering, refinement, metrics
//! and the benchmark runner.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use repose::geometry::{project, rotvec_to_matrix, transform_point, CameraIntrinsics, Pose6, Vec3};
use repose::harness::benchmark::{run_benchmark as run_core_benchmark, BenchmarkOptions};
use repose::harness::scenario::ScenarioConfig;
use repose::mesh::{init_textures, load_mesh, mesh_stats, shapes, TextureInit, TexturedMesh};
use repose::metrics;
use repose::optimizer::{refine as refine_core, LMParams};
use repose::renderer::{rasterize, FeatureImage};

fn to_py(e: repose::Error) -> PyErr {
    match e {
        repose::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn vec3(v: [f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

#[pyclass(name = "Pose", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPose(Pose6);

#[pymethods]
impl PyPose {
    #[new]
    #[pyo3(signature = (w = [0.0; 3], t = [0.0; 3]))]
    fn new(w: [f64; 3], t: [f64; 3]) -> Self {
        PyPose(Pose6::new(vec3(w), vec3(t)))
    }

    #[getter]
    fn w(&self) -> [f64; 3] {
        self.0.w.into()
    }

    #[getter]
    fn t(&self) -> [f64; 3] {
        self.0.t.into()
    }

    /// Row-major 3×3 rotation matrix.
    fn rotation_matrix(&self) -> PyResult<[[f64; 3]; 3]> {
        let r = rotvec_to_matrix(&self.0.w).map_err(to_py)?;
        let m = r.matrix();
        Ok([0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]]))
    }

    fn __repr__(&self) -> String {
        format!("Pose(w={:?}, t={:?})", self.w(), self.t())
    }
}

#[pyclass(name = "Intrinsics", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyIntrinsics(CameraIntrinsics);

#[pymethods]
impl PyIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, px: f64, py: f64, width: usize, height: usize) -> PyResult<Self> {
        CameraIntrinsics::new(fx, fy, px, py, width, height).map(PyIntrinsics).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    /// Projects a world point under `pose` to pixel coordinates.
    fn project(&self, pose: PyRef<'_, PyPose>, point: [f64; 3]) -> PyResult<[f64; 2]> {
        let c = transform_point(&pose.0, &vec3(point)).map_err(to_py)?;
        project(&self.0, &c).map(Into::into).map_err(to_py)
    }
}

#[pyclass(name = "Mesh", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMesh(TexturedMesh);

#[pymethods]
impl PyMesh {
    /// Loads an OBJ file with zero-initialized textures.
    #[staticmethod]
    #[pyo3(signature = (path, channels = 3))]
    fn load(path: PathBuf, channels: usize) -> PyResult<Self> {
        load_mesh(path, channels).map(PyMesh).map_err(to_py)
    }

    /// One of `blob`, `cube` or `plate`.
    #[staticmethod]
    #[pyo3(signature = (name, channels = 3))]
    fn builtin(name: &str, channels: usize) -> PyResult<Self> {
        let base = match name {
            "blob" => shapes::benchmark_object(),
            "cube" => shapes::cuboid(0.1, 0.1, 0.1),
            "plate" => shapes::square_plate(0.12, 0.03),
            other => return Err(PyValueError::new_err(format!("unknown builtin mesh '{other}'"))),
        };
        init_textures(&base, TextureInit::Zeros, channels).map(PyMesh).map_err(to_py)
    }

    /// Copy with uniformly random textures in `[lo, hi)`.
    #[pyo3(signature = (seed, lo = -1.0, hi = 1.0, channels = None))]
    fn randomized(&self, seed: u64, lo: f64, hi: f64, channels: Option<usize>) -> PyResult<Self> {
        let d = channels.unwrap_or(self.0.channels());
        init_textures(&self.0, TextureInit::UniformRandom { lo, hi, seed }, d).map(PyMesh).map_err(to_py)
    }

    /// Copy with the given per-vertex textures, vertex-major.
    fn with_textures(&self, textures: Vec<f64>, channels: usize) -> PyResult<Self> {
        self.0.with_textures(textures, channels).map(PyMesh).map_err(to_py)
    }

    #[getter]
    fn vertex_count(&self) -> usize {
        self.0.vertex_count()
    }

    #[getter]
    fn face_count(&self) -> usize {
        self.0.face_count()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels()
    }

    #[getter]
    fn textures(&self) -> Vec<f64> {
        self.0.textures().to_vec()
    }

    #[getter]
    fn symmetric(&self) -> bool {
        self.0.is_symmetric()
    }

    fn diameter(&self) -> PyResult<f64> {
        mesh_stats(&self.0).map(|s| s.diameter).map_err(to_py)
    }
}

#[pyclass(name = "FeatureImage", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFeatureImage(FeatureImage);

#[pymethods]
impl PyFeatureImage {
    /// Row-major `height × width × channels` data and a per-pixel mask.
    #[new]
    fn new(width: usize, height: usize, channels: usize, data: Vec<f64>, mask: Vec<bool>) -> PyResult<Self> {
        FeatureImage::from_parts(width, height, channels, data, mask).map(PyFeatureImage).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    #[getter]
    fn mask(&self) -> Vec<bool> {
        self.0.mask().to_vec()
    }

    fn masked_count(&self) -> usize {
        self.0.masked_count()
    }
}

#[pyclass(name = "RenderResult", frozen, skip_from_py_object)]
struct PyRenderResult {
    #[pyo3(get)]
    feature: Py<PyFeatureImage>,
    #[pyo3(get)]
    depth: Vec<f64>,
    #[pyo3(get)]
    face_index: Vec<i64>,
}

/// Rasterizes the mesh textures under `pose`.
#[pyfunction]
fn render(
    py: Python<'_>,
    mesh: PyRef<'_, PyMesh>,
    pose: PyRef<'_, PyPose>,
    intrinsics: PyRef<'_, PyIntrinsics>,
) -> PyResult<PyRenderResult> {
    let out = rasterize(&mesh.0, &pose.0, &intrinsics.0).map_err(to_py)?;
    Ok(PyRenderResult {
        feature: Py::new(py, PyFeatureImage(out.feature))?,
        depth: out.depth,
        face_index: out.face_index,
    })
}

#[pyclass(name = "RefineResult", frozen, skip_from_py_object)]
struct PyRefineResult {
    #[pyo3(get)]
    pose: Py<PyPose>,
    #[pyo3(get)]
    residual_norms: Vec<f64>,
    #[pyo3(get)]
    empty_overlap: bool,
    #[pyo3(get)]
    heavy_occlusion: bool,
}

/// Refines `initial` so the render of `mesh` matches `input`.
#[pyfunction]
#[pyo3(signature = (input, mesh, initial, intrinsics, lambdas = vec![3e5, 3e4, 3e3, 300.0, 30.0], gamma = 1.0, iterations = 5))]
#[allow(clippy::too_many_arguments)]
fn refine(
    py: Python<'_>,
    input: PyRef<'_, PyFeatureImage>,
    mesh: PyRef<'_, PyMesh>,
    initial: PyRef<'_, PyPose>,
    intrinsics: PyRef<'_, PyIntrinsics>,
    lambdas: Vec<f64>,
    gamma: f64,
    iterations: usize,
) -> PyResult<PyRefineResult> {
    let params = LMParams::new(lambdas, gamma, iterations).map_err(to_py)?;
    let trace = refine_core(&input.0, &mesh.0, &initial.0, &intrinsics.0, &params).map_err(to_py)?;
    Ok(PyRefineResult {
        pose: Py::new(py, PyPose(trace.final_pose))?,
        residual_norms: trace.records.iter().map(|r| r.residual_norm).collect(),
        empty_overlap: trace.empty_overlap,
        heavy_occlusion: trace.heavy_occlusion,
    })
}

#[pyfunction]
fn add(estimate: PyRef<'_, PyPose>, truth: PyRef<'_, PyPose>, mesh: PyRef<'_, PyMesh>) -> PyResult<f64> {
    metrics::add_score(&estimate.0, &truth.0, &mesh.0).map_err(to_py)
}

#[pyfunction]
fn add_s(estimate: PyRef<'_, PyPose>, truth: PyRef<'_, PyPose>, mesh: PyRef<'_, PyMesh>) -> PyResult<f64> {
    metrics::add_s_score(&estimate.0, &truth.0, &mesh.0).map_err(to_py)
}

#[pyfunction]
fn auc(distances: Vec<f64>, max_dist: f64) -> PyResult<f64> {
    metrics::auc_add(&distances, max_dist).map_err(to_py)
}

/// Runs the benchmark described by a scenario config; returns the report
/// as a JSON string.
#[pyfunction]
#[pyo3(signature = (config, checkpoint = None, jobs = None, trials = None))]
fn run_benchmark(
    py: Python<'_>,
    config: PathBuf,
    checkpoint: Option<PathBuf>,
    jobs: Option<usize>,
    trials: Option<usize>,
) -> PyResult<String> {
    let mut cfg = ScenarioConfig::load(&config).map_err(to_py)?;
    if let Some(n) = trials {
        cfg.n_trials = n;
    }
    let opts = BenchmarkOptions { jobs, ..Default::default() };
    py.detach(|| run_core_benchmark(&cfg, checkpoint.as_deref(), &opts).and_then(|r| r.to_json()))
        .map_err(to_py)
}

#[pymodule]
fn repose_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyMesh>()?;
    m.add_class::<PyFeatureImage>()?;
    m.add_class::<PyRenderResult>()?;
    m.add_class::<PyRefineResult>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(refine, m)?)?;
    m.add_function(wrap_pyfunction!(add, m)?)?;
    m.add_function(wrap_pyfunction!(add_s, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    Ok(())
}
