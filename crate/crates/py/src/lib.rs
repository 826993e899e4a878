use std::collections::BTreeMap;
use std::path::PathBuf;

use egodiff::body::{self, BodyModel};
use egodiff::checkpoint::Checkpoint;
use egodiff::config::ExperimentConfig;
use egodiff::diffusion;
use egodiff::metrics;
use egodiff::pipeline::{self, AblationAxis, ModelPaths};
use egodiff::synth::{self, Scenario};
use egodiff::vae::LatentCode;
use egodiff::Error;
use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingInput { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::Config(_) | Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for egodiff::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Experiment configuration; every key is readable and settable by name.
#[pyclass(name = "ExperimentConfig", module = "egodiff", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (overrides = None))]
    fn new(overrides: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let mut inner = ExperimentConfig::default();
        if let Some(o) = overrides {
            inner
                .apply_overrides(o.iter().map(|(k, v)| (k.as_str(), v.as_str())))
                .py()?;
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_file(&path).py()?,
        })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        ExperimentConfig::keys()
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown config key '{key}'")))
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(PyValueError::new_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    fn to_dict(&self) -> BTreeMap<&'static str, String> {
        self.inner.entries().into_iter().collect()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(seed={}, frames={}, latent_dim={})", self.inner.seed, self.inner.frames, self.inner.latent_dim)
    }
}

/// Motion window in the `[global_orient | body_pose | transl]` layout.
#[pyclass(name = "PoseSequence", module = "egodiff", from_py_object)]
#[derive(Clone)]
struct PyPoseSequence {
    inner: body::PoseSequence,
}

#[pymethods]
impl PyPoseSequence {
    #[new]
    #[pyo3(signature = (values, joints = body::SMPL_JOINTS, fps = 30.0))]
    fn new(values: Vec<f32>, joints: usize, fps: f32) -> PyResult<Self> {
        Ok(Self {
            inner: body::PoseSequence::new(values, joints, fps).py()?,
        })
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames()
    }

    #[getter]
    fn joints(&self) -> usize {
        self.inner.joints()
    }

    #[getter]
    fn fps(&self) -> f32 {
        self.inner.fps()
    }

    fn frame(&self, t: usize) -> PyResult<Vec<f32>> {
        if t >= self.inner.frames() {
            return Err(PyValueError::new_err(format!("frame {t} out of range")));
        }
        Ok(self.inner.frame(t).to_vec())
    }

    fn transl(&self, t: usize) -> PyResult<[f64; 3]> {
        if t >= self.inner.frames() {
            return Err(PyValueError::new_err(format!("frame {t} out of range")));
        }
        Ok(self.inner.transl(t))
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.as_slice().to_vec()
    }

    /// Joint positions per frame, in meters.
    fn joint_positions(&self) -> PyResult<Vec<Vec<[f64; 3]>>> {
        let joints = body::sequence_joints(&self.inner, &BodyModel::smpl_like()).py()?;
        Ok(joints.iter().map(|f| f.iter().map(|p| [p.x, p.y, p.z]).collect()).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.frames()
    }

    fn __repr__(&self) -> String {
        format!("PoseSequence(frames={}, joints={})", self.inner.frames(), self.inner.joints())
    }
}

#[pyclass(name = "Episode", module = "egodiff", skip_from_py_object)]
struct PyEpisode {
    inner: synth::InteractionEpisode,
}

#[pymethods]
impl PyEpisode {
    #[getter]
    fn wearer(&self) -> PyPoseSequence {
        PyPoseSequence { inner: self.inner.wearer.clone() }
    }

    /// The full recording, including the look-ahead frames.
    #[getter]
    fn interactee(&self) -> PyPoseSequence {
        PyPoseSequence { inner: self.inner.interactee.clone() }
    }

    #[getter]
    fn scene(&self) -> Vec<[f32; 3]> {
        self.inner.scene.points().to_vec()
    }

    #[getter]
    fn scenario(&self) -> &'static str {
        self.inner.meta.scenario.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.meta.seed
    }

    #[getter]
    fn kappa(&self) -> f32 {
        self.inner.meta.kappa
    }

    fn __repr__(&self) -> String {
        format!(
            "Episode(scenario={}, frames={}, seed={})",
            self.inner.meta.scenario.name(),
            self.inner.frames(),
            self.inner.meta.seed
        )
    }
}

fn scenario(name: &str) -> PyResult<Scenario> {
    name.parse().py()
}

#[pyfunction]
#[pyo3(signature = (scenario_name, frames, kappa, count, seed, scene_points = 1024, lag = 10))]
fn generate_episodes(
    py: Python<'_>,
    scenario_name: &str,
    frames: usize,
    kappa: f64,
    count: usize,
    seed: u64,
    scene_points: usize,
    lag: usize,
) -> PyResult<Vec<PyEpisode>> {
    let s = scenario(scenario_name)?;
    let cfg = synth::SynthConfig {
        scene_points,
        lag,
        ..synth::SynthConfig::new(frames, kappa)
    };
    let eps = py.detach(|| synth::generate_episodes(s, &cfg, count, seed)).py()?;
    Ok(eps.into_iter().map(|inner| PyEpisode { inner }).collect())
}

#[pyfunction]
fn axis_angle_to_matrix(aa: [f64; 3]) -> PyResult<[[f64; 3]; 3]> {
    Ok(body::axis_angle_to_matrix(aa).py()?.rows())
}

#[pyfunction]
fn matrix_to_axis_angle(rows: [[f64; 3]; 3]) -> PyResult<[f64; 3]> {
    body::matrix_to_axis_angle(&body::RotationMatrix::from_rows(rows).py()?).py()
}

/// Joint positions of one pose vector with the default skeleton.
#[pyfunction]
fn forward_kinematics(pose: Vec<f32>) -> PyResult<Vec<[f64; 3]>> {
    let joints = body::forward_kinematics(&pose, &BodyModel::smpl_like()).py()?;
    Ok(joints.iter().map(|p| [p.x, p.y, p.z]).collect())
}

fn array3(v: &[Vec<[f64; 3]>]) -> PyResult<Array3<f64>> {
    let t = v.len();
    let j = v.first().map_or(0, Vec::len);
    if v.iter().any(|f| f.len() != j) {
        return Err(PyValueError::new_err("ragged joint lists"));
    }
    Ok(Array3::from_shape_fn((t, j, 3), |(a, b, c)| v[a][b][c]))
}

fn array2(v: &[[f64; 3]]) -> Array2<f64> {
    Array2::from_shape_fn((v.len(), 3), |(a, c)| v[a][c])
}

/// Mean joint error in mm; inputs are frames × joints × xyz in meters.
#[pyfunction]
fn mpjpe(pred: Vec<Vec<[f64; 3]>>, gt: Vec<Vec<[f64; 3]>>) -> PyResult<f64> {
    metrics::mpjpe(array3(&pred)?.view(), array3(&gt)?.view()).py()
}

#[pyfunction]
fn translation_error(pred: Vec<[f64; 3]>, gt: Vec<[f64; 3]>) -> PyResult<f64> {
    metrics::translation_error(array2(&pred).view(), array2(&gt).view()).py()
}

#[pyfunction]
fn acceleration_error(pred: Vec<Vec<[f64; 3]>>, gt: Vec<Vec<[f64; 3]>>, fps: f64) -> PyResult<f64> {
    metrics::acceleration_error(array3(&pred)?.view(), array3(&gt)?.view(), fps).py()
}

#[pyfunction]
fn orientation_error(pred: Vec<[[f64; 3]; 3]>, gt: Vec<[[f64; 3]; 3]>) -> PyResult<f64> {
    let conv = |v: Vec<[[f64; 3]; 3]>| -> PyResult<Vec<body::RotationMatrix>> {
        v.into_iter().map(|r| body::RotationMatrix::from_rows(r).py()).collect()
    };
    metrics::orientation_error(&conv(pred)?, &conv(gt)?).py()
}

/// All four metrics of `pred` against `gt`, keyed by name.
#[pyfunction]
fn compare_sequences(pred: &PyPoseSequence, gt: &PyPoseSequence) -> PyResult<BTreeMap<&'static str, f64>> {
    let r = metrics::compare_sequences(&pred.inner, &gt.inner, &BodyModel::smpl_like()).py()?;
    Ok(BTreeMap::from([
        ("mpjpe", r.mpjpe),
        ("orientation_error", r.orientation_error),
        ("translation_error", r.translation_error),
        ("acceleration_error", r.acceleration_error),
    ]))
}

#[pyclass(name = "NoiseSchedule", module = "egodiff", skip_from_py_object)]
struct PyNoiseSchedule {
    inner: diffusion::NoiseSchedule,
}

#[pymethods]
impl PyNoiseSchedule {
    #[new]
    #[pyo3(signature = (steps = 1000, beta_start = 1e-4, beta_end = 0.02))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(Self {
            inner: diffusion::NoiseSchedule::linear(steps, beta_start, beta_end).py()?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    /// `z_t` from a clean latent and a noise draw.
    fn q_sample(&self, z0: Vec<f32>, t: usize, eps: Vec<f32>) -> PyResult<Vec<f32>> {
        Ok(diffusion::q_sample(&LatentCode(z0), t, &eps, &self.inner).py()?.0)
    }
}

/// Header fields of a checkpoint file.
#[pyfunction]
fn inspect_checkpoint(path: PathBuf) -> PyResult<BTreeMap<String, String>> {
    let ck = Checkpoint::load(&path).py()?;
    let mut out = BTreeMap::from([
        ("kind".to_string(), ck.kind.to_string()),
        ("seed".to_string(), ck.seed.to_string()),
        ("version".to_string(), ck.producer.clone()),
        ("content_hash".to_string(), ck.content_hash()),
        ("tensors".to_string(), ck.tensors.len().to_string()),
    ]);
    for (k, v) in ck.config.entries() {
        out.insert(format!("config.{k}"), v);
    }
    Ok(out)
}

#[pyfunction]
fn generate_data(py: Python<'_>, config: &PyConfig, out: PathBuf) -> PyResult<usize> {
    let cfg = config.inner.clone();
    py.detach(|| pipeline::cmd_generate_data(&cfg, &out)).py()
}

/// Trains the VAE; returns the per-step total loss.
#[pyfunction]
fn train_vae(py: Python<'_>, config: &PyConfig, data: PathBuf, out: PathBuf) -> PyResult<Vec<f64>> {
    let cfg = config.inner.clone();
    let log = py.detach(|| pipeline::cmd_train_vae(&cfg, &data, &out)).py()?;
    Ok(log.iter().map(|l| l.total).collect())
}

/// Trains the denoiser; returns the per-step loss and whether the frozen
/// modules kept their parameter hashes.
#[pyfunction]
#[pyo3(signature = (config, data, vae, out, scene_encoder_out = None))]
fn train_denoiser(
    py: Python<'_>,
    config: &PyConfig,
    data: PathBuf,
    vae: PathBuf,
    out: PathBuf,
    scene_encoder_out: Option<PathBuf>,
) -> PyResult<(Vec<f64>, bool)> {
    let cfg = config.inner.clone();
    let run = py
        .detach(|| pipeline::cmd_train_denoiser(&cfg, &data, &vae, &out, scene_encoder_out.as_deref()))
        .py()?;
    Ok((run.log.iter().map(|l| l.loss).collect(), run.freeze.holds()))
}

fn report_dict(r: &metrics::MetricsReport, prefix: &str, out: &mut BTreeMap<String, f64>) {
    out.insert(format!("{prefix}mpjpe"), r.mpjpe);
    out.insert(format!("{prefix}orientation_error"), r.orientation_error);
    out.insert(format!("{prefix}translation_error"), r.translation_error);
    out.insert(format!("{prefix}acceleration_error"), r.acceleration_error);
}

/// Evaluates on the test split and writes the reports into `out_dir`.
#[pyfunction]
#[pyo3(signature = (config, data, vae, denoiser, out_dir, scene_encoder = None))]
fn evaluate(
    py: Python<'_>,
    config: &PyConfig,
    data: PathBuf,
    vae: PathBuf,
    denoiser: PathBuf,
    out_dir: PathBuf,
    scene_encoder: Option<PathBuf>,
) -> PyResult<BTreeMap<String, f64>> {
    let cfg = config.inner.clone();
    let paths = ModelPaths {
        vae: &vae,
        denoiser: &denoiser,
        scene_encoder: scene_encoder.as_deref(),
    };
    let eval = py.detach(|| pipeline::cmd_evaluate(&cfg, paths, &data, &out_dir)).py()?;
    let mut out = BTreeMap::new();
    report_dict(&eval.mean_of_k, "mean_", &mut out);
    report_dict(&eval.best_of_k, "best_", &mut out);
    Ok(out)
}

/// Writes one ablation table; returns `(stratum, count, mean MPJPE)` rows.
#[pyfunction]
#[pyo3(signature = (config, axis, data, vae, out, denoiser = None, scene_encoder = None))]
#[allow(clippy::too_many_arguments)]
fn ablate(
    py: Python<'_>,
    config: &PyConfig,
    axis: &str,
    data: PathBuf,
    vae: PathBuf,
    out: PathBuf,
    denoiser: Option<PathBuf>,
    scene_encoder: Option<PathBuf>,
) -> PyResult<Vec<(String, usize, Option<f64>)>> {
    let cfg = config.inner.clone();
    let axis: AblationAxis = axis.parse().py()?;
    let paths = denoiser.as_ref().map(|d| ModelPaths {
        vae: &vae,
        denoiser: d,
        scene_encoder: scene_encoder.as_deref(),
    });
    let rows = py
        .detach(|| pipeline::cmd_ablate(&cfg, &vae, paths, &data, axis, &out))
        .py()?;
    Ok(rows
        .into_iter()
        .map(|r| (r.label, r.count, r.mean_of_k.map(|m| m.mpjpe)))
        .collect())
}

#[pymodule(name = "egodiff")]
fn egodiff_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPoseSequence>()?;
    m.add_class::<PyEpisode>()?;
    m.add_class::<PyNoiseSchedule>()?;
    m.add_function(wrap_pyfunction!(generate_episodes, m)?)?;
    m.add_function(wrap_pyfunction!(axis_angle_to_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_to_axis_angle, m)?)?;
    m.add_function(wrap_pyfunction!(forward_kinematics, m)?)?;
    m.add_function(wrap_pyfunction!(mpjpe, m)?)?;
    m.add_function(wrap_pyfunction!(translation_error, m)?)?;
    m.add_function(wrap_pyfunction!(acceleration_error, m)?)?;
    m.add_function(wrap_pyfunction!(orientation_error, m)?)?;
    m.add_function(wrap_pyfunction!(compare_sequences, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(train_vae, m)?)?;
    m.add_function(wrap_pyfunction!(train_denoiser, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    Ok(())
}
