//! Python bindings: clouds, the camera rig, corpus generation, training,
//! inference, evaluation metrics and gradient checks.
//!
//! Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::{json, Value};

use pointcot_core as core;
use core::datagen::{generate_corpus, read_corpus, write_corpus, CorpusConfig, Split};
use core::encoders::render_splat_views;
use core::evalverify::{bleu4, exact_match, parse_assertions, verify_assertion, words};
use core::geometry::{build_spherical_rig, farthest_point_sample, normalize_to_unit_sphere, read_cloud, write_cloud, CameraRig, Point3};
use core::model::ReasoningMode;
use core::numerics::{GradCheckOptions, Rng};
use core::reasoner::Vocab;
use core::train::{committed_assertions, evaluate, prepare_split, train_stage, RunConfig};

fn py_err(e: core::Error) -> PyErr {
    match e {
        core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any().unbind(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for x in items {
                list.append(to_py(py, x)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, x) in map {
                dict.set_item(k, to_py(py, x)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn serialize<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &value)
}

fn parse_mode(mode: &str) -> PyResult<ReasoningMode> {
    ReasoningMode::parse(mode).ok_or_else(|| PyValueError::new_err(format!("mode must be direct, implicit or explicit, got {mode:?}")))
}

fn parse_split(split: &str) -> PyResult<Split> {
    Split::parse(split).ok_or_else(|| PyValueError::new_err(format!("split must be train, val or test, got {split:?}")))
}

#[pyclass(name = "PointCloud", module = "pointcot", skip_from_py_object)]
#[derive(Clone)]
struct PyPointCloud {
    inner: core::geometry::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (points, object_id = "cloud".to_string()))]
    fn new(points: Vec<Point3>, object_id: String) -> Self {
        Self {
            inner: core::geometry::PointCloud::new(object_id, points),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: read_cloud(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_cloud(&path, &self.inner).map_err(py_err)
    }

    /// Centered at the origin and scaled into the unit sphere.
    fn normalized(&self) -> PyResult<Self> {
        Ok(Self {
            inner: normalize_to_unit_sphere(&self.inner.object_id, &self.inner.points).map_err(py_err)?,
        })
    }

    #[pyo3(signature = (k, start = 0))]
    fn farthest_point_sample(&self, k: usize, start: usize) -> PyResult<Vec<usize>> {
        farthest_point_sample(&self.inner.points, k, start).map_err(py_err)
    }

    #[getter]
    fn points(&self) -> Vec<Point3> {
        self.inner.points.clone()
    }

    #[getter]
    fn object_id(&self) -> String {
        self.inner.object_id.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud({:?}, {} points)", self.inner.object_id, self.inner.len())
    }
}

#[pyclass(name = "CameraRig", module = "pointcot")]
struct PyCameraRig {
    inner: CameraRig,
}

#[pymethods]
impl PyCameraRig {
    #[new]
    #[pyo3(signature = (radius = core::geometry::DEFAULT_RADIUS, fov_deg = core::geometry::DEFAULT_FOV_DEG, image_size = core::geometry::DEFAULT_IMAGE_SIZE))]
    fn new(radius: f64, fov_deg: f64, image_size: usize) -> PyResult<Self> {
        Ok(Self {
            inner: build_spherical_rig(radius, fov_deg, image_size).map_err(py_err)?,
        })
    }

    #[getter]
    fn view_names(&self) -> Vec<String> {
        (0..self.inner.len()).map(|i| self.inner.view(i).name.clone()).collect()
    }

    /// `(u, v, depth)` of `point` in every view, `u, v` in [0, 1].
    fn project(&self, point: Point3) -> Vec<(f64, f64, f64)> {
        (0..self.inner.len())
            .map(|i| {
                let p = self.inner.view(i).project(point);
                (p.uv[0], p.uv[1], p.depth)
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model", module = "pointcot")]
struct PyModel {
    inner: core::model::Model,
}

#[pymethods]
impl PyModel {
    /// Fresh model at the default toy sizes.
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Self> {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        Ok(Self {
            inner: core::model::Model::new(cfg.model(), Vocab::standard()).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::model::Model::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.store.num_scalars()
    }

    /// Train one stage on the train split of a corpus directory; returns the
    /// per-step metrics.
    #[pyo3(signature = (corpus_dir, mode = "explicit", stage = 1, steps = 100, batch_size = 4, lr = 0.05, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train(&mut self, py: Python<'_>, corpus_dir: PathBuf, mode: &str, stage: u8, steps: usize, batch_size: usize, lr: f64, seed: u64) -> PyResult<Py<PyAny>> {
        let mode = parse_mode(mode)?;
        let cfg = RunConfig {
            stage,
            lr,
            batch_size,
            seed,
            ..RunConfig::default()
        };
        cfg.validate().map_err(py_err)?;
        let corpus = read_corpus(&corpus_dir).map_err(py_err)?;
        let data = prepare_split(&self.inner, &corpus, Split::Train, Some(&corpus_dir)).map_err(py_err)?;
        let mut opt = cfg.optimizer();
        let mut rng = Rng::new(seed).fork(u64::from(stage));
        let mut log = Vec::with_capacity(steps);
        train_stage(&mut self.inner, &data, mode, &cfg.loss(), &mut opt, steps, batch_size, &mut rng, &mut |m| log.push(m.clone())).map_err(py_err)?;
        serialize(py, &log)
    }

    /// Decode one split and return the EvalReport as a dict.
    #[pyo3(signature = (corpus_dir, split = "test", mode = "explicit", max_len = 48))]
    fn evaluate(&self, py: Python<'_>, corpus_dir: PathBuf, split: &str, mode: &str, max_len: usize) -> PyResult<Py<PyAny>> {
        let split = parse_split(split)?;
        let corpus = read_corpus(&corpus_dir).map_err(py_err)?;
        let data = prepare_split(&self.inner, &corpus, split, Some(&corpus_dir)).map_err(py_err)?;
        let (report, _) = evaluate(&self.inner, &data, parse_mode(mode)?, split, max_len).map_err(py_err)?;
        serialize(py, &report)
    }

    /// Look, think, answer for one cloud.
    #[pyo3(signature = (cloud, question, mode = "explicit", max_len = 48))]
    fn infer(&self, py: Python<'_>, cloud: &PyPointCloud, question: &str, mode: &str, max_len: usize) -> PyResult<Py<PyAny>> {
        let m = &self.inner;
        let cloud = normalize_to_unit_sphere(&cloud.inner.object_id, &cloud.inner.points).map_err(py_err)?;
        let views = render_splat_views(&cloud, &m.rig);
        let obj = m.prepare(&cloud, &views).map_err(py_err)?;
        let trace = m.decode(&obj, &m.vocab.tokenize(question), parse_mode(mode)?, max_len).map_err(py_err)?;
        let rationale = m.vocab.detokenize(&trace.rationale_ids);
        let answer = m.vocab.detokenize(&trace.answer_ids);
        let assertions: Vec<String> = committed_assertions(question, &rationale, &answer, trace.complete).iter().map(|a| a.to_string()).collect();
        to_py(
            py,
            &json!({"rationale": rationale, "answer": answer, "complete": trace.complete, "logprob": trace.logprob, "assertions": assertions}),
        )
    }
}

/// Write a synthetic corpus to `out_dir`; returns split sizes.
#[pyfunction]
#[pyo3(signature = (out_dir, objects = 512, seed = 0, n_points = core::datagen::DEFAULT_POINTS))]
fn generate(py: Python<'_>, out_dir: PathBuf, objects: usize, seed: u64, n_points: usize) -> PyResult<Py<PyAny>> {
    let corpus = generate_corpus(&CorpusConfig {
        objects,
        seed,
        n_points,
        ..CorpusConfig::default()
    })
    .map_err(py_err)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    write_corpus(&out_dir, &corpus, &core::datagen::default_rig()).map_err(py_err)?;
    let m = &corpus.manifest;
    to_py(py, &json!({"records": corpus.records.len(), "train": m.train.len(), "val": m.val.len(), "test": m.test.len()}))
}

/// Canonical assertions found in a rationale.
#[pyfunction]
fn assertions(text: &str) -> Vec<String> {
    parse_assertions(text).assertions.iter().map(|a| a.to_string()).collect()
}

/// Verdict of each assertion in `text` against one object of a corpus.
#[pyfunction]
fn verify(corpus_dir: PathBuf, object_id: &str, text: &str) -> PyResult<Vec<(String, String)>> {
    let corpus = read_corpus(&corpus_dir).map_err(py_err)?;
    let meta = corpus.meta(object_id).ok_or_else(|| PyValueError::new_err(format!("unknown object {object_id:?}")))?;
    Ok(parse_assertions(text).assertions.iter().map(|a| (a.to_string(), format!("{:?}", verify_assertion(a, meta)).to_lowercase())).collect())
}

#[pyfunction]
#[pyo3(name = "bleu4")]
fn py_bleu4(candidate: &str, reference: &str) -> f64 {
    bleu4(&words(candidate), &words(reference))
}

#[pyfunction]
#[pyo3(name = "exact_match")]
fn py_exact_match(predicted: &str, gold: &str) -> bool {
    exact_match(predicted, gold)
}

/// Per-group finite-difference report over `instances` seeds.
#[pyfunction]
#[pyo3(signature = (instances = 2))]
fn gradcheck(py: Python<'_>, instances: u64) -> PyResult<Py<PyAny>> {
    let reports = core::gradsuite::run_suite(instances, GradCheckOptions::default()).map_err(py_err)?;
    serialize(py, &reports)
}

#[pymodule]
#[pyo3(name = "pointcot")]
fn pointcot_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyCameraRig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(assertions, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(py_bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(py_exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
