//! Python bindings: synthetic datasets, the adaptive clip sampler, the
//! tracking environment, policy checkpoints and the training entry points.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mimic_core::config::KeyValues;
use mimic_core::curation::{rule_filter, RuleLimits};
use mimic_core::eval::{evaluate_dataset, evaluate_policy, summarize, PlaybackController, METRIC_NAMES};
use mimic_core::motion::{generate_synthetic_dataset, load_dataset, save_dataset, DatasetSpec, MotionClip};
use mimic_core::nn::{AnyPolicy, TeacherInputs};
use mimic_core::sampler::{self, SamplerConfig, SamplerEntry, SamplerState, SamplingMode};
use mimic_core::sim::{CharacterModel, EpisodeStatus, TrackingEnv};
use mimic_core::skeleton::Skeleton;
use mimic_core::train::{stream_rng, train_student, train_teacher, TrainConfig};
use mimic_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn config_from(text: Option<&str>) -> PyResult<TrainConfig> {
    TrainConfig::parse(text.unwrap_or("")).map_err(to_py)
}

/// One motion clip.
#[pyclass(name = "Clip", module = "mimic_lab", skip_from_py_object)]
#[derive(Clone)]
struct PyClip {
    inner: Arc<MotionClip>,
}

#[pymethods]
impl PyClip {
    #[getter]
    fn id(&self) -> &str {
        self.inner.id()
    }

    #[getter]
    fn category(&self) -> &str {
        self.inner.category()
    }

    #[getter]
    fn fps(&self) -> f64 {
        self.inner.fps()
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.inner.duration()
    }

    fn __len__(&self) -> usize {
        self.inner.frames().len()
    }

    /// Joint angles per frame.
    fn joint_positions(&self) -> Vec<Vec<f64>> {
        self.inner.frames().iter().map(|f| f.joint_positions.clone()).collect()
    }

    fn root_heights(&self) -> Vec<f64> {
        self.inner.frames().iter().map(|f| f.root_height).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Clip(id={:?}, category={:?}, frames={}, duration={:.2})",
            self.inner.id(),
            self.inner.category(),
            self.inner.frames().len(),
            self.inner.duration()
        )
    }
}

fn wrap(clips: Vec<MotionClip>) -> Vec<PyClip> {
    clips.into_iter().map(|c| PyClip { inner: Arc::new(c) }).collect()
}

fn unwrap(clips: &[PyRef<'_, PyClip>]) -> Vec<MotionClip> {
    clips.iter().map(|c| (*c.inner).clone()).collect()
}

/// Generate clips from a `key=value` dataset spec, e.g. `"n_clips=4\nwalk=1"`.
#[pyfunction]
#[pyo3(signature = (spec, seed=0))]
fn generate_dataset(spec: &str, seed: u64) -> PyResult<Vec<PyClip>> {
    let kv = KeyValues::parse(spec).map_err(to_py)?;
    let spec = DatasetSpec::from_kv(&kv).map_err(to_py)?;
    let clips = generate_synthetic_dataset(&spec, &Skeleton::biped(), &mut stream_rng(seed, 0)).map_err(to_py)?;
    Ok(wrap(clips))
}

#[pyfunction(name = "load_dataset")]
fn py_load_dataset(dir: PathBuf) -> PyResult<Vec<PyClip>> {
    Ok(wrap(load_dataset(dir, None).map_err(to_py)?))
}

#[pyfunction(name = "save_dataset")]
fn py_save_dataset(dir: PathBuf, clips: Vec<PyRef<'_, PyClip>>) -> PyResult<()> {
    save_dataset(dir, &unwrap(&clips)).map_err(to_py)
}

/// Termination tolerance (m) at completion level `c`.
#[pyfunction]
fn termination_threshold(c: f64) -> f64 {
    sampler::termination_threshold(c)
}

/// Unnormalized sampling weight for completion level `c` and error EMA `error`.
#[pyfunction]
fn sampling_level(c: f64, error: f64) -> f64 {
    let mut entry = SamplerEntry::new("clip");
    entry.completion_level = c;
    entry.error_ema = error;
    sampler::sampling_level(&entry)
}

/// Rule-based curation: returns (kept ids, [(id, reason)]).
#[pyfunction]
#[pyo3(signature = (clips, pitch_max=1.2, height_min=0.3, height_max=1.5, joint_vel_max=25.0))]
fn curate_rules(
    clips: Vec<PyRef<'_, PyClip>>,
    pitch_max: f64,
    height_min: f64,
    height_max: f64,
    joint_vel_max: f64,
) -> PyResult<(Vec<String>, Vec<(String, String)>)> {
    let limits = RuleLimits {
        pitch_max,
        height_min,
        height_max,
        joint_vel_max,
        ..RuleLimits::default()
    };
    limits.validate().map_err(to_py)?;
    let (kept, rejected) = rule_filter(&unwrap(&clips), &limits).map_err(to_py)?;
    Ok((
        kept.iter().map(|c| c.id().to_string()).collect(),
        rejected.iter().map(|r| (r.clip_id.clone(), r.reason())).collect(),
    ))
}

/// Per-clip completion level, error EMA and sampling probability.
#[pyclass(name = "Sampler", module = "mimic_lab")]
struct PySampler {
    inner: SamplerState,
    rng: ChaCha8Rng,
}

#[pymethods]
impl PySampler {
    #[new]
    #[pyo3(signature = (clip_ids, mode="adaptive", ema_alpha=None, seed=0))]
    fn new(clip_ids: Vec<String>, mode: &str, ema_alpha: Option<f64>, seed: u64) -> PyResult<Self> {
        let mut config = SamplerConfig {
            mode: mode.parse::<SamplingMode>().map_err(to_py)?,
            ..SamplerConfig::default()
        };
        if let Some(a) = ema_alpha {
            config.ema_alpha = a;
        }
        Ok(Self {
            inner: SamplerState::new(config, clip_ids.iter().map(String::as_str)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn probabilities(&self) -> BTreeMap<String, f64> {
        self.inner
            .probabilities()
            .into_iter()
            .map(|(id, p)| (id.to_string(), p))
            .collect()
    }

    fn threshold(&self, clip_id: &str) -> f64 {
        self.inner.threshold(clip_id)
    }

    fn completion_level(&self, clip_id: &str) -> PyResult<f64> {
        self.inner
            .entry(clip_id)
            .map(|e| e.completion_level)
            .ok_or_else(|| PyKeyError::new_err(clip_id.to_string()))
    }

    fn sample(&mut self) -> PyResult<String> {
        self.inner.sample_clip(&mut self.rng).map(str::to_string).map_err(to_py)
    }

    fn on_episode_end(&mut self, clip_id: &str, completed: bool, max_keybody_error: f64) {
        self.inner.on_episode_end(clip_id, completed, max_keybody_error);
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

/// One tracking episode on one clip.
#[pyclass(name = "Env", module = "mimic_lab")]
struct PyEnv {
    inner: TrackingEnv,
}

fn status_name(s: EpisodeStatus) -> &'static str {
    match s {
        EpisodeStatus::Running => "running",
        EpisodeStatus::Terminated => "terminated",
        EpisodeStatus::Completed => "completed",
    }
}

#[pymethods]
impl PyEnv {
    /// `evaluation=True` disables randomization and pushes.
    #[new]
    #[pyo3(signature = (clip, seed=0, threshold=0.6, evaluation=false, config=None))]
    fn new(clip: PyRef<'_, PyClip>, seed: u64, threshold: f64, evaluation: bool, config: Option<&str>) -> PyResult<Self> {
        let cfg = config_from(config)?;
        let env_cfg = if evaluation { cfg.env.evaluation() } else { cfg.env };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = TrackingEnv::new(env_cfg, CharacterModel::biped(), clip.inner.clone(), threshold, &mut rng)
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.time()
    }

    #[getter]
    fn status(&self) -> &'static str {
        status_name(self.inner.status())
    }

    /// Reference joint angles at the current time.
    fn reference_joints(&self) -> PyResult<Vec<f64>> {
        Ok(self.inner.reference_frame().map_err(to_py)?.joint_positions)
    }

    /// `{"proprio": [...], "privileged": [...]}`.
    fn observe(&self) -> PyResult<BTreeMap<String, Vec<f64>>> {
        let o = self.inner.observe().map_err(to_py)?;
        Ok(BTreeMap::from([
            ("proprio".to_string(), o.proprio),
            ("privileged".to_string(), o.privileged),
        ]))
    }

    /// Apply joint targets; returns (reward, status, max keybody error).
    fn step(&mut self, action: Vec<f64>) -> PyResult<(f64, &'static str, f64)> {
        let r = self.inner.step(&action).map_err(to_py)?;
        Ok((r.reward, status_name(r.status), r.keybody_error))
    }
}

/// A teacher or student checkpoint.
#[pyclass(name = "Policy", module = "mimic_lab")]
struct PyPolicy {
    inner: AnyPolicy,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: AnyPolicy::load(path).map_err(to_py)?,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner {
            AnyPolicy::Teacher(_) => "teacher",
            AnyPolicy::Student(_) => "student",
        }
    }

    #[getter]
    fn n_experts(&self) -> usize {
        match &self.inner {
            AnyPolicy::Teacher(p) => p.n_experts(),
            AnyPolicy::Student(_) => 0,
        }
    }

    /// Mean action and gating probabilities for the environment's current
    /// observation (teacher checkpoints only).
    fn act(&self, env: PyRef<'_, PyEnv>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let AnyPolicy::Teacher(p) = &self.inner else {
            return Err(PyValueError::new_err("act() needs a teacher checkpoint"));
        };
        let obs = env.inner.observe().map_err(to_py)?;
        let out = p.evaluate(&TeacherInputs::from_observations([&obs])).map_err(to_py)?;
        Ok((out.mean.data, out.gate.data))
    }
}

/// Evaluate a checkpoint path (or `"playback"`) on clips; returns the
/// dataset-mean metrics and completion rate.
#[pyfunction]
#[pyo3(signature = (policy, clips, seed=0, config=None))]
fn evaluate(
    policy: &str,
    clips: Vec<PyRef<'_, PyClip>>,
    seed: u64,
    config: Option<&str>,
) -> PyResult<BTreeMap<String, f64>> {
    let cfg = config_from(config)?;
    let shared: Vec<Arc<MotionClip>> = clips.iter().map(|c| c.inner.clone()).collect();
    let model = CharacterModel::biped();
    let evals = if policy == "playback" {
        evaluate_dataset(|| PlaybackController, &shared, &cfg.env, &model, seed)
    } else {
        evaluate_policy(&AnyPolicy::load(policy).map_err(to_py)?, &shared, &cfg.env, &model, seed)
    }
    .map_err(to_py)?;
    let (m, completion) = summarize(&evals);
    let mut out: BTreeMap<String, f64> = METRIC_NAMES.iter().map(|n| n.to_string()).zip(m.values()).collect();
    out.insert("completion_rate".into(), completion);
    Ok(out)
}

/// Train a teacher; writes checkpoints and logs to `out` and returns the
/// per-iteration log as dicts.
#[pyfunction(name = "train_teacher")]
#[pyo3(signature = (clips, out, config=None, seed=0, workers=0))]
fn py_train_teacher(
    py: Python<'_>,
    clips: Vec<PyRef<'_, PyClip>>,
    out: PathBuf,
    config: Option<&str>,
    seed: u64,
    workers: usize,
) -> PyResult<Vec<BTreeMap<String, f64>>> {
    let cfg = config_from(config)?;
    let data = unwrap(&clips);
    let run = py
        .detach(|| train_teacher(data, cfg, seed, workers, Some(&out), |_| {}))
        .map_err(to_py)?;
    Ok(run
        .log
        .iter()
        .map(|r| {
            BTreeMap::from([
                ("iteration".to_string(), r.iteration as f64),
                ("mean_reward".to_string(), r.mean_reward),
                ("completion_rate".to_string(), r.completion_rate),
                ("mean_mpkpe".to_string(), r.mean_mpkpe),
                ("p99_mpkpe".to_string(), r.p99_mpkpe),
            ])
        })
        .collect())
}

/// Distil a teacher checkpoint; returns the per-round action gap.
#[pyfunction(name = "distill")]
#[pyo3(signature = (teacher, clips, out, config=None, seed=0, workers=0))]
fn py_distill(
    py: Python<'_>,
    teacher: PathBuf,
    clips: Vec<PyRef<'_, PyClip>>,
    out: PathBuf,
    config: Option<&str>,
    seed: u64,
    workers: usize,
) -> PyResult<Vec<f64>> {
    let cfg = config_from(config)?;
    let AnyPolicy::Teacher(t) = AnyPolicy::load(&teacher).map_err(to_py)? else {
        return Err(PyValueError::new_err("distill() needs a teacher checkpoint"));
    };
    let data = unwrap(&clips);
    let run = py
        .detach(|| train_student(t, data, cfg, seed, workers, Some(&out), |_| {}))
        .map_err(to_py)?;
    Ok(run.log.iter().map(|r| r.mean_action_gap).collect())
}

#[pymodule]
fn mimic_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyClip>()?;
    m.add_class::<PySampler>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(py_load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(py_save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(termination_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(sampling_level, m)?)?;
    m.add_function(wrap_pyfunction!(curate_rules, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(py_train_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(py_distill, m)?)?;
    m.add("THRESHOLD_MAX", sampler::THRESHOLD_MAX)?;
    Ok(())
}
