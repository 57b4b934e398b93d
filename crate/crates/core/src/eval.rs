//! Tracking metrics, nearest-rank percentile reports, gating traces and run
//! comparison tables.
//!
//! Evaluation episodes run with nominal dynamics, no start noise, and the
//! deterministic mean action.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::motion::{MotionClip, MotionFrame};
use crate::nn::{AnyPolicy, HistoryBuffer, MoePolicy, StudentInputs, StudentPolicy, TeacherInputs};
use crate::sampler::THRESHOLD_MAX;
use crate::sim::{CharacterModel, EnvConfig, EpisodeStatus, Observation, TrackingEnv};

/// Errors between one simulated frame and its reference.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FrameErrors {
    /// Mean keybody distance (m).
    pub keybody: f64,
    /// Mean absolute joint-angle error (rad).
    pub joint: f64,
    /// Planar base velocity error (m/s).
    pub velocity: f64,
    /// Pitch-rate error (rad/s).
    pub pitch_rate: f64,
}

pub fn frame_errors(frame: &MotionFrame, target: &MotionFrame) -> FrameErrors {
    let k = frame.keybody_positions.len().max(1) as f64;
    let keybody = frame
        .keybody_positions
        .iter()
        .zip(&target.keybody_positions)
        .map(|(p, r)| ((p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2) + (p[2] - r[2]).powi(2)).sqrt())
        .sum::<f64>()
        / k;
    let j = frame.joint_positions.len().max(1) as f64;
    let joint = frame
        .joint_positions
        .iter()
        .zip(&target.joint_positions)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / j;
    let dv = [
        frame.base_lin_vel[0] - target.base_lin_vel[0],
        frame.base_lin_vel[2] - target.base_lin_vel[2],
    ];
    FrameErrors {
        keybody,
        joint,
        velocity: dv[0].hypot(dv[1]),
        pitch_rate: (frame.base_ang_vel - target.base_ang_vel).abs(),
    }
}

/// Episode-level tracking metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrackingMetrics {
    pub mpkpe_mm: f64,
    pub mpjpe: f64,
    pub vel: f64,
    pub yaw_vel: f64,
}

pub const METRIC_NAMES: [&str; 4] = ["mpkpe_mm", "mpjpe", "vel", "yaw_vel"];

impl TrackingMetrics {
    pub fn values(&self) -> [f64; 4] {
        [self.mpkpe_mm, self.mpjpe, self.vel, self.yaw_vel]
    }
}

/// Running sums of [`FrameErrors`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricAccumulator {
    sum: FrameErrors,
    pub frames: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, e: &FrameErrors) {
        self.sum.keybody += e.keybody;
        self.sum.joint += e.joint;
        self.sum.velocity += e.velocity;
        self.sum.pitch_rate += e.pitch_rate;
        self.frames += 1;
    }

    pub fn metrics(&self) -> TrackingMetrics {
        let n = self.frames.max(1) as f64;
        TrackingMetrics {
            mpkpe_mm: 1000.0 * self.sum.keybody / n,
            mpjpe: self.sum.joint / n,
            vel: self.sum.velocity / n,
            yaw_vel: self.sum.pitch_rate / n,
        }
    }
}

/// Metrics of a heading-local trajectory against an equally long reference.
pub fn tracking_metrics(trajectory: &[MotionFrame], reference: &[MotionFrame]) -> Result<TrackingMetrics> {
    if trajectory.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            what: "trajectory frames".into(),
            expected: reference.len(),
            found: trajectory.len(),
        });
    }
    let mut acc = MetricAccumulator::default();
    for (f, r) in trajectory.iter().zip(reference) {
        acc.add(&frame_errors(f, r));
    }
    Ok(acc.metrics())
}

/// Heading-local reference frames at the end of each of `steps` control steps.
pub fn reference_trajectory(clip: &MotionClip, dt: f64, steps: usize) -> Result<Vec<MotionFrame>> {
    (1..=steps)
        .map(|k| clip.local_frame_at((k as f64 * dt).min(clip.duration())))
        .collect()
}

/// Nearest-rank percentile: the smallest value with at least `p` percent of
/// the data at or below it.
pub fn nearest_rank(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of nothing");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub const REPORT_PERCENTILES: [f64; 5] = [50.0, 90.0, 95.0, 99.0, 100.0];

/// Something that turns observations into joint targets.
pub trait Controller {
    /// Called before each episode.
    fn reset(&mut self);
    fn act(&mut self, env: &TrackingEnv, obs: &Observation) -> Result<Vec<f64>>;
    /// Gating probabilities behind the last action, when the controller has any.
    fn last_gate(&self) -> Option<&[f64]> {
        None
    }
}

/// Replays the reference joint angles for the end of the current step.
#[derive(Debug, Clone, Default)]
pub struct PlaybackController;

impl Controller for PlaybackController {
    fn reset(&mut self) {}

    fn act(&mut self, env: &TrackingEnv, _obs: &Observation) -> Result<Vec<f64>> {
        let t = (env.time() + env.config().control_dt()).min(env.clip().duration());
        Ok(env.clip().local_frame_at(t)?.joint_positions)
    }
}

#[derive(Debug, Clone)]
pub struct TeacherController {
    pub policy: Arc<MoePolicy>,
    gate: Vec<f64>,
}

impl TeacherController {
    pub fn new(policy: Arc<MoePolicy>) -> Self {
        Self { policy, gate: Vec::new() }
    }
}

impl Controller for TeacherController {
    fn reset(&mut self) {
        self.gate.clear();
    }

    fn act(&mut self, _env: &TrackingEnv, obs: &Observation) -> Result<Vec<f64>> {
        let out = self.policy.evaluate(&TeacherInputs::from_observations([obs]))?;
        self.gate = out.gate.data;
        Ok(out.mean.data)
    }

    fn last_gate(&self) -> Option<&[f64]> {
        Some(&self.gate)
    }
}

#[derive(Debug, Clone)]
pub struct StudentController {
    pub policy: Arc<StudentPolicy>,
    history: HistoryBuffer,
}

impl StudentController {
    pub fn new(policy: Arc<StudentPolicy>) -> Self {
        let history = policy.new_history();
        Self { policy, history }
    }
}

impl Controller for StudentController {
    fn reset(&mut self) {
        self.history = self.policy.new_history();
    }

    fn act(&mut self, _env: &TrackingEnv, obs: &Observation) -> Result<Vec<f64>> {
        self.history.push(&obs.proprio);
        let a = self.policy.evaluate(&StudentInputs::from_parts([(&self.history, obs)]))?;
        Ok(a.data)
    }
}

/// Controller built from any checkpoint kind.
pub fn controller_for(policy: &AnyPolicy) -> Box<dyn Controller + Send> {
    match policy {
        AnyPolicy::Teacher(p) => Box::new(TeacherController::new(Arc::new(p.clone()))),
        AnyPolicy::Student(p) => Box::new(StudentController::new(Arc::new(p.clone()))),
    }
}

/// Outcome of one evaluation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipEvaluation {
    pub clip_id: String,
    pub category: String,
    pub completed: bool,
    pub steps: usize,
    pub max_keybody_error: f64,
    pub metrics: TrackingMetrics,
    /// Gating probabilities per step, empty for controllers without gates.
    pub gates: Vec<Vec<f64>>,
}

/// Run one episode of `clip` under `controller`.
pub fn evaluate_clip(
    controller: &mut dyn Controller,
    clip: Arc<MotionClip>,
    env_config: &EnvConfig,
    model: &CharacterModel,
    threshold: f64,
    seed: u64,
) -> Result<ClipEvaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = TrackingEnv::new(env_config.clone(), model.clone(), clip.clone(), threshold, &mut rng)?;
    controller.reset();
    let mut acc = MetricAccumulator::default();
    let mut gates = Vec::new();
    let status = loop {
        let obs = env.observe()?;
        let action = controller.act(&env, &obs)?;
        if let Some(g) = controller.last_gate() {
            gates.push(g.to_vec());
        }
        let step = env.step(&action)?;
        acc.add(&frame_errors(&env.snapshot().frame, &env.reference_frame()?));
        if step.status.is_done() {
            break step.status;
        }
    };
    Ok(ClipEvaluation {
        clip_id: clip.id().to_string(),
        category: clip.category().to_string(),
        completed: status == EpisodeStatus::Completed,
        steps: env.steps(),
        max_keybody_error: env.max_error(),
        metrics: acc.metrics(),
        gates,
    })
}

/// Evaluate every clip once in the evaluation setting, in parallel, results
/// in input order.
pub fn evaluate_dataset<C>(
    make_controller: impl Fn() -> C + Sync,
    clips: &[Arc<MotionClip>],
    env_config: &EnvConfig,
    model: &CharacterModel,
    seed: u64,
) -> Result<Vec<ClipEvaluation>>
where
    C: Controller,
{
    let eval_cfg = env_config.evaluation();
    clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let mut c = make_controller();
            evaluate_clip(&mut c, clip.clone(), &eval_cfg, model, THRESHOLD_MAX, seed.wrapping_add(i as u64))
        })
        .collect()
}

pub fn evaluate_policy(
    policy: &AnyPolicy,
    clips: &[Arc<MotionClip>],
    env_config: &EnvConfig,
    model: &CharacterModel,
    seed: u64,
) -> Result<Vec<ClipEvaluation>> {
    policy.dims().check_env(env_config)?;
    match policy {
        AnyPolicy::Teacher(p) => {
            let p = Arc::new(p.clone());
            evaluate_dataset(|| TeacherController::new(p.clone()), clips, env_config, model, seed)
        }
        AnyPolicy::Student(p) => {
            let p = Arc::new(p.clone());
            evaluate_dataset(|| StudentController::new(p.clone()), clips, env_config, model, seed)
        }
    }
}

/// Mean metrics and completion rate over clips.
pub fn summarize(evals: &[ClipEvaluation]) -> (TrackingMetrics, f64) {
    let n = evals.len().max(1) as f64;
    let mut m = TrackingMetrics::default();
    for e in evals {
        m.mpkpe_mm += e.metrics.mpkpe_mm / n;
        m.mpjpe += e.metrics.mpjpe / n;
        m.vel += e.metrics.vel / n;
        m.yaw_vel += e.metrics.yaw_vel / n;
    }
    let done = evals.iter().filter(|e| e.completed).count() as f64;
    (m, done / n)
}

/// Per-clip table: `clip_id category completed steps mpkpe_mm mpjpe vel yaw_vel`.
pub fn metrics_table(evals: &[ClipEvaluation]) -> String {
    let mut out = String::from("clip_id\tcategory\tcompleted\tsteps\tmpkpe_mm\tmpjpe\tvel\tyaw_vel\n");
    for e in evals {
        let m = e.metrics;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            e.clip_id, e.category, e.completed as u8, e.steps, m.mpkpe_mm, m.mpjpe, m.vel, m.yaw_vel
        );
    }
    out
}

/// Percentiles of every metric over all clips, then per category.
///
/// Columns: `group metric p50 p90 p95 p99 p100`.
pub fn percentile_report(evals: &[ClipEvaluation]) -> String {
    let mut out = String::from("group\tmetric");
    for p in REPORT_PERCENTILES {
        let _ = write!(out, "\tp{p}");
    }
    out.push('\n');
    if evals.is_empty() {
        return out;
    }
    let mut groups: Vec<(String, Vec<&ClipEvaluation>)> = vec![("all".into(), evals.iter().collect())];
    let mut cats: Vec<&str> = evals.iter().map(|e| e.category.as_str()).collect();
    cats.sort_unstable();
    cats.dedup();
    for c in cats {
        groups.push((c.to_string(), evals.iter().filter(|e| e.category == c).collect()));
    }
    for (name, members) in groups {
        for (m, metric) in METRIC_NAMES.iter().enumerate() {
            let values: Vec<f64> = members.iter().map(|e| e.metrics.values()[m]).collect();
            let _ = write!(out, "{name}\t{metric}");
            for p in REPORT_PERCENTILES {
                let _ = write!(out, "\t{:.6}", nearest_rank(&values, p));
            }
            out.push('\n');
        }
    }
    out
}

/// Gating probabilities per control step while the teacher tracks `clip`.
pub fn gating_trace(
    policy: &AnyPolicy,
    clip: Arc<MotionClip>,
    env_config: &EnvConfig,
    model: &CharacterModel,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let AnyPolicy::Teacher(teacher) = policy else {
        return Err(Error::SchemaMismatch("gating traces need a mixture-of-experts checkpoint".into()));
    };
    teacher.dims.check_env(env_config)?;
    let mut c = TeacherController::new(Arc::new(teacher.clone()));
    let eval = evaluate_clip(&mut c, clip, &env_config.evaluation(), model, THRESHOLD_MAX, seed)?;
    Ok(eval.gates)
}

/// Header of expert indices, then one row of probabilities per step.
pub fn gating_trace_table(trace: &[Vec<f64>]) -> String {
    let n = trace.first().map_or(0, Vec::len);
    let mut out = (0..n).map(|i| format!("expert{i}")).collect::<Vec<_>>().join("\t");
    out.push('\n');
    for row in trace {
        let cells: Vec<String> = row.iter().map(|p| format!("{p:.9}")).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out
}

/// One named configuration evaluated over one or more seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub checkpoints: Vec<PathBuf>,
}

/// Parse `name=ckpt[,ckpt...]` lines (blank lines and `#` comments skipped).
pub fn parse_run_list(text: &str) -> Result<Vec<RunSpec>> {
    let mut runs = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, paths) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("run list: expected name=paths, got `{line}`")))?;
        runs.push(RunSpec {
            name: name.trim().to_string(),
            checkpoints: paths.split(',').map(|p| PathBuf::from(p.trim())).collect(),
        });
    }
    Ok(runs)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-run `mean ± std` over seeds of each dataset-mean metric.
///
/// Columns: `run seeds completion mpkpe_mm mpkpe_mm_std mpjpe ... yaw_vel_std`.
pub fn compare_runs(
    runs: &[RunSpec],
    clips: &[Arc<MotionClip>],
    env_config: &EnvConfig,
    model: &CharacterModel,
    base_dir: &Path,
) -> Result<String> {
    let mut out = String::from("run\tseeds\tcompletion\tcompletion_std");
    for m in METRIC_NAMES {
        let _ = write!(out, "\t{m}\t{m}_std");
    }
    out.push('\n');
    for run in runs {
        if run.checkpoints.is_empty() {
            return Err(Error::Config(format!("run `{}` lists no checkpoints", run.name)));
        }
        let mut per_seed: Vec<(TrackingMetrics, f64)> = Vec::new();
        for ck in &run.checkpoints {
            let path = if ck.is_absolute() { ck.clone() } else { base_dir.join(ck) };
            let policy = AnyPolicy::load(&path).map_err(|e| match e {
                Error::Io { source, .. } => Error::Io {
                    path: PathBuf::from(format!("run `{}`: {}", run.name, path.display())),
                    source,
                },
                other => other,
            })?;
            let evals = evaluate_policy(&policy, clips, env_config, model, 0)?;
            per_seed.push(summarize(&evals));
        }
        let (c_mean, c_std) = mean_std(&per_seed.iter().map(|(_, c)| *c).collect::<Vec<_>>());
        let _ = write!(out, "{}\t{}\t{c_mean:.6}\t{c_std:.6}", run.name, per_seed.len());
        for m in 0..4 {
            let xs: Vec<f64> = per_seed.iter().map(|(t, _)| t.values()[m]).collect();
            let (mean, std) = mean_std(&xs);
            let _ = write!(out, "\t{mean:.6}\t{std:.6}");
        }
        out.push('\n');
    }
    Ok(out)
}
