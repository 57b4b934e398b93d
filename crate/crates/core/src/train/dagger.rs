//! Student distillation: roll out a teacher/student mixture, label visited
//! states with the teacher's mean action and regress the student onto the
//! labels with a squared-error loss over an aggregated buffer.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::eval::FrameErrors;
use crate::motion::MotionClip;
use crate::nn::{
    Adam, HistoryBuffer, MoePolicy, PolicyDims, StudentInputs, StudentPolicy, Tape, TeacherInputs, Tensor, Var,
};
use crate::sampler::{ClipPool, SamplerState};
use crate::sim::{CharacterModel, EpisodeStatus, Observation, StepResult, TrackingEnv};

use super::ppo::step_env;
use super::{clip_cache, require_clips, stream_rng, worker_pool, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DaggerConfig {
    pub rounds: usize,
    pub n_envs: usize,
    pub steps_per_env: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Aggregated samples kept; the oldest rounds are dropped first.
    pub buffer: usize,
    /// Share of rounds over which the teacher's rollout share falls from 1 to 0.
    pub mix_fraction: f64,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        Self {
            rounds: 40,
            n_envs: 32,
            steps_per_env: 50,
            epochs: 4,
            minibatch: 256,
            lr: 1e-3,
            max_grad_norm: 1.0,
            buffer: 16_384,
            mix_fraction: 0.25,
        }
    }
}

impl DaggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_envs == 0 || self.steps_per_env == 0 || self.epochs == 0 || self.minibatch == 0 || self.buffer == 0 {
            return Err(Error::Config("dagger sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_fraction) {
            return Err(Error::Config("dagger.mix_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set("dagger.rounds", &mut self.rounds)?;
        kv.set("dagger.n_envs", &mut self.n_envs)?;
        kv.set("dagger.steps_per_env", &mut self.steps_per_env)?;
        kv.set("dagger.epochs", &mut self.epochs)?;
        kv.set("dagger.minibatch", &mut self.minibatch)?;
        kv.set("dagger.lr", &mut self.lr)?;
        kv.set("dagger.max_grad_norm", &mut self.max_grad_norm)?;
        kv.set("dagger.buffer", &mut self.buffer)?;
        kv.set("dagger.mix_fraction", &mut self.mix_fraction)?;
        self.validate()
    }

    /// Probability that a rollout step executes the teacher's action.
    pub fn teacher_share(&self, round: usize) -> f64 {
        let span = self.mix_fraction * self.rounds as f64;
        if span <= 0.0 {
            return 0.0;
        }
        (1.0 - round as f64 / span).clamp(0.0, 1.0)
    }
}

/// Mean over rows of the squared action distance.
pub fn distill_loss(tape: &mut Tape, student: &StudentPolicy, inputs: &StudentInputs, labels: &Tensor) -> Result<Var> {
    let a = student.forward(tape, inputs)?;
    let target = tape.input(labels.clone());
    let d = tape.sub(a, target);
    let sq = tape.square(d);
    let per_row = tape.sum_cols(sq);
    Ok(tape.mean_all(per_row))
}

/// Root-mean-square per-joint difference between two action batches.
pub fn action_gap(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "action batches must align");
    if a.is_empty() {
        return 0.0;
    }
    let sq: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum();
    (sq / a.len() as f64).sqrt()
}

/// Teacher and student must agree on every input and output width.
pub fn check_schema(teacher: &PolicyDims, student: &PolicyDims) -> Result<()> {
    if teacher != student {
        return Err(Error::SchemaMismatch(format!(
            "teacher dims {teacher:?} differ from student dims {student:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaggerRoundLog {
    pub round: usize,
    pub teacher_share: f64,
    /// Gap between student and teacher on this round's visited states, before the update.
    pub mean_action_gap: f64,
    /// The same gap after the update.
    pub gap_after: f64,
    pub loss: f64,
    /// Per-step mean joint error of the executed rollouts (rad).
    pub mean_mpjpe: f64,
    pub mean_mpkpe: f64,
    pub completion_rate: f64,
    pub samples: usize,
}

pub const DISTILL_LOG_HEADER: &str =
    "round\tteacher_share\tmean_action_gap\tgap_after\tloss\tmean_mpjpe\tmean_mpkpe\tcompletion_rate\tsamples";

impl DaggerRoundLog {
    pub fn row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.round,
            self.teacher_share,
            self.mean_action_gap,
            self.gap_after,
            self.loss,
            self.mean_mpjpe,
            self.mean_mpkpe,
            self.completion_rate,
            self.samples
        )
    }
}

struct Slot {
    env: TrackingEnv,
    obs: Observation,
    history: HistoryBuffer,
    rng: ChaCha8Rng,
}

/// Labelled samples of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct DaggerBatch {
    pub inputs: StudentInputs,
    pub labels: Tensor,
    pub student_actions: Tensor,
    pub errors: Vec<FrameErrors>,
    pub episodes: usize,
    pub completed: usize,
    /// Per step and environment, whether the teacher's action was executed.
    pub teacher_driven: Vec<bool>,
    /// Executed actions, step-major.
    pub executed: Tensor,
}

pub struct StudentTrainer {
    pub config: TrainConfig,
    pub model: CharacterModel,
    pub teacher: MoePolicy,
    pub student: StudentPolicy,
    pub optimizer: Adam,
    pub sampler: SamplerState,
    pub pool: ClipPool,
    clips: BTreeMap<String, Arc<MotionClip>>,
    slots: Vec<Slot>,
    buffer: VecDeque<(StudentInputs, Tensor)>,
    rng: ChaCha8Rng,
    workers: rayon::ThreadPool,
    pub round: usize,
}

impl StudentTrainer {
    pub fn new(teacher: MoePolicy, dataset: Vec<MotionClip>, config: TrainConfig, seed: u64, workers: usize) -> Result<Self> {
        require_clips(&dataset)?;
        config.env.validate()?;
        config.dagger.validate()?;
        teacher.dims.check_env(&config.env)?;
        let mut rng = stream_rng(seed, 0);
        let mut student_cfg = config.policy.clone();
        student_cfg.residual = teacher.config.residual;
        let student = StudentPolicy::new(student_cfg, PolicyDims::from_env(&config.env), &mut rng)?;
        check_schema(&teacher.dims, &student.dims)?;
        let mut optimizer = Adam::new(&student.store, config.dagger.lr);
        optimizer.max_grad_norm = config.dagger.max_grad_norm;
        let pool = ClipPool::new(dataset, config.sampler.max_clip_len, config.sampler.max_clip_offset, &mut rng)?;
        let sampler = SamplerState::new(config.sampler.clone(), pool.ids());
        let clips = clip_cache(&pool);
        let mut trainer = Self {
            model: CharacterModel::biped(),
            teacher,
            student,
            optimizer,
            sampler,
            pool,
            clips,
            slots: Vec::new(),
            buffer: VecDeque::new(),
            rng,
            workers: worker_pool(workers)?,
            round: 0,
            config,
        };
        for i in 0..trainer.config.dagger.n_envs {
            let mut slot_rng = stream_rng(seed, 1 + i as u64);
            let env = trainer.spawn_env(&mut slot_rng)?;
            let obs = env.observe()?;
            let history = trainer.student.new_history();
            trainer.slots.push(Slot {
                env,
                obs,
                history,
                rng: slot_rng,
            });
        }
        Ok(trainer)
    }

    fn spawn_env(&mut self, env_rng: &mut ChaCha8Rng) -> Result<TrackingEnv> {
        let id = self.sampler.sample_clip(&mut self.rng)?.to_string();
        let clip = self.clips[&id].clone();
        let threshold = self.sampler.threshold(&id);
        TrackingEnv::new(self.config.env.clone(), self.model.clone(), clip, threshold, env_rng)
    }

    /// Roll out the mixture for one round and label every visited state.
    pub fn collect(&mut self, teacher_share: f64) -> Result<DaggerBatch> {
        let steps = self.config.dagger.steps_per_env;
        let j = self.teacher.dims.joints;
        let mut parts = Vec::with_capacity(steps);
        let mut labels = Vec::new();
        let mut student_actions = Vec::new();
        let mut executed = Vec::new();
        let mut teacher_driven = Vec::new();
        let mut errors = Vec::new();
        let (mut episodes, mut completed) = (0, 0);
        for _ in 0..steps {
            for slot in self.slots.iter_mut() {
                slot.history.push(&slot.obs.proprio);
            }
            let t_in = TeacherInputs::from_observations(self.slots.iter().map(|s| &s.obs));
            let s_in = StudentInputs::from_parts(self.slots.iter().map(|s| (&s.history, &s.obs)));
            let label = self.teacher.evaluate(&t_in)?.mean;
            let own = self.student.evaluate(&s_in)?;
            let mut actions = Vec::with_capacity(self.slots.len());
            for (i, slot) in self.slots.iter_mut().enumerate() {
                let use_teacher = slot.rng.random::<f64>() < teacher_share;
                teacher_driven.push(use_teacher);
                let a = if use_teacher { label.row(i) } else { own.row(i) };
                actions.push(a.to_vec());
            }
            let results: Vec<Result<(StepResult, FrameErrors, Option<Observation>)>> = self.workers.install(|| {
                self.slots
                    .par_iter_mut()
                    .zip(actions.par_iter())
                    .map(|(slot, a)| {
                        let (r, fe) = step_env(&mut slot.env, a)?;
                        let obs = if r.status.is_done() { None } else { Some(slot.env.observe()?) };
                        Ok((r, fe, obs))
                    })
                    .collect()
            });
            for (i, res) in results.into_iter().enumerate() {
                let (r, fe, obs) = res?;
                errors.push(fe);
                match obs {
                    Some(o) => self.slots[i].obs = o,
                    None => {
                        let env = &self.slots[i].env;
                        let id = env.clip().id().to_string();
                        let done_ok = r.status == EpisodeStatus::Completed;
                        let max_err = env.max_error().min(1e3);
                        self.sampler.on_episode_end(&id, done_ok, max_err);
                        episodes += 1;
                        completed += usize::from(done_ok);
                        let mut slot_rng = self.slots[i].rng.clone();
                        let env = self.spawn_env(&mut slot_rng)?;
                        let history = self.student.new_history();
                        let slot = &mut self.slots[i];
                        slot.rng = slot_rng;
                        slot.obs = env.observe()?;
                        slot.env = env;
                        slot.history = history;
                    }
                }
            }
            executed.extend(actions);
            labels.push(label);
            student_actions.push(own);
            parts.push(s_in);
        }
        Ok(DaggerBatch {
            inputs: StudentInputs::concat(&parts),
            labels: Tensor::vcat(&labels.iter().collect::<Vec<_>>()),
            student_actions: Tensor::vcat(&student_actions.iter().collect::<Vec<_>>()),
            errors,
            episodes,
            completed,
            teacher_driven,
            executed: Tensor::stack(j, &executed),
        })
    }

    /// Add a batch to the aggregate, dropping the oldest rounds beyond capacity.
    fn aggregate(&mut self, batch: &DaggerBatch) {
        self.buffer.push_back((batch.inputs.clone(), batch.labels.clone()));
        let cap = self.config.dagger.buffer;
        while self.buffer.len() > 1 && self.buffer.iter().map(|(i, _)| i.rows()).sum::<usize>() > cap {
            self.buffer.pop_front();
        }
    }

    /// Gradient steps over the aggregated buffer. Returns the mean loss.
    pub fn fit(&mut self) -> Result<f64> {
        let inputs = StudentInputs::concat(&self.buffer.iter().map(|(i, _)| i.clone()).collect::<Vec<_>>());
        let labels = Tensor::vcat(&self.buffer.iter().map(|(_, l)| l).collect::<Vec<_>>());
        let mut order: Vec<usize> = (0..inputs.rows()).collect();
        let (mut sum, mut count) = (0.0, 0.0);
        for _ in 0..self.config.dagger.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.dagger.minibatch) {
                let mb_in = inputs.select(chunk);
                let mb_lab = labels.select_rows(chunk);
                let (grads, loss) = {
                    let mut tape = Tape::new(&self.student.store);
                    let loss = distill_loss(&mut tape, &self.student, &mb_in, &mb_lab)?;
                    let value = tape.value(loss).item();
                    if !value.is_finite() {
                        return Err(Error::NonFiniteLoss(format!("distillation loss {value}")));
                    }
                    (tape.backward(loss)?, value)
                };
                self.optimizer.step(&mut self.student.store, &grads)?;
                sum += loss;
                count += 1.0;
            }
        }
        Ok(sum / count)
    }

    /// One round at the scheduled teacher share.
    pub fn step_round(&mut self) -> Result<DaggerRoundLog> {
        let share = self.config.dagger.teacher_share(self.round);
        dagger_round(self, share)
    }

    pub fn buffered_samples(&self) -> usize {
        self.buffer.iter().map(|(i, _)| i.rows()).sum()
    }
}

/// Collect, label, aggregate and fit once with the given teacher share.
pub fn dagger_round(trainer: &mut StudentTrainer, teacher_share: f64) -> Result<DaggerRoundLog> {
    let batch = trainer.collect(teacher_share)?;
    if trainer.student.norm.count == 0 {
        trainer.student.norm.update(&batch.inputs.flat());
    }
    let before = trainer.student.evaluate(&batch.inputs)?;
    trainer.aggregate(&batch);
    let loss = trainer.fit()?;
    let after = trainer.student.evaluate(&batch.inputs)?;
    trainer.student.norm.update(&batch.inputs.flat());
    let n = batch.errors.len().max(1) as f64;
    let log = DaggerRoundLog {
        round: trainer.round,
        teacher_share,
        mean_action_gap: action_gap(&before, &batch.labels),
        gap_after: action_gap(&after, &batch.labels),
        loss,
        mean_mpjpe: batch.errors.iter().map(|e| e.joint).sum::<f64>() / n,
        mean_mpkpe: batch.errors.iter().map(|e| 1000.0 * e.keybody).sum::<f64>() / n,
        completion_rate: if batch.episodes == 0 {
            f64::NAN
        } else {
            batch.completed as f64 / batch.episodes as f64
        },
        samples: trainer.buffered_samples(),
    };
    trainer.round += 1;
    Ok(log)
}

pub struct StudentRun {
    pub student: StudentPolicy,
    pub log: Vec<DaggerRoundLog>,
}

/// Distil `teacher` into a fresh student for `config.dagger.rounds` rounds.
/// With `out_dir`, writes `distill_log.tsv` and `student.ckpt`.
pub fn train_student(
    teacher: MoePolicy,
    dataset: Vec<MotionClip>,
    config: TrainConfig,
    seed: u64,
    workers: usize,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&DaggerRoundLog),
) -> Result<StudentRun> {
    let rounds = config.dagger.rounds;
    let mut trainer = StudentTrainer::new(teacher, dataset, config, seed, workers)?;
    let mut log = Vec::with_capacity(rounds);
    let mut text = format!("{DISTILL_LOG_HEADER}\n");
    for _ in 0..rounds {
        let row = trainer.step_round()?;
        let _ = writeln!(text, "{}", row.row());
        progress(&row);
        log.push(row);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("distill_log.tsv");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        trainer.student.save(dir.join("student.ckpt"))?;
    }
    Ok(StudentRun {
        student: trainer.student,
        log,
    })
}

/// Trailing moving average with the given window (shorter at the start).
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
