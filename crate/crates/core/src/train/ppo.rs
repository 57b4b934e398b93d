//! Privileged teacher training: vectorized rollouts over clips drawn by the
//! adaptive sampler, generalized advantage estimation and clipped-surrogate
//! PPO updates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::eval::{frame_errors, nearest_rank, FrameErrors};
use crate::motion::MotionClip;
use crate::nn::policy::{entropy_on_tape, log_prob_on_tape};
use crate::nn::{sample_action, Adam, MoePolicy, PolicyDims, Tape, TeacherInputs, Tensor, Var};
use crate::sampler::{periodic_reclip, ClipPool, SamplerState};
use crate::sim::{CharacterModel, EpisodeStatus, Observation, StepResult, TrackingEnv};

use super::{clip_cache, require_clips, stream_rng, worker_pool, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub n_envs: usize,
    pub steps_per_env: usize,
    pub iterations: usize,
    pub checkpoint_every: usize,
    /// Iterations between sampler snapshots in the sampler log.
    pub sampler_log_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 5,
            minibatch: 1600,
            lr: 3e-4,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            n_envs: 64,
            steps_per_env: 100,
            iterations: 500,
            checkpoint_every: 50,
            sampler_log_every: 10,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !unit(self.gamma) || !unit(self.lambda) {
            return Err(Error::Config("ppo.gamma and ppo.lambda must lie in (0, 1]".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("ppo.clip must be positive".into()));
        }
        if self.n_envs == 0 || self.steps_per_env == 0 || self.minibatch == 0 || self.epochs == 0 {
            return Err(Error::Config("ppo sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set("ppo.gamma", &mut self.gamma)?;
        kv.set("ppo.lambda", &mut self.lambda)?;
        kv.set("ppo.clip", &mut self.clip)?;
        kv.set("ppo.epochs", &mut self.epochs)?;
        kv.set("ppo.minibatch", &mut self.minibatch)?;
        kv.set("ppo.lr", &mut self.lr)?;
        kv.set("ppo.entropy_coef", &mut self.entropy_coef)?;
        kv.set("ppo.value_coef", &mut self.value_coef)?;
        kv.set("ppo.max_grad_norm", &mut self.max_grad_norm)?;
        kv.set("ppo.n_envs", &mut self.n_envs)?;
        kv.set("ppo.steps_per_env", &mut self.steps_per_env)?;
        kv.set("ppo.iterations", &mut self.iterations)?;
        kv.set("ppo.checkpoint_every", &mut self.checkpoint_every)?;
        kv.set("ppo.sampler_log_every", &mut self.sampler_log_every)?;
        self.validate()
    }
}

/// Advantages and returns of one environment's step sequence.
///
/// `dones[t]` marks the last step of an episode; nothing is bootstrapped
/// across it. `bootstrap` is the value of the state after the final step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "GAE inputs must be aligned");
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shift to zero mean and scale to unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Training samples fed to [`ppo_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSamples {
    pub inputs: TeacherInputs,
    pub actions: Tensor,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Returns in the critic's standardized units.
    pub value_targets: Vec<f64>,
}

impl PpoSamples {
    pub fn select(&self, idx: &[usize]) -> Self {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect();
        Self {
            inputs: self.inputs.select(idx),
            actions: self.actions.select_rows(idx),
            old_log_probs: pick(&self.old_log_probs),
            advantages: pick(&self.advantages),
            value_targets: pick(&self.value_targets),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoDiagnostics {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Fraction of samples whose ratio left `[1 - ε, 1 + ε]`.
    pub clip_fraction: f64,
    /// Mean of `log π_old - log π_new`.
    pub approx_kl: f64,
}

/// Clipped surrogate plus value regression minus entropy bonus, recorded on
/// `tape`.
pub fn ppo_loss(
    tape: &mut Tape,
    policy: &MoePolicy,
    samples: &PpoSamples,
    config: &PpoConfig,
) -> Result<(Var, PpoDiagnostics)> {
    let b = samples.inputs.rows();
    let out = policy.forward(tape, &samples.inputs)?;
    let actions = tape.input(samples.actions.clone());
    let log_std = tape.param(policy.log_std);
    let lp = log_prob_on_tape(tape, actions, out.mean, log_std);
    let old = tape.input(Tensor::from_vec(b, 1, samples.old_log_probs.clone()));
    let diff = tape.sub(lp, old);
    let ratio = tape.exp(diff);
    let adv = tape.input(Tensor::from_vec(b, 1, samples.advantages.clone()));
    let surr1 = tape.mul(ratio, adv);
    let clipped = tape.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip);
    let surr2 = tape.mul(clipped, adv);
    let surr = tape.min(surr1, surr2);
    let surr_mean = tape.mean_all(surr);
    let policy_loss = tape.scale(surr_mean, -1.0);

    let target = tape.input(Tensor::from_vec(b, 1, samples.value_targets.clone()));
    let verr = tape.sub(out.value, target);
    let vsq = tape.square(verr);
    let value_loss = tape.mean_all(vsq);
    let entropy = entropy_on_tape(tape, log_std);

    let weighted_v = tape.scale(value_loss, config.value_coef);
    let weighted_e = tape.scale(entropy, -config.entropy_coef);
    let partial = tape.add(policy_loss, weighted_v);
    let loss = tape.add(partial, weighted_e);

    let ratios = &tape.value(ratio).data;
    let clip_fraction =
        ratios.iter().filter(|r| (**r - 1.0).abs() > config.clip).count() as f64 / b.max(1) as f64;
    let approx_kl = tape.value(diff).data.iter().map(|d| -d).sum::<f64>() / b.max(1) as f64;
    let diag = PpoDiagnostics {
        loss: tape.value(loss).item(),
        policy_loss: tape.value(policy_loss).item(),
        value_loss: tape.value(value_loss).item(),
        entropy: tape.value(entropy).item(),
        clip_fraction,
        approx_kl,
    };
    if !diag.loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("{diag:?}")));
    }
    Ok((loss, diag))
}

/// One finished training episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub clip_id: String,
    pub completed: bool,
    pub max_keybody_error: f64,
    pub steps: usize,
}

/// Everything gathered in one rollout phase. Step-major: sample `t·N + i` is
/// step `t` of environment `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub steps: usize,
    pub inputs: TeacherInputs,
    pub actions: Tensor,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Critic values in return units.
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub clip_ids: Vec<String>,
    pub errors: Vec<FrameErrors>,
    /// Value of each environment's state after the last step.
    pub bootstrap: Vec<f64>,
    pub episodes: Vec<EpisodeOutcome>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Advantages and returns over the whole batch.
    pub fn gae(&self, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_envs;
        let mut adv = vec![0.0; self.len()];
        let mut ret = vec![0.0; self.len()];
        for i in 0..n {
            let idx: Vec<usize> = (0..self.steps).map(|t| t * n + i).collect();
            let pick = |v: &[f64]| idx.iter().map(|&k| v[k]).collect::<Vec<_>>();
            let dones: Vec<bool> = idx.iter().map(|&k| self.dones[k]).collect();
            let (a, r) = compute_gae(&pick(&self.rewards), &pick(&self.values), &dones, self.bootstrap[i], gamma, lambda);
            for (j, &k) in idx.iter().enumerate() {
                adv[k] = a[j];
                ret[k] = r[j];
            }
        }
        (adv, ret)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_reward: f64,
    /// Completed over finished episodes in this iteration (NaN when none finished).
    pub completion_rate: f64,
    /// Per-step mean keybody error (mm).
    pub mean_mpkpe: f64,
    pub p99_mpkpe: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub mean_mpjpe: f64,
    pub episodes: usize,
}

pub const TRAIN_LOG_HEADER: &str = "iteration\tmean_reward\tcompletion_rate\tmean_mpkpe\tp99_mpkpe\tclip_fraction\tapprox_kl";

impl IterationLog {
    pub fn row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.iteration,
            self.mean_reward,
            self.completion_rate,
            self.mean_mpkpe,
            self.p99_mpkpe,
            self.clip_fraction,
            self.approx_kl
        )
    }
}

struct Slot {
    env: TrackingEnv,
    obs: Observation,
    rng: ChaCha8Rng,
}

/// Step an environment, turning a numerical blow-up into a terminated step.
pub(crate) fn step_env(env: &mut TrackingEnv, action: &[f64]) -> Result<(StepResult, FrameErrors)> {
    match env.step(action) {
        Ok(r) => {
            let fe = frame_errors(&env.snapshot().frame, &env.reference_frame()?);
            Ok((r, fe))
        }
        Err(Error::SimulationDiverged) => {
            log::warn!("simulation diverged on clip {}; ending episode", env.clip().id());
            let r = StepResult {
                reward: 0.0,
                terms: [0.0; crate::sim::reward::N_REWARD_TERMS],
                status: EpisodeStatus::Terminated,
                keybody_error: f64::INFINITY,
            };
            Ok((r, FrameErrors::default()))
        }
        Err(e) => Err(e),
    }
}

/// Teacher training state: policy, optimizer, sampler, clip pool and the
/// persistent vector of environments.
pub struct TeacherTrainer {
    pub config: TrainConfig,
    pub model: CharacterModel,
    pub policy: MoePolicy,
    pub optimizer: Adam,
    pub sampler: SamplerState,
    pub pool: ClipPool,
    clips: BTreeMap<String, Arc<MotionClip>>,
    slots: Vec<Slot>,
    rng: ChaCha8Rng,
    workers: rayon::ThreadPool,
    pub iteration: usize,
    /// `on_episode_end` calls made so far.
    pub episodes_reported: usize,
}

impl TeacherTrainer {
    pub fn new(dataset: Vec<MotionClip>, config: TrainConfig, seed: u64, workers: usize) -> Result<Self> {
        require_clips(&dataset)?;
        config.env.validate()?;
        config.ppo.validate()?;
        let model = CharacterModel::biped();
        let mut rng = stream_rng(seed, 0);
        let policy = MoePolicy::new(config.policy.clone(), PolicyDims::from_env(&config.env), &mut rng)?;
        let mut optimizer = Adam::new(&policy.store, config.ppo.lr);
        optimizer.max_grad_norm = config.ppo.max_grad_norm;
        let pool = ClipPool::new(
            dataset,
            config.sampler.max_clip_len,
            config.sampler.max_clip_offset,
            &mut rng,
        )?;
        let sampler = SamplerState::new(config.sampler.clone(), pool.ids());
        let clips = clip_cache(&pool);
        let mut trainer = Self {
            model,
            policy,
            optimizer,
            sampler,
            pool,
            clips,
            slots: Vec::new(),
            rng,
            workers: worker_pool(workers)?,
            iteration: 0,
            episodes_reported: 0,
            config,
        };
        for i in 0..trainer.config.ppo.n_envs {
            let mut slot_rng = stream_rng(seed, 1 + i as u64);
            let env = trainer.spawn_env(&mut slot_rng)?;
            let obs = env.observe()?;
            trainer.slots.push(Slot {
                env,
                obs,
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

    /// Roll every environment forward `steps_per_env` control steps.
    pub fn collect(&mut self) -> Result<RolloutBatch> {
        let n = self.slots.len();
        let steps = self.config.ppo.steps_per_env;
        let mut parts = Vec::with_capacity(steps);
        let mut actions = Vec::with_capacity(n * steps);
        let mut log_probs = Vec::with_capacity(n * steps);
        let mut rewards = Vec::with_capacity(n * steps);
        let mut values = Vec::with_capacity(n * steps);
        let mut dones = Vec::with_capacity(n * steps);
        let mut clip_ids = Vec::with_capacity(n * steps);
        let mut errors = Vec::with_capacity(n * steps);
        let mut episodes = Vec::new();
        for _ in 0..steps {
            let inputs = TeacherInputs::from_observations(self.slots.iter().map(|s| &s.obs));
            let eval = self.policy.evaluate(&inputs)?;
            let log_std = self.policy.log_std().to_vec();
            let mut step_actions = Vec::with_capacity(n);
            for (i, slot) in self.slots.iter_mut().enumerate() {
                let (a, lp) = sample_action(eval.mean.row(i), &log_std, &mut slot.rng);
                log_probs.push(lp);
                step_actions.push(a);
            }
            values.extend_from_slice(&eval.value);
            let results: Vec<Result<(StepResult, FrameErrors, Option<Observation>)>> = self.workers.install(|| {
                self.slots
                    .par_iter_mut()
                    .zip(step_actions.par_iter())
                    .map(|(slot, a)| {
                        let (r, fe) = step_env(&mut slot.env, a)?;
                        let obs = if r.status.is_done() { None } else { Some(slot.env.observe()?) };
                        Ok((r, fe, obs))
                    })
                    .collect()
            });
            for (i, res) in results.into_iter().enumerate() {
                let (r, fe, obs) = res?;
                rewards.push(r.reward);
                errors.push(fe);
                clip_ids.push(self.slots[i].env.clip().id().to_string());
                let done = r.status.is_done();
                dones.push(done);
                match obs {
                    Some(o) => self.slots[i].obs = o,
                    None => {
                        let env = &self.slots[i].env;
                        let outcome = EpisodeOutcome {
                            clip_id: env.clip().id().to_string(),
                            completed: r.status == EpisodeStatus::Completed,
                            max_keybody_error: env.max_error().min(1e3),
                            steps: env.steps(),
                        };
                        self.sampler
                            .on_episode_end(&outcome.clip_id, outcome.completed, outcome.max_keybody_error);
                        self.episodes_reported += 1;
                        episodes.push(outcome);
                        let mut slot_rng = self.slots[i].rng.clone();
                        let env = self.spawn_env(&mut slot_rng)?;
                        let slot = &mut self.slots[i];
                        slot.rng = slot_rng;
                        slot.obs = env.observe()?;
                        slot.env = env;
                    }
                }
            }
            actions.extend(step_actions);
            parts.push(inputs);
        }
        let last = TeacherInputs::from_observations(self.slots.iter().map(|s| &s.obs));
        let bootstrap = self.policy.evaluate(&last)?.value;
        let j = self.policy.dims.joints;
        Ok(RolloutBatch {
            n_envs: n,
            steps,
            inputs: TeacherInputs::concat(&parts),
            actions: Tensor::stack(j, &actions),
            log_probs,
            rewards,
            values,
            dones,
            clip_ids,
            errors,
            bootstrap,
            episodes,
        })
    }

    /// Recompute log-probabilities and values of a batch under the current
    /// policy (used once the input normalizer is first initialized).
    fn refresh(&self, batch: &mut RolloutBatch) -> Result<()> {
        let eval = self.policy.evaluate(&batch.inputs)?;
        let log_std = self.policy.log_std();
        for k in 0..batch.len() {
            batch.log_probs[k] = crate::nn::gaussian_log_prob(batch.actions.row(k), eval.mean.row(k), log_std);
        }
        batch.values = eval.value;
        Ok(())
    }

    /// PPO epochs over one batch. Returns averaged diagnostics.
    pub fn update(&mut self, batch: &mut RolloutBatch) -> Result<PpoDiagnostics> {
        let cfg = self.config.ppo.clone();
        if self.policy.norm.count == 0 {
            self.policy.norm.update(&batch.inputs.flat());
            self.refresh(batch)?;
        }
        let (mut adv, ret) = batch.gae(cfg.gamma, cfg.lambda);
        self.policy.value_norm.update(&Tensor::from_vec(ret.len(), 1, ret.clone()));
        normalize_advantages(&mut adv);
        let samples = PpoSamples {
            inputs: batch.inputs.clone(),
            actions: batch.actions.clone(),
            old_log_probs: batch.log_probs.clone(),
            advantages: adv,
            value_targets: ret.iter().map(|&r| self.policy.value_norm.normalize_scalar(r)).collect(),
        };
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut sum = PpoDiagnostics::default();
        let mut count = 0.0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(cfg.minibatch) {
                let mb = samples.select(chunk);
                let (grads, diag) = {
                    let mut tape = Tape::new(&self.policy.store);
                    let (loss, diag) = ppo_loss(&mut tape, &self.policy, &mb, &cfg)?;
                    (tape.backward(loss)?, diag)
                };
                self.optimizer.step(&mut self.policy.store, &grads)?;
                sum.loss += diag.loss;
                sum.policy_loss += diag.policy_loss;
                sum.value_loss += diag.value_loss;
                sum.entropy += diag.entropy;
                sum.clip_fraction += diag.clip_fraction;
                sum.approx_kl += diag.approx_kl;
                count += 1.0;
            }
        }
        self.policy.norm.update(&batch.inputs.flat());
        Ok(PpoDiagnostics {
            loss: sum.loss / count,
            policy_loss: sum.policy_loss / count,
            value_loss: sum.value_loss / count,
            entropy: sum.entropy / count,
            clip_fraction: sum.clip_fraction / count,
            approx_kl: sum.approx_kl / count,
        })
    }

    /// Re-clip (when due), collect, update.
    pub fn iterate(&mut self) -> Result<IterationLog> {
        self.sampler.iteration = self.iteration as u64;
        if self.sampler.reclip_due() {
            let (pool, sampler) = periodic_reclip(&self.sampler, &self.pool, &mut self.rng)?;
            self.pool = pool;
            self.sampler = sampler;
            self.clips = clip_cache(&self.pool);
        }
        let mut batch = self.collect()?;
        let diag = self.update(&mut batch)?;
        let mpkpe: Vec<f64> = batch.errors.iter().map(|e| 1000.0 * e.keybody).collect();
        let finished = batch.episodes.len();
        let completed = batch.episodes.iter().filter(|e| e.completed).count();
        let log = IterationLog {
            iteration: self.iteration,
            mean_reward: batch.rewards.iter().sum::<f64>() / batch.len() as f64,
            completion_rate: if finished == 0 {
                f64::NAN
            } else {
                completed as f64 / finished as f64
            },
            mean_mpkpe: mpkpe.iter().sum::<f64>() / mpkpe.len() as f64,
            p99_mpkpe: nearest_rank(&mpkpe, 99.0),
            clip_fraction: diag.clip_fraction,
            approx_kl: diag.approx_kl,
            mean_mpjpe: batch.errors.iter().map(|e| e.joint).sum::<f64>() / batch.len() as f64,
            episodes: finished,
        };
        self.iteration += 1;
        Ok(log)
    }

    /// `iteration clip_id c error_ema probability` rows for the current sampler.
    pub fn sampler_snapshot(&self) -> String {
        let mut out = String::new();
        for (id, p) in self.sampler.probabilities() {
            let e = self.sampler.entry(id).expect("entry of listed clip");
            let _ = writeln!(
                out,
                "{}\t{}\t{:.9}\t{:.9}\t{:.9}",
                self.iteration, id, e.completion_level, e.error_ema, p
            );
        }
        out
    }
}

pub const SAMPLER_LOG_HEADER: &str = "iteration\tclip_id\tc\terror_ema\tprobability";

/// Result of a full teacher run.
pub struct TeacherRun {
    pub policy: MoePolicy,
    pub sampler: SamplerState,
    pub log: Vec<IterationLog>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train a teacher for `config.ppo.iterations` iterations. With `out_dir`,
/// writes `train_log.tsv`, `sampler_log.tsv`, periodic checkpoints under
/// `checkpoints/`, and the final `policy.ckpt` and `sampler.csv`. A
/// non-finite loss stops the run after saving the last good policy as
/// `policy_last_good.ckpt`.
pub fn train_teacher(
    dataset: Vec<MotionClip>,
    config: TrainConfig,
    seed: u64,
    workers: usize,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&IterationLog),
) -> Result<TeacherRun> {
    let iterations = config.ppo.iterations;
    let every = config.ppo.checkpoint_every;
    let sampler_every = config.ppo.sampler_log_every.max(1);
    let mut trainer = TeacherTrainer::new(dataset, config, seed, workers)?;
    let mut log = Vec::with_capacity(iterations);
    let mut train_log = format!("{TRAIN_LOG_HEADER}\n");
    let mut sampler_log = format!("{SAMPLER_LOG_HEADER}\n");
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
    }
    for it in 0..iterations {
        if it % sampler_every == 0 {
            sampler_log.push_str(&trainer.sampler_snapshot());
        }
        let last_good = trainer.policy.clone();
        let row = match trainer.iterate() {
            Ok(row) => row,
            Err(e @ (Error::NonFiniteLoss(_) | Error::NonFinite(_))) => {
                if let Some(dir) = out_dir {
                    last_good.save(dir.join("policy_last_good.ckpt"))?;
                    write(&dir.join("train_log.tsv"), &train_log)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        train_log.push_str(&row.row());
        train_log.push('\n');
        progress(&row);
        log.push(row);
        if let Some(dir) = out_dir {
            if every > 0 && (it + 1) % every == 0 {
                let ck = dir.join("checkpoints");
                trainer.policy.save(ck.join(format!("policy_{:06}.ckpt", it + 1)))?;
                trainer.sampler.save(ck.join(format!("sampler_{:06}.csv", it + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        write(&dir.join("train_log.tsv"), &train_log)?;
        write(&dir.join("sampler_log.tsv"), &sampler_log)?;
        trainer.policy.save(dir.join("policy.ckpt"))?;
        trainer.sampler.save(dir.join("sampler.csv"))?;
    }
    Ok(TeacherRun {
        policy: trainer.policy,
        sampler: trainer.sampler,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{generate_synthetic_dataset, DatasetSpec};
    use crate::skeleton::Skeleton;
    use proptest::prelude::*;

    #[test]
    fn gae_single_terminal_step() {
        let (a, r) = compute_gae(&[1.0], &[0.0], &[true], 5.0, 1.0, 1.0);
        assert_eq!((a[0], r[0]), (1.0, 1.0));
        let (a, _) = compute_gae(&[0.0; 4], &[0.0; 4], &[false; 4], 0.0, 0.99, 0.95);
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gae_matches_unrolled_sum() {
        let (g, l) = (0.9, 0.95);
        let (a, _) = compute_gae(&[1.0; 3], &[0.0; 3], &[false, false, true], 0.0, g, l);
        let gl = g * l;
        let expect = [1.0 + gl + gl * gl, 1.0 + gl, 1.0];
        for (x, y) in a.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_does_not_cross_episode_boundaries() {
        let (a, _) = compute_gae(&[0.0, 5.0], &[0.0, 0.0], &[true, false], 0.0, 0.9, 0.9);
        assert_eq!(a[0], 0.0);
    }

    proptest! {
        #[test]
        fn advantage_normalization(xs in prop::collection::vec(-100.0f64..100.0, 2..200)) {
            let mut a = xs.clone();
            prop_assume!(xs.iter().any(|x| (x - xs[0]).abs() > 1e-3));
            normalize_advantages(&mut a);
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((std - 1.0).abs() < 1e-6);
        }
    }

    fn tiny_train_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.policy = crate::nn::probe::tiny_config(2, 8);
        c.policy.history = 2;
        c.ppo.n_envs = 3;
        c.ppo.steps_per_env = 12;
        c.ppo.minibatch = 16;
        c.ppo.epochs = 2;
        c.ppo.iterations = 3;
        c
    }

    fn clips() -> Vec<MotionClip> {
        let mut spec = DatasetSpec::single("stand", 2);
        spec.duration = [0.3, 0.5];
        generate_synthetic_dataset(&spec, &Skeleton::biped(), &mut stream_rng(1, 0)).unwrap()
    }

    #[test]
    fn deterministic_and_accounted() {
        let run = |seed| {
            let mut t = TeacherTrainer::new(clips(), tiny_train_config(), seed, 1).unwrap();
            let mut rows = Vec::new();
            let mut dones = 0;
            for _ in 0..3 {
                let mut b = t.collect().unwrap();
                dones += b.dones.iter().filter(|d| **d).count();
                assert_eq!(b.len(), 36);
                t.update(&mut b).unwrap();
                rows.push(t.policy.store.flat());
            }
            assert_eq!(dones, t.episodes_reported);
            let total: f64 = t.sampler.probabilities().iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-12);
            rows
        };
        assert_eq!(run(5), run(5));
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut cfg = tiny_train_config();
        cfg.ppo.lr = 0.0;
        let mut t = TeacherTrainer::new(clips(), cfg, 2, 1).unwrap();
        let before = t.policy.store.clone();
        t.iterate().unwrap();
        t.iterate().unwrap();
        assert_eq!(t.policy.store, before);
    }

    #[test]
    fn unchanged_policy_gives_unit_ratio() {
        let cfg = tiny_train_config();
        let mut t = TeacherTrainer::new(clips(), cfg.clone(), 3, 1).unwrap();
        let b = t.collect().unwrap();
        let mut adv: Vec<f64> = (0..b.len()).map(|k| (k as f64).sin()).collect();
        normalize_advantages(&mut adv);
        let samples = PpoSamples {
            inputs: b.inputs.clone(),
            actions: b.actions.clone(),
            old_log_probs: b.log_probs.clone(),
            advantages: adv,
            value_targets: vec![0.0; b.len()],
        };
        let mut tape = Tape::new(&t.policy.store);
        let (_, diag) = ppo_loss(&mut tape, &t.policy, &samples, &cfg.ppo).unwrap();
        assert!(diag.policy_loss.abs() < 1e-9, "{diag:?}");
        assert!(diag.approx_kl.abs() < 1e-12);
        assert_eq!(diag.clip_fraction, 0.0);
    }
}
