//! One tracking episode on one clip: reference-state initialization, delayed
//! PD actuation at the control rate, pushes, reward and termination.
//!
//! The simulated plane is the clip's heading-local frame, so the character
//! always faces +x and its heading is zero.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::motion::{goal_at, MotionClip, MotionFrame, TrackingGoal};
use crate::skeleton::N_DOF;

use super::dynamics::{PhysicsState, World};
use super::model::CharacterModel;
use super::observe::{assemble_observations, Snapshot};
use super::randomize::{draw_randomization, RandomizationDraw};
use super::reward::{check_termination, compute_reward, max_keybody_error, EpisodeStatus, N_REWARD_TERMS};
use super::EnvConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub terms: [f64; N_REWARD_TERMS],
    pub status: EpisodeStatus,
    /// Largest keybody error at the end of this step (m).
    pub keybody_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub proprio: Vec<f64>,
    pub privileged: Vec<f64>,
    pub goal: TrackingGoal,
}

#[derive(Debug, Clone)]
pub struct TrackingEnv {
    config: EnvConfig,
    model: CharacterModel,
    clip: Arc<MotionClip>,
    draw: RandomizationDraw,
    world: World,
    phys: PhysicsState,
    snapshot: Snapshot,
    steps: usize,
    episode_steps: usize,
    substeps_done: u64,
    delay_substeps: u64,
    pending: VecDeque<(u64, Vec<f64>)>,
    target: Vec<f64>,
    last_action: Vec<f64>,
    next_push: usize,
    threshold: f64,
    max_error: f64,
    status: EpisodeStatus,
}

impl TrackingEnv {
    pub fn new<R: Rng + ?Sized>(
        config: EnvConfig,
        model: CharacterModel,
        clip: Arc<MotionClip>,
        threshold: f64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let draw = draw_randomization(&config.randomization, config.n_joints, rng)?;
        Self::with_draw(config, model, clip, threshold, draw, rng)
    }

    /// Start an episode with an explicit randomization draw.
    pub fn with_draw<R: Rng + ?Sized>(
        config: EnvConfig,
        model: CharacterModel,
        clip: Arc<MotionClip>,
        threshold: f64,
        draw: RandomizationDraw,
        rng: &mut R,
    ) -> Result<Self> {
        if clip.n_joints() != config.n_joints || clip.n_keybodies() != config.n_keybodies {
            return Err(Error::SchemaMismatch(format!(
                "clip `{}` has J={} K={}, environment expects J={} K={}",
                clip.id(),
                clip.n_joints(),
                clip.n_keybodies(),
                config.n_joints,
                config.n_keybodies
            )));
        }
        let world = World::new(&model, &draw, config.contact)?;
        let start = clip.local_frame_at(0.0)?;
        let start_qd = clip.joint_velocities_at(0.0)?;
        let mut pos = [0.0; N_DOF];
        let mut vel = [0.0; N_DOF];
        pos[1] = start.root_height + world.ground;
        pos[2] = start.base_pitch;
        vel[0] = start.base_lin_vel[0];
        vel[1] = start.base_lin_vel[2];
        vel[2] = start.base_ang_vel;
        for j in 0..config.n_joints {
            let noise = if config.init_noise > 0.0 {
                rng.random_range(-config.init_noise..=config.init_noise)
            } else {
                0.0
            };
            pos[3 + j] = start.joint_positions[j] + noise;
            vel[3 + j] = start_qd[j];
        }
        let phys = world.state_at_rest(pos, vel)?;
        let snapshot = Snapshot::capture(&world, &phys, 0.0, vec![0.0; config.n_joints]);
        let dt = config.control_dt();
        let episode_steps = ((clip.duration() / dt) - 1e-9).ceil().max(1.0) as usize;
        let delay_substeps = (draw.action_delay * config.physics_hz).round() as u64;
        let max_error = max_keybody_error(&snapshot.frame, &start);
        Ok(Self {
            target: start.joint_positions.clone(),
            last_action: start.joint_positions.clone(),
            config,
            model,
            clip,
            draw,
            world,
            phys,
            snapshot,
            steps: 0,
            episode_steps,
            substeps_done: 0,
            delay_substeps,
            pending: VecDeque::new(),
            next_push: 0,
            threshold,
            max_error,
            status: EpisodeStatus::Running,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn model(&self) -> &CharacterModel {
        &self.model
    }

    pub fn clip(&self) -> &Arc<MotionClip> {
        &self.clip
    }

    pub fn draw(&self) -> &RandomizationDraw {
        &self.draw
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn physics(&self) -> &PhysicsState {
        &self.phys
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn status(&self) -> EpisodeStatus {
        self.status
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn episode_steps(&self) -> usize {
        self.episode_steps
    }

    /// Largest keybody error seen so far in the episode.
    pub fn max_error(&self) -> f64 {
        self.max_error
    }

    pub fn last_action(&self) -> &[f64] {
        &self.last_action
    }

    /// Time of the current state along the clip.
    pub fn time(&self) -> f64 {
        (self.steps as f64 * self.config.control_dt()).min(self.clip.duration())
    }

    pub fn reference_frame(&self) -> Result<MotionFrame> {
        self.clip.local_frame_at(self.time())
    }

    pub fn goal(&self) -> Result<TrackingGoal> {
        goal_at(&self.clip, self.time(), self.config.goal_rate, self.config.window)
    }

    pub fn observe(&self) -> Result<Observation> {
        let (proprio, privileged) = assemble_observations(&self.snapshot, &self.last_action, &self.draw);
        Ok(Observation {
            proprio,
            privileged,
            goal: self.goal()?,
        })
    }

    /// Apply one control action (joint position targets).
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if action.len() != self.config.n_joints {
            return Err(Error::DimensionMismatch {
                what: "action".into(),
                expected: self.config.n_joints,
                found: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("action".into()));
        }
        self.pending
            .push_back((self.substeps_done + self.delay_substeps, action.to_vec()));
        let qd_before = self.phys.qd().to_vec();
        let h = 1.0 / self.config.physics_hz;
        for _ in 0..self.config.substeps() {
            while self.pending.front().is_some_and(|(at, _)| *at <= self.substeps_done) {
                self.target = self.pending.pop_front().unwrap().1;
            }
            let now = self.substeps_done as f64 * h;
            while let Some(push) = self.draw.pushes.get(self.next_push).filter(|p| p.time <= now) {
                self.phys.vel[0] += push.velocity[0];
                self.phys.vel[1] += push.velocity[1];
                self.next_push += 1;
            }
            self.world.substep(&mut self.phys, Some(&self.target), h)?;
            self.substeps_done += 1;
        }
        self.steps += 1;

        let dt = self.config.control_dt();
        let qdd = self
            .phys
            .qd()
            .iter()
            .zip(&qd_before)
            .map(|(a, b)| (a - b) / dt)
            .collect();
        self.snapshot = Snapshot::capture(&self.world, &self.phys, 0.0, qdd);
        let t = self.time();
        let target = self.clip.local_frame_at(t)?;
        let target_qd = self.clip.joint_velocities_at(t)?;
        let (reward, terms) = compute_reward(
            &self.snapshot,
            &target,
            &target_qd,
            action,
            &self.last_action,
            &self.config.reward,
        );
        let keybody_error = max_keybody_error(&self.snapshot.frame, &target);
        self.max_error = self.max_error.max(keybody_error);
        let fall_height = self.config.fall_fraction * self.model.skeleton.nominal_root_height;
        self.status = check_termination(
            &self.snapshot.frame,
            &target,
            self.threshold,
            fall_height,
            self.steps >= self.episode_steps,
        );
        self.last_action.copy_from_slice(action);
        Ok(StepResult {
            reward,
            terms,
            status: self.status,
            keybody_error,
        })
    }

    /// Index of the physics sub-step that will run next.
    pub fn substeps_done(&self) -> u64 {
        self.substeps_done
    }

    /// PD target currently driving the joints.
    pub fn active_target(&self) -> &[f64] {
        &self.target
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{generate_synthetic_dataset, DatasetSpec};
    use crate::sim::randomize::RandomizationConfig;
    use crate::skeleton::Skeleton;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(cat: &str, seed: u64) -> Arc<MotionClip> {
        let spec = DatasetSpec::single(cat, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arc::new(
            generate_synthetic_dataset(&spec, &Skeleton::biped(), &mut rng)
                .unwrap()
                .remove(0),
        )
    }

    fn quiet() -> EnvConfig {
        EnvConfig::default().evaluation()
    }

    #[test]
    fn playback_completes_standing_clip() {
        let c = clip("stand", 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut env = TrackingEnv::new(quiet(), CharacterModel::biped(), c.clone(), 0.6, &mut rng).unwrap();
        let mut n = 0;
        loop {
            let obs = env.observe().unwrap();
            let r = env.step(&obs.goal.immediate.joint_positions.clone()).unwrap();
            n += 1;
            if r.status.is_done() {
                assert_eq!(r.status, EpisodeStatus::Completed);
                break;
            }
        }
        assert_eq!(n, env.episode_steps());
        assert!(env.max_error() < 0.1, "{}", env.max_error());
    }

    #[test]
    fn delayed_action_reaches_joints_on_eleventh_substep() {
        let c = clip("stand", 2);
        let mut draw = RandomizationDraw::nominal(6);
        draw.action_delay = 0.02;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut env = TrackingEnv::with_draw(quiet(), CharacterModel::biped(), c, 0.6, draw, &mut rng).unwrap();
        let start = env.active_target().to_vec();
        let new = vec![0.1; 6];
        env.step(&new).unwrap();
        assert_eq!(env.substeps_done(), 10);
        // ten sub-steps ran with the old target
        assert_eq!(env.active_target(), &start[..]);
        env.step(&new).unwrap();
        assert_eq!(env.active_target(), &new[..]);
    }

    #[test]
    fn identical_seeds_identical_steps() {
        let c = clip("walk", 3);
        let cfg = EnvConfig {
            randomization: RandomizationConfig::default(),
            ..EnvConfig::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut env = TrackingEnv::new(cfg.clone(), CharacterModel::biped(), c.clone(), 0.6, &mut rng).unwrap();
            let mut out = Vec::new();
            for _ in 0..20 {
                let a = env.observe().unwrap().goal.immediate.joint_positions;
                out.push(env.step(&a).unwrap().reward.to_bits());
            }
            (out, env.physics().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let c = clip("stand", 1);
        let cfg = EnvConfig {
            n_keybodies: 4,
            ..quiet()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            TrackingEnv::new(cfg, CharacterModel::biped(), c, 0.6, &mut rng),
            Err(Error::SchemaMismatch(_))
        ));
    }
}
