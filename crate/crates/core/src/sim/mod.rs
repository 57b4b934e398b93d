//! Planar biped simulation environment: dynamics, actuation, randomization,
//! observations, reward and termination.

pub mod dynamics;
pub mod env;
pub mod model;
pub mod observe;
pub mod randomize;
pub mod reward;

pub use dynamics::{ContactParams, PhysicsState, World};
pub use env::{Observation, StepResult, TrackingEnv};
pub use model::{effective_armature, pd_torque, CharacterModel};
pub use observe::{assemble_observations, ObservationLayout, Snapshot};
pub use randomize::{draw_randomization, Push, RandomizationConfig, RandomizationDraw};
pub use reward::{check_termination, compute_reward, EpisodeStatus, RewardWeights};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::skeleton::N_JOINTS;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub physics_hz: f64,
    pub control_hz: f64,
    pub n_joints: usize,
    pub n_keybodies: usize,
    pub randomization: RandomizationConfig,
    pub reward: RewardWeights,
    /// Falling below this fraction of the nominal root height ends the episode.
    pub fall_fraction: f64,
    /// Half-width of the uniform joint-angle noise at episode start (rad).
    pub init_noise: f64,
    /// Sample rate of the future goal window (Hz) and its length in frames.
    pub goal_rate: f64,
    pub window: usize,
    pub contact: ContactParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            physics_hz: 500.0,
            control_hz: 50.0,
            n_joints: N_JOINTS,
            n_keybodies: 3,
            randomization: RandomizationConfig::default(),
            reward: RewardWeights::default(),
            fall_fraction: 0.5,
            init_noise: 0.02,
            goal_rate: 10.0,
            window: 20,
            contact: ContactParams::default(),
        }
    }
}

impl EnvConfig {
    /// Deterministic evaluation setting: nominal dynamics, no pushes, no
    /// start noise.
    pub fn evaluation(&self) -> Self {
        Self {
            randomization: RandomizationConfig::disabled(),
            init_noise: 0.0,
            ..self.clone()
        }
    }

    pub fn substeps(&self) -> usize {
        (self.physics_hz / self.control_hz).round() as usize
    }

    pub fn control_dt(&self) -> f64 {
        1.0 / self.control_hz
    }

    pub fn layout(&self) -> ObservationLayout {
        ObservationLayout::new(self.n_joints, self.n_keybodies)
    }

    pub fn validate(&self) -> Result<()> {
        let ratio = self.physics_hz / self.control_hz;
        if !(self.control_hz > 0.0) || (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::Config(format!(
                "physics_hz ({}) must be a positive multiple of control_hz ({})",
                self.physics_hz, self.control_hz
            )));
        }
        if self.n_joints != N_JOINTS {
            return Err(Error::DimensionMismatch {
                what: "joint count".into(),
                expected: N_JOINTS,
                found: self.n_joints,
            });
        }
        if self.window == 0 || !(self.goal_rate > 0.0) {
            return Err(Error::Config("window and goal_rate must be positive".into()));
        }
        self.randomization.validate()
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set("physics_hz", &mut self.physics_hz)?;
        kv.set("control_hz", &mut self.control_hz)?;
        kv.set("J", &mut self.n_joints)?;
        kv.set("K", &mut self.n_keybodies)?;
        kv.set("fall_fraction", &mut self.fall_fraction)?;
        kv.set("init_noise", &mut self.init_noise)?;
        kv.set("goal_rate", &mut self.goal_rate)?;
        kv.set("window", &mut self.window)?;
        kv.set("contact.stiffness", &mut self.contact.stiffness)?;
        kv.set("contact.damping", &mut self.contact.damping)?;
        self.randomization.apply_kv(kv)?;
        self.reward.apply_kv(kv)?;
        self.validate()
    }
}
