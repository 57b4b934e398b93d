//! Tracking reward and episode termination.

use crate::config::KeyValues;
use crate::error::Result;
use crate::motion::MotionFrame;

use super::observe::Snapshot;

pub const N_REWARD_TERMS: usize = 10;
pub const REWARD_TERM_NAMES: [&str; N_REWARD_TERMS] = [
    "joint_pos",
    "joint_vel",
    "root_pose",
    "root_vel",
    "keybody",
    "alive",
    "foot_slip",
    "joint_vel_penalty",
    "joint_acc_penalty",
    "action_rate",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RewardWeights(pub [f64; N_REWARD_TERMS]);

impl Default for RewardWeights {
    fn default() -> Self {
        Self([1.0, 0.2, 1.0, 1.0, 1.0, 0.5, 0.1, 1e-4, 1e-7, 0.01])
    }
}

impl RewardWeights {
    /// Keys `reward.<term name>`.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        for (w, name) in self.0.iter_mut().zip(REWARD_TERM_NAMES) {
            kv.set(&format!("reward.{name}"), w)?;
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(a: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Reward terms before weighting; penalties are already negative.
pub fn reward_terms(
    snap: &Snapshot,
    target: &MotionFrame,
    target_joint_velocities: &[f64],
    action: &[f64],
    prev_action: &[f64],
) -> [f64; N_REWARD_TERMS] {
    let f = &snap.frame;
    let root_vel = |m: &MotionFrame| [m.base_lin_vel[0], m.base_lin_vel[2], m.base_ang_vel];
    let keybody_err: f64 = f
        .keybody_positions
        .iter()
        .zip(&target.keybody_positions)
        .map(|(p, r)| sq_dist(p, r))
        .sum();
    let pitch_err = target.base_pitch - f.base_pitch;
    let height_err = target.root_height - f.root_height;
    let slip = norm(
        snap.foot_velocities
            .iter()
            .zip(snap.contact)
            .flat_map(|(v, c)| if c { *v } else { [0.0; 2] }),
    );
    [
        (-sq_dist(&target.joint_positions, &f.joint_positions)).exp(),
        (-sq_dist(target_joint_velocities, &snap.joint_velocities)).exp(),
        (-pitch_err * pitch_err - height_err * height_err).exp(),
        (-sq_dist(&root_vel(target), &root_vel(f))).exp(),
        (-keybody_err).exp(),
        1.0,
        -slip,
        -norm(snap.joint_velocities.iter().copied()),
        -norm(snap.joint_accelerations.iter().copied()),
        -norm(action.iter().zip(prev_action).map(|(a, b)| a - b)),
    ]
}

/// Weighted total and the unweighted per-term breakdown.
pub fn compute_reward(
    snap: &Snapshot,
    target: &MotionFrame,
    target_joint_velocities: &[f64],
    action: &[f64],
    prev_action: &[f64],
    weights: &RewardWeights,
) -> (f64, [f64; N_REWARD_TERMS]) {
    let terms = reward_terms(snap, target, target_joint_velocities, action, prev_action);
    let total = terms.iter().zip(&weights.0).map(|(r, w)| r * w).sum();
    (total, terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeStatus {
    Running,
    Terminated,
    Completed,
}

impl EpisodeStatus {
    pub fn is_done(self) -> bool {
        self != EpisodeStatus::Running
    }
}

/// Largest heading-local keybody position error (m).
pub fn max_keybody_error(frame: &MotionFrame, target: &MotionFrame) -> f64 {
    frame
        .keybody_positions
        .iter()
        .zip(&target.keybody_positions)
        .map(|(p, r)| sq_dist(p, r).sqrt())
        .fold(0.0, f64::max)
}

/// Strict comparison against the threshold; a fall or excess error wins over
/// reaching the clip end on the same step.
pub fn check_termination(
    frame: &MotionFrame,
    target: &MotionFrame,
    threshold: f64,
    fall_height: f64,
    clip_exhausted: bool,
) -> EpisodeStatus {
    if max_keybody_error(frame, target) > threshold || frame.root_height < fall_height {
        EpisodeStatus::Terminated
    } else if clip_exhausted {
        EpisodeStatus::Completed
    } else {
        EpisodeStatus::Running
    }
}
