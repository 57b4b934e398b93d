//! Kinematic snapshots of the simulated character and observation assembly.

use crate::motion::{to_heading_local, MotionFrame, TrackingGoal};
use crate::skeleton::{lift, Vec2, N_DOF};

use super::dynamics::{PhysicsState, World};
use super::randomize::RandomizationDraw;

/// Everything the reward, termination and observation code needs about the
/// character at the end of a control step.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Heading-local pose in the clip-frame layout; keybodies relative to root.
    pub frame: MotionFrame,
    pub joint_velocities: Vec<f64>,
    pub joint_accelerations: Vec<f64>,
    /// World root position (x, 0, z).
    pub root: [f64; 3],
    /// Sole-centre velocity of each foot (x, z).
    pub foot_velocities: [Vec2; 2],
    pub contact: [bool; 2],
}

impl Snapshot {
    pub fn capture(world: &World, s: &PhysicsState, heading: f64, joint_accelerations: Vec<f64>) -> Self {
        let pos: &[f64; N_DOF] = &s.pos;
        let sk = &world.skeleton;
        let keybody_positions = sk.keybody_positions([pos[0], pos[1]], pos[2], &pos[3..]);
        let root = [pos[0], 0.0, pos[1]];
        let world_frame = MotionFrame {
            joint_positions: s.q().to_vec(),
            base_lin_vel: lift([s.vel[0], s.vel[1]]),
            base_ang_vel: s.vel[2],
            base_pitch: pos[2],
            root_height: pos[1] - world.ground,
            keybody_positions,
            heading,
        };
        let frame = to_heading_local(&world_frame, &root, heading);
        let mut foot_velocities = [[0.0; 2]; 2];
        for (foot, kb) in sk.keybodies.iter().take(2).enumerate() {
            foot_velocities[foot] = world.point_velocity(pos, &s.vel, kb.link, kb.local);
        }
        Self {
            frame,
            joint_velocities: s.qd().to_vec(),
            joint_accelerations,
            root,
            foot_velocities,
            contact: world.foot_contacts(s),
        }
    }
}

/// Sizes of the observation blocks for `J` joints and `K` keybodies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservationLayout {
    pub n_joints: usize,
    pub n_keybodies: usize,
}

pub const OBSERVATION_SCHEMA_VERSION: u32 = 1;
/// Torso mass change, centre-of-mass shift (x, z, padding), friction, terrain.
pub const MASS_PARAM_SLOTS: usize = 6;

impl ObservationLayout {
    pub fn new(n_joints: usize, n_keybodies: usize) -> Self {
        Self {
            n_joints,
            n_keybodies,
        }
    }

    /// Proprioception: pitch rate, pitch, q, q̇, last action.
    pub fn proprio_dim(&self) -> usize {
        2 + 3 * self.n_joints
    }

    /// Privileged: root velocity, root height, keybodies, contacts, mass
    /// parameters, motor strength.
    pub fn privileged_dim(&self) -> usize {
        2 + 1 + 3 * self.n_keybodies + 2 + MASS_PARAM_SLOTS + 2 * self.n_joints
    }

    /// Per-frame goal features.
    pub fn goal_dim(&self) -> usize {
        MotionFrame::feature_dim(self.n_joints, self.n_keybodies)
    }
}

/// Proprioceptive and privileged observation vectors.
pub fn assemble_observations(
    snap: &Snapshot,
    last_action: &[f64],
    draw: &RandomizationDraw,
) -> (Vec<f64>, Vec<f64>) {
    let f = &snap.frame;
    let mut o = Vec::with_capacity(2 + 3 * f.joint_positions.len());
    o.push(f.base_ang_vel);
    o.push(f.base_pitch);
    o.extend_from_slice(&f.joint_positions);
    o.extend_from_slice(&snap.joint_velocities);
    o.extend_from_slice(last_action);

    let mut e = Vec::new();
    e.push(f.base_lin_vel[0]);
    e.push(f.base_lin_vel[2]);
    e.push(f.root_height);
    for p in &f.keybody_positions {
        e.extend_from_slice(p);
    }
    e.extend(snap.contact.iter().map(|&c| if c { 1.0 } else { 0.0 }));
    e.extend_from_slice(&[
        draw.base_mass,
        draw.base_com[0],
        draw.base_com[1],
        0.0,
        draw.friction,
        draw.terrain_height,
    ]);
    e.extend_from_slice(&draw.motor_strength);
    (o, e)
}

/// Goal features of the immediate target frame.
pub fn immediate_goal(goal: &TrackingGoal) -> Vec<f64> {
    let mut g = Vec::new();
    goal.immediate.write_features(&mut g);
    g
}
