//! Actuated character model: skeleton plus per-joint PD gains, torque limits
//! and geared-rotor armature.

use crate::error::{Error, Result};
use crate::skeleton::{Skeleton, N_JOINTS};

/// Joint-space inertia added by a geared rotor: `k² · I`.
pub fn effective_armature(gear_ratio: f64, rotor_inertia: f64) -> Result<f64> {
    if rotor_inertia < 0.0 {
        return Err(Error::NegativeInertia(rotor_inertia));
    }
    if gear_ratio <= 0.0 {
        return Err(Error::Config(format!("gear ratio must be positive, got {gear_ratio}")));
    }
    Ok(gear_ratio * gear_ratio * rotor_inertia)
}

/// Saturated PD torque for every joint. `strength` holds the `kp` scales
/// followed by the `kd` scales.
pub fn pd_torque(
    target: &[f64],
    q: &[f64],
    qd: &[f64],
    kp: &[f64],
    kd: &[f64],
    strength: &[f64],
    limit: &[f64],
    out: &mut [f64],
) {
    let n = target.len();
    debug_assert!(strength.len() == 2 * n);
    for j in 0..n {
        let tau = strength[j] * kp[j] * (target[j] - q[j]) - strength[n + j] * kd[j] * qd[j];
        out[j] = tau.clamp(-limit[j], limit[j]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharacterModel {
    pub skeleton: Skeleton,
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    pub torque_limit: Vec<f64>,
    pub gear_ratio: Vec<f64>,
    pub rotor_inertia: Vec<f64>,
}

impl Default for CharacterModel {
    fn default() -> Self {
        Self::biped()
    }
}

impl CharacterModel {
    pub fn biped() -> Self {
        // hip, knee, ankle for each leg
        let per_leg = |v: [f64; 3]| [v, v].concat();
        Self {
            skeleton: Skeleton::biped(),
            kp: per_leg([400.0, 500.0, 500.0]),
            kd: per_leg([15.0, 20.0, 25.0]),
            torque_limit: per_leg([150.0, 150.0, 120.0]),
            gear_ratio: per_leg([10.0, 10.0, 10.0]),
            rotor_inertia: per_leg([5e-4, 5e-4, 8e-4]),
        }
    }

    pub fn n_joints(&self) -> usize {
        self.kp.len()
    }

    pub fn armature(&self) -> Result<Vec<f64>> {
        self.gear_ratio
            .iter()
            .zip(&self.rotor_inertia)
            .map(|(&k, &i)| effective_armature(k, i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("kp", &self.kp),
            ("kd", &self.kd),
            ("torque_limit", &self.torque_limit),
            ("gear_ratio", &self.gear_ratio),
            ("rotor_inertia", &self.rotor_inertia),
        ] {
            if v.len() != N_JOINTS {
                return Err(Error::DimensionMismatch {
                    what: what.into(),
                    expected: N_JOINTS,
                    found: v.len(),
                });
            }
        }
        let positive = self.kp.iter().chain(&self.kd).chain(&self.torque_limit);
        if positive.copied().any(|x| !(x > 0.0)) {
            return Err(Error::Config("gains and torque limits must be positive".into()));
        }
        if self.skeleton.links.iter().any(|l| !(l.mass > 0.0 && l.inertia > 0.0)) {
            return Err(Error::Config("link masses and inertias must be positive".into()));
        }
        self.armature().map(|_| ())
    }
}
