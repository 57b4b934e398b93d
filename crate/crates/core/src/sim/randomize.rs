//! Per-episode domain randomization.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::skeleton::Vec2;

#[derive(Debug, Clone, PartialEq)]
pub struct RandomizationConfig {
    /// Ground height offset (m).
    pub terrain_height: [f64; 2],
    /// Added to each gravity component (m/s²).
    pub gravity: [f64; 2],
    pub friction: [f64; 2],
    /// Torso mass change (kg).
    pub base_mass: [f64; 2],
    /// Torso centre-of-mass shift per axis (m).
    pub base_com: [f64; 2],
    /// Push speed (m/s).
    pub push_velocity: [f64; 2],
    /// Multiplier applied to every joint's `kp` and `kd` independently.
    pub motor_strength: [f64; 2],
    /// Action latency (s).
    pub action_delay: [f64; 2],
    pub pushes: bool,
    /// Mean time between pushes (s).
    pub push_interval: f64,
    /// Pushes are scheduled up to this time (s).
    pub push_horizon: f64,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            terrain_height: [0.0, 0.02],
            gravity: [-0.1, 0.1],
            friction: [0.1, 2.0],
            base_mass: [-3.0, 3.0],
            base_com: [-0.05, 0.05],
            push_velocity: [0.0, 1.0],
            motor_strength: [0.8, 1.2],
            action_delay: [0.0, 0.02],
            pushes: true,
            push_interval: 4.0,
            push_horizon: 60.0,
        }
    }
}

impl RandomizationConfig {
    /// Nominal dynamics: unit friction and strength, nothing else perturbed.
    pub fn disabled() -> Self {
        Self {
            terrain_height: [0.0; 2],
            gravity: [0.0; 2],
            friction: [1.0; 2],
            base_mass: [0.0; 2],
            base_com: [0.0; 2],
            push_velocity: [0.0; 2],
            motor_strength: [1.0; 2],
            action_delay: [0.0; 2],
            pushes: false,
            ..Self::default()
        }
    }

    fn ranges(&self) -> [(&'static str, [f64; 2]); 8] {
        [
            ("terrain_height", self.terrain_height),
            ("gravity", self.gravity),
            ("friction", self.friction),
            ("base_mass", self.base_mass),
            ("base_com", self.base_com),
            ("push_velocity", self.push_velocity),
            ("motor_strength", self.motor_strength),
            ("action_delay", self.action_delay),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in self.ranges() {
            if !(lo <= hi) {
                return Err(Error::InvertedRange {
                    name: name.into(),
                    lo,
                    hi,
                });
            }
        }
        if self.friction[0] < 0.0 || self.motor_strength[0] < 0.0 || self.action_delay[0] < 0.0 {
            return Err(Error::Config("friction, motor strength and delay must be non-negative".into()));
        }
        if self.pushes && !(self.push_interval > 0.0) {
            return Err(Error::Config("push_interval must be positive".into()));
        }
        Ok(())
    }

    /// Ranges are written `name=lo,hi`.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set_range("terrain_height", &mut self.terrain_height)?;
        kv.set_range("gravity", &mut self.gravity)?;
        kv.set_range("friction", &mut self.friction)?;
        kv.set_range("base_mass", &mut self.base_mass)?;
        kv.set_range("base_com", &mut self.base_com)?;
        kv.set_range("push_velocity", &mut self.push_velocity)?;
        kv.set_range("motor_strength", &mut self.motor_strength)?;
        kv.set_range("action_delay", &mut self.action_delay)?;
        kv.set("pushes", &mut self.pushes)?;
        kv.set("push_interval", &mut self.push_interval)?;
        kv.set("push_horizon", &mut self.push_horizon)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Push {
    pub time: f64,
    /// Instantaneous change of root velocity (x, z).
    pub velocity: Vec2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomizationDraw {
    pub terrain_height: f64,
    pub gravity: Vec2,
    pub friction: f64,
    pub base_mass: f64,
    pub base_com: Vec2,
    /// `kp` scales for every joint followed by `kd` scales.
    pub motor_strength: Vec<f64>,
    pub action_delay: f64,
    /// Sorted by time.
    pub pushes: Vec<Push>,
}

impl RandomizationDraw {
    pub fn nominal(n_joints: usize) -> Self {
        Self {
            terrain_height: 0.0,
            gravity: [0.0; 2],
            friction: 1.0,
            base_mass: 0.0,
            base_com: [0.0; 2],
            motor_strength: vec![1.0; 2 * n_joints],
            action_delay: 0.0,
            pushes: Vec::new(),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn draw_randomization<R: Rng + ?Sized>(
    config: &RandomizationConfig,
    n_joints: usize,
    rng: &mut R,
) -> Result<RandomizationDraw> {
    config.validate()?;
    let terrain_height = uniform(rng, config.terrain_height);
    let gravity = [uniform(rng, config.gravity), uniform(rng, config.gravity)];
    let friction = uniform(rng, config.friction);
    let base_mass = uniform(rng, config.base_mass);
    let base_com = [uniform(rng, config.base_com), uniform(rng, config.base_com)];
    let motor_strength = (0..2 * n_joints)
        .map(|_| uniform(rng, config.motor_strength))
        .collect();
    let action_delay = uniform(rng, config.action_delay);
    let mut pushes = Vec::new();
    if config.pushes {
        let gap = Exp::new(1.0 / config.push_interval)
            .map_err(|e| Error::Config(format!("push_interval: {e}")))?;
        let mut t = gap.sample(rng);
        while t < config.push_horizon {
            let speed = uniform(rng, config.push_velocity);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            pushes.push(Push {
                time: t,
                velocity: [sign * speed, 0.0],
            });
            t += gap.sample(rng);
        }
    }
    Ok(RandomizationDraw {
        terrain_height,
        gravity,
        friction,
        base_mass,
        base_com,
        motor_strength,
        action_delay,
        pushes,
    })
}
