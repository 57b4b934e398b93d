//! Procedural motion families for desk-scale experiments.
//!
//! Every clip is generated from joint-space trajectories of the planar biped;
//! root height keeps the lowest sole point on the ground and forward velocity
//! keeps the stance foot from sliding, so the targets are kinematically
//! consistent with the simulated character.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{MotionClip, MotionFrame};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::skeleton::{Skeleton, N_JOINTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Stand,
    Sway,
    Walk,
    Kick,
    Crouch,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Stand,
        Category::Sway,
        Category::Walk,
        Category::Kick,
        Category::Crouch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Stand => "stand",
            Category::Sway => "sway",
            Category::Walk => "walk",
            Category::Kick => "kick",
            Category::Crouch => "crouch",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownCategory(s.to_string()))
    }
}

/// Requested dataset composition.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    /// Category proportions; must sum to 1.
    pub mix: Vec<(Category, f64)>,
    pub n_clips: usize,
    pub fps: f64,
    /// Clip duration range in seconds.
    pub duration: [f64; 2],
    /// Per-category amplitude multiplier (default 1).
    pub intensity: Vec<(Category, f64)>,
}

impl DatasetSpec {
    pub fn new(mix: Vec<(Category, f64)>, n_clips: usize) -> Self {
        Self {
            mix,
            n_clips,
            fps: 50.0,
            duration: [4.0, 14.0],
            intensity: Vec::new(),
        }
    }

    /// All clips from one category; panics on an unknown name.
    pub fn single(category: &str, n_clips: usize) -> Self {
        Self::new(vec![(category.parse().expect("known category"), 1.0)], n_clips)
    }

    /// Parse `n_clips=`, `fps=`, `duration=lo,hi`, `intensity.<category>=`
    /// and `<category>=<proportion>` lines.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut spec = Self::new(Vec::new(), 0);
        kv.set("n_clips", &mut spec.n_clips)?;
        kv.set("fps", &mut spec.fps)?;
        kv.set_range("duration", &mut spec.duration)?;
        let keys: Vec<String> = kv.keys().map(str::to_string).collect();
        for key in keys {
            if matches!(key.as_str(), "n_clips" | "fps" | "duration") {
                continue;
            }
            if let Some(cat) = key.strip_prefix("intensity.") {
                let value = kv.get::<f64>(&key)?.unwrap_or(1.0);
                spec.intensity.push((cat.parse()?, value));
            } else {
                let cat: Category = key.parse()?;
                spec.mix.push((cat, kv.get::<f64>(&key)?.unwrap_or(0.0)));
            }
        }
        spec.mix.sort_by_key(|(c, _)| *c);
        Ok(spec)
    }

    fn intensity_of(&self, cat: Category) -> f64 {
        self.intensity
            .iter()
            .find(|(c, _)| *c == cat)
            .map_or(1.0, |(_, v)| *v)
    }

    /// Clip count per category by the largest-remainder rule.
    pub fn counts(&self) -> Result<Vec<(Category, usize)>> {
        if self.mix.is_empty() {
            return Err(Error::InvalidSpec("no categories".into()));
        }
        let total: f64 = self.mix.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 || self.mix.iter().any(|(_, p)| *p < 0.0) {
            return Err(Error::InvalidSpec(format!(
                "category proportions must be non-negative and sum to 1, got {total}"
            )));
        }
        let n = self.n_clips as f64;
        let mut counts: Vec<(Category, usize, f64)> = self
            .mix
            .iter()
            .map(|&(c, p)| {
                let exact = p * n;
                // guard against 0.9 * 100 = 89.99999999999999
                let floor = (exact + 1e-9).floor();
                (c, floor as usize, exact - floor)
            })
            .collect();
        let assigned: usize = counts.iter().map(|c| c.1).sum();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| counts[b].2.total_cmp(&counts[a].2).then(a.cmp(&b)));
        for &i in order.iter().take(self.n_clips.saturating_sub(assigned)) {
            counts[i].1 += 1;
        }
        Ok(counts.into_iter().map(|(c, k, _)| (c, k)).collect())
    }
}

/// Joint-space trajectory of one clip.
#[derive(Debug, Clone, Copy)]
struct Family {
    category: Category,
    amp: f64,
    freq: f64,
    phase: f64,
    aux: f64,
}

impl Family {
    fn sample<R: Rng + ?Sized>(category: Category, intensity: f64, rng: &mut R) -> Self {
        let (amp, freq, aux) = match category {
            Category::Stand => (rng.random_range(0.0..0.03), rng.random_range(0.1..0.3), 0.0),
            Category::Sway => (
                rng.random_range(0.05..0.15),
                rng.random_range(0.25..0.5),
                rng.random_range(0.3..0.6),
            ),
            Category::Walk => (
                rng.random_range(0.12..0.25),
                rng.random_range(0.5..0.8),
                rng.random_range(0.3..0.5),
            ),
            Category::Kick => (
                rng.random_range(0.4..0.8),
                rng.random_range(0.35..0.5),
                rng.random_range(0.5..0.8),
            ),
            Category::Crouch => (
                rng.random_range(0.4..0.9),
                rng.random_range(0.2..0.35),
                rng.random_range(0.4..0.7),
            ),
        };
        Self {
            category,
            amp: amp * intensity,
            freq,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            aux,
        }
    }

    /// Root pitch and joint angles at `t`. Joint order: left hip, knee,
    /// ankle, right hip, knee, ankle. Knee flexion is negative.
    fn pose(&self, t: f64) -> (f64, [f64; N_JOINTS]) {
        use std::f64::consts::{PI, TAU};
        let w = TAU * self.freq;
        let flat = |pitch: f64, hip: f64, knee: f64| [hip, knee, -(pitch + hip + knee)];
        let (pitch, left, right) = match self.category {
            Category::Stand => {
                let s = self.amp * (w * t + self.phase).sin();
                let pitch = 0.5 * s;
                let leg = flat(pitch, 0.05 + s, -0.1 - s);
                (pitch, leg, leg)
            }
            Category::Sway => {
                let s = (w * t + self.phase).sin();
                let pitch = -self.aux * self.amp * s;
                let hip = 0.05 + self.amp * s;
                let knee = -0.1 - 0.5 * self.amp * (1.0 + s);
                let leg = flat(pitch, hip, knee);
                (pitch, leg, leg)
            }
            Category::Walk => {
                let ph = w * t + self.phase;
                let pitch = -0.05;
                let swing = |p: f64| {
                    let c = p.cos().max(0.0);
                    -0.05 - 2.0 * self.aux * self.amp * c * c
                };
                let l_hip = self.amp * ph.sin();
                let r_hip = self.amp * (ph + PI).sin();
                (
                    pitch,
                    flat(pitch, l_hip, swing(ph)),
                    flat(pitch, r_hip, swing(ph + PI)),
                )
            }
            Category::Kick => {
                // one kick per period, occupying the first 40 % of it
                let period = 1.0 / self.freq;
                let u = ((t + self.phase / w) / period).fract() / 0.4;
                let b = if u < 1.0 { (PI * u).sin().powi(2) } else { 0.0 };
                let pitch = 0.25 * self.amp * b;
                let stance = flat(pitch, 0.05, -0.1);
                let hip = 0.05 + self.amp * b;
                let knee = -0.1 - self.aux * 4.0 * (b - b * b).max(0.0);
                (pitch, stance, [hip, knee, -(pitch + hip + knee) + 0.2 * b])
            }
            Category::Crouch => {
                let c = 0.5 * (1.0 - (w * t + self.phase).cos());
                let knee = -0.1 - self.amp * c;
                let hip = 0.05 + self.aux * self.amp * c;
                let pitch = -0.3 * self.amp * c;
                let leg = flat(pitch, hip, knee);
                (pitch, leg, leg)
            }
        };
        let mut q = [0.0; N_JOINTS];
        q[..3].copy_from_slice(&left);
        q[3..].copy_from_slice(&right);
        (pitch, q)
    }
}

fn synthesize(
    id: String,
    family: &Family,
    skeleton: &Skeleton,
    fps: f64,
    n_frames: usize,
) -> Result<MotionClip> {
    let dt = 1.0 / fps;
    let poses: Vec<(f64, [f64; N_JOINTS])> = (0..n_frames).map(|i| family.pose(i as f64 * dt)).collect();
    let heights: Vec<f64> = poses
        .iter()
        .map(|(p, q)| skeleton.grounded_root_height(*p, q))
        .collect();

    // Foot x relative to the root, per frame, and which foot is lower.
    let feet = [skeleton.keybodies[0].clone(), skeleton.keybodies[1].clone()];
    let rel: Vec<[[f64; 2]; 2]> = poses
        .iter()
        .map(|(p, q)| {
            let f = skeleton.frames([0.0, 0.0], *p, q);
            [
                f.point(feet[0].link, feet[0].local),
                f.point(feet[1].link, feet[1].local),
            ]
        })
        .collect();

    let central = |i: usize, get: &dyn Fn(usize) -> f64| -> f64 {
        if n_frames == 1 {
            return 0.0;
        }
        let (a, b) = (i.saturating_sub(1), (i + 1).min(n_frames - 1));
        (get(b) - get(a)) / ((b - a) as f64 * dt)
    };

    let vx: Vec<f64> = (0..n_frames)
        .map(|i| {
            let (zl, zr) = (rel[i][0][1], rel[i][1][1]);
            let weights = if (zl - zr).abs() < 1e-3 {
                [0.5, 0.5]
            } else if zl < zr {
                [1.0, 0.0]
            } else {
                [0.0, 1.0]
            };
            let foot_speed: f64 = (0..2)
                .map(|k| weights[k] * central(i, &|j| rel[j][k][0]))
                .sum();
            -foot_speed
        })
        .collect();

    let mut x = 0.0;
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        if i > 0 {
            x += 0.5 * (vx[i - 1] + vx[i]) * dt;
        }
        let (pitch, q) = poses[i];
        frames.push(MotionFrame {
            joint_positions: q.to_vec(),
            base_lin_vel: [vx[i], 0.0, central(i, &|j| heights[j])],
            base_ang_vel: central(i, &|j| poses[j].0),
            base_pitch: pitch,
            root_height: heights[i],
            keybody_positions: skeleton.keybody_positions([x, heights[i]], pitch, &q),
            heading: 0.0,
        });
    }
    MotionClip::new(id, family.category.name(), fps, frames)
}

/// Generate `spec.n_clips` clips; counts per category follow
/// [`DatasetSpec::counts`]. Deterministic for a given rng state.
pub fn generate_synthetic_dataset<R: Rng + ?Sized>(
    spec: &DatasetSpec,
    skeleton: &Skeleton,
    rng: &mut R,
) -> Result<Vec<MotionClip>> {
    let counts = spec.counts()?;
    if !(spec.duration[0] > 0.0 && spec.duration[0] <= spec.duration[1]) {
        return Err(Error::InvalidSpec(format!(
            "duration range [{}, {}] is invalid",
            spec.duration[0], spec.duration[1]
        )));
    }
    let mut clips = Vec::with_capacity(spec.n_clips);
    for (cat, count) in counts {
        for _ in 0..count {
            let family = Family::sample(cat, spec.intensity_of(cat), rng);
            let seconds = rng.random_range(spec.duration[0]..=spec.duration[1]);
            let n_frames = (seconds * spec.fps).round() as usize + 1;
            let id = format!("{}_{:04}", cat, clips.len());
            clips.push(synthesize(id, &family, skeleton, spec.fps, n_frames)?);
        }
    }
    Ok(clips)
}
