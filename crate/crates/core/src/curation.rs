//! Dataset curation in two passes: physical-plausibility rules over the raw
//! frames, then a completion check under a preliminary controller.

use std::fmt;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::eval::{evaluate_clip, Controller};
use crate::motion::MotionClip;
use crate::sim::{CharacterModel, EnvConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RuleLimits {
    /// Largest admissible |base pitch| (rad).
    pub pitch_max: f64,
    /// Root height bounds as fractions of the nominal standing height.
    pub height_min: f64,
    pub height_max: f64,
    pub nominal_height: f64,
    /// Largest admissible |joint velocity| (rad/s).
    pub joint_vel_max: f64,
}

impl Default for RuleLimits {
    fn default() -> Self {
        Self {
            pitch_max: 1.2,
            height_min: 0.3,
            height_max: 1.5,
            nominal_height: crate::skeleton::Skeleton::biped().nominal_root_height,
            joint_vel_max: 25.0,
        }
    }
}

impl RuleLimits {
    pub fn validate(&self) -> Result<()> {
        if self.height_min > self.height_max {
            return Err(Error::InvertedRange {
                name: "height".into(),
                lo: self.height_min,
                hi: self.height_max,
            });
        }
        if !(self.pitch_max > 0.0 && self.joint_vel_max > 0.0 && self.nominal_height > 0.0) {
            return Err(Error::Config("rule limits must be positive".into()));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set("pitch_max", &mut self.pitch_max)?;
        kv.set("height_min", &mut self.height_min)?;
        kv.set("height_max", &mut self.height_max)?;
        kv.set("nominal_height", &mut self.nominal_height)?;
        kv.set("joint_vel_max", &mut self.joint_vel_max)?;
        self.validate()
    }

    /// Limits from a `key=value` rules file; the completion keys are
    /// returned alongside.
    pub fn parse_rules(text: &str) -> Result<(Self, CompletionParams)> {
        let kv = KeyValues::parse(text)?;
        let mut limits = Self::default();
        limits.apply_kv(&kv)?;
        let mut completion = CompletionParams::default();
        completion.apply_kv(&kv)?;
        kv.reject_unknown()?;
        Ok((limits, completion))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionParams {
    pub episodes_per_clip: usize,
    pub min_completion_rate: f64,
    /// Termination threshold used in every curation episode.
    pub threshold: f64,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            episodes_per_clip: 10,
            min_completion_rate: 0.5,
            threshold: crate::sampler::THRESHOLD_MAX,
        }
    }
}

impl CompletionParams {
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set("episodes_per_clip", &mut self.episodes_per_clip)?;
        kv.set("min_completion_rate", &mut self.min_completion_rate)?;
        kv.set("threshold", &mut self.threshold)?;
        if self.episodes_per_clip == 0 {
            return Err(Error::Config("episodes_per_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Pitch,
    Height,
    JointVelocity,
    Completion,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::Pitch => "pitch",
            Rule::Height => "height",
            Rule::JointVelocity => "joint_velocity",
            Rule::Completion => "completion",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub clip_id: String,
    pub rule: Rule,
    /// First offending frame for frame rules.
    pub frame: Option<usize>,
    /// Offending value (rad, m, rad/s, or completion rate).
    pub value: f64,
}

impl Rejection {
    /// Machine-readable reason, e.g. `pitch@12`.
    pub fn reason(&self) -> String {
        match self.frame {
            Some(i) => format!("{}@{i}", self.rule),
            None => self.rule.to_string(),
        }
    }
}

/// First rule violated by a clip, scanning frames in order.
pub fn check_clip(clip: &MotionClip, limits: &RuleLimits) -> Result<Option<Rejection>> {
    let lo = limits.height_min * limits.nominal_height;
    let hi = limits.height_max * limits.nominal_height;
    let reject = |rule, frame, value| {
        Some(Rejection {
            clip_id: clip.id().to_string(),
            rule,
            frame: Some(frame),
            value,
        })
    };
    for (i, frame) in clip.frames().iter().enumerate() {
        if frame.base_pitch.abs() > limits.pitch_max {
            return Ok(reject(Rule::Pitch, i, frame.base_pitch));
        }
        if frame.root_height < lo || frame.root_height > hi {
            return Ok(reject(Rule::Height, i, frame.root_height));
        }
        let qd = clip.joint_velocities_at((i as f64 / clip.fps()).min(clip.duration()))?;
        if let Some(v) = qd.iter().copied().find(|v| v.abs() > limits.joint_vel_max) {
            return Ok(reject(Rule::JointVelocity, i, v));
        }
    }
    Ok(None)
}

/// Split clips into those passing every frame rule and the rejections.
pub fn rule_filter(clips: &[MotionClip], limits: &RuleLimits) -> Result<(Vec<MotionClip>, Vec<Rejection>)> {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for clip in clips {
        match check_clip(clip, limits)? {
            Some(r) => rejected.push(r),
            None => kept.push(clip.clone()),
        }
    }
    Ok((kept, rejected))
}

/// Completion rate of every clip over `episodes_per_clip` episodes.
pub fn completion_rates<C: Controller>(
    clips: &[MotionClip],
    make_controller: impl Fn() -> C + Sync,
    env_config: &EnvConfig,
    model: &CharacterModel,
    params: &CompletionParams,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = params.episodes_per_clip;
    clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let clip = Arc::new(clip.clone());
            let mut controller = make_controller();
            let mut done = 0;
            for e in 0..n {
                let ep_seed = seed.wrapping_add((i * n + e) as u64);
                let eval = evaluate_clip(&mut controller, clip.clone(), env_config, model, params.threshold, ep_seed)?;
                done += usize::from(eval.completed);
            }
            Ok(done as f64 / n as f64)
        })
        .collect()
}

/// Keep clips whose completion rate reaches `min_completion_rate`.
pub fn completion_filter<C: Controller>(
    clips: &[MotionClip],
    make_controller: impl Fn() -> C + Sync,
    env_config: &EnvConfig,
    model: &CharacterModel,
    params: &CompletionParams,
    seed: u64,
) -> Result<(Vec<MotionClip>, Vec<Rejection>, Vec<f64>)> {
    let rates = completion_rates(clips, make_controller, env_config, model, params, seed)?;
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (clip, &rate) in clips.iter().zip(&rates) {
        if rate >= params.min_completion_rate {
            kept.push(clip.clone());
        } else {
            rejected.push(Rejection {
                clip_id: clip.id().to_string(),
                rule: Rule::Completion,
                frame: None,
                value: rate,
            });
        }
    }
    Ok((kept, rejected, rates))
}

/// `clip_id verdict reason completion_rate` rows in input order; `-` marks
/// an empty cell.
pub fn curation_report(clip_ids: &[&str], rejected: &[Rejection], rates: &[(String, f64)]) -> String {
    let mut out = String::from("clip_id\tverdict\treason\tcompletion_rate\n");
    for id in clip_ids {
        let rej = rejected.iter().find(|r| r.clip_id == *id);
        let rate = rates
            .iter()
            .find(|(c, _)| c == id)
            .map_or_else(|| "-".to_string(), |(_, r)| format!("{r:.6}"));
        let (verdict, reason) = match rej {
            Some(r) => ("rejected", r.reason()),
            None => ("kept", "-".to_string()),
        };
        let _ = writeln!(out, "{id}\t{verdict}\t{reason}\t{rate}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::PlaybackController;
    use crate::motion::{generate_synthetic_dataset, DatasetSpec};
    use crate::skeleton::Skeleton;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn walk_clips(n: usize) -> Vec<MotionClip> {
        let spec = DatasetSpec::single("walk", n);
        generate_synthetic_dataset(&spec, &Skeleton::biped(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn with_frame(clip: &MotionClip, i: usize, edit: impl Fn(&mut crate::motion::MotionFrame)) -> MotionClip {
        let mut frames = clip.frames().to_vec();
        edit(&mut frames[i]);
        MotionClip::new(clip.id(), clip.category(), clip.fps(), frames).unwrap()
    }

    #[test]
    fn walking_is_kept() {
        let clips = walk_clips(3);
        let (kept, rej) = rule_filter(&clips, &RuleLimits::default()).unwrap();
        assert_eq!(kept.len(), 3);
        assert!(rej.is_empty());
    }

    #[test]
    fn pitch_and_height_rejections() {
        let base = walk_clips(1).remove(0);
        let pitched = with_frame(&base, 7, |f| f.base_pitch = 1.6);
        let fallen = with_frame(&base, 4, |f| f.root_height = 0.05);
        let (kept, rej) = rule_filter(&[pitched, fallen], &RuleLimits::default()).unwrap();
        assert!(kept.is_empty());
        assert_eq!((rej[0].rule, rej[0].frame), (Rule::Pitch, Some(7)));
        assert_eq!(rej[0].reason(), "pitch@7");
        assert_eq!((rej[1].rule, rej[1].frame), (Rule::Height, Some(4)));
    }

    #[test]
    fn idempotent() {
        let mut clips = walk_clips(4);
        clips[1] = with_frame(&clips[1], 2, |f| f.base_pitch = -1.5);
        let limits = RuleLimits::default();
        let (kept, _) = rule_filter(&clips, &limits).unwrap();
        let (again, rej) = rule_filter(&kept, &limits).unwrap();
        assert_eq!(again, kept);
        assert!(rej.is_empty());
    }

    #[test]
    fn completion_threshold_extremes() {
        let clips = walk_clips(2);
        let env = EnvConfig::default().evaluation();
        let model = CharacterModel::biped();
        let mut params = CompletionParams {
            episodes_per_clip: 2,
            ..CompletionParams::default()
        };
        params.min_completion_rate = 0.0;
        let (kept, rej, _) = completion_filter(&clips, || PlaybackController, &env, &model, &params, 1).unwrap();
        assert_eq!((kept.len(), rej.len()), (2, 0));
        params.min_completion_rate = 1.01;
        let (kept, rej, _) = completion_filter(&clips, || PlaybackController, &env, &model, &params, 1).unwrap();
        assert_eq!((kept.len(), rej.len()), (0, 2));
        assert!(rej.iter().all(|r| r.rule == Rule::Completion && r.frame.is_none()));
    }

    #[test]
    fn rules_file() {
        let (l, c) = RuleLimits::parse_rules("pitch_max=1.0\nepisodes_per_clip=3\n").unwrap();
        assert_eq!((l.pitch_max, c.episodes_per_clip), (1.0, 3));
        assert!(RuleLimits::parse_rules("pitch=1").is_err());
        assert!(RuleLimits::parse_rules("height_min=2\nheight_max=1").is_err());
    }

    #[test]
    fn report_rows() {
        let rej = vec![Rejection {
            clip_id: "b".into(),
            rule: Rule::Height,
            frame: Some(3),
            value: 0.1,
        }];
        let text = curation_report(&["a", "b"], &rej, &[("a".into(), 1.0)]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "a\tkept\t-\t1.000000");
        assert_eq!(lines[2], "b\trejected\theight@3\t-");
    }
}
