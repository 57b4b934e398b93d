//! Completion-driven clip sampling and per-clip termination thresholds.
//!
//! Every clip carries a completion level `c ∈ [1, 10]` that starts at 10 and
//! shrinks by a factor 0.99 each time the clip is tracked to the end. The
//! level sets both how often the clip is drawn and how much tracking error is
//! tolerated before an episode on it is cut short.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::motion::{random_clip, split_at, MotionClip, DEFAULT_MAX_CLIP_LEN, DEFAULT_MAX_CLIP_OFFSET};

pub const LEVEL_MAX: f64 = 10.0;
pub const LEVEL_MIN: f64 = 1.0;
pub const LEVEL_DECAY: f64 = 0.99;
pub const THRESHOLD_MIN: f64 = 0.25;
pub const THRESHOLD_MAX: f64 = 0.6;
/// Error (m) at which a mastered clip regains full sampling weight.
pub const MASTERED_ERROR_SCALE: f64 = 0.15;
pub const MASTERED_EXPONENT: i32 = 5;

fn clamp_level(c: f64) -> f64 {
    if !(LEVEL_MIN..=LEVEL_MAX).contains(&c) {
        log::warn!("completion level {c} outside [1, 10]; clamping");
        return c.clamp(LEVEL_MIN, LEVEL_MAX);
    }
    c
}

/// Tracking error (m) above which an episode is terminated, interpolating
/// geometrically from 0.25 at `c = 1` to 0.6 at `c = 10`.
pub fn termination_threshold(c: f64) -> f64 {
    let c = clamp_level(c);
    THRESHOLD_MIN * ((c - 1.0) / (LEVEL_MAX - 1.0) * (THRESHOLD_MAX / THRESHOLD_MIN).ln()).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerEntry {
    pub clip_id: String,
    pub completion_level: f64,
    /// Moving average of the per-episode maximum keybody error (m).
    pub error_ema: f64,
    pub episodes_seen: u64,
}

impl SamplerEntry {
    pub fn new(clip_id: impl Into<String>) -> Self {
        Self {
            clip_id: clip_id.into(),
            completion_level: LEVEL_MAX,
            error_ema: 0.0,
            episodes_seen: 0,
        }
    }

    pub fn threshold(&self) -> f64 {
        termination_threshold(self.completion_level)
    }

    /// Fold in one finished episode. The level only ever decays; the error
    /// average is updated on every episode, completed or not.
    pub fn on_episode_end(&mut self, completed: bool, max_keybody_error: f64, alpha: f64) {
        debug_assert!(max_keybody_error >= 0.0);
        if completed {
            self.completion_level = (self.completion_level * LEVEL_DECAY).max(LEVEL_MIN);
        }
        self.error_ema = if self.episodes_seen == 0 {
            max_keybody_error
        } else {
            (1.0 - alpha) * self.error_ema + alpha * max_keybody_error
        };
        self.episodes_seen += 1;
    }
}

/// Unnormalized sampling weight of a clip.
pub fn sampling_level(entry: &SamplerEntry) -> f64 {
    let c = entry.completion_level;
    if c > LEVEL_MIN {
        c
    } else {
        (entry.error_ema / MASTERED_ERROR_SCALE)
            .min(1.0)
            .powi(MASTERED_EXPONENT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Probability proportional to the sampling level.
    Adaptive,
    /// Every clip equally likely; levels and thresholds are still tracked.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub mode: SamplingMode,
    pub ema_alpha: f64,
    /// Training iterations between re-clipping passes; 0 disables.
    pub reclip_period: u64,
    pub max_clip_len: f64,
    pub max_clip_offset: f64,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(format!("unknown sampling mode `{other}`"))),
        }
    }
}

impl SamplerConfig {
    /// Keys: `sampler.mode` (`adaptive` or `uniform`), `sampler.ema_alpha`,
    /// `sampler.reclip_period`, `sampler.max_clip_len`, `sampler.max_clip_offset`.
    pub fn apply_kv(&mut self, kv: &crate::config::KeyValues) -> Result<()> {
        kv.set("sampler.mode", &mut self.mode)?;
        kv.set("sampler.ema_alpha", &mut self.ema_alpha)?;
        kv.set("sampler.reclip_period", &mut self.reclip_period)?;
        kv.set("sampler.max_clip_len", &mut self.max_clip_len)?;
        kv.set("sampler.max_clip_offset", &mut self.max_clip_offset)?;
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(Error::Config("sampler.ema_alpha must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Adaptive,
            ema_alpha: 0.2,
            reclip_period: 500,
            max_clip_len: DEFAULT_MAX_CLIP_LEN,
            max_clip_offset: DEFAULT_MAX_CLIP_OFFSET,
        }
    }
}

/// Clip statistics for the active clip set. Owned by a single writer.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub config: SamplerConfig,
    pub entries: BTreeMap<String, SamplerEntry>,
    pub iteration: u64,
}

impl SamplerState {
    pub fn new<'a>(config: SamplerConfig, clip_ids: impl IntoIterator<Item = &'a str>) -> Self {
        let entries = clip_ids
            .into_iter()
            .map(|id| (id.to_string(), SamplerEntry::new(id)))
            .collect();
        Self {
            config,
            entries,
            iteration: 0,
        }
    }

    pub fn entry(&self, clip_id: &str) -> Option<&SamplerEntry> {
        self.entries.get(clip_id)
    }

    pub fn threshold(&self, clip_id: &str) -> f64 {
        self.entries
            .get(clip_id)
            .map_or(THRESHOLD_MAX, SamplerEntry::threshold)
    }

    fn weights(&self) -> Vec<f64> {
        match self.config.mode {
            SamplingMode::Uniform => vec![1.0; self.entries.len()],
            SamplingMode::Adaptive => {
                let w: Vec<f64> = self.entries.values().map(sampling_level).collect();
                if w.iter().sum::<f64>() > 0.0 {
                    w
                } else {
                    vec![1.0; w.len()]
                }
            }
        }
    }

    /// Normalized sampling probabilities in clip-id order.
    pub fn probabilities(&self) -> Vec<(&str, f64)> {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        self.entries
            .keys()
            .zip(w)
            .map(|(k, w)| (k.as_str(), w / total))
            .collect()
    }

    pub fn sample_clip<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&str> {
        if self.entries.is_empty() {
            return Err(Error::EmptySampler);
        }
        let w = self.weights();
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = self.entries.len() - 1;
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                chosen = i;
                break;
            }
            u -= wi;
        }
        Ok(self.entries.keys().nth(chosen).map(String::as_str).unwrap())
    }

    pub fn on_episode_end(&mut self, clip_id: &str, completed: bool, max_keybody_error: f64) {
        let alpha = self.config.ema_alpha;
        if let Some(e) = self.entries.get_mut(clip_id) {
            e.on_episode_end(completed, max_keybody_error, alpha);
        }
    }

    pub fn reclip_due(&self) -> bool {
        self.config.reclip_period > 0 && self.iteration > 0 && self.iteration.is_multiple_of(self.config.reclip_period)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,c,error_ema,episodes_seen\n");
        for e in self.entries.values() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.clip_id, e.completion_level, e.error_ema, e.episodes_seen
            );
        }
        out
    }

    pub fn from_csv(text: &str, config: SamplerConfig, iteration: u64) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::MalformedHeader(format!("sampler checkpoint line {}: `{line}`", n + 1));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad());
            }
            let entry = SamplerEntry {
                clip_id: cols[0].to_string(),
                completion_level: cols[1].parse().map_err(|_| bad())?,
                error_ema: cols[2].parse().map_err(|_| bad())?,
                episodes_seen: cols[3].parse().map_err(|_| bad())?,
            };
            entry.completion_level.is_finite().then_some(()).ok_or_else(bad)?;
            entries.insert(entry.clip_id.clone(), entry);
        }
        Ok(Self {
            config,
            entries,
            iteration,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, config: SamplerConfig) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, config, 0)
    }
}

/// The parent clips of a dataset and their current sub-clips.
#[derive(Debug, Clone)]
pub struct ClipPool {
    parents: Vec<MotionClip>,
    clips: Vec<MotionClip>,
    index: HashMap<String, usize>,
}

impl ClipPool {
    /// Cut every parent longer than `max_len` with a fresh random offset.
    pub fn new<R: Rng + ?Sized>(
        parents: Vec<MotionClip>,
        max_len: f64,
        max_offset: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut clips = Vec::new();
        for p in &parents {
            clips.extend(random_clip(p, max_len, max_offset, rng)?);
        }
        Ok(Self::from_parts(parents, clips))
    }

    fn from_parts(parents: Vec<MotionClip>, clips: Vec<MotionClip>) -> Self {
        let index = clips
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id().to_string(), i))
            .collect();
        Self {
            parents,
            clips,
            index,
        }
    }

    pub fn parents(&self) -> &[MotionClip] {
        &self.parents
    }

    pub fn clips(&self) -> &[MotionClip] {
        &self.clips
    }

    pub fn get(&self, id: &str) -> Option<&MotionClip> {
        self.index.get(id).map(|&i| &self.clips[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.clips.iter().map(MotionClip::id)
    }

    pub fn total_duration(&self) -> f64 {
        self.clips.iter().map(MotionClip::duration).sum()
    }
}

fn frame_span(clip: &MotionClip) -> (usize, usize) {
    clip.source_span()
        .map_or((0, clip.frames().len() - 1), |s| (s.start_frame, s.end_frame))
}

/// Re-cut every long parent with fresh offsets. New sub-clips inherit the
/// level and error average of the old sub-clip they overlap most in time.
pub fn periodic_reclip<R: Rng + ?Sized>(
    state: &SamplerState,
    pool: &ClipPool,
    rng: &mut R,
) -> Result<(ClipPool, SamplerState)> {
    let cfg = &state.config;
    let mut clips = Vec::with_capacity(pool.clips.len());
    let mut entries = BTreeMap::new();
    for parent in &pool.parents {
        if parent.duration() <= cfg.max_clip_len {
            if let Some(e) = state.entries.get(parent.id()) {
                entries.insert(parent.id().to_string(), e.clone());
            }
            clips.push(parent.clone());
            continue;
        }
        let offset = rng.random_range(0.0..=cfg.max_clip_offset);
        let cuts = crate::motion::clip_boundaries(parent.frames().len(), parent.fps(), cfg.max_clip_len, offset);
        let old: Vec<&MotionClip> = pool
            .clips
            .iter()
            .filter(|c| c.parent_id() == parent.id())
            .collect();
        for sub in split_at(parent, &cuts)? {
            let (s0, s1) = frame_span(&sub);
            let best = old
                .iter()
                .map(|o| {
                    let (o0, o1) = frame_span(o);
                    (o, s1.min(o1) as i64 - s0.max(o0) as i64)
                })
                .fold(None::<(&&MotionClip, i64)>, |acc, cur| match acc {
                    Some(a) if a.1 >= cur.1 => Some(a),
                    _ => Some(cur),
                });
            let mut entry = best
                .and_then(|(o, _)| state.entries.get(o.id()))
                .cloned()
                .unwrap_or_else(|| SamplerEntry::new(sub.id()));
            entry.clip_id = sub.id().to_string();
            entries.insert(entry.clip_id.clone(), entry);
            clips.push(sub);
        }
    }
    let new_state = SamplerState {
        config: state.config.clone(),
        entries,
        iteration: state.iteration,
    };
    Ok((ClipPool::from_parts(pool.parents.clone(), clips), new_state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(c: f64, err: f64) -> SamplerEntry {
        SamplerEntry {
            clip_id: "x".into(),
            completion_level: c,
            error_ema: err,
            episodes_seen: 1,
        }
    }

    #[test]
    fn threshold_endpoints_and_midpoint() {
        assert!((termination_threshold(1.0) - 0.25).abs() < 1e-12);
        assert!((termination_threshold(10.0) - 0.6).abs() < 1e-12);
        // geometric midpoint 0.25 * sqrt(0.6 / 0.25)
        assert!((termination_threshold(5.5) - 0.387_298_334_620_741_7).abs() < 1e-12);
        assert_eq!(termination_threshold(0.0), termination_threshold(1.0));
        assert_eq!(termination_threshold(42.0), termination_threshold(10.0));
    }

    #[test]
    fn sampling_level_branches() {
        assert_eq!(sampling_level(&entry(3.0, 0.0)), 3.0);
        assert!((sampling_level(&entry(1.0, 0.15)) - 1.0).abs() < 1e-15);
        assert!((sampling_level(&entry(1.0, 0.075)) - 0.03125).abs() < 1e-15);
        assert_eq!(sampling_level(&entry(1.0, 0.9)), 1.0);
    }

    #[test]
    fn decay_rule() {
        let mut e = SamplerEntry::new("a");
        e.on_episode_end(true, 0.1, 0.2);
        assert!((e.completion_level - 9.9).abs() < 1e-12);
        let mut e = entry(1.0001, 0.0);
        e.on_episode_end(true, 0.1, 0.2);
        assert_eq!(e.completion_level, 1.0);
        let mut e = entry(5.0, 0.1);
        e.on_episode_end(false, 0.5, 0.2);
        assert_eq!(e.completion_level, 5.0);
        assert!((e.error_ema - (0.8 * 0.1 + 0.2 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn completions_to_floor() {
        let mut e = SamplerEntry::new("a");
        let mut n = 0;
        while e.completion_level > 1.0 {
            e.on_episode_end(true, 0.0, 0.2);
            n += 1;
        }
        assert_eq!(n, 230);
    }

    fn frequencies(state: &SamplerState, draws: usize) -> BTreeMap<String, f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = BTreeMap::new();
        for _ in 0..draws {
            *counts.entry(state.sample_clip(&mut rng).unwrap().to_string()).or_insert(0.0) += 1.0;
        }
        counts.values_mut().for_each(|v| *v /= draws as f64);
        counts
    }

    #[test]
    fn sampling_frequencies() {
        let mut s = SamplerState::new(SamplerConfig::default(), ["a", "b"]);
        s.entries.get_mut("a").unwrap().completion_level = 2.0;
        s.entries.get_mut("b").unwrap().completion_level = 2.0;
        let f = frequencies(&s, 100_000);
        assert!((f["a"] - 0.5).abs() < 0.02);
        s.entries.get_mut("a").unwrap().completion_level = 9.0;
        s.entries.get_mut("b").unwrap().completion_level = 1.0;
        s.entries.get_mut("b").unwrap().error_ema = 0.15;
        let f = frequencies(&s, 100_000);
        assert!((f["a"] - 0.9).abs() < 0.02 && (f["b"] - 0.1).abs() < 0.02);

        let single = SamplerState::new(SamplerConfig::default(), ["only"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| single.sample_clip(&mut rng).unwrap() == "only"));

        let empty = SamplerState::new(SamplerConfig::default(), std::iter::empty());
        assert!(matches!(empty.sample_clip(&mut rng), Err(Error::EmptySampler)));
    }

    #[test]
    fn all_zero_levels_fall_back_to_uniform() {
        let mut s = SamplerState::new(SamplerConfig::default(), ["a", "b", "c"]);
        for e in s.entries.values_mut() {
            e.completion_level = 1.0;
            e.error_ema = 0.0;
        }
        assert!(s.probabilities().iter().all(|(_, p)| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn checkpoint_reload_is_bit_exact() {
        let mut s = SamplerState::new(SamplerConfig::default(), ["a", "b"]);
        s.on_episode_end("a", true, 0.123_456_789_012_345_6);
        s.on_episode_end("a", false, 0.1 / 3.0);
        let back = SamplerState::from_csv(&s.to_csv(), s.config.clone(), 0).unwrap();
        assert_eq!(back.entries, s.entries);
        assert_eq!(back.to_csv(), s.to_csv());
    }

    fn long_clip(seconds: f64) -> MotionClip {
        use crate::motion::MotionFrame;
        let fps = 50.0;
        let n = (seconds * fps) as usize + 1;
        let frame = MotionFrame {
            joint_positions: vec![0.0],
            base_lin_vel: [0.0; 3],
            base_ang_vel: 0.0,
            base_pitch: 0.0,
            root_height: 0.9,
            keybody_positions: vec![[0.0; 3]],
            heading: 0.0,
        };
        MotionClip::new(format!("p{seconds}"), "walk", fps, vec![frame; n]).unwrap()
    }

    #[test]
    fn reclip_short_dataset_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = ClipPool::new(vec![long_clip(5.0), long_clip(8.0)], 10.0, 2.0, &mut rng).unwrap();
        let mut state = SamplerState::new(SamplerConfig::default(), pool.ids());
        state.on_episode_end("p5", true, 0.1);
        let (new_pool, new_state) = periodic_reclip(&state, &pool, &mut rng).unwrap();
        assert_eq!(new_state, state);
        assert_eq!(new_pool.clips(), pool.clips());
    }

    #[test]
    fn reclip_preserves_coverage_and_inherits_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool = ClipPool::new(vec![long_clip(25.0)], 10.0, 2.0, &mut rng).unwrap();
        let mut state = SamplerState::new(SamplerConfig::default(), pool.ids());
        for e in state.entries.values_mut() {
            e.completion_level = 7.0;
        }
        let before: Vec<String> = pool.ids().map(str::to_string).collect();
        let (new_pool, new_state) = periodic_reclip(&state, &pool, &mut rng).unwrap();
        let after: Vec<String> = new_pool.ids().map(str::to_string).collect();
        assert_ne!(before, after);
        assert!((new_pool.total_duration() - 25.0).abs() < 1e-9);
        assert!(new_state.entries.values().all(|e| e.completion_level == 7.0));
        assert_eq!(new_state.entries.len(), new_pool.clips().len());
    }

    #[test]
    fn inherits_from_greatest_overlap() {
        let parent = long_clip(25.0);
        // old cuts at 0, 2 s, 12 s, 22 s, 25 s
        let old = split_at(&parent, &[0, 100, 600, 1100, 1250]).unwrap();
        let pool = ClipPool::from_parts(vec![parent], old);
        let mut state = SamplerState::new(SamplerConfig::default(), pool.ids());
        for (i, e) in state.entries.values_mut().enumerate() {
            e.completion_level = 2.0 + i as f64;
        }
        let level_of = |id: &str| state.entries[id].completion_level;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (new_pool, new_state) = periodic_reclip(&state, &pool, &mut rng).unwrap();
        for sub in new_pool.clips() {
            let (s0, s1) = frame_span(sub);
            let (best, _) = pool
                .clips()
                .iter()
                .map(|o| {
                    let (o0, o1) = frame_span(o);
                    (o.id(), s1.min(o1) as i64 - s0.max(o0) as i64)
                })
                .max_by_key(|&(_, ov)| ov)
                .unwrap();
            assert_eq!(new_state.entries[sub.id()].completion_level, level_of(best));
        }
    }

    proptest! {
        #[test]
        fn threshold_monotone_and_bounded(a in 1.0f64..10.0, b in 1.0f64..10.0) {
            let (ta, tb) = (termination_threshold(a), termination_threshold(b));
            prop_assert!((0.25 - 1e-12..=0.6 + 1e-12).contains(&ta));
            if a < b { prop_assert!(ta < tb); }
        }

        #[test]
        fn probabilities_normalized_after_any_events(
            events in proptest::collection::vec((0usize..4, any::<bool>(), 0.0f64..1.0), 0..300)
        ) {
            let ids = ["a", "b", "c", "d"];
            let mut s = SamplerState::new(SamplerConfig::default(), ids);
            for (i, done, err) in events {
                s.on_episode_end(ids[i], done, err);
                let e = &s.entries[ids[i]];
                prop_assert!((1.0..=10.0).contains(&e.completion_level) && e.error_ema >= 0.0);
                prop_assert!(sampling_level(e) <= 10.0);
            }
            let total: f64 = s.probabilities().iter().map(|(_, p)| p).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
