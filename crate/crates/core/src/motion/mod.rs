//! Motion clips, per-frame tracking goals and clip preprocessing.

mod io;
mod synth;

pub use io::{
    load_clip_file, load_dataset, read_index, save_clip_file, save_dataset, write_index, ClipSchema, INDEX_FILE,
};
pub use synth::{generate_synthetic_dataset, Category, DatasetSpec};

use rand::Rng;

use crate::error::{Error, Result};
use crate::skeleton::Vec3;

/// Tracking target for one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFrame {
    pub joint_positions: Vec<f64>,
    /// World frame; the planar character keeps the lateral (y) component at zero.
    pub base_lin_vel: Vec3,
    /// Pitch rate (rad/s).
    pub base_ang_vel: f64,
    pub base_pitch: f64,
    pub root_height: f64,
    pub keybody_positions: Vec<Vec3>,
    pub heading: f64,
}

impl MotionFrame {
    pub fn n_joints(&self) -> usize {
        self.joint_positions.len()
    }

    pub fn n_keybodies(&self) -> usize {
        self.keybody_positions.len()
    }

    pub fn is_finite(&self) -> bool {
        self.joint_positions.iter().all(|v| v.is_finite())
            && self.base_lin_vel.iter().all(|v| v.is_finite())
            && self.base_ang_vel.is_finite()
            && self.base_pitch.is_finite()
            && self.root_height.is_finite()
            && self.keybody_positions.iter().flatten().all(|v| v.is_finite())
            && self.heading.is_finite()
    }

    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        let mix = |x: f64, y: f64| x + (y - x) * w;
        let mix3 = |x: &Vec3, y: &Vec3| [mix(x[0], y[0]), mix(x[1], y[1]), mix(x[2], y[2])];
        Self {
            joint_positions: a
                .joint_positions
                .iter()
                .zip(&b.joint_positions)
                .map(|(&x, &y)| mix(x, y))
                .collect(),
            base_lin_vel: mix3(&a.base_lin_vel, &b.base_lin_vel),
            base_ang_vel: mix(a.base_ang_vel, b.base_ang_vel),
            base_pitch: mix(a.base_pitch, b.base_pitch),
            root_height: mix(a.root_height, b.root_height),
            keybody_positions: a
                .keybody_positions
                .iter()
                .zip(&b.keybody_positions)
                .map(|(x, y)| mix3(x, y))
                .collect(),
            heading: mix(a.heading, b.heading),
        }
    }

    /// Number of values written by [`MotionFrame::write_features`].
    pub fn feature_dim(n_joints: usize, n_keybodies: usize) -> usize {
        n_joints + 5 + 3 * n_keybodies
    }

    /// Flat goal features: joints, planar base velocity (x, z), pitch rate,
    /// pitch, root height, keybodies.
    pub fn write_features(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.joint_positions);
        out.push(self.base_lin_vel[0]);
        out.push(self.base_lin_vel[2]);
        out.push(self.base_ang_vel);
        out.push(self.base_pitch);
        out.push(self.root_height);
        for p in &self.keybody_positions {
            out.extend_from_slice(p);
        }
    }
}

#[inline]
fn yaw(v: &Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

/// Express keybodies relative to `root_position` and rotate keybodies and base
/// velocity by `-heading` about the vertical axis.
pub fn to_heading_local(frame: &MotionFrame, root_position: &Vec3, heading: f64) -> MotionFrame {
    let mut out = frame.clone();
    for (dst, p) in out.keybody_positions.iter_mut().zip(&frame.keybody_positions) {
        let rel = [
            p[0] - root_position[0],
            p[1] - root_position[1],
            p[2] - root_position[2],
        ];
        *dst = yaw(&rel, -heading);
    }
    out.base_lin_vel = yaw(&frame.base_lin_vel, -heading);
    out
}

/// Inverse of [`to_heading_local`].
pub fn from_heading_local(frame: &MotionFrame, root_position: &Vec3, heading: f64) -> MotionFrame {
    let mut out = frame.clone();
    for (dst, p) in out.keybody_positions.iter_mut().zip(&frame.keybody_positions) {
        let w = yaw(p, heading);
        *dst = [
            w[0] + root_position[0],
            w[1] + root_position[1],
            w[2] + root_position[2],
        ];
    }
    out.base_lin_vel = yaw(&frame.base_lin_vel, heading);
    out
}

/// Where a sub-clip came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpan {
    pub parent_id: String,
    pub start_time: f64,
    pub end_time: f64,
    pub start_frame: usize,
    /// Inclusive.
    pub end_frame: usize,
}

/// An immutable, timestamped sequence of tracking targets.
///
/// Alongside the frames the clip caches the integrated root trajectory and
/// finite-difference joint velocities, both derived from the frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    id: String,
    category: String,
    fps: f64,
    frames: Vec<MotionFrame>,
    source_span: Option<SourceSpan>,
    root_track: Vec<Vec3>,
    joint_velocities: Vec<Vec<f64>>,
}

impl MotionClip {
    /// Root horizontal position starts at the origin.
    pub fn new(
        id: impl Into<String>,
        category: impl Into<String>,
        fps: f64,
        frames: Vec<MotionFrame>,
    ) -> Result<Self> {
        Self::with_origin(id, category, fps, frames, [0.0, 0.0], None)
    }

    fn with_origin(
        id: impl Into<String>,
        category: impl Into<String>,
        fps: f64,
        frames: Vec<MotionFrame>,
        origin: [f64; 2],
        source_span: Option<SourceSpan>,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyClip);
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidSpec(format!("fps must be positive, got {fps}")));
        }
        let (j, k) = (frames[0].n_joints(), frames[0].n_keybodies());
        for (i, f) in frames.iter().enumerate() {
            if f.n_joints() != j {
                return Err(Error::DimensionMismatch {
                    what: format!("joints in frame {i}"),
                    expected: j,
                    found: f.n_joints(),
                });
            }
            if f.n_keybodies() != k {
                return Err(Error::DimensionMismatch {
                    what: format!("keybodies in frame {i}"),
                    expected: k,
                    found: f.n_keybodies(),
                });
            }
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("frame {i}")));
            }
            if f.root_height <= 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "frame {i}: root height {} must be positive",
                    f.root_height
                )));
            }
        }

        let dt = 1.0 / fps;
        let mut root_track = Vec::with_capacity(frames.len());
        let (mut x, mut y) = (origin[0], origin[1]);
        for (i, f) in frames.iter().enumerate() {
            if i > 0 {
                let prev = &frames[i - 1].base_lin_vel;
                x += 0.5 * (prev[0] + f.base_lin_vel[0]) * dt;
                y += 0.5 * (prev[1] + f.base_lin_vel[1]) * dt;
            }
            root_track.push([x, y, f.root_height]);
        }

        let n = frames.len();
        let joint_velocities = (0..n)
            .map(|i| {
                if n == 1 {
                    return vec![0.0; j];
                }
                let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
                let span = (b - a) as f64 * dt;
                frames[b]
                    .joint_positions
                    .iter()
                    .zip(&frames[a].joint_positions)
                    .map(|(qb, qa)| (qb - qa) / span)
                    .collect()
            })
            .collect();

        Ok(Self {
            id: id.into(),
            category: category.into(),
            fps,
            frames,
            source_span,
            root_track,
            joint_velocities,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> &[MotionFrame] {
        &self.frames
    }

    pub fn source_span(&self) -> Option<&SourceSpan> {
        self.source_span.as_ref()
    }

    /// Id of the clip this one was cut from, or its own id.
    pub fn parent_id(&self) -> &str {
        self.source_span
            .as_ref()
            .map_or(self.id.as_str(), |s| s.parent_id.as_str())
    }

    pub fn n_joints(&self) -> usize {
        self.frames[0].n_joints()
    }

    pub fn n_keybodies(&self) -> usize {
        self.frames[0].n_keybodies()
    }

    pub fn duration(&self) -> f64 {
        (self.frames.len() - 1) as f64 / self.fps
    }

    /// Integrated root position (x, y from the base velocity; z = root height).
    pub fn root_positions(&self) -> &[Vec3] {
        &self.root_track
    }

    /// Re-labelled copy with a new id and category.
    pub fn renamed(&self, id: impl Into<String>, category: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            category: category.into(),
            ..self.clone()
        }
    }

    /// Frames `start..=end` as a sub-clip.
    pub fn sub_clip(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end >= self.frames.len() {
            return Err(Error::InvalidSpec(format!(
                "sub-clip frames {start}..={end} outside 0..{}",
                self.frames.len()
            )));
        }
        let parent_id = self.parent_id().to_string();
        let offset = self.source_span.as_ref().map_or(0, |s| s.start_frame);
        let (gs, ge) = (offset + start, offset + end);
        let span = SourceSpan {
            parent_id: parent_id.clone(),
            start_time: gs as f64 / self.fps,
            end_time: ge as f64 / self.fps,
            start_frame: gs,
            end_frame: ge,
        };
        let origin = [self.root_track[start][0], self.root_track[start][1]];
        Self::with_origin(
            format!("{parent_id}@{gs}-{ge}"),
            self.category.clone(),
            self.fps,
            self.frames[start..=end].to_vec(),
            origin,
            Some(span),
        )
    }

    /// Position of `t` on the frame grid: index and blend weight towards the next frame.
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let duration = self.duration();
        if !(t >= -1e-9 && t <= duration + 1e-9) {
            return Err(Error::TimeOutOfRange { t, duration });
        }
        let f = (t * self.fps).max(0.0);
        let nearest = f.round();
        if (f - nearest).abs() < 1e-9 {
            return Ok(((nearest as usize).min(self.frames.len() - 1), 0.0));
        }
        let i = f.floor() as usize;
        if i + 1 >= self.frames.len() {
            return Ok((self.frames.len() - 1, 0.0));
        }
        Ok((i, f - i as f64))
    }

    /// World-frame target at `t`, linearly interpolated between frames.
    pub fn frame_at(&self, t: f64) -> Result<MotionFrame> {
        let (i, w) = self.locate(t)?;
        if w == 0.0 {
            return Ok(self.frames[i].clone());
        }
        Ok(MotionFrame::lerp(&self.frames[i], &self.frames[i + 1], w))
    }

    pub fn root_position_at(&self, t: f64) -> Result<Vec3> {
        let (i, w) = self.locate(t)?;
        if w == 0.0 {
            return Ok(self.root_track[i]);
        }
        let (a, b) = (&self.root_track[i], &self.root_track[i + 1]);
        Ok([
            a[0] + (b[0] - a[0]) * w,
            a[1] + (b[1] - a[1]) * w,
            a[2] + (b[2] - a[2]) * w,
        ])
    }

    pub fn joint_velocities_at(&self, t: f64) -> Result<Vec<f64>> {
        let (i, w) = self.locate(t)?;
        if w == 0.0 {
            return Ok(self.joint_velocities[i].clone());
        }
        Ok(self.joint_velocities[i]
            .iter()
            .zip(&self.joint_velocities[i + 1])
            .map(|(a, b)| a + (b - a) * w)
            .collect())
    }

    /// Heading-local target at `t`.
    pub fn local_frame_at(&self, t: f64) -> Result<MotionFrame> {
        let frame = self.frame_at(t)?;
        let root = self.root_position_at(t)?;
        Ok(to_heading_local(&frame, &root, frame.heading))
    }
}

/// What the policy is asked to track at one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingGoal {
    pub time: f64,
    /// Heading-local target at `time`.
    pub immediate: MotionFrame,
    /// Reference joint velocities at `time`.
    pub joint_velocities: Vec<f64>,
    /// `W` heading-local frames sampled at the goal rate starting at `time`,
    /// holding the final frame past the clip end.
    pub future_window: Vec<MotionFrame>,
}

impl TrackingGoal {
    pub fn window_features(&self, out: &mut Vec<f64>) {
        for f in &self.future_window {
            f.write_features(out);
        }
    }
}

pub fn goal_at(clip: &MotionClip, t: f64, goal_rate: f64, window: usize) -> Result<TrackingGoal> {
    let immediate = clip.local_frame_at(t)?;
    let joint_velocities = clip.joint_velocities_at(t)?;
    let duration = clip.duration();
    let mut future_window = Vec::with_capacity(window);
    for k in 0..window {
        let tk = t + k as f64 / goal_rate;
        if tk >= duration {
            // zero-order hold
            let last = clip.local_frame_at(duration)?;
            future_window.resize(window, last);
            break;
        }
        future_window.push(if k == 0 {
            immediate.clone()
        } else {
            clip.local_frame_at(tk)?
        });
    }
    Ok(TrackingGoal {
        time: t,
        immediate,
        joint_velocities,
        future_window,
    })
}

pub const DEFAULT_MAX_CLIP_LEN: f64 = 10.0;
pub const DEFAULT_MAX_CLIP_OFFSET: f64 = 2.0;

/// Frame indices at which a clip of `n_frames` is cut, including both ends.
///
/// The first cut sits at `offset` seconds; subsequent cuts are `max_len`
/// apart. Clips no longer than `max_len` are not cut.
pub fn clip_boundaries(n_frames: usize, fps: f64, max_len: f64, offset: f64) -> Vec<usize> {
    let last = n_frames - 1;
    let duration = last as f64 / fps;
    if duration <= max_len {
        return vec![0, last];
    }
    let stride = ((max_len * fps + 1e-9).floor() as usize).max(1);
    // The offset shifts the whole cut grid, so only its phase matters.
    let first = ((offset * fps).round() as usize % stride).min(last);
    let mut cuts = vec![0];
    if first > 0 {
        cuts.push(first);
    }
    let mut b = first + stride;
    while b < last {
        cuts.push(b);
        b += stride;
    }
    if *cuts.last().unwrap() != last {
        cuts.push(last);
    }
    cuts
}

/// Split a long clip into sub-clips of at most `max_len` seconds with a random
/// leading offset in `[0, max_offset]`.
pub fn random_clip<R: Rng + ?Sized>(
    clip: &MotionClip,
    max_len: f64,
    max_offset: f64,
    rng: &mut R,
) -> Result<Vec<MotionClip>> {
    if clip.frames.len() < 2 {
        return Err(Error::EmptyClip);
    }
    if clip.duration() <= max_len {
        return Ok(vec![clip.clone()]);
    }
    let offset = rng.random_range(0.0..=max_offset);
    split_at(clip, &clip_boundaries(clip.frames.len(), clip.fps, max_len, offset))
}

pub(crate) fn split_at(clip: &MotionClip, cuts: &[usize]) -> Result<Vec<MotionClip>> {
    cuts.windows(2)
        .map(|w| clip.sub_clip(w[0], w[1]))
        .collect()
}
