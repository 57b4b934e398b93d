//! Tracking policies: the privileged mixture-of-experts teacher with its
//! critic, and the proprioceptive student.
//!
//! Both networks normalize their flat inputs with a running mean/std
//! estimate, encode the future goal window into a latent vector, and
//! optionally predict joint targets as offsets from the immediate reference
//! pose.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::sim::observe::OBSERVATION_SCHEMA_VERSION;
use crate::sim::{EnvConfig, Observation};

use super::checkpoint::Checkpoint;
use super::layers::{ConvSpec, Mlp, WindowEncoder};
use super::params::{round_f32, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub n_experts: usize,
    /// Hidden widths shared by experts, gating and critic.
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub convs: Vec<ConvSpec>,
    /// Predict offsets from the immediate reference joint angles.
    pub residual: bool,
    pub init_log_std: f64,
    pub student_hidden: Vec<usize>,
    /// Proprioceptive frames seen by the student, current one included.
    pub history: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            hidden: vec![128, 128],
            latent: 128,
            convs: vec![
                ConvSpec {
                    kernel: 4,
                    stride: 2,
                    channels: 32,
                },
                ConvSpec {
                    kernel: 3,
                    stride: 2,
                    channels: 32,
                },
            ],
            residual: true,
            init_log_std: -1.0,
            student_hidden: vec![256, 256],
            history: 21,
        }
    }
}

fn list_to_string(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::MalformedHeader(format!("bad list `{raw}`")))
}

fn convs_to_string(convs: &[ConvSpec]) -> String {
    convs
        .iter()
        .map(|c| format!("{}x{}x{}", c.kernel, c.stride, c.channels))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_convs(raw: &str) -> Result<Vec<ConvSpec>> {
    raw.split(',')
        .map(|c| {
            let v: Vec<usize> = c
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::MalformedHeader(format!("bad conv `{c}`")))?;
            match v[..] {
                [kernel, stride, channels] => Ok(ConvSpec {
                    kernel,
                    stride,
                    channels,
                }),
                _ => Err(Error::MalformedHeader(format!("bad conv `{c}`"))),
            }
        })
        .collect()
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.latent == 0 || self.history == 0 {
            return Err(Error::Config("n_experts, latent and history must be positive".into()));
        }
        if self.hidden.contains(&0) || self.student_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Keys: `policy.n_experts`, `policy.hidden`, `policy.latent`,
    /// `policy.conv` (`kernel x stride x channels` list), `policy.residual`,
    /// `policy.init_log_std`, `student.hidden`, `student.history`.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set("policy.n_experts", &mut self.n_experts)?;
        kv.set_list("policy.hidden", &mut self.hidden)?;
        kv.set("policy.latent", &mut self.latent)?;
        if let Some(raw) = kv.raw("policy.conv") {
            self.convs = parse_convs(raw).map_err(|e| Error::Config(e.to_string()))?;
        }
        kv.set("policy.residual", &mut self.residual)?;
        kv.set("policy.init_log_std", &mut self.init_log_std)?;
        kv.set_list("student.hidden", &mut self.student_hidden)?;
        kv.set("student.history", &mut self.history)?;
        self.validate()
    }

    fn write_meta(&self, ck: &mut Checkpoint) {
        ck.set_meta("n_experts", self.n_experts);
        ck.set_meta("hidden", list_to_string(&self.hidden));
        ck.set_meta("latent", self.latent);
        ck.set_meta("conv", convs_to_string(&self.convs));
        ck.set_meta("residual", self.residual);
        ck.set_meta("init_log_std", self.init_log_std);
        ck.set_meta("student_hidden", list_to_string(&self.student_hidden));
        ck.set_meta("history", self.history);
    }

    fn read_meta(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            n_experts: ck.require("n_experts")?,
            hidden: parse_list(&ck.require::<String>("hidden")?)?,
            latent: ck.require("latent")?,
            convs: parse_convs(&ck.require::<String>("conv")?)?,
            residual: ck.require("residual")?,
            init_log_std: ck.require("init_log_std")?,
            student_hidden: parse_list(&ck.require::<String>("student_hidden")?)?,
            history: ck.require("history")?,
        })
    }
}

/// Observation sizes a policy was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDims {
    pub joints: usize,
    pub keybodies: usize,
    pub proprio: usize,
    pub privileged: usize,
    /// Goal features per frame.
    pub features: usize,
    /// Frames in the future goal window.
    pub window: usize,
}

impl PolicyDims {
    pub fn from_env(env: &EnvConfig) -> Self {
        let layout = env.layout();
        Self {
            joints: env.n_joints,
            keybodies: env.n_keybodies,
            proprio: layout.proprio_dim(),
            privileged: layout.privileged_dim(),
            features: layout.goal_dim(),
            window: env.window,
        }
    }

    fn write_meta(&self, ck: &mut Checkpoint) {
        ck.set_meta("schema_version", OBSERVATION_SCHEMA_VERSION);
        ck.set_meta("joints", self.joints);
        ck.set_meta("keybodies", self.keybodies);
        ck.set_meta("proprio", self.proprio);
        ck.set_meta("privileged", self.privileged);
        ck.set_meta("features", self.features);
        ck.set_meta("window", self.window);
    }

    fn read_meta(ck: &Checkpoint) -> Result<Self> {
        let version: u32 = ck.require("schema_version")?;
        if version != OBSERVATION_SCHEMA_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint observation schema {version}, expected {OBSERVATION_SCHEMA_VERSION}"
            )));
        }
        Ok(Self {
            joints: ck.require("joints")?,
            keybodies: ck.require("keybodies")?,
            proprio: ck.require("proprio")?,
            privileged: ck.require("privileged")?,
            features: ck.require("features")?,
            window: ck.require("window")?,
        })
    }

    /// Error unless an environment produces observations of these sizes.
    pub fn check_env(&self, env: &EnvConfig) -> Result<()> {
        let other = Self::from_env(env);
        if *self != other {
            return Err(Error::SchemaMismatch(format!(
                "policy expects {self:?}, environment provides {other:?}"
            )));
        }
        Ok(())
    }
}

/// Running per-dimension mean and variance of network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

const NORM_MIN_STD: f64 = 1e-2;
const NORM_CLIP: f64 = 10.0;

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Merge the rows of `x` into the statistics.
    pub fn update(&mut self, x: &Tensor) {
        assert_eq!(x.cols, self.dim(), "normalizer width");
        if x.rows == 0 {
            return;
        }
        let m = x.rows as f64;
        let n = self.count as f64;
        let total = n + m;
        for c in 0..x.cols {
            let bm = (0..x.rows).map(|r| x.at(r, c)).sum::<f64>() / m;
            let bv = (0..x.rows).map(|r| (x.at(r, c) - bm).powi(2)).sum::<f64>() / m;
            let delta = bm - self.mean[c];
            let m2 = self.var[c] * n + bv * m + delta * delta * n * m / total;
            self.mean[c] = round_f32(self.mean[c] + delta * m / total);
            self.var[c] = round_f32(m2 / total);
        }
        self.count += x.rows as u64;
    }

    fn std(&self, c: usize) -> f64 {
        if self.count == 0 {
            1.0
        } else {
            self.var[c].sqrt().max(NORM_MIN_STD)
        }
    }

    fn offset(&self, c: usize) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.mean[c]
        }
    }

    /// Standardize a scalar of a one-dimensional normalizer, without clipping.
    pub fn normalize_scalar(&self, x: f64) -> f64 {
        (x - self.offset(0)) / self.std(0)
    }

    pub fn denormalize_scalar(&self, x: f64) -> f64 {
        x * self.std(0) + self.offset(0)
    }

    /// Standardize rows; an untouched normalizer is the identity.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        if self.count == 0 {
            return x.clone();
        }
        let mut out = x.clone();
        for r in 0..out.rows {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = ((*v - self.mean[c]) / self.std(c)).clamp(-NORM_CLIP, NORM_CLIP);
            }
        }
        out
    }

    fn write(&self, prefix: &str, ck: &mut Checkpoint) {
        ck.set_meta(&format!("{prefix}_count"), self.count);
        ck.tensors
            .push((format!("buffer.{prefix}.mean"), Tensor::row_vector(self.mean.clone())));
        ck.tensors
            .push((format!("buffer.{prefix}.var"), Tensor::row_vector(self.var.clone())));
    }

    fn read(prefix: &str, dim: usize, ck: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            ck.tensor(&format!("buffer.{prefix}.{name}"))
                .filter(|t| t.len() == dim)
                .map(|t| t.data.clone())
                .ok_or_else(|| Error::MalformedHeader(format!("missing or misshapen buffer.{prefix}.{name}")))
        };
        Ok(Self {
            mean: get("mean")?,
            var: get("var")?,
            count: ck.require(&format!("{prefix}_count"))?,
        })
    }
}

fn check_width(what: &str, t: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if t.shape() != (rows, cols) {
        return Err(Error::DimensionMismatch {
            what: what.into(),
            expected: rows * cols,
            found: t.len(),
        });
    }
    Ok(())
}

/// A batch of teacher inputs, one row per sample. `window` holds the `W × F`
/// goal window of each sample flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherInputs {
    pub proprio: Tensor,
    pub privileged: Tensor,
    pub goal: Tensor,
    pub window: Tensor,
}

fn goal_rows(obs: &Observation) -> (Vec<f64>, Vec<f64>) {
    let mut g = Vec::new();
    obs.goal.immediate.write_features(&mut g);
    let mut w = Vec::new();
    obs.goal.window_features(&mut w);
    (g, w)
}

impl TeacherInputs {
    pub fn from_observations<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> Self {
        let (mut o, mut e, mut g, mut w) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for ob in obs {
            let (gi, wi) = goal_rows(ob);
            o.push(ob.proprio.clone());
            e.push(ob.privileged.clone());
            g.push(gi);
            w.push(wi);
        }
        let width = |v: &Vec<Vec<f64>>| v.first().map_or(0, Vec::len);
        Self {
            proprio: Tensor::stack(width(&o), &o),
            privileged: Tensor::stack(width(&e), &e),
            goal: Tensor::stack(width(&g), &g),
            window: Tensor::stack(width(&w), &w),
        }
    }

    pub fn rows(&self) -> usize {
        self.proprio.rows
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            proprio: self.proprio.select_rows(idx),
            privileged: self.privileged.select_rows(idx),
            goal: self.goal.select_rows(idx),
            window: self.window.select_rows(idx),
        }
    }

    /// `[o, e, g]` side by side.
    pub fn flat(&self) -> Tensor {
        Tensor::hcat(&[&self.proprio, &self.privileged, &self.goal])
    }

    /// Stack batches vertically.
    pub fn concat(parts: &[TeacherInputs]) -> Self {
        let cat = |f: fn(&TeacherInputs) -> &Tensor| Tensor::vcat(&parts.iter().map(f).collect::<Vec<_>>());
        Self {
            proprio: cat(|p| &p.proprio),
            privileged: cat(|p| &p.privileged),
            goal: cat(|p| &p.goal),
            window: cat(|p| &p.window),
        }
    }

    fn check(&self, dims: &PolicyDims) -> Result<()> {
        let b = self.rows();
        check_width("proprioception", &self.proprio, b, dims.proprio)?;
        check_width("privileged observation", &self.privileged, b, dims.privileged)?;
        check_width("immediate goal", &self.goal, b, dims.features)?;
        check_width("goal window", &self.window, b, dims.window * dims.features)
    }
}

/// Tape handles for one teacher forward pass.
#[derive(Debug, Clone)]
pub struct MoeOutput {
    /// Combined mean action, `B × J`.
    pub mean: Var,
    /// Gating probabilities, `B × n`.
    pub gate: Var,
    /// Per-expert actions, each `B × J`.
    pub experts: Vec<Var>,
    /// Goal-window latent, `B × latent`.
    pub latent: Var,
    /// Critic output in return-normalized units, `B × 1`.
    pub value: Var,
}

/// Forward results detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeEval {
    pub mean: Tensor,
    pub gate: Tensor,
    pub experts: Vec<Tensor>,
    pub latent: Tensor,
    /// Critic value in return units.
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoePolicy {
    pub config: PolicyConfig,
    pub dims: PolicyDims,
    pub store: ParamStore,
    pub norm: RunningNorm,
    /// Return statistics; the critic predicts standardized returns.
    pub value_norm: RunningNorm,
    pub encoder: WindowEncoder,
    pub experts: Vec<Mlp>,
    pub gating: Mlp,
    pub critic: Mlp,
    pub log_std: ParamId,
}

fn trunk_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// Final action layers start ×0.01 smaller than the fan-in scale.
pub const ACTION_INIT_GAIN: f64 = 0.01;

impl MoePolicy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, dims: PolicyDims, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let encoder = WindowEncoder::new(
            &mut store,
            "encoder",
            dims.window,
            dims.features,
            &config.convs,
            config.latent,
            rng,
        )?;
        let input = dims.proprio + dims.privileged + dims.features + config.latent;
        let experts = (0..config.n_experts)
            .map(|i| {
                Mlp::new(
                    &mut store,
                    &format!("expert{i}"),
                    &trunk_sizes(input, &config.hidden, dims.joints),
                    ACTION_INIT_GAIN,
                    rng,
                )
            })
            .collect();
        let gating = Mlp::new(
            &mut store,
            "gating",
            &trunk_sizes(input, &config.hidden, config.n_experts),
            1.0,
            rng,
        );
        let critic = Mlp::new(&mut store, "critic", &trunk_sizes(input, &config.hidden, 1), 1.0, rng);
        let log_std = store.add("log_std", Tensor::row_vector(vec![config.init_log_std; dims.joints]));
        let norm = RunningNorm::new(dims.proprio + dims.privileged + dims.features);
        Ok(Self {
            config,
            dims,
            store,
            norm,
            value_norm: RunningNorm::new(1),
            encoder,
            experts,
            gating,
            critic,
            log_std,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn log_std(&self) -> &[f64] {
        &self.store.get(self.log_std).data
    }

    pub fn forward(&self, tape: &mut Tape, inp: &TeacherInputs) -> Result<MoeOutput> {
        inp.check(&self.dims)?;
        let b = inp.rows();
        let x = tape.input(self.norm.apply(&inp.flat()));
        let w = tape.input(Tensor::from_vec(b * self.dims.window, self.dims.features, inp.window.data.clone()));
        let latent = self.encoder.forward(tape, w, b)?;
        let h = tape.concat_cols(&[x, latent]);
        let logits = self.gating.forward(tape, h);
        let gate = tape.softmax_rows(logits);
        let reference = self
            .config
            .residual
            .then(|| tape.input(inp.goal.cols_range(0, self.dims.joints)));
        let mut experts = Vec::with_capacity(self.experts.len());
        let mut mean = None;
        for (i, net) in self.experts.iter().enumerate() {
            let mut a = net.forward(tape, h);
            if let Some(r) = reference {
                a = tape.add(a, r);
            }
            let p = tape.slice_cols(gate, i, 1);
            let weighted = tape.mul_col(a, p);
            mean = Some(match mean {
                None => weighted,
                Some(m) => tape.add(m, weighted),
            });
            experts.push(a);
        }
        let value = self.critic.forward(tape, h);
        Ok(MoeOutput {
            mean: mean.expect("at least one expert"),
            gate,
            experts,
            latent,
            value,
        })
    }

    /// Forward without keeping the tape.
    pub fn evaluate(&self, inp: &TeacherInputs) -> Result<MoeEval> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, inp)?;
        Ok(MoeEval {
            mean: tape.value(out.mean).clone(),
            gate: tape.value(out.gate).clone(),
            experts: out.experts.iter().map(|&e| tape.value(e).clone()).collect(),
            latent: tape.value(out.latent).clone(),
            value: tape
                .value(out.value)
                .data
                .iter()
                .map(|&v| self.value_norm.denormalize_scalar(v))
                .collect(),
        })
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
        sample_action(mean, self.log_std(), rng)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.set_meta("kind", "moe");
        self.dims.write_meta(&mut ck);
        self.config.write_meta(&mut ck);
        for (name, t) in self.store.iter() {
            ck.tensors.push((name.to_string(), t.clone()));
        }
        self.norm.write("norm", &mut ck);
        self.value_norm.write("value_norm", &mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind: String = ck.require("kind")?;
        if kind != "moe" {
            return Err(Error::SchemaMismatch(format!("expected a mixture-of-experts checkpoint, found `{kind}`")));
        }
        let dims = PolicyDims::read_meta(ck)?;
        let config = PolicyConfig::read_meta(ck)?;
        let mut policy = Self::new(config, dims, &mut ChaCha8Rng::seed_from_u64(0))?;
        load_params(&mut policy.store, ck)?;
        policy.norm = RunningNorm::read("norm", policy.norm.dim(), ck)?;
        policy.value_norm = RunningNorm::read("value_norm", 1, ck)?;
        Ok(policy)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn load_params(store: &mut ParamStore, ck: &Checkpoint) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let src = ck
            .tensor(&name)
            .ok_or_else(|| Error::SchemaMismatch(format!("checkpoint lacks parameter `{name}`")))?;
        let dst = store.get_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::SchemaMismatch(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data.copy_from_slice(&src.data);
    }
    Ok(())
}

/// Exact log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// Draw from `Normal(mean, diag(exp(log_std))²)`.
pub fn sample_action<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
    let action: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp = gaussian_log_prob(&action, mean, log_std);
    (action, lp)
}

/// Per-row log-density on the tape: `actions` and `mean` are `B × J`,
/// `log_std` is `1 × J`. Returns `B × 1`.
pub fn log_prob_on_tape(tape: &mut Tape, actions: Var, mean: Var, log_std: Var) -> Var {
    let (b, j) = tape.value(mean).shape();
    let diff = tape.sub(actions, mean);
    let neg = tape.scale(log_std, -1.0);
    let inv = tape.exp(neg);
    let inv_b = tape.broadcast_rows(inv, b);
    let z = tape.mul(diff, inv_b);
    let sq = tape.square(z);
    let s = tape.sum_cols(sq);
    let s = tape.scale(s, -0.5);
    let ls = tape.sum_all(log_std);
    let ls_b = tape.broadcast_rows(ls, b);
    let lp = tape.sub(s, ls_b);
    tape.add_scalar(lp, -0.5 * j as f64 * LN_2PI)
}

/// Differential entropy of the diagonal Gaussian, `1 × 1`.
pub fn entropy_on_tape(tape: &mut Tape, log_std: Var) -> Var {
    let j = tape.value(log_std).len() as f64;
    let s = tape.sum_all(log_std);
    tape.add_scalar(s, 0.5 * j * (1.0 + LN_2PI))
}

/// Fixed-length proprioception history, oldest frame first, zero-padded
/// until full.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    frames: VecDeque<Vec<f64>>,
    dim: usize,
}

impl HistoryBuffer {
    pub fn new(len: usize, dim: usize) -> Self {
        Self {
            frames: std::iter::repeat_n(vec![0.0; dim], len).collect(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, o: &[f64]) {
        assert_eq!(o.len(), self.dim, "history frame width");
        self.frames.pop_front();
        self.frames.push_back(o.to_vec());
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.frames[i]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.frames.iter().flatten().copied().collect()
    }
}

/// A batch of student inputs: flattened history, immediate goal, window.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentInputs {
    pub history: Tensor,
    pub goal: Tensor,
    pub window: Tensor,
}

impl StudentInputs {
    pub fn from_parts<'a>(items: impl IntoIterator<Item = (&'a HistoryBuffer, &'a Observation)>) -> Self {
        let (mut h, mut g, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for (hist, ob) in items {
            let (gi, wi) = goal_rows(ob);
            h.push(hist.flatten());
            g.push(gi);
            w.push(wi);
        }
        let width = |v: &Vec<Vec<f64>>| v.first().map_or(0, Vec::len);
        Self {
            history: Tensor::stack(width(&h), &h),
            goal: Tensor::stack(width(&g), &g),
            window: Tensor::stack(width(&w), &w),
        }
    }

    pub fn rows(&self) -> usize {
        self.history.rows
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            history: self.history.select_rows(idx),
            goal: self.goal.select_rows(idx),
            window: self.window.select_rows(idx),
        }
    }

    pub fn flat(&self) -> Tensor {
        Tensor::hcat(&[&self.history, &self.goal])
    }

    pub fn concat(parts: &[StudentInputs]) -> Self {
        let cat = |f: fn(&StudentInputs) -> &Tensor| Tensor::vcat(&parts.iter().map(f).collect::<Vec<_>>());
        Self {
            history: cat(|p| &p.history),
            goal: cat(|p| &p.goal),
            window: cat(|p| &p.window),
        }
    }
}

/// Deployable policy: proprioception history plus goal, no privileged input.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentPolicy {
    pub config: PolicyConfig,
    pub dims: PolicyDims,
    pub store: ParamStore,
    pub norm: RunningNorm,
    pub encoder: WindowEncoder,
    pub trunk: Mlp,
}

impl StudentPolicy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, dims: PolicyDims, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let encoder = WindowEncoder::new(
            &mut store,
            "encoder",
            dims.window,
            dims.features,
            &config.convs,
            config.latent,
            rng,
        )?;
        let flat = config.history * dims.proprio + dims.features;
        let trunk = Mlp::new(
            &mut store,
            "trunk",
            &trunk_sizes(flat + config.latent, &config.student_hidden, dims.joints),
            ACTION_INIT_GAIN,
            rng,
        );
        Ok(Self {
            norm: RunningNorm::new(flat),
            config,
            dims,
            store,
            encoder,
            trunk,
        })
    }

    pub fn new_history(&self) -> HistoryBuffer {
        HistoryBuffer::new(self.config.history, self.dims.proprio)
    }

    pub fn forward(&self, tape: &mut Tape, inp: &StudentInputs) -> Result<Var> {
        let b = inp.rows();
        check_width("history", &inp.history, b, self.config.history * self.dims.proprio)?;
        check_width("immediate goal", &inp.goal, b, self.dims.features)?;
        check_width("goal window", &inp.window, b, self.dims.window * self.dims.features)?;
        let x = tape.input(self.norm.apply(&inp.flat()));
        let w = tape.input(Tensor::from_vec(b * self.dims.window, self.dims.features, inp.window.data.clone()));
        let latent = self.encoder.forward(tape, w, b)?;
        let h = tape.concat_cols(&[x, latent]);
        let mut a = self.trunk.forward(tape, h);
        if self.config.residual {
            let r = tape.input(inp.goal.cols_range(0, self.dims.joints));
            a = tape.add(a, r);
        }
        Ok(a)
    }

    pub fn evaluate(&self, inp: &StudentInputs) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let a = self.forward(&mut tape, inp)?;
        Ok(tape.value(a).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.set_meta("kind", "student");
        self.dims.write_meta(&mut ck);
        self.config.write_meta(&mut ck);
        for (name, t) in self.store.iter() {
            ck.tensors.push((name.to_string(), t.clone()));
        }
        self.norm.write("norm", &mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind: String = ck.require("kind")?;
        if kind != "student" {
            return Err(Error::SchemaMismatch(format!("expected a student checkpoint, found `{kind}`")));
        }
        let dims = PolicyDims::read_meta(ck)?;
        let config = PolicyConfig::read_meta(ck)?;
        let mut policy = Self::new(config, dims, &mut ChaCha8Rng::seed_from_u64(0))?;
        load_params(&mut policy.store, ck)?;
        policy.norm = RunningNorm::read("norm", policy.norm.dim(), ck)?;
        Ok(policy)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Either policy kind, as read from a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyPolicy {
    Teacher(MoePolicy),
    Student(StudentPolicy),
}

impl AnyPolicy {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        match ck.meta("kind") {
            Some("moe") => Ok(Self::Teacher(MoePolicy::from_checkpoint(&ck)?)),
            Some("student") => Ok(Self::Student(StudentPolicy::from_checkpoint(&ck)?)),
            other => Err(Error::SchemaMismatch(format!("unknown policy kind {other:?}"))),
        }
    }

    pub fn dims(&self) -> &PolicyDims {
        match self {
            Self::Teacher(p) => &p.dims,
            Self::Student(p) => &p.dims,
        }
    }
}
