//! Teacher training with PPO and student distillation with DAgger.

pub mod dagger;
pub mod gradients;
pub mod ppo;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::motion::MotionClip;
use crate::nn::PolicyConfig;
use crate::sampler::{ClipPool, SamplerConfig};
use crate::sim::EnvConfig;

pub use dagger::{dagger_round, train_student, DaggerConfig, DaggerRoundLog, StudentTrainer};
pub use ppo::{compute_gae, ppo_loss, train_teacher, IterationLog, PpoConfig, TeacherTrainer};

/// Every tunable of a training run, read from one `key=value` file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
    pub sampler: SamplerConfig,
    pub dagger: DaggerConfig,
}

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        c.env.apply_kv(kv)?;
        c.policy.apply_kv(kv)?;
        c.ppo.apply_kv(kv)?;
        c.sampler.apply_kv(kv)?;
        c.dagger.apply_kv(kv)?;
        kv.reject_unknown()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }
}

/// Independent generator `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Shared handles to the clips of a pool.
pub(crate) fn clip_cache(pool: &ClipPool) -> BTreeMap<String, Arc<MotionClip>> {
    pool.clips()
        .iter()
        .map(|c| (c.id().to_string(), Arc::new(c.clone())))
        .collect()
}

/// Thread pool bounded by `workers`; `0` uses rayon's default size.
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

pub(crate) fn require_clips(clips: &[MotionClip]) -> Result<()> {
    if clips.is_empty() {
        return Err(Error::EmptySampler);
    }
    Ok(())
}
