//! `mimic-lab`: reproducible workflows over the mimic-core library.
//!
//! Every command writes a manifest beside its outputs and is deterministic
//! for fixed flags and seed, independent of `--workers`.

mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use mimic_core::config::KeyValues;
use mimic_core::curation::{completion_filter, curation_report, rule_filter, CompletionParams, RuleLimits};
use mimic_core::eval::{
    compare_runs, evaluate_dataset, evaluate_policy, gating_trace, gating_trace_table, metrics_table,
    parse_run_list, percentile_report, summarize, ClipEvaluation, PlaybackController, StudentController,
    TeacherController, METRIC_NAMES,
};
use mimic_core::motion::{
    generate_synthetic_dataset, load_clip_file, load_dataset, read_index, save_dataset, write_index, DatasetSpec,
    MotionClip,
};
use mimic_core::nn::{AnyPolicy, MoePolicy};
use mimic_core::sim::{CharacterModel, EnvConfig};
use mimic_core::skeleton::Skeleton;
use mimic_core::train::{stream_rng, train_student, train_teacher, TrainConfig};
use mimic_core::{Error, Result};

use manifest::{Manifest, MANIFEST_FILE};

/// Name accepted by `--policy` for the reference-playback controller.
const PLAYBACK: &str = "playback";

#[derive(Parser, Debug)]
#[command(name = "mimic-lab", version, about = "Motion-tracking policy training on a planar biped")]
struct Cli {
    /// Parallel rollout workers (0 = one per core).
    #[arg(long, global = true, env = "MIMIC_LAB_WORKERS", default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic motion dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rule-based filtering, then completion filtering when a policy is given.
    Curate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        rules: PathBuf,
        /// Preliminary policy checkpoint, or `playback`.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a privileged mixture-of-experts teacher with PPO.
    TrainTeacher {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distil a teacher checkpoint into a student with DAgger.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or `playback`) on a dataset.
    Eval {
        #[arg(long)]
        policy: String,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Record the gating probabilities of a teacher on one clip.
    TraceGating {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare runs: a run-list file or inline `name=ckpt,ckpt;name=ckpt`.
    Compare {
        #[arg(long)]
        runs: String,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut kv = match &self.config {
            Some(path) => KeyValues::load(path)?,
            None => KeyValues::default(),
        };
        kv.override_with(&self.overrides)?;
        TrainConfig::from_kv(&kv)
    }

    fn record(&self, m: &mut Manifest) -> Result<()> {
        if let Some(path) = &self.config {
            m.flag("config", path.display());
            m.file_hash("config", path)?;
        }
        for (i, o) in self.overrides.iter().enumerate() {
            m.flag(&format!("set.{i}"), o);
        }
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Manifest path for a single-file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.txt");
    out.with_file_name(name)
}

fn shared(clips: Vec<MotionClip>) -> Vec<Arc<MotionClip>> {
    clips.into_iter().map(Arc::new).collect()
}

fn summary_table(evals: &[ClipEvaluation]) -> String {
    let (m, completion) = summarize(evals);
    let mut out = String::from("clips\tcompletion_rate");
    for name in METRIC_NAMES {
        let _ = write!(out, "\t{name}");
    }
    let _ = write!(out, "\n{}\t{completion:.6}", evals.len());
    for v in m.values() {
        let _ = write!(out, "\t{v:.6}");
    }
    out.push('\n');
    out
}

fn gen_data(spec: &Path, out: &Path, seed: u64) -> Result<()> {
    let spec_kv = KeyValues::load(spec)?;
    let dataset_spec = DatasetSpec::from_kv(&spec_kv)?;
    spec_kv.reject_unknown()?;
    let clips = generate_synthetic_dataset(&dataset_spec, &Skeleton::biped(), &mut stream_rng(seed, 0))?;
    save_dataset(out, &clips)?;
    let mut m = Manifest::new("gen-data");
    m.flag("spec", spec.display());
    m.flag("seed", seed);
    m.file_hash("spec", spec)?;
    m.push("clips", clips.len());
    m.write(&out.join(MANIFEST_FILE))?;
    log::info!("wrote {} clips to {}", clips.len(), out.display());
    Ok(())
}

fn curate(
    dataset: &Path,
    rules: &Path,
    policy: Option<&str>,
    out: &Path,
    seed: u64,
    config: &ConfigArgs,
) -> Result<()> {
    let (limits, completion) = RuleLimits::parse_rules(&std::fs::read_to_string(rules).map_err(|source| {
        Error::Io {
            path: rules.to_path_buf(),
            source,
        }
    })?)?;
    let cfg = config.load()?;
    let clips = load_dataset(dataset, None)?;
    let ids: Vec<String> = clips.iter().map(|c| c.id().to_string()).collect();
    let (kept, mut rejected) = rule_filter(&clips, &limits)?;
    let mut rates = Vec::new();
    let kept = match policy {
        None => kept,
        Some(p) => {
            let (k, r, rs) = run_completion_filter(p, &kept, &cfg.env, &completion, seed)?;
            rates = kept.iter().map(|c| c.id().to_string()).zip(rs).collect();
            rejected.extend(r);
            k
        }
    };
    rejected.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    create_dir(out)?;
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    write_text(&out.join("report.tsv"), &curation_report(&id_refs, &rejected, &rates))?;
    // Filtered index: references the original clip files.
    let keep: std::collections::BTreeSet<&str> = kept.iter().map(|c| c.id()).collect();
    let mut entries = Vec::new();
    for ((path, category), clip) in read_index(dataset)?.into_iter().zip(&clips) {
        if keep.contains(clip.id()) {
            let abs = std::fs::canonicalize(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
            entries.push((abs.display().to_string(), category));
        }
    }
    write_index(out, &entries)?;
    let mut m = Manifest::new("curate");
    m.flag("dataset", dataset.display());
    m.flag("rules", rules.display());
    m.flag("policy", policy.unwrap_or("-"));
    m.flag("seed", seed);
    m.dataset_hash("dataset", dataset)?;
    m.file_hash("rules", rules)?;
    if let Some(p) = policy.filter(|p| *p != PLAYBACK) {
        m.file_hash("policy", Path::new(p))?;
    }
    config.record(&mut m)?;
    m.push("kept", kept.len());
    m.push("rejected", rejected.len());
    m.write(&out.join(MANIFEST_FILE))?;
    log::info!("kept {} of {} clips", kept.len(), clips.len());
    Ok(())
}

type FilterOutcome = (Vec<MotionClip>, Vec<mimic_core::curation::Rejection>, Vec<f64>);

fn run_completion_filter(
    policy: &str,
    clips: &[MotionClip],
    env: &EnvConfig,
    params: &CompletionParams,
    seed: u64,
) -> Result<FilterOutcome> {
    let model = CharacterModel::biped();
    if policy == PLAYBACK {
        return completion_filter(clips, || PlaybackController, env, &model, params, seed);
    }
    match AnyPolicy::load(policy)? {
        AnyPolicy::Teacher(p) => {
            p.dims.check_env(env)?;
            let p = Arc::new(p);
            completion_filter(clips, || TeacherController::new(p.clone()), env, &model, params, seed)
        }
        AnyPolicy::Student(p) => {
            p.dims.check_env(env)?;
            let p = Arc::new(p);
            completion_filter(clips, || StudentController::new(p.clone()), env, &model, params, seed)
        }
    }
}

fn train_teacher_cmd(dataset: &Path, config: &ConfigArgs, seed: u64, out: &Path, workers: usize) -> Result<()> {
    let cfg = config.load()?;
    let clips = load_dataset(dataset, None)?;
    create_dir(out)?;
    let mut m = Manifest::new("train-teacher");
    m.flag("dataset", dataset.display());
    m.flag("seed", seed);
    m.dataset_hash("dataset", dataset)?;
    config.record(&mut m)?;
    m.write(&out.join(MANIFEST_FILE))?;
    train_teacher(clips, cfg, seed, workers, Some(out), |row| {
        log::info!(
            "iteration {} reward {:.3} completion {:.3} mpkpe {:.1} mm",
            row.iteration,
            row.mean_reward,
            row.completion_rate,
            row.mean_mpkpe
        )
    })?;
    Ok(())
}

fn distill_cmd(
    teacher: &Path,
    dataset: &Path,
    config: &ConfigArgs,
    seed: u64,
    out: &Path,
    workers: usize,
) -> Result<()> {
    let cfg = config.load()?;
    let policy = MoePolicy::load(teacher)?;
    let clips = load_dataset(dataset, None)?;
    create_dir(out)?;
    let mut m = Manifest::new("distill");
    m.flag("teacher", teacher.display());
    m.flag("dataset", dataset.display());
    m.flag("seed", seed);
    m.file_hash("teacher", teacher)?;
    m.dataset_hash("dataset", dataset)?;
    config.record(&mut m)?;
    m.write(&out.join(MANIFEST_FILE))?;
    train_student(policy, clips, cfg, seed, workers, Some(out), |row| {
        log::info!("round {} action gap {:.4}", row.round, row.mean_action_gap)
    })?;
    Ok(())
}

fn eval_cmd(policy: &str, dataset: &Path, out: &Path, seed: u64, config: &ConfigArgs) -> Result<()> {
    let cfg = config.load()?;
    let clips = shared(load_dataset(dataset, None)?);
    let model = CharacterModel::biped();
    let evals = if policy == PLAYBACK {
        evaluate_dataset(|| PlaybackController, &clips, &cfg.env, &model, seed)?
    } else {
        evaluate_policy(&AnyPolicy::load(policy)?, &clips, &cfg.env, &model, seed)?
    };
    create_dir(out)?;
    write_text(&out.join("metrics.tsv"), &metrics_table(&evals))?;
    write_text(&out.join("percentiles.tsv"), &percentile_report(&evals))?;
    write_text(&out.join("summary.tsv"), &summary_table(&evals))?;
    let mut m = Manifest::new("eval");
    m.flag("policy", policy);
    m.flag("dataset", dataset.display());
    m.flag("seed", seed);
    if policy != PLAYBACK {
        m.file_hash("policy", Path::new(policy))?;
    }
    m.dataset_hash("dataset", dataset)?;
    config.record(&mut m)?;
    m.write(&out.join(MANIFEST_FILE))
}

fn trace_cmd(policy: &Path, clip: &Path, out: &Path, seed: u64, config: &ConfigArgs) -> Result<()> {
    let cfg = config.load()?;
    let p = AnyPolicy::load(policy)?;
    let c = Arc::new(load_clip_file(clip, None)?);
    let trace = gating_trace(&p, c, &cfg.env, &CharacterModel::biped(), seed)?;
    write_text(out, &gating_trace_table(&trace))?;
    let mut m = Manifest::new("trace-gating");
    m.flag("policy", policy.display());
    m.flag("clip", clip.display());
    m.flag("seed", seed);
    m.file_hash("policy", policy)?;
    m.file_hash("clip", clip)?;
    config.record(&mut m)?;
    m.write(&sidecar(out))
}

fn compare_cmd(runs: &str, dataset: &Path, out: &Path, config: &ConfigArgs) -> Result<()> {
    let cfg = config.load()?;
    let as_file = Path::new(runs);
    let (text, base) = if as_file.is_file() {
        let text = std::fs::read_to_string(as_file).map_err(|source| Error::Io {
            path: as_file.to_path_buf(),
            source,
        })?;
        (text, as_file.parent().unwrap_or(Path::new(".")).to_path_buf())
    } else {
        (runs.replace(';', "\n"), PathBuf::from("."))
    };
    let specs = parse_run_list(&text)?;
    let clips = shared(load_dataset(dataset, None)?);
    let table = compare_runs(&specs, &clips, &cfg.env, &CharacterModel::biped(), &base)?;
    write_text(out, &table)?;
    let mut m = Manifest::new("compare");
    m.flag("runs", runs);
    m.flag("dataset", dataset.display());
    m.dataset_hash("dataset", dataset)?;
    config.record(&mut m)?;
    m.write(&sidecar(out))
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    // Ignore failure: a global pool may already exist in this process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    match cli.command {
        Command::GenData { spec, out, seed } => gen_data(&spec, &out, seed),
        Command::Curate {
            dataset,
            rules,
            policy,
            out,
            seed,
            config,
        } => curate(&dataset, &rules, policy.as_deref(), &out, seed, &config),
        Command::TrainTeacher {
            dataset,
            config,
            seed,
            out,
        } => train_teacher_cmd(&dataset, &config, seed, &out, workers),
        Command::Distill {
            teacher,
            dataset,
            config,
            seed,
            out,
        } => distill_cmd(&teacher, &dataset, &config, seed, &out, workers),
        Command::Eval {
            policy,
            dataset,
            out,
            seed,
            config,
        } => eval_cmd(&policy, &dataset, &out, seed, &config),
        Command::TraceGating {
            policy,
            clip,
            out,
            seed,
            config,
        } => trace_cmd(&policy, &clip, &out, seed, &config),
        Command::Compare {
            runs,
            dataset,
            out,
            config,
        } => compare_cmd(&runs, &dataset, &out, &config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
