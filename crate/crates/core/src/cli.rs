//! Command-line front end.
//!
//! Every subcommand accepts `--config <file.toml>`, a flat table whose keys are
//! the long flag names with `-` replaced by `_`. Flags win over the file.
//! Exit codes: 0 success, 1 gradient check failed, 2 usage/config/input
//! error, 3 numeric failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedstore::{load_embeddings, save_embeddings, EmbeddingStore};
use crate::episodic::{split_classes, ClassSplit, EpisodeShape};
use crate::error::{Error, Result};
use crate::estimator::{CovarianceMode, Method};
use crate::harness::{self, EvalConfig, SynthSpec, WithinClassCov};
use crate::protocore::ProjectionHead;
use crate::rng::{self, purpose};
use crate::sampler::{Allocation, AugmentSettings};
use crate::trainer::{self, OptimizerKind, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "fewshot-de",
    version,
    about = "Few-shot classification with query-calibrated distribution estimation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the classes of an embedding file into seen / valid / unseen sets.
    Split(SplitArgs),
    /// Train a projection head on episodes from the seen classes.
    Train(TrainArgs),
    /// Evaluate on episodes from the unseen classes.
    Eval(EvalArgs),
    /// Write a synthetic Gaussian embedding file.
    Synth(SynthArgs),
    /// Compare analytic loss gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

/// Flat run-spec file. Unknown keys are rejected.
#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpecFile {
    pub embeddings: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub seen: Option<usize>,
    pub valid: Option<usize>,
    pub unseen: Option<usize>,
    pub strategy: Option<String>,
    pub preset: Option<String>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub q: Option<usize>,
    pub r: Option<usize>,
    pub gen: Option<usize>,
    pub allocation: Option<String>,
    pub covariance: Option<String>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub optimizer: Option<String>,
    pub episodes: Option<usize>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    pub d_out: Option<usize>,
    pub l2_normalize: Option<bool>,
    pub jobs: Option<usize>,
    pub classes: Option<usize>,
    pub dim: Option<usize>,
    pub per_class: Option<usize>,
    pub scale: Option<f64>,
    pub within: Option<String>,
    pub std: Option<f64>,
    pub probes: Option<usize>,
    pub tol: Option<f64>,
}

impl RunSpecFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: RunSpecFile =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // paths in a config file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut spec.embeddings,
            &mut spec.split,
            &mut spec.checkpoint,
            &mut spec.out,
            &mut spec.trace,
            &mut spec.report,
            &mut spec.truth,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(spec)
    }

    fn from_option(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// Optional TOML run-spec file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub seen: Option<usize>,
    #[arg(long)]
    pub valid: Option<usize>,
    #[arg(long)]
    pub unseen: Option<usize>,
    /// Output split file (default split.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct EpisodeArgs {
    /// none | way | shot
    #[arg(long)]
    pub strategy: Option<String>,
    /// news (Q=25, R=10) | intent (Q=5, R=4)
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    /// Generated samples per class (default 20 per shot).
    #[arg(long)]
    pub gen: Option<usize>,
    /// even | random
    #[arg(long)]
    pub allocation: Option<String>,
    /// full | diagonal
    #[arg(long)]
    pub covariance: Option<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub l2_normalize: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Output checkpoint (default head.txt).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output trace CSV (default trace.csv).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// adamw | sgd
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub d_out: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Split file; without one every class is treated as unseen.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Head checkpoint; without one the identity head is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output report CSV (default report.csv).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Worker threads (output does not depend on it).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output embedding file (default synth.jsonl).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional JSON file receiving the true class means and covariances.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// isotropic | random | zero
    #[arg(long)]
    pub within: Option<String>,
    #[arg(long)]
    pub std: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    /// Embedding file; a small synthetic store is used when absent.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output JSON summary (default gradcheck.json).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub probes: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub d_out: Option<usize>,
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Split(args) => cmd_split(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e {
        CommandError::Failed => Ok(ExitCode::from(1)),
        CommandError::Error(e) => Err(e),
    })
}

enum CommandError {
    /// The command ran but its check did not pass.
    Failed,
    Error(Error),
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        CommandError::Error(e)
    }
}

type CmdResult = std::result::Result<(), CommandError>;

fn pick<T: Clone>(flag: Option<T>, file: &Option<T>, default: T) -> T {
    flag.or_else(|| file.clone()).unwrap_or(default)
}

fn pick_opt<T: Clone>(flag: Option<T>, file: &Option<T>) -> Option<T> {
    flag.or_else(|| file.clone())
}

fn absolute(path: PathBuf) -> Result<PathBuf> {
    std::path::absolute(&path).map_err(|e| Error::io(path, e))
}

fn require_path(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    absolute(pick_opt(flag, file).ok_or_else(|| Error::Config(format!("--{name} is required")))?)
}

fn parse_choice<T>(value: &str, what: &str, choices: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    choices
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(value))
        .map(|&(_, v)| v)
        .ok_or_else(|| Error::Config(format!("unknown {what} {value:?}")))
}

/// Episode shape and augmentation settings from flags, file and defaults.
fn resolve_episode(
    args: EpisodeArgs,
    file: &RunSpecFile,
    default_method: Method,
) -> Result<(EpisodeShape, AugmentSettings, Option<usize>, bool)> {
    let preset_name = pick_opt(args.preset, &file.preset);
    let (preset_q, preset_r) = match &preset_name {
        Some(name) => harness::preset(name).ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?,
        None => (5, 4),
    };
    let method = match pick_opt(args.strategy, &file.strategy) {
        Some(s) => s.parse()?,
        None => default_method,
    };
    let n = pick(args.n, &file.n, 5);
    let k = pick(args.k, &file.k, 1);
    let q = pick(args.q, &file.q, preset_q);
    let shape = EpisodeShape::new(n, k, q)?;
    let allocation = match pick_opt(args.allocation, &file.allocation) {
        Some(a) => parse_choice(
            &a,
            "allocation",
            &[("even", Allocation::Even), ("random", Allocation::Random)],
        )?,
        None => Allocation::Even,
    };
    let cov_mode = match pick_opt(args.covariance, &file.covariance) {
        Some(c) => parse_choice(
            &c,
            "covariance mode",
            &[("full", CovarianceMode::Full), ("diagonal", CovarianceMode::Diagonal)],
        )?,
        None => CovarianceMode::Full,
    };
    let augment = AugmentSettings {
        method,
        r: pick(args.r, &file.r, preset_r),
        n_gen: pick(args.gen, &file.gen, harness::default_n_gen(k)),
        allocation,
        cov_mode,
    };
    Ok((
        shape,
        augment,
        pick_opt(args.episodes, &file.episodes),
        pick(args.l2_normalize, &file.l2_normalize, false),
    ))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a C,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

/// Write `<primary output>.manifest.json` with the resolved config and the
/// SHA-256 of every input and output file.
fn write_manifest<C: Serialize>(command: &str, config: &C, inputs: &[&Path], outputs: &[&Path]) -> Result<PathBuf> {
    let hashes = |paths: &[&Path]| -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect()
    };
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        inputs: hashes(inputs)?,
        outputs: hashes(outputs)?,
    };
    let primary = outputs.first().expect("at least one output");
    let mut name = primary.as_os_str().to_owned();
    name.push(".manifest.json");
    let path = PathBuf::from(name);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Serialize)]
struct SplitRun {
    embeddings: PathBuf,
    out: PathBuf,
    seen: usize,
    valid: usize,
    unseen: usize,
    seed: u64,
}

fn cmd_split(args: SplitArgs) -> CmdResult {
    let file = RunSpecFile::from_option(args.common.config.as_deref())?;
    let run = SplitRun {
        embeddings: require_path(args.embeddings, &file.embeddings, "embeddings")?,
        out: absolute(pick(args.out, &file.out, PathBuf::from("split.json")))?,
        seen: pick(args.seen, &file.seen, 0),
        valid: pick(args.valid, &file.valid, 0),
        unseen: pick(args.unseen, &file.unseen, 0),
        seed: pick(args.common.seed, &file.seed, 0),
    };
    let store = load_embeddings(&run.embeddings)?;
    let split = split_classes(&store, (run.seen, run.valid, run.unseen), run.seed)?;
    split.save(&run.out)?;
    write_manifest("split", &run, &[&run.embeddings], &[&run.out])?;
    println!(
        "wrote {} (seen {}, valid {}, unseen {})",
        run.out.display(),
        split.seen.len(),
        split.valid.len(),
        split.unseen.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainRun {
    embeddings: PathBuf,
    split: PathBuf,
    out: PathBuf,
    trace: PathBuf,
    train: TrainConfig,
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let file = RunSpecFile::from_option(args.common.config.as_deref())?;
    let (shape, augment, episodes, l2_normalize) = resolve_episode(args.episode, &file, Method::Way)?;
    let optimizer = match pick_opt(args.optimizer, &file.optimizer) {
        Some(o) => parse_choice(
            &o,
            "optimizer",
            &[("adamw", OptimizerKind::AdamW), ("sgd", OptimizerKind::Sgd)],
        )?,
        None => OptimizerKind::AdamW,
    };
    let run = TrainRun {
        embeddings: require_path(args.embeddings, &file.embeddings, "embeddings")?,
        split: require_path(args.split, &file.split, "split")?,
        out: absolute(pick(args.out, &file.out, PathBuf::from("head.txt")))?,
        trace: absolute(pick(args.trace, &file.trace, PathBuf::from("trace.csv")))?,
        train: TrainConfig {
            shape,
            augment,
            lambda: pick(args.lambda, &file.lambda, 0.1),
            optimizer,
            learning_rate: pick(args.lr, &file.lr, 1e-5),
            weight_decay: pick(args.weight_decay, &file.weight_decay, 0.01),
            episodes: episodes.unwrap_or(1000),
            seed: pick(args.common.seed, &file.seed, 0),
            d_out: pick_opt(args.d_out, &file.d_out),
            l2_normalize,
        },
    };
    run.train.validate()?;
    let store = load_embeddings(&run.embeddings)?;
    let split = ClassSplit::load(&run.split)?;
    let (head, trace) = trainer::train(&store, &split, &run.train)?;
    head.save(&run.out)?;
    trace.save_csv(&run.trace)?;
    write_manifest("train", &run, &[&run.embeddings, &run.split], &[&run.out, &run.trace])?;
    if let (Some(first), Some(last)) = (trace.rows.first(), trace.rows.last()) {
        println!(
            "trained {} episodes: l_total {:.4} -> {:.4}",
            trace.rows.len(),
            first.l_total,
            last.l_total
        );
    }
    println!("wrote {} and {}", run.out.display(), run.trace.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRun {
    embeddings: PathBuf,
    split: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    report: PathBuf,
    eval: EvalConfig,
    /// Recorded for completeness; results do not depend on it.
    jobs: Option<usize>,
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let file = RunSpecFile::from_option(args.common.config.as_deref())?;
    let (shape, augment, episodes, l2_normalize) = resolve_episode(args.episode, &file, Method::Way)?;
    let run = EvalRun {
        embeddings: require_path(args.embeddings, &file.embeddings, "embeddings")?,
        split: pick_opt(args.split, &file.split).map(absolute).transpose()?,
        checkpoint: pick_opt(args.checkpoint, &file.checkpoint).map(absolute).transpose()?,
        report: absolute(pick(args.report, &file.report, PathBuf::from("report.csv")))?,
        eval: EvalConfig {
            shape,
            augment,
            episodes: episodes.unwrap_or(1000),
            runs: pick(args.runs, &file.runs, 1),
            seed: pick(args.common.seed, &file.seed, 0),
            l2_normalize,
        },
        jobs: pick_opt(args.jobs, &file.jobs),
    };
    run.eval.validate()?;
    let store = load_embeddings(&run.embeddings)?;
    let split = match &run.split {
        Some(path) => ClassSplit::load(path)?,
        None => ClassSplit {
            unseen: store.labels().map(str::to_owned).collect(),
            ..Default::default()
        },
    };
    let head = match &run.checkpoint {
        Some(path) => ProjectionHead::load(path)?,
        None => ProjectionHead::identity(store.dim()),
    };
    if head.d_in() != store.dim() {
        return Err(Error::Config(format!(
            "checkpoint expects {}-dimensional inputs, embeddings have {}",
            head.d_in(),
            store.dim()
        ))
        .into());
    }
    let report = match run.jobs {
        Some(jobs) => harness::evaluate_with_jobs(&store, &split, &head, &run.eval, jobs)?,
        None => harness::evaluate(&store, &split, &head, &run.eval)?,
    };
    report.save_csv(&run.report)?;
    let mut inputs = vec![run.embeddings.as_path()];
    inputs.extend(run.split.as_deref());
    inputs.extend(run.checkpoint.as_deref());
    write_manifest("eval", &run, &inputs, &[&run.report])?;
    println!(
        "{} {}-way {}-shot: accuracy {:.4} (std {:.4}, ci95 {:.4}) over {} runs x {} episodes",
        run.eval.augment.method.name(),
        shape.n,
        shape.k,
        report.mean,
        report.std,
        report.ci95,
        run.eval.runs,
        run.eval.episodes
    );
    Ok(())
}

#[derive(Serialize)]
struct SynthRun {
    out: PathBuf,
    truth: Option<PathBuf>,
    spec: SynthSpec,
}

#[derive(Serialize)]
struct TruthFile<'a> {
    labels: &'a [String],
    means: Vec<&'a [f64]>,
    /// Row-major.
    covs: Vec<Vec<f64>>,
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let file = RunSpecFile::from_option(args.common.config.as_deref())?;
    let std = pick(args.std, &file.std, 1.0);
    let within = match pick(args.within, &file.within, "random".to_owned())
        .to_ascii_lowercase()
        .as_str()
    {
        "isotropic" => WithinClassCov::Isotropic { std },
        "random" => WithinClassCov::Random { std },
        "zero" => WithinClassCov::Zero,
        other => return Err(Error::Config(format!("unknown within-class covariance {other:?}")).into()),
    };
    let run = SynthRun {
        out: absolute(pick(args.out, &file.out, PathBuf::from("synth.jsonl")))?,
        truth: pick_opt(args.truth, &file.truth).map(absolute).transpose()?,
        spec: SynthSpec {
            n_classes: pick(args.classes, &file.classes, 20),
            dim: pick(args.dim, &file.dim, 16),
            per_class_count: pick(args.per_class, &file.per_class, 40),
            class_mean_scale: pick(args.scale, &file.scale, 3.5),
            within,
            seed: pick(args.common.seed, &file.seed, 0),
        },
    };
    let synth = harness::make_synthetic(&run.spec)?;
    save_embeddings(&synth.store, &run.out)?;
    let mut outputs = vec![run.out.as_path()];
    if let Some(path) = &run.truth {
        let truth = TruthFile {
            labels: &synth.labels,
            means: synth.means.iter().map(|m| m.as_slice()).collect(),
            covs: synth.covs.iter().map(|c| c.transpose().as_slice().to_vec()).collect(),
        };
        let text = serde_json::to_string(&truth).expect("truth serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        outputs.push(path);
    }
    write_manifest("synth", &run, &[], &outputs)?;
    println!(
        "wrote {} ({} records, dim {})",
        run.out.display(),
        synth.store.len(),
        synth.store.dim()
    );
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRun {
    embeddings: Option<PathBuf>,
    report: PathBuf,
    train: TrainConfig,
    probes: usize,
    tol: f64,
}

#[derive(Serialize)]
struct GradcheckSummary {
    passed: bool,
    max_rel_error: f64,
    probes: usize,
    tolerance: f64,
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    let file = RunSpecFile::from_option(args.common.config.as_deref())?;
    let mut episode_args = args.episode;
    // small episodes by default
    episode_args.n = episode_args.n.or(file.n).or(Some(3));
    episode_args.q = episode_args.q.or(file.q).or(Some(3));
    episode_args.r = episode_args.r.or(file.r).or(Some(2));
    episode_args.gen = episode_args.gen.or(file.gen).or(Some(4));
    let (shape, augment, episodes, l2_normalize) = resolve_episode(episode_args, &file, Method::Way)?;
    let seed = pick(args.common.seed, &file.seed, 0);
    let run = GradcheckRun {
        embeddings: pick_opt(args.embeddings, &file.embeddings).map(absolute).transpose()?,
        report: absolute(pick(args.report, &file.report, PathBuf::from("gradcheck.json")))?,
        train: TrainConfig {
            shape,
            augment,
            lambda: pick(args.lambda, &file.lambda, 0.1),
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.0,
            weight_decay: 0.0,
            episodes: episodes.unwrap_or(10),
            seed,
            d_out: pick_opt(args.d_out, &file.d_out),
            l2_normalize,
        },
        probes: pick(args.probes, &file.probes, 100),
        tol: pick(args.tol, &file.tol, 1e-4),
    };
    run.train.validate()?;
    if run.train.episodes == 0 || run.probes == 0 {
        return Err(Error::Config("gradcheck needs at least one episode and one probe".into()).into());
    }
    let store = match &run.embeddings {
        Some(path) => load_embeddings(path)?,
        None => gradcheck_store(seed)?,
    };
    let classes = store.labels().map(str::to_owned).collect();
    let split = ClassSplit {
        seen: classes,
        ..Default::default()
    };
    let mut head = trainer::initial_head(store.dim(), &run.train);
    // move off the identity so every gradient entry is exercised
    let mut noise = rng::stream(seed, purpose::GRADCHECK, &[u64::MAX]);
    for i in 0..head.num_params() {
        *head.param_mut(i) += 0.1 * rand::Rng::sample::<f64, _>(&mut noise, rand_distr::StandardNormal);
    }
    let per_episode = run.probes.div_ceil(run.train.episodes);
    let mut worst = 0.0f64;
    let mut total_probes = 0;
    for t in 0..run.train.episodes {
        let episode = trainer::training_episode(&store, &split.seen, &run.train, t)?;
        let mut probe_rng = rng::stream(seed, purpose::GRADCHECK, &[t as u64]);
        let report = trainer::gradient_check(&head, &episode, &run.train, per_episode, run.tol, &mut probe_rng)?;
        total_probes += report.probes.len();
        worst = worst.max(report.max_rel_error);
    }
    let passed = worst < run.tol;
    let summary = GradcheckSummary {
        passed,
        max_rel_error: worst,
        probes: total_probes,
        tolerance: run.tol,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    fs::write(&run.report, text).map_err(|e| Error::io(&run.report, e))?;
    let inputs: Vec<&Path> = run.embeddings.iter().map(PathBuf::as_path).collect();
    write_manifest("gradcheck", &run, &inputs, &[&run.report])?;
    println!(
        "{}: max relative error {worst:.3e} over {total_probes} probes (tolerance {:e})",
        if passed { "PASS" } else { "FAIL" },
        run.tol
    );
    if passed {
        Ok(())
    } else {
        Err(CommandError::Failed)
    }
}

/// Small, moderately separated store that keeps softmax away from saturation.
fn gradcheck_store(seed: u64) -> Result<EmbeddingStore> {
    Ok(harness::make_synthetic(&SynthSpec {
        n_classes: 6,
        dim: 8,
        per_class_count: 12,
        class_mean_scale: 1.0,
        within: WithinClassCov::Isotropic { std: 0.4 },
        seed,
    })?
    .store)
}
