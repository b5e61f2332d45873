//! Command-line surface: `synth`, `split`, `train`, `detect`, `eval`, and
//! `gradcheck` subcommands over a shared TOML config with flag overrides.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ovtad_core::gradcheck::{
    composite_alignment_suite, composite_detection_suite, primitive_suite, GradcheckConfig,
};
use ovtad_core::splits::make_splits;
use ovtad_core::{FeatureSequence64, TextEmbeddingSet64};

use crate::config::AppConfig;
use crate::data::Dataset;
use crate::detect::{detect_many, threads_from_env};
use crate::evalcmd::evaluate;
use crate::formats;
use crate::synth::generate_synthetic;
use crate::train::{format_log_csv, train};

#[derive(Debug, Parser)]
#[command(
    name = "ovtad",
    about = "Open-vocabulary temporal action detection on pre-extracted features",
    version
)]
pub struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the seed used by the subcommand.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (features, annotations, text embeddings).
    Synth(SynthArgs),
    /// Create seeded open-vocabulary class splits from a text embedding set.
    Split(SplitArgs),
    /// Train a detector on a dataset directory.
    Train(TrainArgs),
    /// Run detection with a trained checkpoint.
    Detect(DetectArgs),
    /// Evaluate detections against annotations.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the number of videos.
    #[arg(long)]
    pub videos: Option<usize>,
    /// Override the number of classes.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Text embedding file defining the class vocabulary.
    #[arg(long)]
    pub text: PathBuf,
    /// Fraction of classes assigned to training.
    #[arg(long, default_value_t = 0.75)]
    pub fraction: f64,
    /// Number of random splits to emit.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Output JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (features/, annotations.json, text_embeddings.ovte).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV training log output path.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Split file produced by `split`; restricts training to train classes.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    /// Which split in the file to use.
    #[arg(long, default_value_t = 0)]
    pub split_index: usize,
    /// Override the number of optimization steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override the number of pyramid levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Override the alignment-loss weight in the total objective.
    #[arg(long)]
    pub lambda3: Option<f64>,
    /// Override videos per step.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Feature file or directory of .ovtf files.
    #[arg(long)]
    pub features: PathBuf,
    /// Text embeddings for the classes to detect.
    #[arg(long)]
    pub text: PathBuf,
    /// Detection JSON output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detection JSON produced by `detect`.
    #[arg(long)]
    pub detections: PathBuf,
    /// Annotation JSON.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Report output path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Feature rows per second used to map detection seconds onto the
    /// annotation frame timeline.
    #[arg(long, default_value_t = 1.0)]
    pub fps: f64,
    /// Restrict evaluation to a split's test classes.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub split_index: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of random seeds to run.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Coordinates sampled per input on the composite paths.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
}

/// Failure classification for process exit codes.
pub enum CliError {
    /// Bad input: flags, files, schema, config (exit 1).
    Validation(anyhow::Error),
    /// Failure during an otherwise valid run (exit 2).
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Validation(e) | CliError::Runtime(e) => format!("{e:#}"),
        }
    }
}

trait Classify<T> {
    fn validation(self) -> std::result::Result<T, CliError>;
    fn runtime(self) -> std::result::Result<T, CliError>;
}

impl<T> Classify<T> for Result<T> {
    fn validation(self) -> std::result::Result<T, CliError> {
        self.map_err(CliError::Validation)
    }
    fn runtime(self) -> std::result::Result<T, CliError> {
        self.map_err(CliError::Runtime)
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // clap renders help to stdout and errors to stderr via print()
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> std::result::Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => AppConfig::load(path).validation()?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    match cli.command {
        Command::Synth(args) => cmd_synth(args, cfg, cli.seed),
        Command::Split(args) => cmd_split(args, cli.seed),
        Command::Train(args) => cmd_train(args, cfg),
        Command::Detect(args) => cmd_detect(args, cfg),
        Command::Eval(args) => cmd_eval(args, cfg),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

pub const FEATURES_SUBDIR: &str = "features";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const TEXT_FILE: &str = "text_embeddings.ovte";

fn cmd_synth(
    args: SynthArgs,
    mut cfg: AppConfig,
    seed_flag: Option<u64>,
) -> std::result::Result<(), CliError> {
    if let Some(v) = args.videos {
        cfg.synth.n_videos = v;
    }
    if let Some(c) = args.classes {
        cfg.synth.n_classes = c;
    }
    let seed = seed_flag.unwrap_or(cfg.train.seed);
    let (dataset, text) = generate_synthetic(&cfg.synth, seed).validation()?;
    write_dataset(&args.out, &dataset, &text).runtime()?;
    println!(
        "wrote {} videos, {} classes to {}",
        dataset.videos.len(),
        dataset.class_names.len(),
        args.out.display()
    );
    Ok(())
}

/// Write a dataset in the directory layout the other subcommands expect.
pub fn write_dataset(dir: &Path, dataset: &Dataset, text: &TextEmbeddingSet64) -> Result<()> {
    let feature_dir = dir.join(FEATURES_SUBDIR);
    for video in &dataset.videos {
        formats::save_features(&feature_dir.join(format!("{}.ovtf", video.video_id)), video)?;
    }
    formats::save_annotations(&dir.join(ANNOTATIONS_FILE), dataset)?;
    formats::save_text_embeddings(&dir.join(TEXT_FILE), text)?;
    Ok(())
}

/// Load a dataset directory written by `write_dataset`/`synth`.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, TextEmbeddingSet64)> {
    let text = formats::load_text_embeddings(&dir.join(TEXT_FILE))?;
    let annotations = formats::load_annotations(&dir.join(ANNOTATIONS_FILE))?;
    let feature_dir = dir.join(FEATURES_SUBDIR);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&feature_dir)
        .with_context(|| format!("reading feature directory {}", feature_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "ovtf").unwrap_or(false))
        .collect();
    paths.sort();
    let videos: Vec<FeatureSequence64> =
        paths.iter().map(|p| formats::load_features(p)).collect::<Result<_>>()?;
    if videos.is_empty() {
        bail!("no .ovtf feature files under {}", feature_dir.display());
    }
    let mut segment_map = BTreeMap::new();
    for (vid, (_, segs)) in &annotations {
        segment_map.insert(vid.clone(), segs.clone());
    }
    let dataset =
        Dataset { videos, annotations: segment_map, class_names: text.class_names.clone() };
    dataset.validate()?;
    Ok((dataset, text))
}

fn cmd_split(args: SplitArgs, seed_flag: Option<u64>) -> std::result::Result<(), CliError> {
    let text = formats::load_text_embeddings(&args.text).validation()?;
    let seed = seed_flag.unwrap_or(0);
    let splits =
        make_splits(&text.class_names, args.fraction, args.count, seed)
            .map_err(|e| anyhow!(e))
            .validation()?;
    formats::save_splits(&args.out, &splits).runtime()?;
    println!("wrote {} splits to {}", splits.len(), args.out.display());
    Ok(())
}

fn load_split(
    path: &Path,
    index: usize,
) -> Result<ovtad_core::splits::SplitSpec> {
    let splits = formats::load_splits(path)?;
    splits
        .into_iter()
        .nth(index)
        .ok_or_else(|| anyhow!("split index {index} out of range in {}", path.display()))
}

fn cmd_train(args: TrainArgs, mut cfg: AppConfig) -> std::result::Result<(), CliError> {
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    if let Some(levels) = args.levels {
        cfg.model.num_levels = levels;
    }
    if let Some(lambda3) = args.lambda3 {
        cfg.loss.lambda3 = lambda3;
    }
    if let Some(batch) = args.batch_size {
        cfg.train.batch_size = batch;
    }
    cfg.validate().validation()?;
    let (dataset, text) = load_dataset(&args.data).validation()?;
    let split = match &args.split_file {
        Some(path) => Some(load_split(path, args.split_index).validation()?),
        None => None,
    };
    let outcome = train(&dataset, split.as_ref(), &text, &cfg).runtime()?;
    formats::save_checkpoint(&args.out, &outcome.model).runtime()?;
    if let Some(log_path) = &args.log {
        std::fs::write(log_path, format_log_csv(&outcome.log))
            .with_context(|| format!("writing log {}", log_path.display()))
            .runtime()?;
    }
    let last = outcome.log.last().map(|l| l.total);
    println!(
        "trained {} steps on {} videos; final loss {}; checkpoint {}",
        cfg.train.steps,
        outcome.train_videos.len(),
        last.map(|l| format!("{l:.5}")).unwrap_or_else(|| "n/a".into()),
        args.out.display()
    );
    Ok(())
}

fn cmd_detect(args: DetectArgs, cfg: AppConfig) -> std::result::Result<(), CliError> {
    let model = formats::load_checkpoint(&args.checkpoint).validation()?;
    let text = formats::load_text_embeddings(&args.text).validation()?;
    let videos = load_feature_paths(&args.features).validation()?;
    let threads = threads_from_env();
    let detections =
        detect_many(&model, &videos, &text, &cfg.align, &cfg.eval, threads).runtime()?;
    let mut records = Vec::new();
    for (video, segs) in videos.iter().zip(&detections) {
        records
            .extend(formats::to_detection_records(segs, video.frame_rate_hint).runtime()?);
    }
    formats::save_detections(&args.out, &records).runtime()?;
    println!("wrote {} detections to {}", records.len(), args.out.display());
    Ok(())
}

fn load_feature_paths(path: &Path) -> Result<Vec<FeatureSequence64>> {
    if path.is_dir() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|x| x == "ovtf").unwrap_or(false))
            .collect();
        paths.sort();
        if paths.is_empty() {
            bail!("no .ovtf files under {}", path.display());
        }
        paths.iter().map(|p| formats::load_features(p)).collect()
    } else {
        Ok(vec![formats::load_features(path)?])
    }
}

fn cmd_eval(args: EvalArgs, cfg: AppConfig) -> std::result::Result<(), CliError> {
    let detections = formats::load_detections(&args.detections).validation()?;
    let annotations = formats::load_annotations(&args.annotations).validation()?;
    let restrict = match &args.split_file {
        Some(path) => {
            Some(load_split(path, args.split_index).validation()?.test_classes)
        }
        None => None,
    };
    let report = evaluate(&detections, &annotations, args.fps, &cfg.eval, restrict.as_deref())
        .runtime()?;
    match &args.out {
        Some(path) => {
            formats::write_json(path, &report).runtime()?;
            println!("average mAP {:.4}; report written to {}", report.average_map, path.display());
        }
        None => {
            let mut text = serde_json::to_string_pretty(&report)
                .map_err(|e| anyhow!(e))
                .runtime()?;
            text.push('\n');
            print!("{text}");
        }
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> std::result::Result<(), CliError> {
    let mut failures = 0usize;
    let started = std::time::Instant::now();
    for seed in 0..args.seeds {
        let cfg = GradcheckConfig { seed, ..Default::default() };
        let reports = primitive_suite(seed, &cfg).map_err(|e| anyhow!(e)).runtime()?;
        for r in reports {
            if !r.pass() {
                failures += 1;
                println!("FAIL {} seed={seed} max_rel_err={:.3e}", r.name, r.max_rel_err);
            }
        }
        let composite_cfg = GradcheckConfig {
            seed,
            samples_per_input: Some(args.samples),
            ..Default::default()
        };
        for r in [
            composite_detection_suite(seed, &composite_cfg).map_err(|e| anyhow!(e)).runtime()?,
            composite_alignment_suite(seed, &cfg).map_err(|e| anyhow!(e)).runtime()?,
        ] {
            let status = if r.pass() { "PASS" } else { "FAIL" };
            if !r.pass() {
                failures += 1;
            }
            println!("{status} {} seed={seed} max_rel_err={:.3e}", r.name, r.max_rel_err);
        }
    }
    println!(
        "gradcheck: {} seeds in {:.1}s, {failures} failures",
        args.seeds,
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        return Err(CliError::Validation(anyhow!("{failures} gradient checks failed")));
    }
    Ok(())
}
