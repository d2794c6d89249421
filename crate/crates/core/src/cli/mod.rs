//! Command-line surface: `corpus`, `train`, `sample`, `eval`,
//! `verify-bounds` and `gradcheck`.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::bounds::{format_report, verify_bounds, MIN_SAMPLES};
use crate::checkpoint::{self, CheckpointError};
use crate::corpus::io::{image_name, read_corpus, write_corpus, write_pgm};
use crate::corpus::{generate, CorpusError, MarkupDoc, RenderedImage};
use crate::error::ModelError;
use crate::gradsuite::{format_suite, run_suite};
use crate::metrics::{evaluate_set, write_csv, MetricReport, MetricsError};
use crate::model::Model;
use crate::numerics::NumericError;
use crate::train::{self, RunPaths, TrainError, TrainState};

pub use config::RunConfig;

/// Resolved configuration written next to every training run.
pub const CONFIG_FILE: &str = "config.toml";
pub const SAMPLES_DIR: &str = "samples";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numeric(n) => n.into(),
            ModelError::Corpus(c) => c.into(),
            ModelError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            ModelError::Shape(_) | ModelError::Vocabulary { .. } | ModelError::Config(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<NumericError> for CliError {
    fn from(e: NumericError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Parse { .. } | CorpusError::Invalid(_) => CliError::Config(e.to_string()),
            CorpusError::Io(_) | CorpusError::Format { .. } => CliError::Io(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Io { .. } => CliError::Io(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Io(c) => c.into(),
            MetricsError::Unmatched(_) => CliError::Io(e.to_string()),
            MetricsError::Shape(..) | MetricsError::Empty | MetricsError::ZeroMean => CliError::Numeric(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "fsacdm", version, about = "Contrast-augmented markup-to-image diffusion at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; FSACDM_* variables override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (for `corpus`, the corpus directory itself).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and render the synthetic corpus.
    Corpus,
    /// Train on the corpus, writing a loss log and checkpoints.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Sample images from a trained checkpoint.
    Sample {
        /// Defaults to the checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample this markup into `<out>/sample.pgm` instead of every
        /// corpus document into `<out>/samples/`.
        #[arg(long)]
        markup: Option<String>,
    },
    /// Compare generated images with ground truth; CSV on stdout.
    Eval {
        /// Defaults to `<out>/samples`.
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Defaults to the corpus images.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Score only the filenames present in both directories.
        #[arg(long)]
        allow_partial: bool,
    },
    /// Check the bound sandwich on tractable Gaussian chains.
    VerifyBounds {
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
    },
    /// Finite-difference check of every training loss.
    Gradcheck,
}

/// Resolves configuration from defaults, `--config`, the environment and
/// the global flags, in increasing precedence.
pub fn resolve_config(global: &GlobalArgs, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::resolve(global.config.as_deref(), env)?;
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(t) = global.threads {
        cfg.threads = t;
    }
    if let Some(o) = &global.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_corpus(cfg: &RunConfig, dir: &Path) -> Result<usize, CliError> {
    let docs = generate(cfg.seed, cfg.corpus_size);
    write_corpus(dir, &docs)?;
    Ok(docs.len())
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Vec<(MarkupDoc, RenderedImage)>, CliError> {
    let corpus = read_corpus(&cfg.corpus_dir)?;
    if corpus.len() <= cfg.num_negatives {
        return Err(CliError::Config(format!(
            "corpus of {} documents cannot supply {} negatives per anchor",
            corpus.len(),
            cfg.num_negatives
        )));
    }
    Ok(corpus)
}

/// Trains into `cfg.out_dir`. With `resume`, continues from the checkpoint
/// there; the checkpoint's tensors must match the configured model.
pub fn cmd_train(cfg: &RunConfig, resume: bool, mut on_step: impl FnMut(u64, &crate::diffusion::LossBundle)) -> Result<TrainState, CliError> {
    let model = Model::new(cfg.model_config()?)?;
    let corpus = load_corpus(cfg)?;
    let paths = RunPaths::in_dir(&cfg.out_dir);
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let template = model.init_params(cfg.seed)?;
    let state = if resume {
        TrainState::from_store(&checkpoint::load(&paths.checkpoint)?, &template)?
    } else {
        TrainState::new(template)
    };
    let cfg_path = cfg.out_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
    Ok(train::run(&model, &corpus, &cfg.train_config(), state, &paths, &mut on_step)?)
}

fn load_params(model: &Model, cfg: &RunConfig, path: &Path) -> Result<crate::numerics::ParamStore, CliError> {
    let template = model.init_params(cfg.seed)?;
    Ok(TrainState::from_store(&checkpoint::load(path)?, &template)?.params)
}

/// Samples one image per corpus document into `<out>/samples/NNNNNN.pgm`,
/// or a single image for `markup` into `<out>/sample.pgm`. Returns the
/// written paths.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: Option<&Path>, markup: Option<&str>) -> Result<Vec<PathBuf>, CliError> {
    let model = Model::new(cfg.model_config()?)?;
    let default_ckpt = cfg.out_dir.join(train::CHECKPOINT_FILE);
    let params = load_params(&model, cfg, checkpoint.unwrap_or(&default_ckpt))?;
    let write = |path: PathBuf, img: &RenderedImage| -> Result<PathBuf, CliError> {
        write_pgm(&path, img)?;
        Ok(path)
    };
    if let Some(text) = markup {
        let doc = MarkupDoc::parse(text)?;
        std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
        let img = model.sample(&params, &doc, cfg.seed, 0)?;
        return Ok(vec![write(cfg.out_dir.join("sample.pgm"), &img)?]);
    }
    let corpus = read_corpus(&cfg.corpus_dir)?;
    let dir = cfg.out_dir.join(SAMPLES_DIR);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    corpus
        .iter()
        .enumerate()
        .map(|(i, (doc, _))| write(dir.join(image_name(i)), &model.sample(&params, doc, cfg.seed, i as u64)?))
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, generated: Option<&Path>, truth: Option<&Path>, allow_partial: bool) -> Result<MetricReport, CliError> {
    let default_gen = cfg.out_dir.join(SAMPLES_DIR);
    let default_truth = cfg.corpus_dir.join("images");
    Ok(evaluate_set(generated.unwrap_or(&default_gen), truth.unwrap_or(&default_truth), allow_partial, cfg.threads)?)
}

/// Runs the bound report; a failed sandwich is a numeric failure.
pub fn cmd_verify_bounds(cfg: &RunConfig, samples: usize) -> Result<String, CliError> {
    if samples < MIN_SAMPLES {
        return Err(CliError::Config(format!("--samples must be at least {MIN_SAMPLES}")));
    }
    let rows = verify_bounds(samples, cfg.seed)?;
    let report = format_report(&rows);
    if let Some(r) = rows.iter().find(|r| !r.sandwich) {
        return Err(CliError::Numeric(format!("bound sandwich violated on {}\n{report}", r.name)));
    }
    Ok(report)
}

/// Runs the gradient suite; any loss over tolerance is a numeric failure.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<String, CliError> {
    let entries = run_suite(cfg.seed)?;
    let table = format_suite(&entries);
    if let Some(e) = entries.iter().find(|e| !e.passed()) {
        return Err(CliError::Numeric(format!("gradient check failed for {}\n{table}", e.name)));
    }
    Ok(table)
}

fn dispatch(cli: Cli, env: Vec<(String, String)>) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.global, env)?;
    let stdout = std::io::stdout();
    let out_err = |e: std::io::Error| CliError::Io(format!("stdout: {e}"));
    match cli.command {
        Command::Corpus => {
            let dir = cli.global.out.clone().unwrap_or_else(|| cfg.corpus_dir.clone());
            let n = cmd_corpus(&cfg, &dir)?;
            eprintln!("wrote {n} documents to {}", dir.display());
        }
        Command::Train { resume } => {
            let every = (cfg.steps / 20).max(1);
            let state = cmd_train(&cfg, resume, |step, b| {
                if step % every == 0 {
                    eprintln!("step {step}/{}: total {:.4} l_fa {:.4} l_cl {:.4}", cfg.steps, b.total, b.l_fa, b.l_cl);
                }
            })?;
            eprintln!("finished at step {}; artifacts in {}", state.step, cfg.out_dir.display());
        }
        Command::Sample { checkpoint, markup } => {
            for p in cmd_sample(&cfg, checkpoint.as_deref(), markup.as_deref())? {
                writeln!(stdout.lock(), "{}", p.display()).map_err(out_err)?;
            }
        }
        Command::Eval { generated, truth, allow_partial } => {
            let report = cmd_eval(&cfg, generated.as_deref(), truth.as_deref(), allow_partial)?;
            for name in &report.unmatched {
                eprintln!("skipped unmatched file {name}");
            }
            write_csv(&report, stdout.lock()).map_err(out_err)?;
        }
        Command::VerifyBounds { samples } => {
            write!(stdout.lock(), "{}", cmd_verify_bounds(&cfg, samples)?).map_err(out_err)?;
        }
        Command::Gradcheck => {
            write!(stdout.lock(), "{}", cmd_gradcheck(&cfg)?).map_err(out_err)?;
        }
    }
    Ok(())
}

/// Entry point shared by the binary: parses `args`, runs the command and
/// returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>, env: Vec<(String, String)>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli, env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("fsacdm").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_environment() {
        let cli = parse(&["train", "--seed", "9", "--out", "x", "--threads", "2"]);
        let env = vec![("FSACDM_SEED".to_string(), "4".to_string()), ("FSACDM_LR".to_string(), "0.01".to_string())];
        let cfg = resolve_config(&cli.global, env).unwrap();
        assert_eq!((cfg.seed, cfg.threads, cfg.lr), (9, 2, 0.01));
        assert_eq!(cfg.out_dir, PathBuf::from("x"));
    }

    #[test]
    fn every_subcommand_parses() {
        for args in [
            vec!["corpus"],
            vec!["train", "--resume"],
            vec!["sample", "--markup", "a+b", "--checkpoint", "c.fsac"],
            vec!["eval", "--generated", "g", "--truth", "t", "--allow-partial"],
            vec!["verify-bounds", "--samples", "20000"],
            vec!["gradcheck", "--seed", "3"],
        ] {
            parse(&args);
        }
    }

    #[test]
    fn exit_codes_follow_error_class() {
        let code = |args: &[&str], env: Vec<(String, String)>| {
            main_with_args(std::iter::once("fsacdm").chain(args.iter().copied()).map(OsString::from), env)
        };
        assert_eq!(code(&["bogus"], vec![]), 2);
        assert_eq!(code(&["corpus"], vec![("FSACDM_LAMDA".into(), "1".into())]), 2);
        assert_eq!(code(&["verify-bounds", "--samples", "5"], vec![]), 2);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        let env = vec![("FSACDM_CORPUS_DIR".to_string(), missing.display().to_string())];
        assert_eq!(code(&["train", "--out", dir.path().to_str().unwrap()], env), 4);
        assert_eq!(code(&["--config", missing.to_str().unwrap(), "corpus"], vec![]), 4);
    }

    #[test]
    fn metric_and_checkpoint_errors_map_to_io_and_numeric() {
        assert_eq!(CliError::from(MetricsError::Unmatched(vec!["a".into()])).exit_code(), 4);
        assert_eq!(CliError::from(MetricsError::ZeroMean).exit_code(), 3);
        assert_eq!(CliError::from(CheckpointError::Magic).exit_code(), 4);
        assert_eq!(CliError::from(ModelError::NonFinite { what: "loss".into(), value: f64::NAN }).exit_code(), 3);
        assert_eq!(CliError::from(ModelError::Shape("x".into())).exit_code(), 2);
    }
}
