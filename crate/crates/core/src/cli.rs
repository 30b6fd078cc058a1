//! The `sfa` command line: dataset generation, band matching, training,
//! inference, evaluation, Gram dumps and the ablation table.
//!
//! Every command prints its resolved configuration to stderr and writes
//! results to files or stdout. `SFA_THREADS` caps the worker pool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::Graph;
use crate::detect::{detections_from_json, detections_to_json, Detection};
use crate::error::{Result, SfaError};
use crate::eval::{evaluate, EvalConfig, EvalReport, GroundTruth};
use crate::hsi::{generate_domain_pair, load_dataset, match_bands, read_cube, save_dataset, write_cube, AnnotatedSample, Category, SynthConfig, ANNOTATION_FILE};
use crate::sacm::gram;
use crate::ssam::{ssam_forward, ForwardOptions};
use crate::trainer::{infer_samples, losses_to_csv, train, Ablation, Model, TrainConfig};

pub const THREADS_ENV: &str = "SFA_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sfa", version, about = "Cross-domain hyperspectral object detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target dataset pair.
    GenSynth(GenSynthArgs),
    /// Expand or reduce a cube to a band count.
    BandMatch(BandMatchArgs),
    /// Train a model on a dataset pair.
    Train(TrainArgs),
    /// Detect objects in every cube of a dataset.
    Infer(InferArgs),
    /// Score detections against a dataset's annotations.
    Eval(EvalArgs),
    /// Dump a channel Gram matrix as CSV.
    Gram(GramArgs),
    /// Train and score the three ablation configurations.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct BandMatchArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub bands: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding `source/` and `target/`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A dataset split, or a pair directory whose `target/` is used.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Detection-threshold overrides; layer sizes come from the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A dataset split, or a pair directory whose `target/` is used.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Detections JSON.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Report JSON; the table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GramArgs {
    /// A cube file.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Take the Gram of this model's bottleneck instead of the raw cube.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Reads `sacm_normalize` from a training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SfaError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SfaError::io(path, e))
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(SfaError::InvalidConfig(format!(
                "{} exists and is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| SfaError::io(dir, e))
}

fn load_train_config(path: Option<&Path>, seed: Option<u64>, ablation: Option<Ablation>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_kv(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(a) = ablation {
        cfg.ablation = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn announce(command: &str, resolved: &str) {
    eprintln!("# sfa {command}");
    for line in resolved.lines() {
        eprintln!("#   {line}");
    }
}

/// A split directory itself, or `<dir>/<split>` for a pair directory.
fn split_dir(dir: &Path, split: &str) -> PathBuf {
    if dir.join(ANNOTATION_FILE).exists() {
        dir.to_path_buf()
    } else {
        dir.join(split)
    }
}

fn load_pair(dir: &Path) -> Result<(Vec<AnnotatedSample>, Vec<AnnotatedSample>, Vec<Category>)> {
    let (source, categories) = load_dataset(dir.join("source"), false)?;
    let (target, _) = load_dataset(dir.join("target"), true)?;
    Ok((source, target, categories))
}

fn ground_truth(samples: &[AnnotatedSample]) -> Result<Vec<GroundTruth>> {
    samples.iter().map(GroundTruth::from_sample).collect()
}

/// Trains one configuration and writes checkpoint, loss curve and config
/// into `dir`.
fn train_into(cfg: &TrainConfig, source: &[AnnotatedSample], target: &[AnnotatedSample], dir: &Path) -> Result<Model> {
    let every = (cfg.iterations / 10).max(1);
    let outcome = train(cfg, source, target, |l| {
        if l.step % every == 0 || l.step + 1 == cfg.iterations {
            eprintln!("[{}] step {:>5}  total {:.4}", cfg.ablation, l.step, l.total);
        }
    })?;
    outcome.model.save(dir.join("checkpoint.sfaw"))?;
    write_text(&dir.join("losses.csv"), &losses_to_csv(&outcome.losses))?;
    write_text(&dir.join("config.txt"), &cfg.to_kv())?;
    Ok(outcome.model)
}

fn sorted_detections(model: &Model, samples: &[AnnotatedSample]) -> Result<Vec<Detection>> {
    Ok(infer_samples(model, samples)?.concat())
}

/// Installs the global worker pool size from `SFA_THREADS`, if set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| SfaError::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A second install in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    configure_threads()?;
    let io = |e| SfaError::io(Path::new("<stdout>"), e);
    match cli.command {
        Command::GenSynth(a) => {
            let mut cfg = match &a.config {
                Some(p) => SynthConfig::from_kv(&read_text(p)?)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            announce("gen-synth", &cfg.to_kv());
            prepare_out_dir(&a.out, a.force)?;
            let pair = generate_domain_pair(&cfg)?;
            save_dataset(a.out.join("source"), &pair.source, pair.categories.clone())?;
            save_dataset(a.out.join("target"), &pair.target, pair.categories)?;
            write_text(&a.out.join("synth.cfg"), &cfg.to_kv())?;
            writeln!(stdout, "wrote {} source and {} target cubes to {}", pair.source.len(), pair.target.len(), a.out.display()).map_err(io)?;
        }
        Command::BandMatch(a) => {
            announce("band-match", &format!("in = {}\nbands = {}\nout = {}", a.input.display(), a.bands, a.out.display()));
            if a.bands == 0 {
                return Err(SfaError::InvalidConfig("--bands must be at least 1".into()));
            }
            let cube = read_cube(&a.input)?;
            let matched = match_bands(&cube, a.bands);
            write_cube(&matched, &a.out)?;
            writeln!(stdout, "{} bands -> {} bands", cube.bands(), matched.bands()).map_err(io)?;
        }
        Command::Train(a) => {
            let cfg = load_train_config(a.config.as_deref(), a.seed, a.ablation)?;
            announce("train", &cfg.to_kv());
            let (source, target, _) = load_pair(&a.dataset)?;
            prepare_out_dir(&a.out, a.force)?;
            train_into(&cfg, &source, &target, &a.out)?;
            writeln!(stdout, "wrote {}", a.out.join("checkpoint.sfaw").display()).map_err(io)?;
        }
        Command::Infer(a) => {
            let detect = match &a.config {
                Some(p) => TrainConfig::from_kv(&read_text(p)?)?.detect,
                None => Default::default(),
            };
            let model = Model::load(&a.checkpoint, detect)?;
            announce("infer", &model.detect.to_kv());
            let (samples, _) = load_dataset(split_dir(&a.dataset, "target"), true)?;
            let json = detections_to_json(&sorted_detections(&model, &samples)?);
            match &a.out {
                Some(p) => write_text(p, &(json + "\n"))?,
                None => writeln!(stdout, "{json}").map_err(io)?,
            }
        }
        Command::Eval(a) => {
            announce("eval", &format!("dataset = {}\nin = {}", a.dataset.display(), a.input.display()));
            let (samples, categories) = load_dataset(split_dir(&a.dataset, "target"), true)?;
            let dets = detections_from_json(&read_text(&a.input)?).map_err(|e| SfaError::Json(format!("{}: {e}", a.input.display())))?;
            let report = evaluate(&dets, &ground_truth(&samples)?, &categories, &EvalConfig::default())?;
            write!(stdout, "{}", report.to_table("SFA")).map_err(io)?;
            if let Some(p) = &a.out {
                write_text(p, &(report.to_json() + "\n"))?;
            }
        }
        Command::Gram(a) => {
            let normalize = match &a.config {
                Some(p) => TrainConfig::from_kv(&read_text(p)?)?.sacm_normalize,
                None => false,
            };
            announce("gram", &format!("in = {}\nsacm_normalize = {normalize}", a.input.display()));
            let cube = read_cube(&a.input)?;
            let feature = match &a.checkpoint {
                None => cube.standardized_tensor().reshaped([1, cube.bands(), cube.height(), cube.width()])?,
                Some(ck) => {
                    let model = Model::load(ck, Default::default())?;
                    let mut g = Graph::new();
                    let p = model.params.bind(&mut g);
                    let x = g.constant(cube.standardized_tensor());
                    let out = ssam_forward(&mut g, &p, x, &model.ssam, ForwardOptions::INFERENCE)?;
                    g.value(out.bottleneck()).clone()
                }
            };
            let csv = gram(&feature, normalize)?.to_csv();
            match &a.out {
                Some(p) => write_text(p, &csv)?,
                None => write!(stdout, "{csv}").map_err(io)?,
            }
        }
        Command::Ablate(a) => {
            let base = load_train_config(a.config.as_deref(), a.seed, None)?;
            announce("ablate", &base.to_kv());
            let (source, target, categories) = load_pair(&a.dataset)?;
            prepare_out_dir(&a.out, a.force)?;
            let gt = ground_truth(&target)?;
            let mut rows: Vec<(Ablation, EvalReport)> = Vec::new();
            for mode in Ablation::TABLE {
                let cfg = TrainConfig {
                    ablation: mode,
                    ..base.clone()
                };
                let dir = a.out.join(mode.to_string());
                fs::create_dir_all(&dir).map_err(|e| SfaError::io(&dir, e))?;
                let model = train_into(&cfg, &source, &target, &dir)?;
                let dets = sorted_detections(&model, &target)?;
                write_text(&dir.join("detections.json"), &(detections_to_json(&dets) + "\n"))?;
                let report = evaluate(&dets, &gt, &categories, &EvalConfig::default())?;
                write_text(&dir.join("report.json"), &(report.to_json() + "\n"))?;
                rows.push((mode, report));
            }
            let table = ablation_table(&rows);
            write_text(&a.out.join("ablation.txt"), &table)?;
            write!(stdout, "{table}").map_err(io)?;
        }
    }
    Ok(())
}

/// Rows labelled as in the ablation study, one AP@0.5 column.
pub fn ablation_table(rows: &[(Ablation, EvalReport)]) -> String {
    let width = rows.iter().map(|(m, _)| m.label().len()).max().unwrap_or(0);
    let mut s = format!("{:width$}  {:>8}\n", "", "AP");
    for (mode, r) in rows {
        let ap = r.ap50.map(|v| format!("{:.1}%", 100.0 * v)).unwrap_or_else(|| "N/A".into());
        s.push_str(&format!("{:width$}  {ap:>8}\n", mode.label()));
    }
    s
}
