//! Command-line front end. Each subcommand wraps a library entry point and
//! leaves a JSON run manifest next to its outputs so a run can be repeated
//! from the manifest alone.
//!
//! Relative output paths are resolved against `$CRRCD_OUTPUT_ROOT` when it
//! is set. Exit codes: 0 success, 2 invalid input, 3 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{self, BinaryLayout, Dataset, Split, StudentInput, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluator::{self, ProbeSettings};
use crate::trainer::{dataset_fingerprint, write_metrics, Model, Phase, Trainer};

pub const OUTPUT_ROOT_VAR: &str = "CRRCD_OUTPUT_ROOT";
pub const RUN_MANIFEST: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "crrcd", version, about = "Cross-resolution relational contrastive distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a paired high/low-resolution corpus, synthetic or imported.
    MakeData(MakeDataArgs),
    /// Train a teacher, a plain student or a distilled student.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one protocol.
    Eval(EvalArgs),
    /// Write per-sample embeddings of a checkpoint as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    /// Generate the built-in synthetic corpus.
    #[arg(long, conflicts_with = "binary")]
    pub synthetic: bool,
    /// Import CIFAR-style binary batch files as the training split instead.
    #[arg(long, value_name = "FILE", num_args = 1..)]
    pub binary: Vec<PathBuf>,
    /// Binary batch files for the test split.
    #[arg(long, value_name = "FILE", num_args = 1.., requires = "binary")]
    pub binary_test: Vec<PathBuf>,
    /// Record layout of the binary batches.
    #[arg(long, value_enum, default_value_t = BinaryFormat::Cifar10)]
    pub binary_format: BinaryFormat,
    /// Class count (for binary imports: the label range).
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Training samples per class.
    #[arg(long, default_value_t = 30)]
    pub per_class: usize,
    /// Test samples per class; 0 skips the test split.
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub hires: usize,
    /// Downsampling factor between the two views.
    #[arg(long, default_value_t = 4)]
    pub factor: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    /// Pixel noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, value_enum, default_value_t = InputMode::Native)]
    pub student_input: InputMode,
    /// Number of verification pairs to draw over the test split.
    #[arg(long, default_value_t = 0)]
    pub pairs: usize,
    #[arg(long, default_value_t = 5)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing corpus in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BinaryFormat {
    Cifar10,
    Cifar100,
}

impl From<BinaryFormat> for BinaryLayout {
    fn from(f: BinaryFormat) -> Self {
        match f {
            BinaryFormat::Cifar10 => BinaryLayout::CIFAR10,
            BinaryFormat::Cifar100 => BinaryLayout::CIFAR100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputMode {
    Native,
    BilinearUpsample,
}

impl From<InputMode> for StudentInput {
    fn from(m: InputMode) -> Self {
        match m {
            InputMode::Native => StudentInput::Native,
            InputMode::BilinearUpsample => StudentInput::BilinearUpsample,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Teacher,
    Plain,
    Distill,
}

impl From<Mode> for Phase {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Teacher => Phase::Teacher,
            Mode::Plain => Phase::Plain,
            Mode::Distill => Phase::Distill,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, conflicts_with = "from_manifest")]
    pub config: Option<PathBuf>,
    /// Reuse the resolved config recorded in an earlier run manifest.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
    /// `key=value` config overrides, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE", num_args = 1..)]
    pub overrides: Vec<String>,
    /// Training split directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional held-out split for a final accuracy.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Teacher checkpoint, required for `--mode distill`.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Continue from a checkpoint of this same run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps and save a checkpoint.
    #[arg(long)]
    pub stop_at: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Top1,
    Verify,
    Probe,
    Retrieve,
}

impl Protocol {
    fn name(self) -> &'static str {
        match self {
            Protocol::Top1 => "top1",
            Protocol::Verify => "verify",
            Protocol::Probe => "probe",
            Protocol::Retrieve => "retrieve",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation split; the gallery for `retrieve`, the test split for `probe`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub protocol: Protocol,
    /// Pairs protocol file (`id_a id_b {0,1}` lines) for `verify`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Training split for the `probe` classifier.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Probe split for `retrieve`.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    /// Report directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything needed to reproduce or audit one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved config with every default materialized.
    pub config: Option<ExperimentConfig>,
    pub config_hash: Option<String>,
    /// Flat view of the settings that affect results.
    pub hyperparameters: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub results: BTreeMap<String, f64>,
    pub status: String,
    pub platform: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config: None,
            config_hash: None,
            hyperparameters: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            results: BTreeMap::new(),
            status: "running".into(),
            platform: platform(),
            started_unix: now(),
            finished_unix: 0,
        }
    }

    fn with_config(mut self, config: &ExperimentConfig) -> Self {
        self.hyperparameters = hyperparameters(config);
        self.config_hash = Some(config.hash());
        self.config = Some(config.clone());
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(vec![format!("{}: {e}", path.display())]))
    }

    fn save(mut self, path: &Path, status: &str) -> Result<()> {
        self.status = status.to_string();
        self.finished_unix = now();
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn platform() -> String {
    format!("{}-{}, f64, single-threaded kernels", std::env::consts::ARCH, std::env::consts::OS)
}

/// Fills every optional field that otherwise defaults from the data.
pub fn resolve_config(config: &ExperimentConfig, train_len: usize) -> ExperimentConfig {
    let mut c = config.clone();
    c.critic.dataset_cardinality.get_or_insert(train_len.max(1));
    c.critic.hidden_dim.get_or_insert(config.critic.relation_dim);
    c.critic.proj_dim.get_or_insert(config.critic.relation_dim);
    c
}

pub fn hyperparameters(c: &ExperimentConfig) -> BTreeMap<String, String> {
    let opt = |v: Option<usize>| v.map_or("from data".to_string(), |v| v.to_string());
    let entries = [
        ("seed", c.seed.to_string()),
        ("epochs", c.epochs.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("teacher.arch", c.teacher.arch.clone()),
        ("teacher.epochs", c.teacher.epochs.to_string()),
        ("student.arch", c.student.arch.clone()),
        ("student.input", c.student.input.as_str().to_string()),
        ("alpha", c.loss.alpha.to_string()),
        ("beta", c.loss.beta.to_string()),
        ("rho", c.loss.rho.to_string()),
        ("cls", format!("{:?}", c.loss.cls).to_lowercase()),
        ("negative_weighting", format!("{:?}", c.loss.negative_weighting).to_lowercase()),
        ("rcd_reduction", "mean over positives".to_string()),
        ("tau", c.critic.tau.to_string()),
        ("n", c.critic.n_negatives.to_string()),
        ("m", opt(c.critic.dataset_cardinality)),
        ("d_r", c.critic.relation_dim.to_string()),
        ("relation_hidden", opt(c.critic.hidden_dim)),
        ("critic_proj", opt(c.critic.proj_dim)),
        ("relation_lr_scale", c.critic.lr_scale.to_string()),
        ("bank.capacity", c.bank.capacity.to_string()),
        ("bank.policy", format!("{:?}", c.bank.policy).to_lowercase()),
        ("lr", c.optimizer.lr.to_string()),
        ("momentum", c.optimizer.momentum.to_string()),
        ("weight_decay", c.optimizer.weight_decay.to_string()),
        ("milestones", format!("{:?}", c.optimizer.milestones)),
        ("gamma", c.optimizer.gamma.to_string()),
    ];
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Resolves an output path against `$CRRCD_OUTPUT_ROOT`.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

/// Exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_)
        | Error::Parse { .. }
        | Error::ConfigHashMismatch { .. }
        | Error::Protocol(_)
        | Error::MissingId(_) => 2,
        _ => 3,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData(a) => cmd_make_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::ExportEmbeddings(a) => cmd_export(&a),
    }
}

// ---------------------------------------------------------------------------
// make-data
// ---------------------------------------------------------------------------

pub fn cmd_make_data(a: &MakeDataArgs) -> Result<()> {
    if !a.synthetic && a.binary.is_empty() {
        return Err(Error::Validation(vec!["make-data needs --synthetic or --binary <FILE>...".into()]));
    }
    let out = output_path(&a.out);
    let targets = [out.join("train"), out.join("test"), out.join("pairs.txt"), out.join(RUN_MANIFEST)];
    let occupied = fs::read_dir(&out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !a.force {
        return Err(Error::Validation(vec![format!("{} is not empty; pass --force to overwrite", out.display())]));
    }
    for t in &targets {
        let gone = if t.is_dir() { fs::remove_dir_all(t) } else if t.exists() { fs::remove_file(t) } else { Ok(()) };
        gone.map_err(|e| Error::io(t, e))?;
    }

    let mut manifest = RunManifest::new("make-data");
    let h = &mut manifest.hyperparameters;
    h.insert("classes".into(), a.classes.to_string());
    h.insert("factor".into(), a.factor.to_string());
    h.insert("student_input".into(), StudentInput::from(a.student_input).as_str().into());
    h.insert("seed".into(), a.seed.to_string());
    let splits = if a.synthetic {
        synthetic_splits(a, h)?
    } else {
        binary_splits(a, h, &mut manifest.inputs)?
    };

    let mut pair_source = None;
    for mut ds in splits {
        ds.student_input = a.student_input.into();
        let m = data::write_dataset(&out.join(&ds.split), &ds, a.seed)?;
        manifest.hyperparameters.insert("hires".into(), m.hires.to_string());
        manifest.hyperparameters.insert("lowres".into(), m.lowres.to_string());
        manifest.outputs.insert(ds.split.clone(), m.checksum.clone());
        manifest.results.insert(format!("{}_samples", ds.split), ds.len() as f64);
        pair_source = Some(ds);
    }
    if a.pairs > 0 {
        let ds = pair_source.expect("at least the training split exists");
        let labels: Vec<(usize, usize)> = ds.samples.iter().map(|s| (s.sample_id, s.label)).collect();
        let pairs = data::make_pairs(&labels, a.pairs, a.seed);
        let path = out.join("pairs.txt");
        fs::write(&path, data::render_pairs(&pairs)).map_err(|e| Error::io(&path, e))?;
        manifest.outputs.insert("pairs".into(), format!("{} pairs over {}", pairs.len(), ds.split));
    }
    manifest.save(&out.join(RUN_MANIFEST), "complete")?;
    println!("wrote corpus to {}", out.display());
    Ok(())
}

fn synthetic_splits(a: &MakeDataArgs, h: &mut BTreeMap<String, String>) -> Result<Vec<Dataset>> {
    let mut spec = SyntheticSpec::new(a.classes, a.per_class, a.hires, a.seed);
    spec.factor = a.factor;
    spec.channels = a.channels;
    if let Some(noise) = a.noise {
        spec.noise = noise;
    }
    h.insert("source".into(), "synthetic".into());
    h.insert("per_class".into(), a.per_class.to_string());
    h.insert("test_per_class".into(), a.test_per_class.to_string());
    h.insert("channels".into(), a.channels.to_string());
    h.insert("noise".into(), spec.noise.to_string());
    h.insert("detail".into(), spec.detail.to_string());
    h.insert("jitter".into(), spec.jitter.to_string());
    let mut splits = vec![(Split::Train, a.per_class)];
    if a.test_per_class > 0 {
        splits.push((Split::Test, a.test_per_class));
    }
    splits
        .into_iter()
        .map(|(split, per_class)| {
            let s = SyntheticSpec { per_class, ..spec };
            Dataset::new(split.name(), a.classes, a.factor, data::make_synthetic_split(&s, split)?)
        })
        .collect()
}

fn binary_splits(a: &MakeDataArgs, h: &mut BTreeMap<String, String>, inputs: &mut BTreeMap<String, String>) -> Result<Vec<Dataset>> {
    let layout = BinaryLayout::from(a.binary_format);
    h.insert("source".into(), format!("{:?}", a.binary_format).to_lowercase());
    let mut out = Vec::new();
    for (split, files) in [(Split::Train, &a.binary), (Split::Test, &a.binary_test)] {
        if files.is_empty() {
            continue;
        }
        let list: Vec<String> = files.iter().map(|f| f.display().to_string()).collect();
        inputs.insert(split.name().into(), list.join(" "));
        out.push(data::import_binary_batches(split.name(), files, layout, a.classes, a.factor)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut config = match (&a.config, &a.from_manifest) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(p)) => RunManifest::load(p)?
            .config
            .ok_or_else(|| Error::Validation(vec![format!("{} records no config", p.display())]))?,
        (None, None) => ExperimentConfig::default(),
    };
    for o in &a.overrides {
        config.apply_override(o)?;
    }
    config.validate()?;
    Ok(config)
}

fn load_teacher(path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.model.phase != Phase::Teacher {
        return Err(Error::Validation(vec![format!(
            "{} holds a {} model, not a teacher",
            path.display(),
            ckpt.model.phase.as_str()
        )]));
    }
    Ok(ckpt.model)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = load_config(a)?;
    let train = data::load_dataset(&a.data)?;
    let config = resolve_config(&config, train.len());
    let phase = Phase::from(a.mode);
    let teacher = match (phase, &a.teacher) {
        (Phase::Distill, Some(p)) => Some(load_teacher(p)?),
        (Phase::Distill, None) => return Err(Error::Validation(vec!["--mode distill needs --teacher <checkpoint>".into()])),
        (_, Some(_)) => return Err(Error::Validation(vec!["--teacher only applies to --mode distill".into()])),
        _ => None,
    };
    let out = output_path(&a.out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut manifest = RunManifest::new(&format!("train --mode {}", phase.as_str())).with_config(&config);
    manifest.inputs.insert("train".into(), format!("{} ({})", a.data.display(), dataset_fingerprint(&train)));
    if let (Some(t), Some(p)) = (&teacher, &a.teacher) {
        manifest.inputs.insert("teacher".into(), format!("{} ({})", p.display(), t.content_hash()));
    }

    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.model.phase != phase {
                return Err(Error::Validation(vec![format!(
                    "{} was written by a {} run, not {}",
                    p.display(),
                    ckpt.model.phase.as_str(),
                    phase.as_str()
                )]));
            }
            manifest.inputs.insert("resume".into(), format!("{} (step {})", p.display(), ckpt.step));
            Trainer::resume(ckpt, &config, &train, teacher.as_ref())?
        }
        None => Trainer::new(&config, &train, phase, teacher.as_ref())?,
    };
    trainer.run(a.stop_at)?;

    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    trainer.checkpoint().save(&ckpt_path)?;
    manifest.outputs.insert("checkpoint".into(), ckpt_path.display().to_string());
    manifest.outputs.insert("metrics".into(), metrics_path.display().to_string());
    manifest.results.insert("steps".into(), trainer.step_count() as f64);
    let status = if trainer.is_finished() { "complete" } else { "stopped" };
    let (model, metrics) = trainer.finish()?;
    write_metrics(&metrics_path, &metrics)?;
    if status == "complete" {
        let acc = evaluator::top1(&model, &train)?;
        manifest.results.insert("train_top1".into(), acc);
        println!("train top1 {acc:.4}");
        if let Some(v) = &a.val {
            let val = data::load_dataset(v)?;
            let acc = evaluator::top1(&model, &val)?;
            manifest.inputs.insert("val".into(), format!("{} ({})", v.display(), dataset_fingerprint(&val)));
            manifest.results.insert("val_top1".into(), acc);
            println!("val top1 {acc:.4}");
        }
    } else {
        println!("stopped at step {}", manifest.results["steps"]);
    }
    manifest.save(&out.join(RUN_MANIFEST), status)
}

// ---------------------------------------------------------------------------
// eval / export
// ---------------------------------------------------------------------------

fn need<'p>(path: &'p Option<PathBuf>, protocol: Protocol, flag: &str) -> Result<&'p PathBuf> {
    let path = path.as_ref().ok_or_else(|| Error::Protocol(format!("protocol {} needs {flag}", protocol.name())))?;
    if !path.exists() {
        return Err(Error::Protocol(format!("protocol {}: {flag} {} does not exist", protocol.name(), path.display())));
    }
    Ok(path)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let config = ExperimentConfig::from_toml(&ckpt.config)?;
    let model = &ckpt.model;
    let ds = data::load_dataset(&a.data)?;
    let mut manifest = RunManifest::new(&format!("eval --protocol {}", a.protocol.name()));
    manifest.inputs.insert("checkpoint".into(), format!("{} ({})", a.checkpoint.display(), model.content_hash()));
    manifest.inputs.insert("data".into(), format!("{} ({})", a.data.display(), dataset_fingerprint(&ds)));

    let mut extra: Option<(String, String)> = None;
    let report = match a.protocol {
        Protocol::Top1 => {
            let acc = evaluator::top1(model, &ds)?;
            manifest.results.insert("top1".into(), acc);
            evaluator::render_report(&[("protocol", "top1".into()), ("samples", ds.len().to_string()), ("top1", acc.to_string())])
        }
        Protocol::Verify => {
            let path = need(&a.pairs, a.protocol, "--pairs")?;
            let pairs = data::load_pairs_protocol(path)?;
            if pairs.is_empty() {
                return Err(Error::Protocol(format!("{} holds no pairs", path.display())));
            }
            let r = evaluator::verify_pairs(model, &ds, &pairs, config.eval.histogram_bins)?;
            manifest.inputs.insert("pairs".into(), path.display().to_string());
            manifest.results.insert("accuracy".into(), r.accuracy);
            manifest.results.insert("threshold".into(), r.threshold);
            manifest.results.insert("margin".into(), r.margin);
            manifest.results.insert("histogram_intersection".into(), r.histogram_intersection);
            extra = Some(("verify_scores.csv".into(), r.scores_csv()));
            r.to_text()
        }
        Protocol::Probe => {
            let path = need(&a.train, a.protocol, "--train")?;
            let train = data::load_dataset(path)?;
            let settings = ProbeSettings {
                epochs: config.eval.probe_epochs,
                lr: config.eval.probe_lr,
                seed: config.seed,
                ..ProbeSettings::default()
            };
            let acc = evaluator::linear_probe(model, &train, &ds, &settings)?;
            manifest.inputs.insert("train".into(), path.display().to_string());
            manifest.results.insert("probe_top1".into(), acc);
            evaluator::render_report(&[
                ("protocol", "probe".into()),
                ("train_samples", train.len().to_string()),
                ("test_samples", ds.len().to_string()),
                ("top1", acc.to_string()),
            ])
        }
        Protocol::Retrieve => {
            let path = need(&a.probes, a.protocol, "--probes")?;
            let probes = data::load_dataset(path)?;
            let r = evaluator::retrieve(model, &ds, &probes, &config.eval.ranks)?;
            manifest.inputs.insert("probes".into(), path.display().to_string());
            for (k, acc) in r.ks.iter().zip(&r.accuracy) {
                manifest.results.insert(format!("rank{k}"), *acc);
            }
            r.to_text()
        }
    };

    let out = match &a.out {
        Some(p) => output_path(p),
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let report_path = out.join(format!("{}.txt", a.protocol.name()));
    fs::write(&report_path, &report).map_err(|e| Error::io(&report_path, e))?;
    manifest.outputs.insert("report".into(), report_path.display().to_string());
    if let Some((name, body)) = extra {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        manifest.outputs.insert("scores".into(), p.display().to_string());
    }
    print!("{report}");
    manifest.save(&out.join(format!("eval-{}.json", a.protocol.name())), "complete")
}

pub fn cmd_export(a: &ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = data::load_dataset(&a.data)?;
    let out = output_path(&a.out);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let rows = evaluator::export_embeddings(&ckpt.model, &ds, &out)?;
    println!("wrote {rows} embeddings to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flags_are_fatal() {
        assert_eq!(main_with(["crrcd", "train", "--bogus"]), 2);
        assert_eq!(main_with(["crrcd", "--help"]), 0);
    }

    #[test]
    fn resolution_fills_data_dependent_fields() {
        let c = resolve_config(&ExperimentConfig::default(), 300);
        assert_eq!(c.critic.dataset_cardinality, Some(300));
        assert_eq!(c.critic.hidden_dim, Some(c.critic.relation_dim));
        assert_eq!(resolve_config(&c, 7), c);
    }

    #[test]
    fn manifest_lists_core_hyperparameters() {
        let h = hyperparameters(&ExperimentConfig::default());
        for k in ["alpha", "beta", "tau", "rho", "n", "m", "d_r", "seed"] {
            assert!(h.contains_key(k), "{k}");
        }
    }
}
