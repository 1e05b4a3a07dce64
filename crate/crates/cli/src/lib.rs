//! Command-line surface of the depth synthesis pipeline.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dcl_core::depth::Domain;
use dcl_core::losses::GanObjective;
use dcl_core::metrics::{reports_to_csv, MetricReport, SsimWindow};
use dcl_core::nn::ModelConfig;
use dcl_core::scene::{build_dataset, load_manifest, simulate_dataset, DomainConfig, Manifest, NoiseModel, Split};
use dcl_core::tasks::{evaluate_task_with, finetune, train_task, TaskConfig, TaskKind, TaskModel};
use dcl_core::train::{synthesize_dataset, train, TrainConfig, FINAL_CHECKPOINT, LOG_FILE};
use dcl_core::{DclError, Result};
use serde::Serialize;

pub mod report;
pub mod run;

use run::{hash_inputs, layered_config, RunManifest};

pub const DATA_DIR_ENV: &str = "DCL_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "dcl", version, about = "Unpaired synthetic-to-real depth synthesis and transfer evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a clean synthetic or a noisy real-domain dataset.
    GenData(GenDataArgs),
    /// Corrupt a clean dataset with the parametric sensor model.
    Simulate(SimulateArgs),
    /// Train the synthesis network on unpaired synthetic and real sets.
    TrainDcl(TrainDclArgs),
    /// Run a trained synthesis network over a clean dataset.
    Synthesize(SynthesizeArgs),
    /// Train an enhancement or normal-estimation network.
    TrainTask(TrainTaskArgs),
    /// Continue task training on a seeded fraction of labelled real data.
    Finetune(FinetuneArgs),
    /// Evaluate a task model on a validation set.
    Eval(EvalArgs),
    /// Assemble metric tables and figures.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub domain: Domain,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    #[arg(long, default_value = "synthesis")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON overrides of the sensor noise model.
    #[arg(long)]
    pub noise_config: Option<PathBuf>,
    /// JSON overrides of the scene distribution.
    #[arg(long)]
    pub scene_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub noise_config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Term {
    Adv,
    Dc,
    Idt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Gan {
    Logistic,
    Lsgan,
}

#[derive(Debug, Args)]
pub struct TrainDclArgs {
    #[arg(long)]
    pub synth: PathBuf,
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON overrides of the training configuration; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub residual_blocks: Option<usize>,
    #[arg(long)]
    pub projection_dim: Option<usize>,
    /// Disable a loss term; repeatable.
    #[arg(long, value_enum)]
    pub ablate: Vec<Term>,
    /// Condition the generator on color.
    #[arg(long)]
    pub use_rgb: bool,
    #[arg(long, value_enum)]
    pub gan: Option<Gan>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub lr_decay: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainTaskArgs {
    #[arg(long)]
    pub task: TaskKind,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub finetune_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the step budget stored with the model.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Row label in tables; defaults to the training data's source.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long, default_value_t = 11)]
    pub ssim_window: usize,
    #[arg(long, default_value_t = 1.5)]
    pub ssim_sigma: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Method-by-metric table (CSV).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub plots: Option<PathBuf>,
    #[arg(long)]
    pub clean: Option<PathBuf>,
    #[arg(long)]
    pub synthesized: Option<PathBuf>,
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Samples to render per panel set.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<DclError> for Failure {
    fn from(e: DclError) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

/// 1 usage or configuration, 2 data or I/O, 3 numeric.
pub fn exit_code(e: &DclError) -> u8 {
    match e {
        DclError::Usage(_) | DclError::Config(_) | DclError::Sampling(_) => 1,
        DclError::Numeric(_) => 3,
        DclError::Format { .. }
        | DclError::Range { .. }
        | DclError::Io { .. }
        | DclError::Json { .. }
        | DclError::Data(_)
        | DclError::Generation(_)
        | DclError::Evaluation(_) => 2,
    }
}

/// Relative dataset paths resolve under `DCL_DATA_DIR` when it is set.
pub fn data_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or_default()
}

fn load(p: &Path) -> Result<Manifest> {
    load_manifest(&data_path(p))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| DclError::Data(format!("{}: {e}", p.display())))
}

fn list_dir(p: &Path) -> Result<Vec<String>> {
    let mut v: Vec<String> = fs::read_dir(p)
        .map_err(|e| DclError::Data(format!("{}: {e}", p.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != run::RUN_MANIFEST)
        .collect();
    v.sort();
    Ok(v)
}

struct Run<'a> {
    command: &'a str,
    args: &'a [String],
}

impl Run<'_> {
    fn record(
        &self,
        output: &Path,
        config: serde_json::Value,
        seed: u64,
        inputs: Vec<PathBuf>,
        artifacts: Vec<String>,
    ) -> Result<()> {
        let m = RunManifest {
            command: self.command.to_string(),
            args: self.args.to_vec(),
            config,
            seed,
            input_hash: hash_inputs(&inputs)?,
            inputs,
            artifacts,
        };
        m.write(output)?;
        Ok(())
    }
}

fn noise_model(file: Option<&Path>) -> Result<NoiseModel> {
    let (nm, _) = layered_config(&NoiseModel::default(), file)?;
    nm.validate()?;
    Ok(nm)
}

fn config_inputs(files: &[Option<&PathBuf>]) -> Vec<PathBuf> {
    files.iter().flatten().map(|p| p.to_path_buf()).collect()
}

fn gen_data(a: &GenDataArgs, run: &Run) -> Result<String> {
    let nm = noise_model(a.noise_config.as_deref())?;
    let (mut cfg, overrides) = layered_config(&DomainConfig::for_domain(a.domain, a.res, a.res), a.scene_config.as_deref())?;
    if overrides.get("width").is_none() {
        cfg.width = a.res;
    }
    if overrides.get("height").is_none() {
        cfg.height = a.res;
    }
    cfg.domain = a.domain;
    let out = data_path(&a.out);
    let m = build_dataset(&cfg, &nm, a.split, a.count, a.seed, &out)?;
    let config = serde_json::json!({ "scene": cfg, "noise": nm, "split": a.split, "count": a.count });
    run.record(
        &out,
        config,
        a.seed,
        config_inputs(&[a.noise_config.as_ref(), a.scene_config.as_ref()]),
        list_dir(&out)?,
    )?;
    Ok(format!("wrote {} {} samples to {}", m.count, a.domain, out.display()))
}

fn simulate(a: &SimulateArgs, run: &Run) -> Result<String> {
    let nm = noise_model(a.noise_config.as_deref())?;
    let clean = load(&a.clean)?;
    let out = data_path(&a.out);
    let m = simulate_dataset(&clean, &nm, a.seed, &out)?;
    let mut inputs = vec![clean.root.clone()];
    inputs.extend(config_inputs(&[a.noise_config.as_ref()]));
    run.record(&out, to_value(&nm), a.seed, inputs, list_dir(&out)?)?;
    Ok(format!("simulated {} samples into {}", m.count, out.display()))
}

/// Defaults, then the config file, then explicit flags.
pub fn train_config(a: &TrainDclArgs, resolution: usize) -> Result<TrainConfig> {
    let (mut cfg, overrides) = layered_config(&TrainConfig::default(), a.config.as_deref())?;
    let model_over = overrides.get("model");
    let explicit = |k: &str| model_over.and_then(|m| m.get(k)).is_some();
    if let Some(r) = model_over.and_then(|m| m.get("resolution")) {
        if r.as_u64() != Some(resolution as u64) {
            return Err(DclError::Config(format!("config resolution {r} but the data is {resolution} px")));
        }
    }
    let m = &mut cfg.model;
    m.resolution = resolution;
    if let Some(w) = a.width {
        m.base_width = w;
    }
    if let Some(r) = a.residual_blocks {
        m.residual_blocks = r;
    }
    if let Some(p) = a.projection_dim {
        m.projection_dim = p;
    }
    if !explicit("tapped_layers") {
        m.tapped_layers = ModelConfig::new(resolution, m.base_width, m.residual_blocks).tapped_layers;
    }
    if a.use_rgb {
        m.use_rgb = true;
    }
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { cfg.$field = v; } )* };
    }
    set!(steps, batch_size, seed, alpha, beta, tau, lr, checkpoint_every);
    if let Some(g) = a.gan {
        cfg.gan = match g {
            Gan::Logistic => GanObjective::Logistic,
            Gan::Lsgan => GanObjective::LeastSquares,
        };
    }
    if a.lr_decay {
        cfg.lr_decay = true;
    }
    for t in &a.ablate {
        match t {
            Term::Adv => cfg.enable_adv = false,
            Term::Dc => cfg.enable_dc = false,
            Term::Idt => cfg.enable_idt = false,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_dcl(a: &TrainDclArgs, run: &Run) -> Result<String> {
    let synth = load(&a.synth)?;
    let real = load(&a.real)?;
    let cfg = train_config(a, synth.width)?;
    let out = a.out.clone();
    let outcome = train(&synth, &real, &cfg, &out, a.resume.as_deref())?;
    let mut inputs = vec![synth.root.clone(), real.root.clone()];
    inputs.extend(config_inputs(&[a.config.as_ref(), a.resume.as_ref()]));
    run.record(&out, to_value(&cfg), cfg.seed, inputs, list_dir(&out)?)?;
    let last = outcome.log.last().map(|l| l.total).unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} steps (final total {last:.4}); log {}, checkpoint {}",
        outcome.log.len(),
        out.join(LOG_FILE).display(),
        outcome.checkpoint.display()
    ))
}

fn synthesize(a: &SynthesizeArgs, run: &Run) -> Result<String> {
    let clean = load(&a.clean)?;
    let out = data_path(&a.out);
    let m = synthesize_dataset(&a.checkpoint, &clean, &out)?;
    let inputs = vec![a.checkpoint.clone(), clean.root.clone()];
    run.record(&out, serde_json::Value::Null, 0, inputs, list_dir(&out)?)?;
    Ok(format!("synthesized {} samples into {}", m.count, out.display()))
}

fn write_log(path: &Path, log: &[f64]) -> Result<()> {
    let text: String = log
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{{\"step\":{},\"loss\":{l}}}\n", i + 1))
        .collect();
    fs::write(path, text).map_err(|e| DclError::Data(format!("{}: {e}", path.display())))
}

pub fn task_config(a: &TrainTaskArgs) -> Result<TaskConfig> {
    let (mut cfg, _) = layered_config(&TaskConfig::default(), a.config.as_deref())?;
    cfg.kind = a.task;
    if let Some(w) = a.width {
        cfg.base_width = w;
    }
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { cfg.$field = v; } )* };
    }
    set!(steps, finetune_steps, lr, batch_size, seed);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train_task(a: &TrainTaskArgs, run: &Run) -> Result<String> {
    let cfg = task_config(a)?;
    let data = load(&a.data)?;
    let (model, log) = train_task(&data, &cfg)?;
    create_dir(&a.out)?;
    model.save(&a.out.join(FINAL_CHECKPOINT))?;
    write_log(&a.out.join("task_log.jsonl"), &log)?;
    let mut inputs = vec![data.root.clone()];
    inputs.extend(config_inputs(&[a.config.as_ref()]));
    run.record(&a.out, to_value(&cfg), cfg.seed, inputs, list_dir(&a.out)?)?;
    Ok(format!(
        "trained {} model for {} steps (final loss {:.5})",
        cfg.kind,
        log.len(),
        log.last().copied().unwrap_or(f64::NAN)
    ))
}

fn cmd_finetune(a: &FinetuneArgs, run: &Run) -> Result<String> {
    let mut model = TaskModel::load(&a.model)?;
    if let Some(s) = a.steps {
        model.config.finetune_steps = s;
    }
    let data = load(&a.data)?;
    let (tuned, log) = finetune(&model, &data, a.fraction)?;
    create_dir(&a.out)?;
    tuned.save(&a.out.join(FINAL_CHECKPOINT))?;
    write_log(&a.out.join("finetune_log.jsonl"), &log)?;
    let config = serde_json::json!({ "task": tuned.config, "fraction": a.fraction });
    run.record(
        &a.out,
        config,
        tuned.config.seed,
        vec![a.model.clone(), data.root.clone()],
        list_dir(&a.out)?,
    )?;
    Ok(format!(
        "fine-tuned on {} of {} samples",
        tuned.provenance.finetune_keys.len(),
        data.count
    ))
}

fn eval(a: &EvalArgs, run: &Run) -> Result<String> {
    let model = TaskModel::load(&a.model)?;
    let data = load(&a.data)?;
    let window = SsimWindow {
        size: a.ssim_window,
        sigma: a.ssim_sigma,
    };
    let mut report = evaluate_task_with(&model, &data, window)?;
    if let Some(m) = &a.method {
        report.provenance.method = m.clone();
    }
    report.check()?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut text = report.to_json()?;
    text.push('\n');
    fs::write(&a.out, text).map_err(|e| DclError::Data(format!("{}: {e}", a.out.display())))?;
    let name = a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    run.record(
        &a.out,
        serde_json::json!({ "ssim_window": window }),
        model.config.seed,
        vec![a.model.clone(), data.root.clone()],
        vec![name],
    )?;
    let summary: Vec<String> = report.metrics.iter().map(|(k, v)| format!("{k}={:.4}", v.value)).collect();
    Ok(summary.join(" "))
}

fn cmd_report(a: &ReportArgs, run: &Run) -> Result<String> {
    let reports: Vec<MetricReport> = a
        .inputs
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| DclError::Data(format!("{}: {e}", p.display())))?;
            MetricReport::from_json(&text).map_err(|e| DclError::Data(format!("{}: {e}", p.display())))
        })
        .collect::<Result<_>>()?;
    let csv = reports_to_csv(&reports)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&a.out, &csv).map_err(|e| DclError::Data(format!("{}: {e}", a.out.display())))?;
    let mut inputs = a.inputs.clone();
    let mut figures = 0;
    if let Some(dir) = &a.plots {
        let mut sets = Vec::new();
        for (name, path) in [("clean", &a.clean), ("synthesized", &a.synthesized), ("real", &a.real)] {
            if let Some(p) = path {
                let m = load(p)?;
                inputs.push(m.root.clone());
                sets.push((name, m));
            }
        }
        if sets.is_empty() {
            return Err(DclError::Usage("--plots needs at least one of --clean, --synthesized, --real".into()));
        }
        let refs: Vec<(&str, &Manifest)> = sets.iter().map(|(n, m)| (*n, m)).collect();
        figures = report::write_panels(&refs, a.samples, dir)?.len();
        run.record(dir, serde_json::json!({ "samples": a.samples }), 0, inputs.clone(), list_dir(dir)?)?;
    }
    let name = a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    run.record(&a.out, serde_json::Value::Null, 0, a.inputs.clone(), vec![name])?;
    Ok(format!("{} rows to {}, {figures} figures", reports.len(), a.out.display()))
}

/// Parse and execute; returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|s| s.to_string_lossy().into_owned()).collect();
    match execute(&cli.command, &args) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(command: &Command, args: &[String]) -> std::result::Result<String, Failure> {
    let name = args.first().map(String::as_str).unwrap_or("");
    let run = Run { command: name, args };
    let out = match command {
        Command::GenData(a) => gen_data(a, &run),
        Command::Simulate(a) => simulate(a, &run),
        Command::TrainDcl(a) => train_dcl(a, &run),
        Command::Synthesize(a) => synthesize(a, &run),
        Command::TrainTask(a) => cmd_train_task(a, &run),
        Command::Finetune(a) => cmd_finetune(a, &run),
        Command::Eval(a) => eval(a, &run),
        Command::Report(a) => cmd_report(a, &run),
    };
    out.map_err(Failure::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn paper_weights_are_the_defaults() {
        let Command::TrainDcl(a) = parse(&["dcl", "train-dcl", "--synth", "s", "--real", "r", "--out", "o"]).command else {
            panic!()
        };
        let c = train_config(&a, 64).unwrap();
        assert_eq!((c.alpha, c.beta, c.tau), (1.5, 1.0, 0.07));
        assert!(c.enable_adv && c.enable_dc && c.enable_idt);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"alpha": 3.0, "steps": 7, "model": {"base_width": 8}}"#).unwrap();
        let argv = ["dcl", "train-dcl", "--synth", "s", "--real", "r", "--out", "o", "--config", p.to_str().unwrap(), "--alpha", "2.0", "--ablate", "dc", "--residual-blocks", "4"];
        let Command::TrainDcl(a) = parse(&argv).command else { panic!() };
        let c = train_config(&a, 32).unwrap();
        assert_eq!((c.alpha, c.steps, c.model.base_width), (2.0, 7, 8));
        assert_eq!(c.model.tapped_layers, ModelConfig::new(32, 8, 4).tapped_layers);
        assert!(!c.enable_dc);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&DclError::Usage("x".into())), 1);
        assert_eq!(exit_code(&DclError::Config("x".into())), 1);
        assert_eq!(exit_code(&DclError::Data("x".into())), 2);
        assert_eq!(exit_code(&DclError::Evaluation("x".into())), 2);
        assert_eq!(exit_code(&DclError::Numeric("x".into())), 3);
    }

    #[test]
    fn bad_flags_exit_one() {
        assert_eq!(run_cli(["dcl", "gen-data", "--domain", "moon", "--count", "1", "--out", "x"]), 1);
        assert_eq!(run_cli(["dcl", "nope"]), 1);
        assert_eq!(run_cli(["dcl", "report", "--out", "t.csv"]), 1);
    }
}
