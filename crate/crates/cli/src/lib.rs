//! Commands behind the `hbformer` binary. Each command returns `Ok(())` or a
//! [`CliError`] whose [`CliError::exit_code`] the binary exits with.

use std::fmt::Write as _;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use hbformer::gradcheck::{run_suite, GradcheckOptions, GradcheckReport};
use hbformer::io::{checkpoint, load_dataset, report, sample_paths, save_dataset, RunConfig, Task};
use hbformer::model::HbFormer;
use hbformer::train::{evaluate, synth_dataset, train_seed, RunStatus, SegmentationSample, SynthConfig};
use hbformer::{Error, Module, OpKind};

/// Environment variable capping the number of evaluation threads.
pub const THREADS_ENV: &str = "HBFORMER_THREADS";

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_NON_FINITE: u8 = 3;
pub const EXIT_CORRUPT: u8 = 4;
pub const EXIT_SHAPE: u8 = 5;
pub const EXIT_GRADCHECK: u8 = 6;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("seed {seed}: non-finite loss at step {step}; last good parameters kept in {}", checkpoint.display())]
    Diverged {
        seed: u64,
        step: usize,
        checkpoint: PathBuf,
    },
    #[error("gradient check failed for: {}", failing.join(", "))]
    Gradcheck { failing: Vec<String> },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_CONFIG,
            CliError::Diverged { .. } => EXIT_NON_FINITE,
            CliError::Gradcheck { .. } => EXIT_GRADCHECK,
            CliError::Core(e) => match e {
                Error::Io { .. } | Error::Csv(_) | Error::Format(_) | Error::EmptyDataset => EXIT_IO,
                Error::NonFinite { .. } => EXIT_NON_FINITE,
                Error::Checkpoint(_) => EXIT_CORRUPT,
                Error::ParameterShape { .. } | Error::MissingParameter(_) | Error::UnexpectedParameter(_) => EXIT_SHAPE,
                _ => EXIT_CONFIG,
            },
        }
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

/// One parsed command line.
#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub task: Option<Task>,
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub print_config: bool,
    /// Operation whose backward rule the gradient check corrupts on purpose.
    pub inject_fault: Option<String>,
}

/// Runs an invocation, printing any error to stderr; returns the exit code.
pub fn run(inv: &Invocation) -> u8 {
    match dispatch(inv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(inv: &Invocation) -> CliResult {
    if inv.print_config {
        let cfg = match &inv.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let task = inv.task.ok_or_else(|| CliError::Usage("no command given".into()))?;
    let config = inv
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("--config PATH is required".into()))?;
    match task {
        Task::Train => cmd_train(config),
        Task::Eval => {
            let ckpt = inv
                .checkpoint
                .as_deref()
                .ok_or_else(|| CliError::Usage("eval needs --checkpoint PATH".into()))?;
            cmd_eval(config, ckpt)
        }
        Task::Gradcheck => {
            let fault = inv.inject_fault.as_deref().map(parse_op).transpose()?;
            cmd_gradcheck(config, fault)
        }
        Task::Synth => cmd_synth(config),
    }
}

pub fn parse_op(name: &str) -> CliResult<OpKind> {
    OpKind::DIFFERENTIABLE
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| CliError::Usage(format!("`{name}` is not a differentiable operation")))
}

/// Evaluation threads: the configured count, capped by [`THREADS_ENV`] when set.
pub fn eval_threads(cfg: &RunConfig) -> CliResult<NonZeroUsize> {
    let configured = cfg.train.eval_threads;
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let cap: NonZeroUsize = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
            Ok(configured.min(cap))
        }
        Err(_) => Ok(configured),
    }
}

pub fn synth_config(cfg: &RunConfig) -> SynthConfig {
    SynthConfig {
        size: cfg.model.img_size,
        num_classes: cfg.model.num_classes,
        channels: cfg.model.in_channels,
        ..SynthConfig::default()
    }
}

/// The dataset under `data_dir`, or the in-memory synthetic set when unset.
pub fn load_samples(cfg: &RunConfig) -> CliResult<Vec<SegmentationSample>> {
    let samples = match &cfg.data_dir {
        Some(dir) => load_dataset(dir)?,
        None => synth_dataset(cfg.num_samples, &synth_config(cfg), cfg.data_seed)?,
    };
    let m = &cfg.model;
    let want = [m.in_channels, m.img_size, m.img_size];
    if let Some(bad) = samples.iter().find(|s| s.image.shape() != want) {
        return Err(CliError::Usage(format!(
            "sample `{}` has shape {:?}, the model expects {want:?}",
            bad.meta.source,
            bad.image.shape()
        )));
    }
    if let Some(bad) = samples
        .iter()
        .find(|s| s.mask.labels.iter().any(|&l| l as usize >= m.num_classes))
    {
        return Err(CliError::Usage(format!(
            "mask of `{}` has labels outside 0..{}",
            bad.meta.source, m.num_classes
        )));
    }
    Ok(samples)
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

fn write_file(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

pub fn checkpoint_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed_{seed}.ckpt"))
}

/// Trains one model per seed on the dataset and evaluates it on the same
/// samples. Writes `seed_<seed>.ckpt`, `losses.csv` and `report.csv` to `out_dir`.
pub fn cmd_train(config_path: &Path) -> CliResult {
    let mut cfg = RunConfig::load(config_path)?;
    cfg.train.eval_threads = eval_threads(&cfg)?;
    let model = HbFormer::new(cfg.model.clone())?;
    let samples = load_samples(&cfg)?;
    create_dir(&cfg.out_dir)?;
    let mut losses = String::from("seed,step,loss\n");
    let mut reports = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = train_seed(&model, &cfg.train, &samples, &samples, seed)?;
        for (step, l) in run.losses.iter().enumerate() {
            let _ = writeln!(losses, "{seed},{step},{l:?}");
        }
        let ckpt = checkpoint_path(&cfg.out_dir, seed);
        checkpoint::save(&run.params, &ckpt)?;
        write_file(&cfg.out_dir.join("losses.csv"), &losses)?;
        if let RunStatus::Diverged { step } = run.status {
            return Err(CliError::Diverged {
                seed,
                step,
                checkpoint: ckpt,
            });
        }
        println!(
            "seed {seed}: {} steps, final loss {:.6}, mean DSC {:.4}, mIoU {:.4}",
            run.losses.len(),
            run.final_loss().unwrap_or(f64::NAN),
            run.report.mean_dsc,
            run.report.miou
        );
        reports.push(run.report);
    }
    report::save_report(cfg.out_dir.join("report.csv"), &reports)?;
    let agg = hbformer::train::AggregateReport::from_reports(&reports)?;
    println!(
        "mean DSC {:.4} ± {:.4}, mIoU {:.4} ± {:.4} over {} seeds",
        agg.mean_dsc.0,
        agg.mean_dsc.1,
        agg.miou.0,
        agg.miou.1,
        reports.len()
    );
    Ok(())
}

/// Evaluates a checkpoint on the dataset. Writes `eval_report.csv` and one
/// predicted mask per sample to `out_dir/predictions`.
pub fn cmd_eval(config_path: &Path, checkpoint_path: &Path) -> CliResult {
    let cfg = RunConfig::load(config_path)?;
    let threads = eval_threads(&cfg)?;
    let model = HbFormer::new(cfg.model.clone())?;
    let specs = model.specs();
    let params = checkpoint::load(checkpoint_path)?;
    params.validate(&specs)?;
    let samples = load_samples(&cfg)?;
    let (metrics, preds) = evaluate(&model, &params, &samples, cfg.seeds[0], threads)?;
    let pred_dir = cfg.out_dir.join("predictions");
    create_dir(&pred_dir)?;
    for (i, p) in preds.iter().enumerate() {
        let (_, mask_path) = sample_paths(&cfg.out_dir, i);
        let name = mask_path.file_name().expect("sample paths end in a file name");
        hbformer::io::pnm::write_pgm(pred_dir.join(name), p)?;
    }
    report::save_report(cfg.out_dir.join("eval_report.csv"), std::slice::from_ref(&metrics))?;
    for (i, c) in metrics.classes.iter().enumerate() {
        println!(
            "class {c}: DSC {:.4}, IoU {:.4}",
            metrics.per_class_dsc[i], metrics.per_class_iou[i]
        );
    }
    println!(
        "mean DSC {:.4}, mIoU {:.4} over {} samples",
        metrics.mean_dsc, metrics.miou, metrics.samples
    );
    Ok(())
}

/// Prints one line per check followed by the coverage of differentiable operations.
pub fn format_gradcheck(report: &GradcheckReport) -> String {
    let mut out = String::new();
    for o in &report.outcomes {
        let _ = writeln!(
            out,
            "{:<22} rel_err {:.3e}  tol {:.0e}  {}  (worst tensor: {})",
            o.target.name(),
            o.rel_err,
            o.tolerance,
            if o.passed() { "ok" } else { "FAIL" },
            o.worst_tensor
        );
    }
    let _ = writeln!(
        out,
        "covered {}/{} differentiable ops; worst rel_err {:.3e}",
        OpKind::DIFFERENTIABLE.len() - report.missing_ops().len(),
        OpKind::DIFFERENTIABLE.len(),
        report.worst()
    );
    out
}

/// Runs the finite-difference suite on the micro model. The configuration
/// file is parsed for validity only.
pub fn cmd_gradcheck(config_path: &Path, fault: Option<OpKind>) -> CliResult {
    RunConfig::load(config_path)?;
    let opts = GradcheckOptions {
        fault,
        ..GradcheckOptions::default()
    };
    let report = run_suite(&opts)?;
    print!("{}", format_gradcheck(&report));
    let mut failing: Vec<String> = report.failures().map(|o| o.target.name().to_string()).collect();
    failing.extend(report.missing_ops().iter().map(|k| format!("{} (no check)", k.name())));
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradcheck { failing })
    }
}

/// Writes `num_samples` synthetic samples to `data_dir` (or `out_dir/data`).
pub fn cmd_synth(config_path: &Path) -> CliResult {
    let cfg = RunConfig::load(config_path)?;
    let dir = cfg.data_dir.clone().unwrap_or_else(|| cfg.out_dir.join("data"));
    let samples = synth_dataset(cfg.num_samples, &synth_config(&cfg), cfg.data_seed)?;
    save_dataset(&dir, &samples)?;
    println!("wrote {} samples to {}", samples.len(), dir.display());
    Ok(())
}
