use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use face_core::data::{load_dataset, save_dataset, synth_generate, Dataset, ElectrodeMap, FeatureSet, SynthParams};
use face_core::eval::{
    ablation_run, emit_report, load_report, mean, paired_ttest, run_loso, sweep_heads, ReportFormat, RunConfig,
    RunReport, Switches,
};
use face_core::meta::{load_checkpoint, meta_train, pretrain, save_checkpoint, MetaState};
use face_core::model::Model;
use face_core::FaceError;
use log::info;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "face", version, about = "Few-shot cross-subject EEG emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-subject dataset.
    Synth(SynthArgs),
    /// Supervised pretraining on the source subjects; writes a checkpoint.
    Pretrain(TrainArgs),
    /// Episodic meta-training from a checkpoint; writes a checkpoint.
    MetaTrain(MetaTrainArgs),
    /// Full leave-one-subject-out evaluation.
    Evaluate(RunArgs),
    /// Leave-one-subject-out runs with each module switched on and off.
    Ablate(SweepArgs),
    /// Leave-one-subject-out runs over attention head counts.
    SweepHeads(HeadArgs),
    /// Print a saved report, optionally converting it.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    subjects: usize,
    /// Samples per class and subject.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 62)]
    channels: usize,
    #[arg(long, default_value_t = 5)]
    bands: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Subject shift strength.
    #[arg(long, default_value_t = 1.0)]
    shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Common {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Run configuration JSON; unset fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for every stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Cross-view fusion on or off.
    #[arg(long)]
    cvf: Option<bool>,
    /// Adapter on or off.
    #[arg(long)]
    fsa: Option<bool>,
    /// Differentiate through the inner loop (false drops second-order terms).
    #[arg(long)]
    second_order: Option<bool>,
}

impl Common {
    fn load(&self) -> Result<(Dataset, RunConfig), FaceError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(b) = self.cvf {
            cfg.model.cvf = b;
        }
        if let Some(b) = self.fsa {
            cfg.model.fsa = b;
        }
        if let Some(b) = self.second_order {
            cfg.meta.first_order = !b;
        }
        let ds = load_dataset(&self.data)?;
        if let Some(fs) = ds.subjects.first() {
            cfg.model.channels = fs.channels();
            cfg.model.bands = fs.bands();
            cfg.model.num_classes = fs.num_classes;
        }
        Ok((ds, cfg))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Subject to hold out of training.
    #[arg(long)]
    target: Option<String>,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetaTrainArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Checkpoint directory to start from.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated shot counts.
    #[arg(long, value_delimiter = ',')]
    shots: Option<Vec<usize>>,
    /// Trials per target subject and shot count.
    #[arg(long)]
    repeats: Option<usize>,
    /// Report file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
}

impl RunArgs {
    fn load(&self) -> Result<(Dataset, RunConfig), FaceError> {
        let (ds, mut cfg) = self.common.load()?;
        if let Some(s) = &self.shots {
            cfg.eval.shots = s.clone();
        }
        if let Some(r) = self.repeats {
            cfg.eval.repeats = r;
        }
        cfg.validate()?;
        Ok((ds, cfg))
    }
}

#[derive(Args)]
struct SweepArgs {
    /// `--out` names a directory here.
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct HeadArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5")]
    heads: Vec<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON report to read.
    #[arg(long)]
    input: PathBuf,
    /// Write a converted copy here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
}

fn sources_for(ds: &Dataset, target: Option<&str>) -> Result<Vec<FeatureSet>, FaceError> {
    if let Some(t) = target {
        if !ds.subjects.iter().any(|s| s.subject == t) {
            return Err(FaceError::Config(format!("no subject `{t}` in the dataset")));
        }
    }
    Ok(ds.subjects.iter().filter(|s| Some(s.subject.as_str()) != target).cloned().collect())
}

fn print_summary(report: &RunReport) {
    println!("{}", report.label);
    for s in &report.summary {
        println!(
            "  K={:<3} accuracy {:.4} ± {:.4}  unadapted {:.4}  pretrain-only {:.4}  ({} subjects)",
            s.shots, s.mean, s.std, s.unadapted_mean, s.pretrain_mean, s.subjects
        );
    }
    if !report.audit.is_clean() {
        println!("  protocol audit FAILED: {:?}", report.audit);
    }
}

fn ext(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::Json => "json",
        ReportFormat::Csv => "csv",
    }
}

#[derive(Serialize)]
struct Comparison {
    baseline: String,
    other: String,
    shots: usize,
    mean_baseline: f64,
    mean_other: f64,
    t: f64,
    p: f64,
    df: usize,
}

/// Paired t-tests of the first report against each other one, over
/// per-subject means.
fn compare(reports: &[RunReport]) -> Result<Vec<Comparison>, FaceError> {
    let mut out = Vec::new();
    let Some((base, rest)) = reports.split_first() else {
        return Ok(out);
    };
    for s in &base.summary {
        let a: Vec<f64> = base.subject_means(s.shots).into_iter().map(|x| x.1).collect();
        for r in rest {
            let b: Vec<f64> = r.subject_means(s.shots).into_iter().map(|x| x.1).collect();
            if a.len() < 2 || a.len() != b.len() {
                continue;
            }
            let t = paired_ttest(&a, &b)?;
            out.push(Comparison {
                baseline: base.label.clone(),
                other: r.label.clone(),
                shots: s.shots,
                mean_baseline: mean(&a),
                mean_other: mean(&b),
                t: t.t,
                p: t.p,
                df: t.df,
            });
        }
    }
    Ok(out)
}

fn write_all(dir: &Path, reports: &[RunReport], format: ReportFormat) -> Result<(), FaceError> {
    std::fs::create_dir_all(dir).map_err(|e| FaceError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for r in reports {
        let path = dir.join(format!("{}.{}", r.label, ext(format)));
        emit_report(r, &path, format)?;
        print_summary(r);
    }
    let comparisons = compare(reports)?;
    for c in &comparisons {
        println!(
            "K={} {} vs {}: {:.4} vs {:.4}, t={:.3}, p={:.4}",
            c.shots, c.baseline, c.other, c.mean_baseline, c.mean_other, c.t, c.p
        );
    }
    let path = dir.join("comparisons.json");
    let text = serde_json::to_string_pretty(&comparisons).map_err(|e| FaceError::Precondition(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| FaceError::Io { path, source: e })
}

fn run(cli: Cli) -> Result<(), FaceError> {
    match cli.command {
        Command::Synth(a) => {
            let p = SynthParams {
                num_subjects: a.subjects,
                samples_per_class: a.samples,
                channels: a.channels,
                bands: a.bands,
                num_classes: a.classes,
                shift_strength: a.shift,
                seed: a.seed,
                ..SynthParams::default()
            };
            let subjects = synth_generate(&p)?;
            save_dataset(&a.out, &subjects, &ElectrodeMap::default_for(a.channels)?)?;
            println!("wrote {} subjects to {}", subjects.len(), a.out.display());
        }
        Command::Pretrain(a) => {
            let (ds, cfg) = a.common.load()?;
            let sources = sources_for(&ds, a.target.as_deref())?;
            let mut model = Model::new(cfg.model.clone(), &ds.electrodes, cfg.pretrain.seed)?;
            let log = pretrain(&mut model, &sources, &cfg.pretrain, cfg.meta.smoothing, cfg.meta.bn_momentum)?;
            info!("pretraining losses {:?}", log.losses);
            save_checkpoint(&a.out, &model)?;
            println!(
                "pretrained on {} subjects, final loss {:.4}, wrote {}",
                sources.len(),
                log.losses.last().copied().unwrap_or(f64::NAN),
                a.out.display()
            );
        }
        Command::MetaTrain(a) => {
            let (ds, cfg) = a.train.common.load()?;
            let sources = sources_for(&ds, a.train.target.as_deref())?;
            let model = load_checkpoint(&a.checkpoint)?;
            let mut state = MetaState::new(model, &cfg.meta);
            let log = meta_train(&mut state, &sources, &cfg.meta)?;
            save_checkpoint(&a.train.out, &state.model)?;
            println!(
                "{} episodes, final query loss {:.4}, wrote {}",
                log.losses.len(),
                log.losses.last().copied().unwrap_or(f64::NAN),
                a.train.out.display()
            );
        }
        Command::Evaluate(a) => {
            let (ds, cfg) = a.load()?;
            let report = run_loso(&ds, &cfg)?;
            emit_report(&report, &a.out, a.format)?;
            print_summary(&report);
        }
        Command::Ablate(a) => {
            let (ds, cfg) = a.run.load()?;
            let reports = ablation_run(&ds, &cfg, &Switches::ALL)?;
            write_all(&a.run.out, &reports, a.run.format)?;
        }
        Command::SweepHeads(a) => {
            let (ds, cfg) = a.run.load()?;
            let reports = sweep_heads(&ds, &cfg, &a.heads)?;
            write_all(&a.run.out, &reports, a.run.format)?;
        }
        Command::Report(a) => {
            let report = load_report(&a.input)?;
            print_summary(&report);
            if let Some(out) = a.out {
                emit_report(&report, &out, a.format)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                FaceError::Config(_) | FaceError::Io { .. } | FaceError::Json { .. } | FaceError::Load(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}
