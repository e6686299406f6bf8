//! `amber` command-line harness.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use amber_core::dataio::SynthConfig;
use amber_core::evalreport::ReportFormat;
use amber_core::losses::{ExpertSupervision, MaiExpertGrad};
use amber_core::model::ModalityId;
use amber_core::trainer::Objective;
use amber_core::AmberError;
use clap::{Args, Parser, Subcommand};

use settings::{resolve, BinsSettings, CompareSettings, EvalSettings, GenSettings, Overrides, TrainSettings};

#[derive(Parser, Debug)]
#[command(
    name = "amber",
    version,
    about = "Soft-label multimodal training with rater and modality ambiguity"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Cross-validate over folds and seeds.
    Train(TrainArgs),
    /// Evaluate a checkpoint, with entropy bins.
    Eval(EvalArgs),
    /// Compare two reports side by side.
    Compare(CompareArgs),
    /// Entropy-binned metrics from saved test predictions.
    Bins(BinsArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON config or a manifest from an earlier run. Flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim_a: Option<usize>,
    #[arg(long)]
    dim_t: Option<usize>,
    #[arg(long)]
    raters: Option<u32>,
    /// Dirichlet concentration of the true label distribution.
    #[arg(long)]
    alpha: Option<f64>,
    /// Probability that audio and text cues disagree.
    #[arg(long)]
    conflict: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "AMBER_JOBS", default_value_t = 1)]
    jobs: usize,
    /// Expected number of folds in the dataset.
    #[arg(long)]
    folds: Option<usize>,
    /// Number of seeds, starting at 0.
    #[arg(long, conflicts_with = "seed_list")]
    seeds: Option<u64>,
    /// Explicit comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    lambda_rai: Option<f64>,
    #[arg(long)]
    lambda_mai: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    student: Option<ModalityId>,
    #[arg(long, value_parser = parse_supervision)]
    expert_supervision: Option<ExpertSupervision>,
    #[arg(long, value_parser = parse_mai_grad)]
    mai_grad: Option<MaiExpertGrad>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    fusion_dim: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    /// csv, md or json.
    #[arg(long)]
    format: Option<ReportFormat>,
    /// Pick λ_MAI and κ from their grids on validation JS first.
    #[arg(long)]
    grid: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    /// System name prefix in the report.
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    format: Option<ReportFormat>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    candidate: Option<PathBuf>,
    #[arg(long)]
    baseline_system: Option<String>,
    #[arg(long)]
    candidate_system: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BinsArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// predictions.jsonl written by `train`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    format: Option<ReportFormat>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_supervision(s: &str) -> Result<ExpertSupervision, String> {
    match s {
        "rai" => Ok(ExpertSupervision::Rai),
        "none" => Ok(ExpertSupervision::None),
        _ => Err(format!("expected rai or none, got '{s}'")),
    }
}

fn parse_mai_grad(s: &str) -> Result<MaiExpertGrad, String> {
    match s {
        "detached" => Ok(MaiExpertGrad::Detached),
        "coupled" => Ok(MaiExpertGrad::Coupled),
        _ => Err(format!("expected detached or coupled, got '{s}'")),
    }
}

fn run(cli: Cli) -> Result<(), AmberError> {
    match cli.command {
        Command::Gen(a) => {
            let mut f = Overrides::default();
            f.set("synth.n_samples", a.samples);
            f.set("synth.classes", a.classes);
            f.set("synth.dim_a", a.dim_a);
            f.set("synth.dim_t", a.dim_t);
            f.set("synth.raters", a.raters);
            f.set("synth.ambiguity_alpha", a.alpha);
            f.set("synth.conflict_rate", a.conflict);
            f.set("synth.noise_sigma", a.noise);
            f.set("synth.folds", a.folds);
            f.set("synth.seed", a.seed);
            let defaults = GenSettings {
                synth: SynthConfig::default(),
            };
            let s = resolve(&defaults, a.cfg.config.as_deref(), "gen", f)?;
            s.synth.validate()?;
            commands::gen(&s, &a.out)
        }
        Command::Train(a) => {
            let mut f = Overrides::default();
            f.set("data", a.data);
            f.set("folds", a.folds);
            f.set(
                "train.seeds",
                a.seeds.map(|n| (0..n).collect::<Vec<u64>>()).or(a.seed_list),
            );
            f.set("train.objective", a.objective);
            f.set("train.loss.lambda_rai", a.lambda_rai);
            f.set("train.loss.lambda_mai", a.lambda_mai);
            f.set("train.loss.kappa", a.kappa);
            f.set("train.loss.expert_supervision", a.expert_supervision);
            f.set("train.loss.mai_expert_grad", a.mai_grad);
            f.set("train.arch.student", a.student);
            f.set("train.arch.hidden", a.hidden);
            f.set("train.arch.fusion_dim", a.fusion_dim);
            f.set("train.epochs", a.epochs);
            f.set("train.batch", a.batch);
            f.set("train.lr", a.lr);
            f.set("train.weight_decay", a.weight_decay);
            f.set("train.bins", a.bins);
            f.set("format", a.format);
            f.set("grid", a.grid.then_some(true));
            let s = resolve(&TrainSettings::default(), a.cfg.config.as_deref(), "train", f)?;
            if s.data.as_os_str().is_empty() {
                return Err(AmberError::Config("--data is required".into()));
            }
            commands::train(&s, &a.out, a.jobs.max(1))
        }
        Command::Eval(a) => {
            let mut f = Overrides::default();
            f.set("checkpoint", a.checkpoint);
            f.set("data", a.data);
            f.set("fold", a.fold);
            f.set("bins", a.bins);
            f.set("system", a.system);
            f.set("format", a.format);
            let defaults = EvalSettings {
                checkpoint: PathBuf::new(),
                data: PathBuf::new(),
                fold: None,
                bins: 4,
                system: "eval".into(),
                format: ReportFormat::Csv,
            };
            let s = resolve(&defaults, a.cfg.config.as_deref(), "eval", f)?;
            if s.checkpoint.as_os_str().is_empty() || s.data.as_os_str().is_empty() {
                return Err(AmberError::Config("--checkpoint and --data are required".into()));
            }
            commands::eval(&s, &a.out)
        }
        Command::Compare(a) => {
            let mut f = Overrides::default();
            f.set("baseline", a.baseline);
            f.set("candidate", a.candidate);
            f.set("baseline_system", a.baseline_system);
            f.set("candidate_system", a.candidate_system);
            let defaults = CompareSettings {
                baseline: PathBuf::new(),
                candidate: PathBuf::new(),
                baseline_system: "cbce/at".into(),
                candidate_system: "amber/at".into(),
            };
            let s = resolve(&defaults, a.cfg.config.as_deref(), "compare", f)?;
            if s.baseline.as_os_str().is_empty() || s.candidate.as_os_str().is_empty() {
                return Err(AmberError::Config("--baseline and --candidate are required".into()));
            }
            commands::compare_cmd(&s, a.out.as_deref())
        }
        Command::Bins(a) => {
            let mut f = Overrides::default();
            f.set("predictions", a.predictions);
            f.set("bins", a.bins);
            f.set("format", a.format);
            let defaults = BinsSettings {
                predictions: PathBuf::new(),
                bins: 4,
                format: ReportFormat::Csv,
            };
            let s = resolve(&defaults, a.cfg.config.as_deref(), "bins", f)?;
            if s.predictions.as_os_str().is_empty() {
                return Err(AmberError::Config("--predictions is required".into()));
            }
            commands::bins(&s, &a.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.exit_code() {
                2 => "data error",
                3 => "numerical abort",
                _ => "error",
            };
            eprintln!("amber: {kind}: {e}");
            if e.exit_code() == 1 {
                eprintln!("run 'amber --help' for usage");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
