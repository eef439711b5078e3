use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccdb::data::ToyCase;
use ccdb::model::Mlp;
use ccdb::pipeline::{
    analyze_correlations, analyze_weights, evaluate, extract_features_f64, load_or_read,
    objective_records, prepare_out, run_ccdb, run_erm_baseline, run_stage1, run_stage2, run_stage3,
    save_dataset, save_model, stage_correlations, write_correlations, write_histograms,
    write_loss_trace, write_report, EvalReport, PipelineConfig, PipelineError,
};
use ccdb::reweight::{export_weights, import_weights, ClassWeightState};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "ccdb",
    version,
    about = "Class-conditional distribution balancing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML pipeline config; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config used when --config is absent.
    #[arg(long, value_enum, default_value_t = Preset::ToyA)]
    preset: Preset,
    /// Directory holding raw MNIST IDX files (cmnist presets only).
    #[arg(long, default_value = "data/mnist")]
    mnist_dir: PathBuf,
    /// Root seed; overrides the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory from `gen-data`; regenerated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    ToyA,
    ToyB,
    ToyC,
    Cmnist1,
    Cmnist5,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and write it to --out.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: train the biased extractor.
    TrainBiased {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Stage 2: learn per-class sample weights from extractor features.
    Reweight {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Stage-1 model checkpoint.
        #[arg(long)]
        model: PathBuf,
    },
    /// Stage 3: train the final classifier with weighted sampling.
    TrainFinal {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Weight file from `reweight`.
        #[arg(long)]
        weights: PathBuf,
    },
    /// All three stages end to end.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// ERM baseline with the stage-3 architecture and budget.
    Baseline {
        #[command(flatten)]
        common: Common,
    },
    /// Group metrics of a model on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
    },
    /// Correlation summaries and weight histograms.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Stage-1 model checkpoint.
        #[arg(long)]
        stage1_model: PathBuf,
        /// Final model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Optional weight file; adds histograms.csv.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => match common.preset {
            Preset::ToyA => PipelineConfig::toy(ToyCase::A),
            Preset::ToyB => PipelineConfig::toy(ToyCase::B),
            Preset::ToyC => PipelineConfig::toy(ToyCase::C),
            Preset::Cmnist1 => PipelineConfig::cmnist(0.01, common.mnist_dir.clone()),
            Preset::Cmnist5 => PipelineConfig::cmnist(0.05, common.mnist_dir.clone()),
        },
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(
    path: &Path,
    stage: fn(ccdb::model::ModelError) -> PipelineError,
) -> Result<Mlp<f32>, PipelineError> {
    Mlp::load(path).map_err(stage)
}

fn print_report(report: &EvalReport) {
    println!(
        "{} {} seed {}: accuracy {:.4}, group-balanced {:.4}, worst-group {:.4}",
        report.method,
        report.dataset,
        report.seed,
        report.test.overall_accuracy,
        report.test.group_balanced_accuracy,
        report.test.worst_group_accuracy
    );
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::GenData { common } => {
            let cfg = resolve(&common)?;
            let bundle = load_or_read(&cfg, None)?;
            save_dataset(&cfg, &bundle, &common.out)?;
            println!(
                "wrote {} train / {} val / {} test samples to {}",
                bundle.train.len(),
                bundle.val.len(),
                bundle.test.len(),
                common.out.display()
            );
        }
        Command::TrainBiased { common, data } => {
            let cfg = resolve(&common)?;
            let bundle = load_or_read(&cfg, data.data.as_deref())?;
            prepare_out(&common.out, &cfg)?;
            let outcome = run_stage1(&cfg, &bundle.train)?;
            save_model(&outcome.model, &common.out.join("stage1_model.json"))?;
            write_loss_trace(
                &common.out.join("loss_trace.csv"),
                &[("stage1", &outcome.trace)],
            )?;
            if let Some(last) = outcome.trace.last() {
                println!("stage 1 final loss {:.5}", last.loss);
            }
        }
        Command::Reweight {
            common,
            data,
            model,
        } => {
            let cfg = resolve(&common)?;
            let bundle = load_or_read(&cfg, data.data.as_deref())?;
            let extractor = load_model(&model, PipelineError::Stage1)?;
            prepare_out(&common.out, &cfg)?;
            let (_, outcome) = run_stage2(&cfg, &extractor, bundle.train.train_view())?;
            export_weights(&outcome.state, &common.out.join("weights.csv"))
                .map_err(PipelineError::Stage2)?;
            write_loss_trace(
                &common.out.join("loss_trace.csv"),
                &[("stage2", &objective_records(&outcome.trace))],
            )?;
            let analysis = analyze_weights(&outcome.state, &bundle.train, cfg.histogram_bins)?;
            write_histograms(&common.out.join("histograms.csv"), &analysis)?;
            println!(
                "stage 2 objective {:.6} -> {:.6}",
                outcome.trace[0],
                outcome.trace[outcome.trace.len() - 1]
            );
        }
        Command::TrainFinal {
            common,
            data,
            weights,
        } => {
            let cfg = resolve(&common)?;
            let bundle = load_or_read(&cfg, data.data.as_deref())?;
            let state: ClassWeightState<f64> =
                import_weights(&weights).map_err(PipelineError::Stage2)?;
            state
                .check_labels(bundle.train.labels(), bundle.train.num_classes())
                .map_err(PipelineError::Stage2)?;
            prepare_out(&common.out, &cfg)?;
            let outcome = run_stage3(
                &cfg,
                bundle.train.train_view(),
                Some(&state),
                bundle.val.train_view(),
            )?;
            save_model(&outcome.model, &common.out.join("final_model.json"))?;
            write_loss_trace(
                &common.out.join("loss_trace.csv"),
                &[("stage3", &outcome.trace)],
            )?;
            if let Some((step, score)) = outcome.selected {
                println!("stage 3 selected step {step} (validation {score:.4})");
            }
        }
        Command::Run { common } => {
            let cfg = resolve(&common)?;
            print_report(&run_ccdb(&cfg, &common.out)?);
        }
        Command::Baseline { common } => {
            let cfg = resolve(&common)?;
            print_report(&run_erm_baseline(&cfg, &common.out)?);
        }
        Command::Evaluate {
            common,
            data,
            model,
        } => {
            let cfg = resolve(&common)?;
            let bundle = load_or_read(&cfg, data.data.as_deref())?;
            let model = load_model(&model, |e| PipelineError::Evaluate(e.to_string()))?;
            prepare_out(&common.out, &cfg)?;
            let features = extract_features_f64(&model, bundle.test.inputs())?;
            let report = EvalReport {
                method: "evaluate".into(),
                dataset: cfg.dataset.name(),
                seed: cfg.seed,
                test: evaluate(&model, &bundle.test)?,
                validation_score: None,
                selected_step: None,
                mutual_information: None,
                stage2_objective: None,
                conflicting_mass: None,
                correlations: stage_correlations("final", features.view(), &bundle.test)?,
            };
            write_report(&common.out.join("report.json"), &report)?;
            print_report(&report);
        }
        Command::Analyze {
            common,
            data,
            stage1_model,
            model,
            weights,
        } => {
            let cfg = resolve(&common)?;
            let bundle = load_or_read(&cfg, data.data.as_deref())?;
            let analyze = |e: ccdb::model::ModelError| PipelineError::Analyze(e.to_string());
            let before =
                extract_features_f64(&load_model(&stage1_model, analyze)?, bundle.test.inputs())?;
            let after = extract_features_f64(&load_model(&model, analyze)?, bundle.test.inputs())?;
            prepare_out(&common.out, &cfg)?;
            let rows = analyze_correlations(before.view(), after.view(), &bundle.test)?;
            write_correlations(&common.out.join("correlations.csv"), &rows)?;
            for r in &rows {
                println!(
                    "{} vs {}: median |r| {:.4} over {} dims",
                    r.stage, r.target, r.median, r.dims
                );
            }
            if let Some(path) = weights {
                let state: ClassWeightState<f64> =
                    import_weights(&path).map_err(PipelineError::Stage2)?;
                let analysis = analyze_weights(&state, &bundle.train, cfg.histogram_bins)?;
                write_histograms(&common.out.join("histograms.csv"), &analysis)?;
                if let Some(mass) = &analysis.conflicting_mass {
                    println!("conflicting mass per class {mass:.3?}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ccdb: {e}");
            ExitCode::FAILURE
        }
    }
}
