//! Command-line entry points: dataset construction, training, evaluation,
//! single-clip prediction, gradient checking, and the synthetic experiment.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avqa::annotations::{load_annotations, synth_annotations, SynthSpec};
use avqa::dataset::{build_qa_items, save_items, split_by_video};
use avqa::error::{AvqaError, Result};
use avqa::eval::{
    predict_items, save_predictions, score_files, token_accuracy, DEFAULT_MAX_NEW,
};
use avqa::experiment::{format_checks, run_synthetic_experiment, ExperimentSettings};
use avqa::features::FeatureTable;
use avqa::metrics::{evaluate, format_report};
use avqa::templates::load_templates;
use avqa::train::{load_model, load_training_data, train};
use avqa_core::verify::standard_blocks;

#[derive(Parser)]
#[command(
    name = "avqa",
    about = "Anticipation question answering over surgical-style clip features",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build question-answer datasets from frame annotations.
    BuildDataset(BuildDatasetArgs),
    /// Train a model from a key=value config file.
    Train(TrainArgs),
    /// Score predictions against a gold dataset file.
    Eval(EvalArgs),
    /// Answer one question about one clip feature file.
    Predict(PredictArgs),
    /// Finite-difference gradient check over all computation blocks.
    Gradcheck(GradcheckArgs),
    /// Generate data, train all model variants, and verify the claims.
    SyntheticExperiment(ExperimentArgs),
}

#[derive(Args)]
struct BuildDatasetArgs {
    /// Directory holding per-video .jsonl annotations and .feat features.
    #[arg(long)]
    annotations: PathBuf,
    /// Optional template file overriding the built-in question set.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Frames per clip window.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Output dataset path; .train/.test siblings are derived from it.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated video ids held out for testing.
    #[arg(long, default_value = "02,06,12,13,24")]
    test_videos: String,
    /// Where to write dataset statistics as JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Generate this many synthetic videos into --annotations first.
    #[arg(long)]
    synth: Option<usize>,
    /// Minutes per synthetic video.
    #[arg(long, default_value_t = 30.0)]
    synth_minutes: f64,
    /// Seed for synthetic generation.
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value training config file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set learning_rate=0.001 (repeatable).
    #[arg(long = "set")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Gold dataset (JSONL) with questions and reference answers.
    #[arg(long)]
    gold: PathBuf,
    /// Predictions JSONL to score.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Checkpoint to generate predictions with (needs --features-dir).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Feature directory for --checkpoint mode.
    #[arg(long)]
    features_dir: Option<PathBuf>,
    /// Cap on generated answer length in --checkpoint mode.
    #[arg(long, default_value_t = DEFAULT_MAX_NEW)]
    max_new: usize,
    /// Write generated predictions here in --checkpoint mode.
    #[arg(long)]
    write_pred: Option<PathBuf>,
    /// Write the metric report as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Question text.
    #[arg(long)]
    question: String,
    /// Clip feature file (binary frame-feature table).
    #[arg(long)]
    clip: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cap on generated answer length.
    #[arg(long, default_value_t = DEFAULT_MAX_NEW)]
    max_new: usize,
    /// Dump per-block attention and gate activations as JSON.
    #[arg(long)]
    dump_fusion: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the randomized check points.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Directory for all experiment artifacts.
    #[arg(long)]
    out_dir: PathBuf,
    /// Master seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Optimizer steps for each main variant run.
    #[arg(long)]
    steps: Option<usize>,
    /// Optimizer steps for each frame-budget sweep run.
    #[arg(long)]
    sweep_steps: Option<usize>,
    /// Number of synthetic videos.
    #[arg(long)]
    videos: Option<usize>,
    /// Minutes per synthetic video.
    #[arg(long)]
    minutes: Option<f64>,
}

fn run_build_dataset(args: &BuildDatasetArgs) -> Result<()> {
    if let Some(videos) = args.synth {
        let spec = SynthSpec {
            videos,
            minutes: args.synth_minutes,
            frame_dim: 32,
            invalid_rate: 0.015,
            seed: args.seed,
        };
        synth_annotations(&spec, &args.annotations)?;
        println!("generated {videos} synthetic videos in {}", args.annotations.display());
    }
    let videos = load_annotations(&args.annotations)?;
    let known: Vec<String> = videos.iter().map(|v| v.video.clone()).collect();
    let templates = load_templates(args.templates.as_deref())?;
    let (items, mut stats) = build_qa_items(&videos, args.k, &templates)?;

    let test_videos: Vec<String> = args
        .test_videos
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .filter(|s| known.contains(s))
        .collect();
    let (train_items, test_items) = split_by_video(items.clone(), &test_videos, &known)?;
    stats.qa_train = train_items.len();
    stats.qa_test = test_items.len();

    save_items(&args.out, &items)?;
    let stem = args.out.with_extension("");
    let train_path = stem.with_extension("train.jsonl");
    let test_path = stem.with_extension("test.jsonl");
    save_items(&train_path, &train_items)?;
    save_items(&test_path, &test_items)?;
    if let Some(stats_path) = &args.stats {
        let json = serde_json::to_string_pretty(&stats)
            .map_err(|e| AvqaError::json(stats_path, e))?;
        fs::write(stats_path, json).map_err(|e| AvqaError::io(stats_path, e))?;
    }
    println!(
        "wrote {} items ({} train / {} test) to {}",
        stats.qa_total,
        stats.qa_train,
        stats.qa_test,
        args.out.display()
    );
    println!(
        "clips {} | time fraction {:.3} | missing-field warnings {} | tail skips {}",
        stats.clips, stats.time_fraction, stats.missing_field_warnings, stats.instrument_tail_skips
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut config = avqa::config::TrainConfig::from_file(&args.config)?;
    config.apply_overrides(&args.overrides)?;
    let outcome = train(&config)?;
    println!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        outcome.steps,
        outcome.final_loss,
        config.checkpoint.display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let report = match (&args.pred, &args.checkpoint) {
        (Some(pred), None) => score_files(pred, &args.gold)?,
        (None, Some(checkpoint)) => {
            let features_dir = args.features_dir.as_ref().ok_or_else(|| {
                AvqaError::config("--checkpoint mode requires --features-dir")
            })?;
            let model = load_model(checkpoint)?;
            let golds = avqa::dataset::load_items(&args.gold)?;
            let data = load_training_data(&args.gold, features_dir)?;
            let predictions = predict_items(&model, &golds, &data, args.max_new)?;
            if let Some(path) = &args.write_pred {
                save_predictions(path, &predictions)?;
            }
            let answers: Vec<String> = predictions.into_iter().map(|p| p.answer).collect();
            let token_acc = token_accuracy(&model, &golds, &data)?;
            println!("token accuracy: {:.2}", 100.0 * token_acc);
            evaluate(&golds, &answers)?
        }
        _ => {
            return Err(AvqaError::config(
                "pass exactly one of --pred or --checkpoint",
            ))
        }
    };
    print!("{}", format_report(&report));
    if let Some(path) = &args.report {
        let json = serde_json::to_string_pretty(&report).map_err(|e| AvqaError::json(path, e))?;
        fs::write(path, json).map_err(|e| AvqaError::io(path, e))?;
    }
    Ok(())
}

fn run_predict(args: &PredictArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let table = FeatureTable::load(&args.clip)?;
    if table.dim != model.config.frame_dim {
        return Err(AvqaError::config(format!(
            "clip feature dim {} does not match model frame dim {}",
            table.dim, model.config.frame_dim
        )));
    }
    let question_ids = model.vocab.encode(&args.question);
    let (ids, fusion) =
        model.generate(&question_ids, &table.data, table.frames, args.max_new)?;
    println!("{}", model.vocab.decode(&ids));
    if let Some(path) = &args.dump_fusion {
        let json =
            serde_json::to_string_pretty(&fusion).map_err(|e| AvqaError::json(path, e))?;
        fs::write(path, json).map_err(|e| AvqaError::io(path, e))?;
    }
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let reports = standard_blocks(args.seed)?;
    for report in &reports {
        println!("{}", report.summary_line());
    }
    if reports.iter().all(|r| r.passed) {
        println!("gradient check passed: {} blocks", reports.len());
        Ok(())
    } else {
        let failed: Vec<&str> = reports
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.block.as_str())
            .collect();
        Err(AvqaError::config(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

fn run_experiment(args: &ExperimentArgs) -> Result<()> {
    let mut settings = ExperimentSettings::new(args.out_dir.clone(), args.seed);
    if let Some(steps) = args.steps {
        settings.train_steps = steps;
    }
    if let Some(steps) = args.sweep_steps {
        settings.sweep_steps = steps;
    }
    if let Some(videos) = args.videos {
        settings.videos = videos;
    }
    if let Some(minutes) = args.minutes {
        settings.minutes = minutes;
    }
    let report = run_synthetic_experiment(&settings)?;
    print!("{}", format_checks(&report));
    println!("total: {:.0} seconds", report.total_seconds);
    if report.all_passed {
        Ok(())
    } else {
        Err(AvqaError::config("one or more experiment checks failed"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildDataset(args) => run_build_dataset(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Predict(args) => run_predict(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::SyntheticExperiment(args) => run_experiment(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
