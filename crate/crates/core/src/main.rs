use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use branchformer::analysis::{collect_branch_weights, collect_diagonality};
use branchformer::attention::AttentionKind;
use branchformer::bench::{encoder_benchmark, toy_bench_config};
use branchformer::encoder::{Architecture, EncoderConfig, MergeKind};
use branchformer::gradcheck::{check_encoder, DEFAULT_TOLERANCE};
use branchformer::train::{train_with_progress, validation_set, ToyModel, TrainConfig};
use branchformer::{Error, Result};

#[derive(Parser)]
#[command(name = "branchformer", version, about = "Branchformer encoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a toy task and write a run directory.
    Train(TrainArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Time inference over a grid of sequence lengths and fit a log-log slope.
    Bench(BenchArgs),
    /// Branch weights, diagonality and accuracy of a trained checkpoint.
    Analyze(AnalyzeArgs),
    /// Remove every attention branch from a trained checkpoint.
    Prune(PruneArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `steps` from the config.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Encoder config, or a training config whose `encoder` is checked.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = Architecture::Branchformer, value_parser = parse_from_str::<Architecture>)]
    architecture: Architecture,
    /// Sequence length after subsampling.
    #[arg(long, default_value_t = 6)]
    seq_len: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Directory for `gradcheck.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_parser = parse_from_str::<AttentionKind>)]
    attention: AttentionKind,
    /// Encoder config to time instead of the built-in toy size; its
    /// attention kind is replaced by `--attention`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Time the cgMLP-only stack obtained by pruning.
    #[arg(long)]
    pruned: bool,
    /// Comma-separated sequence lengths after subsampling.
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096,8192")]
    tgrid: Vec<usize>,
    #[arg(long, default_value_t = branchformer::bench::MIN_REPS)]
    reps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Directory for `bench.csv` and `fit.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Validation samples drawn from the checkpoint's task.
    #[arg(long, default_value_t = 128)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Path of the pruned checkpoint.
    #[arg(long)]
    out: PathBuf,
}

fn parse_from_str<T: std::str::FromStr<Err = String>>(s: &str) -> std::result::Result<T, String> {
    s.parse()
}

fn read_encoder_config(path: &Path) -> Result<EncoderConfig> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    if value.get("encoder").is_some() {
        Ok(TrainConfig::from_json(&text)?.encoder)
    } else {
        EncoderConfig::from_json(&text)
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config = TrainConfig::load(&args.config)?;
    if let Some(out) = args.out {
        config.out_dir = out;
    }
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    let quiet = args.quiet;
    let outcome = train_with_progress(&config, &mut |r| {
        if !quiet {
            eprintln!("step {:>6}  train_acc {:.4}  valid_acc {:.4}", r.step, r.train_acc, r.valid_acc);
        }
    })?;
    let last = outcome.last();
    print_json(&json!({
        "out_dir": config.out_dir,
        "final_checkpoint": outcome.final_checkpoint,
        "step": last.step,
        "train_acc": last.train_acc,
        "valid_acc": last.valid_acc,
    }));
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let config = read_encoder_config(&args.config)?;
    let report = check_encoder(&config, args.architecture, args.seq_len, args.tolerance)?;
    println!("{report}");
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        write_json(&out.join("gradcheck.json"), &serde_json::to_value(&report)?)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|g| g.name.as_str()).collect();
        Err(Error::GradCheckFailed(names.join(", ")))
    }
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let config = match &args.config {
        Some(path) => EncoderConfig {
            attention: args.attention,
            ..read_encoder_config(path)?
        },
        None => toy_bench_config(args.attention),
    };
    let result = encoder_benchmark(&config, args.pruned, &args.tgrid, args.reps, args.batch)?;
    std::fs::create_dir_all(&args.out)?;
    result.write_csv(&args.out.join("bench.csv"))?;
    result.write_fit_json(&args.out.join("fit.json"))?;
    print_json(&json!({ "slope": result.slope, "stderr": result.stderr }));
    Ok(())
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let model = ToyModel::load(&args.checkpoint)?;
    let samples = validation_set(&model.task, args.samples)?.samples;
    let features: Vec<_> = samples.iter().map(|s| s.features.clone()).collect();
    std::fs::create_dir_all(&args.out)?;

    let mut summary = serde_json::Map::new();
    summary.insert("samples".into(), json!(samples.len()));
    summary.insert("accuracy".into(), json!(model.accuracy(&samples)?));
    let weighted = model.encoder.architecture == Architecture::Branchformer
        && model.encoder.config.merge == MergeKind::WeightedAverage;
    if weighted {
        let log = collect_branch_weights(&model.encoder, &features)?;
        log.write_csv(&args.out.join("branch_weights.csv"))?;
        summary.insert("branch_weights".into(), serde_json::to_value(&log.layers)?);
        if !model.encoder.is_pruned() {
            summary.insert("pruned_accuracy".into(), json!(model.prune()?.accuracy(&samples)?));
        }
    }
    match collect_diagonality(&model.encoder, &features) {
        Ok(report) => {
            report.write_csv(&args.out.join("diagonality.csv"))?;
            summary.insert("mean_diagonality".into(), json!(report.mean()));
        }
        Err(Error::Unsupported(_)) => {}
        Err(e) => return Err(e),
    }
    let summary = serde_json::Value::Object(summary);
    write_json(&args.out.join("summary.json"), &summary)?;
    print_json(&summary);
    Ok(())
}

fn run_prune(args: PruneArgs) -> Result<()> {
    let pruned = ToyModel::load(&args.checkpoint)?.prune()?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    pruned.save(&args.out)?;
    print_json(&json!({ "pruned_checkpoint": args.out }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Bench(a) => run_bench(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Prune(a) => run_prune(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
