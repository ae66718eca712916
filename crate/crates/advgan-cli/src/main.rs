use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use advgan::attacks::{
    advgan_generate, advgan_train, fgsm, opt_attack, AdvGanConfig, AttackConfig, TargetRule,
};
use advgan::data::{file_sha256, load_mnist, save_idx};
use advgan::defenses::{adv_train, DefenseConfig, DefenseKind};
use advgan::distillation::{dynamic_distill_attack, static_distill_attack, DistillConfig};
use advgan::evaluation::{attack_success_rate, benchmark_runtime, predict_batched};
use advgan::models::{build_model, train_classifier, Arch, TrainHyper};
use advgan::pipeline::{run_pipeline, PipelineConfig, Stage};
use advgan::{BlackBoxOracle, Classifier, Dataset, GeneratorModel};

#[derive(Parser)]
#[command(name = "advgan", version, about = "Bounded adversarial perturbation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Classifier training
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
    /// Adversarial-training defenses
    Defend(DefendArgs),
    /// Run attacks against a checkpointed model
    Attack {
        #[command(subcommand)]
        command: AttackCommand,
    },
    /// Black-box substitute training (static or dynamic)
    Distill(DistillArgs),
    /// Run the evaluation stage of a pipeline config
    Evaluate(EvaluateArgs),
    /// Time generation of adversarial instances per attack
    Benchmark(BenchmarkArgs),
    /// Print the evaluation report of a run directory
    Report(ReportArgs),
    /// Run pipeline stages from a declarative config
    Run(RunArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Print counts and SHA-256 digests of an IDX pair
    Verify {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Produce the target-train / distill / eval splits of a config
    Split {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Train a classifier and save its checkpoint
    Train {
        #[arg(long)]
        arch: Arch,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        target_accuracy: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DefendArgs {
    /// adv_fgsm | ensemble | iterative
    #[arg(long)]
    kind: DefenseKind,
    /// Checkpoint of the model to harden
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Donor checkpoints for the ensemble defense (repeatable)
    #[arg(long)]
    donor: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AttackCommand {
    Run(AttackRunArgs),
}

#[derive(Args)]
struct AttackRunArgs {
    /// fgsm | opt | advgan | advgan-blackbox
    #[arg(long)]
    attack: String,
    /// Target model checkpoint (the oracle for advgan-blackbox)
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long, default_value_t = true)]
    targeted: bool,
    /// next_class | random | a fixed class index
    #[arg(long, default_value = "random")]
    target_rule: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pre-trained generator checkpoint (attack = advgan)
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Generator training epochs when no checkpoint is given (advgan) or
    /// per-iteration epochs (advgan-blackbox)
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// static | dynamic (advgan-blackbox)
    #[arg(long, default_value = "dynamic")]
    mode: String,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long)]
    query_budget: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    opt_steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    /// Oracle model checkpoint
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// static | dynamic
    #[arg(long, default_value = "static")]
    mode: String,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long)]
    query_budget: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory holding the artifacts of the earlier stages
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long, default_value_t = 100)]
    opt_steps: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    /// Comma-separated stage list (default: all)
    #[arg(long)]
    stages: Option<String>,
    /// Force sequential execution for bit-exact reproduction
    #[arg(long, default_value_t = false)]
    deterministic: bool,
}

fn main() -> ExitCode {
    // keep BLAS single-threaded so runs are bit-reproducible
    std::env::set_var("OPENBLAS_NUM_THREADS", "1");
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Data { command } => data_command(command),
        Command::Model { command } => model_command(command),
        Command::Defend(args) => defend(args),
        Command::Attack { command } => match command {
            AttackCommand::Run(args) => attack_run(args),
        },
        Command::Distill(args) => distill(args),
        Command::Evaluate(args) => run_stages(&args.config, &args.run_dir, &[Stage::Evaluate], true),
        Command::Benchmark(args) => benchmark(args),
        Command::Report(args) => report(args),
        Command::Run(args) => {
            let stages = match &args.stages {
                Some(list) => Some(
                    list.split(',')
                        .map(|s| s.trim().parse::<Stage>())
                        .collect::<advgan::Result<Vec<_>>>()?,
                ),
                None => None,
            };
            run_selected_stages(&args.config, &args.run_dir, stages, args.deterministic)
        }
    }
}

fn run_stages(
    config: &PathBuf,
    run_dir: &PathBuf,
    stages: &[Stage],
    deterministic: bool,
) -> Result<ExitCode> {
    run_selected_stages(config, run_dir, Some(stages.to_vec()), deterministic)
}

/// `stages = None` runs every stage whose config section is present.
fn run_selected_stages(
    config: &PathBuf,
    run_dir: &PathBuf,
    stages: Option<Vec<Stage>>,
    deterministic: bool,
) -> Result<ExitCode> {
    let cfg = match PipelineConfig::load(config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(1));
        }
    };
    let stages = stages.unwrap_or_else(|| cfg.available_stages());
    match run_pipeline(&cfg, run_dir, &stages, deterministic) {
        Ok(()) => Ok(ExitCode::SUCCESS),
        Err(failure) => {
            eprintln!("error: {failure}");
            Ok(ExitCode::from(failure.exit_code() as u8))
        }
    }
}

fn data_command(command: DataCommand) -> Result<ExitCode> {
    match command {
        DataCommand::Verify { images, labels } => {
            let ds: Dataset = load_mnist(&images, &labels)?;
            println!("instances: {}", ds.len());
            println!("images sha256: {}", file_sha256(&images)?);
            println!("labels sha256: {}", file_sha256(&labels)?);
            Ok(ExitCode::SUCCESS)
        }
        DataCommand::Split { config, run_dir } => {
            run_stages(&config, &run_dir, &[Stage::Data], true)
        }
    }
}

fn model_command(command: ModelCommand) -> Result<ExitCode> {
    let ModelCommand::Train {
        arch,
        images,
        labels,
        epochs,
        seed,
        target_accuracy,
        out,
    } = command;
    let data: Dataset = load_mnist(&images, &labels)?;
    let hyper = TrainHyper {
        epochs,
        seed,
        target_accuracy,
        ..Default::default()
    };
    let (mut model, acc) = train_classifier(build_model(arch, seed), &data, &hyper)?;
    model.save_checkpoint(&out)?;
    println!("model {arch}: accuracy {:.4}, checkpoint {}", acc, out.display());
    Ok(ExitCode::SUCCESS)
}

fn defend(args: DefendArgs) -> Result<ExitCode> {
    let data: Dataset = load_mnist(&args.images, &args.labels)?;
    let model = Classifier::load_checkpoint(&args.model)?;
    let mut donors = args
        .donor
        .iter()
        .map(|p| Classifier::load_checkpoint(p))
        .collect::<advgan::Result<Vec<_>>>()?;
    let cfg = DefenseConfig {
        kind: args.kind,
        epsilon: args.epsilon,
        epochs: args.epochs,
        seed: args.seed,
        ..Default::default()
    };
    let mut defended = adv_train(model, &data, &cfg, &mut donors)?;
    defended.save_checkpoint(&args.out)?;
    println!("defended checkpoint written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_target_rule(s: &str) -> Result<TargetRule> {
    Ok(match s {
        "random" => TargetRule::SeededRandom,
        "next_class" => TargetRule::NextClass,
        other => TargetRule::FixedClass(
            other
                .parse::<usize>()
                .with_context(|| format!("target rule '{other}' is not random, next_class, or a class index"))?,
        ),
    })
}

fn attack_run(args: AttackRunArgs) -> Result<ExitCode> {
    let data: Dataset = load_mnist(&args.images, &args.labels)?;
    let labels = data.labels_usize();
    let cfg = AttackConfig {
        epsilon: args.epsilon,
        targeted: args.targeted,
        target_rule: parse_target_rule(&args.target_rule)?,
        seed: args.seed,
        opt_steps: args.opt_steps,
        ..Default::default()
    };
    std::fs::create_dir_all(&args.out)?;

    let (result, mut model) = match args.attack.as_str() {
        "fgsm" => {
            let mut model = Classifier::load_checkpoint(&args.model)?;
            (fgsm(&mut model, &data.images, &labels, &cfg)?, model)
        }
        "opt" => {
            let mut model = Classifier::load_checkpoint(&args.model)?;
            let targets = if cfg.targeted {
                cfg.targets(&labels, 0)
            } else {
                labels.clone()
            };
            (opt_attack(&mut model, &data.images, &targets, &cfg)?, model)
        }
        "advgan" => {
            let mut model = Classifier::load_checkpoint(&args.model)?;
            let mut generator = match &args.generator {
                Some(path) => GeneratorModel::load_checkpoint(path)?,
                None => {
                    let gan_cfg = AdvGanConfig {
                        epochs: args.epochs,
                        seed: args.seed,
                        ..Default::default()
                    };
                    let (g, _, _) = advgan_train(&mut model, &data, &cfg, &gan_cfg)?;
                    g
                }
            };
            generator.save_checkpoint(&args.out.join("generator"))?;
            (advgan_generate(&mut generator, &data.images, args.epsilon), model)
        }
        "advgan-blackbox" => {
            let oracle_model = Classifier::load_checkpoint(&args.model)?;
            let mut oracle = BlackBoxOracle::new(oracle_model);
            let dcfg = DistillConfig {
                iterations: args.iterations,
                query_budget: args.query_budget,
                seed: args.seed,
                ..Default::default()
            };
            let gan_cfg = AdvGanConfig {
                epochs: args.epochs,
                seed: args.seed,
                ..Default::default()
            };
            let mut out = match args.mode.as_str() {
                "static" => static_distill_attack(&mut oracle, &data, &cfg, &gan_cfg, &dcfg)?,
                "dynamic" => dynamic_distill_attack(&mut oracle, &data, &cfg, &gan_cfg, &dcfg)?,
                other => bail!("unknown black-box mode '{other}'"),
            };
            let mut lines = String::new();
            for rec in &out.history {
                lines.push_str(&serde_json::to_string(rec)?);
                lines.push('\n');
            }
            std::fs::write(args.out.join("history.jsonl"), lines)?;
            out.generator.save_checkpoint(&args.out.join("generator"))?;
            let result = advgan_generate(&mut out.generator, &data.images, args.epsilon);
            let model = Classifier::load_checkpoint(&args.model)?;
            (result, model)
        }
        other => bail!("unknown attack '{other}'"),
    };

    // score and persist
    let clean_pred = predict_batched(&mut model, &data.images);
    let adv_pred = predict_batched(&mut model, &result.adversarial);
    let targets = cfg.targeted.then(|| cfg.targets(&labels, 0));
    let rate = attack_success_rate(&clean_pred, &adv_pred, &labels, targets.as_deref())?;

    let adv_ds = Dataset {
        images: result.adversarial.clone(),
        labels: data.labels.clone(),
        name: format!("{}-adv", data.name),
    };
    save_idx(
        &adv_ds,
        &args.out.join("adversarial-images.idx"),
        &args.out.join("adversarial-labels.idx"),
    )?;
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let summary = serde_json::json!({
        "attack": args.attack,
        "epsilon": args.epsilon,
        "targeted": args.targeted,
        "success_rate": rate,
        "mean_linf": mean(&result.perturbation_linf),
        "mean_l2": mean(&result.perturbation_l2),
        "wall_time_seconds": result.wall_time_seconds,
        "queries_used": result.queries_used,
    });
    std::fs::write(
        args.out.join("result.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    println!("success rate {:.4} -> {}", rate, args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn distill(args: DistillArgs) -> Result<ExitCode> {
    let data: Dataset = load_mnist(&args.images, &args.labels)?;
    let mut oracle = BlackBoxOracle::new(Classifier::load_checkpoint(&args.model)?);
    let dcfg = DistillConfig {
        iterations: args.iterations,
        query_budget: args.query_budget,
        seed: args.seed,
        ..Default::default()
    };
    let atk = AttackConfig {
        seed: args.seed,
        ..Default::default()
    };
    let gan_cfg = AdvGanConfig {
        seed: args.seed,
        ..Default::default()
    };
    let mut out = match args.mode.as_str() {
        "static" => static_distill_attack(&mut oracle, &data, &atk, &gan_cfg, &dcfg)?,
        "dynamic" => dynamic_distill_attack(&mut oracle, &data, &atk, &gan_cfg, &dcfg)?,
        other => bail!("unknown distillation mode '{other}'"),
    };
    std::fs::create_dir_all(&args.out)?;
    out.substitute.save_checkpoint(&args.out.join("substitute"))?;
    out.generator.save_checkpoint(&args.out.join("generator"))?;
    let mut lines = String::new();
    for rec in &out.history {
        lines.push_str(&serde_json::to_string(rec)?);
        lines.push('\n');
    }
    std::fs::write(args.out.join("history.jsonl"), lines)?;
    println!(
        "{} distillation done, {} oracle queries -> {}",
        args.mode,
        oracle.query_count(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn benchmark(args: BenchmarkArgs) -> Result<ExitCode> {
    let data: Dataset = load_mnist(&args.images, &args.labels)?;
    let data = data.take(args.n, "benchmark");
    let labels = data.labels_usize();
    let mut model = Classifier::load_checkpoint(&args.model)?;
    let mut generator = GeneratorModel::load_checkpoint(&args.generator)?;
    let cfg = AttackConfig {
        epsilon: args.epsilon,
        targeted: true,
        opt_steps: args.opt_steps,
        ..Default::default()
    };
    let targets = cfg.targets(&labels, 0);

    let t_gen = benchmark_runtime(&data.images, args.repeats, |x| {
        let _ = advgan_generate(&mut generator, x, args.epsilon);
    });
    let t_fgsm = benchmark_runtime(&data.images, args.repeats, |x| {
        let _ = fgsm(&mut model, x, &labels, &cfg);
    });
    let t_opt = benchmark_runtime(&data.images, 1, |x| {
        let _ = opt_attack(&mut model, x, &targets, &cfg);
    });

    println!("instances: {}", data.len());
    println!("advgan generator: {t_gen:.4}s");
    println!("fgsm:             {t_fgsm:.4}s");
    println!("opt ({} steps): {t_opt:.4}s", args.opt_steps);
    if let Some(out) = args.out {
        let json = serde_json::json!({
            "n": data.len(),
            "advgan_seconds": t_gen,
            "fgsm_seconds": t_fgsm,
            "opt_seconds": t_opt,
            "opt_steps": args.opt_steps,
        });
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&out, serde_json::to_vec_pretty(&json)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> Result<ExitCode> {
    let path = args.run_dir.join("evaluate").join("report.csv");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("no report at {}", path.display()))?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}
