mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use equipair::data::{self, TaskKind, TriMesh};
use equipair::model::{Branch, EncoderKind, ModelError, ModelParams};
use equipair::train::{self, Predictor, TrainError};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, inputs or configuration; exit code 2.
    Usage(String),
    /// Failure while doing the work; exit code 1.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(name = "equipair", version, about = "Two-step pairwise assembly pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of assembly pairs.
    Gen(GenArgs),
    /// Blue-noise sample an OFF mesh into an .xyz cloud.
    Sample(SampleArgs),
    /// Train one branch (B, A) or the joint ablation model.
    Train(TrainArgs),
    /// Evaluate checkpoints on a dataset's test split.
    Eval(EvalArgs),
    /// Check every dataset invariant.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    task: TaskKind,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training pairs; defaults to a 3:2 split.
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = data::CLOUD_POINTS)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    branch: Branch,
    #[arg(long)]
    data: PathBuf,
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Encoder family: vector_neuron or plain.
    #[arg(long, value_parser = parse_kind)]
    encoder: Option<EncoderKind>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt_b: Option<PathBuf>,
    #[arg(long)]
    ckpt_a: Option<PathBuf>,
    /// Evaluate a joint ablation checkpoint instead of a B/A pair.
    #[arg(long)]
    ckpt_joint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Use ground-truth poses instead of predictions.
    #[arg(long)]
    oracle_gt: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    data: PathBuf,
}

fn parse_kind(s: &str) -> Result<EncoderKind, String> {
    match s {
        "vector_neuron" | "vn" => Ok(EncoderKind::VectorNeuron),
        "plain" => Ok(EncoderKind::Plain),
        other => Err(format!("unknown encoder `{other}` (expected vector_neuron or plain)")),
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("EQUIPAIR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("EQUIPAIR_THREADS must be a non-negative integer, got `{raw}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)?;
    }
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let n_train = args.n_train.unwrap_or_else(|| data::train_count(args.count));
    let run = RunConfig {
        command: "gen".into(),
        out: Some(args.out.clone()),
        task: Some(args.task),
        count: Some(args.count),
        n_train: Some(n_train),
        seed: args.seed,
        ..Default::default()
    };
    let dataset = data::gen_synthetic_split(args.task, args.count, n_train, args.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    data::save_dataset(&dataset, &args.out).map_err(runtime)?;
    run.echo(&args.out)?;
    println!(
        "generated {} {} pairs in {} (train {}, test {})",
        args.count,
        args.task.name(),
        args.out.display(),
        dataset.train.len(),
        dataset.test.len()
    );
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let text = std::fs::read_to_string(&args.mesh)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.mesh.display())))?;
    let mesh = TriMesh::parse_off(&text, &args.mesh.display().to_string()).map_err(|e| CliError::Usage(e.to_string()))?;
    let sampled = data::poisson_disk_sample(&mesh, args.n, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    data::write_xyz(&sampled.cloud, &args.out).map_err(runtime)?;
    println!(
        "wrote {} points to {} (min spacing {:e})",
        sampled.cloud.len(),
        args.out.display(),
        sampled.radius
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<data::Dataset, CliError> {
    data::load_dataset(dir).map_err(|e| CliError::Usage(format!("dataset {}: {e}", dir.display())))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut run = RunConfig::from_file(args.config.as_deref())?;
    run.command = "train".into();
    run.branch = Some(args.branch);
    run.data = Some(args.data.clone());
    run.out = Some(args.out.clone());
    if let Some(e) = args.epochs {
        run.train.epochs = e;
    }
    if let Some(s) = args.seed {
        run.train.seed = s;
    }
    run.seed = run.train.seed;
    if let Some(lr) = args.lr {
        run.train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        run.train.batch_size = b;
    }
    if let Some(k) = args.encoder {
        run.encoder.kind = k;
    }
    run.validate()?;
    let dataset = load_dataset(&args.data)?;
    run.echo(&args.out)?;
    let params = ModelParams::init(&run.encoder, args.branch, data::derive_seed(run.train.seed, 0)).map_err(runtime)?;
    let outcome = train::train_from(params, &dataset.train, &run.train, &run.loss, |epoch, loss| {
        eprintln!("epoch {} loss {loss:.6}", epoch + 1)
    })
    .map_err(|e| match e {
        TrainError::Config(m) => CliError::Usage(m),
        other => runtime(other),
    })?;
    outcome.params.save(&args.out.join("checkpoint.json")).map_err(runtime)?;
    train::write_loss_history(&outcome.history, &args.out.join("loss_history.csv")).map_err(runtime)?;
    println!(
        "trained branch {} for {} epochs; final loss {:.6}",
        args.branch,
        outcome.history.len(),
        outcome.history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn load_checkpoint(path: Option<&Path>, flag: &str) -> Result<ModelParams, CliError> {
    let path = path.ok_or_else(|| CliError::Usage(format!("{flag} is required")))?;
    ModelParams::load(path).map_err(|e| match e {
        ModelError::Io { .. } | ModelError::Format { .. } | ModelError::Config(_) => CliError::Usage(e.to_string()),
        other => runtime(other),
    })
}

fn expect_branch(p: &ModelParams, want: Branch, flag: &str) -> Result<(), CliError> {
    if p.branch != want {
        return Err(CliError::Usage(format!("{flag} holds a branch {} checkpoint, expected {want}", p.branch)));
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut run = RunConfig::from_file(args.config.as_deref())?;
    run.command = "eval".into();
    run.data = Some(args.data.clone());
    run.out = Some(args.out.clone());
    run.seed = args.seed;
    run.oracle_gt = args.oracle_gt;
    run.ckpt_a = args.ckpt_a.clone();
    run.ckpt_b = args.ckpt_b.clone();
    run.ckpt_joint = args.ckpt_joint.clone();

    let mut loaded = Vec::new();
    if !args.oracle_gt {
        if args.ckpt_joint.is_some() {
            let j = load_checkpoint(args.ckpt_joint.as_deref(), "--ckpt-joint")?;
            expect_branch(&j, Branch::Joint, "--ckpt-joint")?;
            loaded.push(j);
        } else {
            let b = load_checkpoint(args.ckpt_b.as_deref(), "--ckpt-b")?;
            let a = load_checkpoint(args.ckpt_a.as_deref(), "--ckpt-a")?;
            expect_branch(&b, Branch::B, "--ckpt-b")?;
            expect_branch(&a, Branch::A, "--ckpt-a")?;
            if let Some(field) = train::config_difference(&b.config, &a.config) {
                return Err(CliError::Usage(format!("checkpoint configs differ in `{field}`")));
            }
            loaded.push(b);
            loaded.push(a);
        }
        run.encoder = loaded[0].config.clone();
    }
    let predictor = match loaded.as_slice() {
        [] => Predictor::Oracle,
        [j] => Predictor::Joint(j),
        [b, a] => Predictor::TwoStep { b, a },
        _ => unreachable!(),
    };
    let dataset = load_dataset(&args.data)?;
    run.echo(&args.out)?;
    let report = train::evaluate(predictor, &dataset.test, args.seed).map_err(|e| match e {
        TrainError::ConfigMismatch { .. } | TrainError::Config(_) => CliError::Usage(e.to_string()),
        other => runtime(other),
    })?;
    train::write_report(&report, &args.out).map_err(runtime)?;
    print!("{}", train::metrics_csv(&report));
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), CliError> {
    let problems = data::validate_dataset(&args.data);
    if problems.is_empty() {
        println!("{}: ok", args.data.display());
        return Ok(());
    }
    for p in &problems {
        println!("{p}");
    }
    Err(CliError::Runtime(format!("{} violation(s) in {}", problems.len(), args.data.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Validate(a) => cmd_validate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
