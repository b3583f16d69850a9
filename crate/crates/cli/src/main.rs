//! `mognet`: train, evaluate, size and inspect MUX-residual networks.

mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mognet::blocks::{REFERENCE_MB_N128_G4, REFERENCE_MB_N128_G8};
use mognet::ca::{default_seed, parse_bits, render_states, DEFAULT_RULE};
use mognet::infer::pixels_to_tensor;
use mognet::{
    build_model, export_checkpoint, generate_kernel, import_checkpoint, int_forward, predict, size_report, two_stage_train,
    CaConfig, Engine, Error, IntModel, ModelConfig, RunConfig,
};

use manifest::{DataSource, RunManifest, Split, TOOLKIT_VERSION};

#[derive(Parser)]
#[command(name = "mognet", version, about = "MUX-residual networks with CA-generated weights and integer inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage quantization-aware training.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Storage report and compression rates.
    Size(SizeArgs),
    /// Print the state matrix of an elementary cellular automaton.
    GenCa(GenCaArgs),
    /// Classify one raw image with the integer engine.
    Infer(InferArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CIFAR binary batch directory, or `synth`.
    #[arg(long)]
    data: String,
    /// Keep only the first N images.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 200)]
    synth_count: usize,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value configuration file.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Replay the run recorded in a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    data: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 200)]
    synth_count: usize,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Real,
    Integer,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "both")]
    engine: EngineArg,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
}

#[derive(Args)]
struct SizeArgs {
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Bits per stored batch-norm scale or shift.
    #[arg(long, default_value_t = 32)]
    bn_bits: u32,
    /// Machine-readable key=value records.
    #[arg(long)]
    kv: bool,
}

#[derive(Args)]
struct GenCaArgs {
    #[arg(long, default_value_t = DEFAULT_RULE)]
    rule: u8,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    steps: usize,
    /// Seed of the balanced random initial row.
    #[arg(long, default_value_t = 0, conflicts_with = "seed_row")]
    seed: u64,
    /// Explicit initial row as a 0/1 string.
    #[arg(long)]
    seed_row: Option<String>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw channel-major 8-bit image, optionally preceded by a label byte.
    #[arg(long)]
    image: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    const CONFIG: u8 = 2;
    const DATA: u8 = 3;
    const INTERNAL: u8 = 4;

    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } => Failure::CONFIG,
            Error::Data(_) | Error::Parse { .. } | Error::Io(_) => Failure::DATA,
            Error::Shape(_) | Error::Degenerate(_) | Error::Overflow(_) | Error::Divergence(_) => Failure::INTERNAL,
        };
        Failure::new(code, e.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn read_text(path: &Path, code: u8) -> std::result::Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(code, format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure::new(Failure::INTERNAL, format!("{}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let manifest = match &args.manifest {
        Some(path) => RunManifest::parse(&read_text(path, Failure::CONFIG)?)?,
        None => {
            let path = args.config.as_ref().expect("clap enforces --config");
            let data = args.data.as_deref().expect("clap enforces --data");
            RunManifest {
                toolkit_version: TOOLKIT_VERSION.into(),
                data: DataSource::from_arg(data, args.synth_count, args.synth_seed),
                limit: args.limit,
                config: RunConfig::parse(&read_text(path, Failure::CONFIG)?)?,
            }
        }
    };
    let RunConfig { model: model_cfg, train } = &manifest.config;
    let data = manifest.data.load(model_cfg, Split::Train, manifest.limit)?;
    let mut model = build_model(model_cfg)?;
    let mut lines = Vec::new();
    two_stage_train(&mut model, &data, train, &mut |m| {
        let line = m.to_line();
        eprintln!("{line}");
        lines.push(line);
    })?;

    fs::create_dir_all(&args.out)
        .map_err(|e| Failure::new(Failure::INTERNAL, format!("{}: {e}", args.out.display())))?;
    let quant = model.to_quant();
    export_checkpoint(&quant, &args.out.join("model.ckpt"))?;
    let mut log = lines.join("\n");
    log.push('\n');
    write_file(&args.out.join("metrics.log"), log)?;
    write_file(&args.out.join("manifest"), manifest.to_text())?;
    if let Some(last) = lines.last() {
        println!("{last}");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let quant = import_checkpoint(&args.checkpoint)?;
    let source = DataSource::from_arg(&args.data.data, args.data.synth_count, args.data.synth_seed);
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let data = source.load(&quant.config, split, args.data.limit)?;
    let int = IntModel::from_quant(&quant)?;
    let engines: &[Engine] = match args.engine {
        EngineArg::Real => &[Engine::Real],
        EngineArg::Integer => &[Engine::Integer],
        EngineArg::Both => &[Engine::Real, Engine::Integer],
    };
    let mut runs = Vec::new();
    for &engine in engines {
        let preds = predict(&quant, &int, &data, engine, args.batch_size)?;
        let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        let name = match engine {
            Engine::Real => "real",
            Engine::Integer => "integer",
        };
        println!(
            "engine={name} samples={} correct={correct} accuracy={:.4}",
            data.len(),
            correct as f64 / data.len() as f64
        );
        runs.push(preds);
    }
    if let [real, int] = runs.as_slice() {
        let diverged: Vec<usize> = (0..real.len()).filter(|&i| real[i] != int[i]).collect();
        println!("disagreements={}", diverged.len());
        if let Some(&first) = diverged.first() {
            return Err(Failure::new(
                Failure::INTERNAL,
                format!(
                    "engines disagree on {} samples; first divergent sample {first}: real={} integer={}",
                    diverged.len(),
                    real[first],
                    int[first]
                ),
            ));
        }
    }
    Ok(())
}

fn cmd_size(args: SizeArgs) -> CmdResult {
    let cfg: ModelConfig = match (&args.config, &args.checkpoint) {
        (Some(path), _) => RunConfig::parse(&read_text(path, Failure::CONFIG)?)?.model,
        (None, Some(path)) => import_checkpoint(path)?.config,
        (None, None) => unreachable!("clap requires one source"),
    };
    let report = size_report(&cfg, args.bn_bits)?;
    if args.kv {
        print!("{}", report.to_kv());
        return Ok(());
    }
    print!("{}", report.to_text());
    let reference = match (cfg.n, cfg.g) {
        (128, 4) => Some(REFERENCE_MB_N128_G4),
        (128, 8) => Some(REFERENCE_MB_N128_G8),
        _ => None,
    };
    if let Some(mb) = reference {
        println!("published size for n={}, g={}: {mb} Mb", cfg.n, cfg.g);
    }
    Ok(())
}

fn cmd_gen_ca(args: GenCaArgs) -> CmdResult {
    if args.width < 3 {
        return Err(Failure::new(Failure::CONFIG, "invalid configuration `width`: must be at least 3"));
    }
    let row = match &args.seed_row {
        Some(bits) => parse_bits(bits)?,
        None => default_seed(args.width, args.seed),
    };
    let kernel = generate_kernel(&CaConfig::new(args.rule, args.width, args.steps, row)?)?;
    print!("{}", render_states(&kernel));
    Ok(())
}

fn cmd_infer(args: InferArgs) -> CmdResult {
    let quant = import_checkpoint(&args.checkpoint)?;
    let cfg = &quant.config;
    let image_len = cfg.input_channels * cfg.input_size * cfg.input_size;
    let bytes = fs::read(&args.image).map_err(|e| Failure::new(Failure::DATA, format!("{}: {e}", args.image.display())))?;
    let pixels = match bytes.len() {
        l if l == image_len => &bytes[..],
        l if l == image_len + 1 => &bytes[1..],
        l => {
            return Err(Failure::new(
                Failure::DATA,
                format!("image has {l} bytes, expected {image_len} or {}", image_len + 1),
            ))
        }
    };
    let int = IntModel::from_quant(&quant)?;
    let out = int_forward(&int, &pixels_to_tensor(pixels, 1, cfg.input_channels, cfg.input_size)?, false)?;
    let plane = cfg.stage_size(cfg.stages).pow(2);
    let scores: Vec<String> = out
        .scores
        .iter()
        .map(|&s| format!("{:.6}", int.head_affine.to_logit(s, plane)))
        .collect();
    println!("scores={}", scores.join(","));
    println!("label={}", out.predictions()[0]);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Size(a) => cmd_size(a),
        Command::GenCa(a) => cmd_gen_ca(a),
        Command::Infer(a) => cmd_infer(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
