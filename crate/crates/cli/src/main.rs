//! `fogda`: synthesize datasets, train and evaluate fog-adaptive detectors.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fogda_core::eval::{evaluate, EvalError, CONF_FLOOR};
use fogda_core::experiment::{
    eval_samples, load_train_data, resolve_protocol, run_ablation, ExperimentError,
};
use fogda_core::fog::dcp_defog;
use fogda_core::model::{load_checkpoint, CheckpointError};
use fogda_core::scene::{read_png, synthesize_dataset, write_png, Dataset, DatasetError, Split};
use fogda_core::train::{train, EvalSet, Toggles, TrainError};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or usage; exit code 2.
    Config(String),
    /// Missing or unreadable files; exit code 3.
    Io(String),
    /// Non-finite loss or gradient; exit code 4.
    Numerical(String),
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Internal(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Numerical(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidConfig(_) => CliError::Config(e.to_string()),
            DatasetError::OutDirNotEmpty(p) => {
                CliError::Io(format!("output directory {} is not empty (pass --force to replace it)", p.display()))
            }
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => CliError::Io(e.to_string()),
            EvalError::EmptySplit => CliError::Config(e.to_string()),
            EvalError::Tensor(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let root = match &e {
            TrainError::Aborted { source, .. } => source.as_ref(),
            other => other,
        };
        match root {
            _ if e.is_numerical() => CliError::Numerical(e.to_string()),
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Io { .. } | TrainError::Checkpoint(_) | TrainError::Eval(EvalError::Io { .. }) => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Dataset(e) => e.into(),
            ExperimentError::Train(e) => e.into(),
            ExperimentError::Eval(e) => e.into(),
            ExperimentError::Protocol(m) => CliError::Config(m),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "fogda", version, about = "Fog-robust domain-adaptive detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Run configuration JSON; unspecified keys take their defaults.
    #[arg(long, short = 'c', value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset to disk.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory [default: paths.dataset_dir].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a detector and score it on the configured split.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory [default: paths.dataset_dir].
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        /// Run directory [default: paths.run_dir].
        #[arg(long, value_name = "DIR")]
        run_dir: Option<PathBuf>,
        /// Number of optimizer steps.
        #[arg(long)]
        iterations: Option<u64>,
        /// Training seed; overrides the config file and FOGDA_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// Disable every adaptation term (lower/upper bound baseline).
        #[arg(long)]
        source_only: bool,
        /// Split scored after training [default: protocol.split].
        #[arg(long)]
        split: Option<String>,
        /// Score the EMA teacher instead of the student.
        #[arg(long)]
        ema: bool,
    },
    /// Score a checkpoint on a dataset split and write metrics.json.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Student checkpoint (`ckpt_<i>.bin`).
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Evaluate the EMA teacher saved next to the checkpoint.
        #[arg(long)]
        ema: bool,
        /// Split to score: test_target or test_clear [default: protocol.split].
        #[arg(long)]
        split: Option<String>,
        /// Dataset directory [default: paths.dataset_dir].
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        /// Output file [default: metrics.json in the checkpoint's run directory].
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Defog one PNG with the dark channel prior.
    Dehaze {
        input: PathBuf,
        output: PathBuf,
    },
    /// Train the five ablation rows on every seed and tabulate mAP.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory [default: paths.dataset_dir].
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        /// Output directory for ablation_table.json and per-run directories.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Comma-separated seeds [default: ablation.seeds].
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Number of optimizer steps per run.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        config: ConfigArg,
        /// Print the built-in defaults instead.
        #[arg(long)]
        dump_defaults: bool,
    },
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn open_dataset(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Io(format!("dataset directory {} does not exist", dir.display())));
    }
    Ok(Dataset::open(dir)?)
}

fn parse_split(name: &str) -> Result<Split, CliError> {
    Split::parse(name).ok_or_else(|| CliError::Config(format!("unknown split `{name}`")))
}

fn cmd_synth(config: RunConfig, out: Option<PathBuf>, force: bool) -> Result<(), CliError> {
    config.validate()?;
    let out = out.unwrap_or(config.paths.dataset_dir);
    let manifest = synthesize_dataset(&config.dataset, &out, force)?;
    println!("dataset written to {}", out.display());
    println!("renderer hash {}", manifest.renderer_config_hash);
    for split in Split::ALL {
        println!("  {:<13} {:>5} samples", split.name(), manifest.ids(split).len());
    }
    println!("  {:<13} {:>5} samples", "total", manifest.sample_ids.len());
    Ok(())
}

fn cmd_train(mut config: RunConfig, dataset: Option<PathBuf>, run_dir: Option<PathBuf>) -> Result<(), CliError> {
    if let Some(d) = dataset {
        config.paths.dataset_dir = d;
    }
    if let Some(r) = run_dir {
        config.paths.run_dir = r;
    }
    config.validate()?;
    let split = config.protocol.split;
    let protocol = resolve_protocol(config.train.training_tag(), split)?;
    let ds = open_dataset(&config.paths.dataset_dir)?;
    let run_dir = &config.paths.run_dir;
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    write_text(&run_dir.join("config.lock.json"), &config.to_json())?;

    let data = load_train_data(&ds, &config.train)?;
    let eval_set = EvalSet { protocol: protocol.to_string(), samples: eval_samples(&ds, split)? };
    let outcome = train(&config.train, &data, Some(&eval_set), Some(run_dir))?;
    let params = if config.protocol.ema { &outcome.ema.shadow } else { &outcome.params };
    let report = evaluate(params, &eval_set.samples, CONF_FLOOR, protocol)?;
    report.write(&run_dir.join("metrics.json"))?;
    println!("{protocol} mAP@0.5 on {}: {:.4}", split.name(), report.map);
    Ok(())
}

/// `ckpt_<i>.bin` to its `ema_<i>.bin` sibling.
fn ema_sibling(checkpoint: &Path) -> PathBuf {
    let name = checkpoint.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    match name.strip_prefix("ckpt_") {
        Some(rest) => checkpoint.with_file_name(format!("ema_{rest}")),
        None => checkpoint.to_path_buf(),
    }
}

fn default_metrics_path(checkpoint: &Path) -> PathBuf {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let run = if dir.file_name().is_some_and(|n| n == "checkpoints") { dir.parent().unwrap_or(dir) } else { dir };
    run.join("metrics.json")
}

fn cmd_eval(
    config: RunConfig,
    checkpoint: PathBuf,
    ema: bool,
    split: Option<String>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let split = match split {
        Some(s) => parse_split(&s)?,
        None => config.protocol.split,
    };
    let path = if ema || config.protocol.ema { ema_sibling(&checkpoint) } else { checkpoint.clone() };
    if !path.is_file() {
        return Err(CliError::Io(format!("checkpoint {} not found", path.display())));
    }
    let (params, meta) = load_checkpoint(&path)?;
    let protocol = resolve_protocol(&meta.training, split)?;
    let ds = open_dataset(&dataset.unwrap_or(config.paths.dataset_dir))?;
    let samples = eval_samples(&ds, split)?;
    let report = evaluate(&params, &samples, CONF_FLOOR, protocol)?;
    let out = out.unwrap_or_else(|| default_metrics_path(&checkpoint));
    report.write(&out)?;
    println!("{protocol} mAP@0.5 on {}: {:.4} ({})", split.name(), report.map, out.display());
    Ok(())
}

fn cmd_dehaze(input: &Path, output: &Path) -> Result<(), CliError> {
    let image = read_png(input)?;
    let result = dcp_defog(&image).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
    write_png(output, &result.defogged)?;
    let a = &result.airlight;
    println!("airlight [{:.3}, {:.3}, {:.3}] -> {}", a[0], a[1], a[2], output.display());
    Ok(())
}

fn cmd_ablate(mut config: RunConfig, dataset: Option<PathBuf>, out: &Path, seeds: Option<Vec<u64>>) -> Result<(), CliError> {
    if let Some(d) = dataset {
        config.paths.dataset_dir = d;
    }
    if let Some(s) = seeds {
        config.ablation.seeds = s;
    }
    config.validate()?;
    let ds = open_dataset(&config.paths.dataset_dir)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_text(&out.join("config.lock.json"), &config.to_json())?;
    let table = run_ablation(&ds, &config.train, &config.ablation.seeds, Some(out))?;
    let json = serde_json::to_string_pretty(&table).expect("table serializes") + "\n";
    write_text(&out.join("ablation_table.json"), &json)?;
    for row in &table.rows {
        let cells: Vec<String> = row
            .seeds
            .iter()
            .map(|s| s.map.map_or_else(|| "failed".to_string(), |m| format!("{m:.4}")))
            .collect();
        let mean = row.mean.map_or_else(|| "-".to_string(), |m| format!("{m:.4}"));
        println!("{:<20} {}  mean {mean}", row.name, cells.join(" "));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out, force } => cmd_synth(RunConfig::load(config.config.as_deref())?, out, force),
        Command::Train { config, dataset, run_dir, iterations, seed, source_only, split, ema } => {
            let mut c = RunConfig::load(config.config.as_deref())?;
            if let Some(n) = iterations {
                c.train.iterations = n;
            }
            if let Some(s) = seed {
                c.train.seed = s;
            }
            if source_only {
                c.train.toggles = Toggles::source_only();
            }
            if let Some(s) = split {
                c.protocol.split = parse_split(&s)?;
            }
            c.protocol.ema |= ema;
            cmd_train(c, dataset, run_dir)
        }
        Command::Eval { config, checkpoint, ema, split, dataset, out } => {
            cmd_eval(RunConfig::load(config.config.as_deref())?, checkpoint, ema, split, dataset, out)
        }
        Command::Dehaze { input, output } => cmd_dehaze(&input, &output),
        Command::Ablate { config, dataset, out, seeds, iterations } => {
            let mut c = RunConfig::load(config.config.as_deref())?;
            if let Some(n) = iterations {
                c.train.iterations = n;
            }
            cmd_ablate(c, dataset, &out, seeds)
        }
        Command::Config { config, dump_defaults } => {
            let c = if dump_defaults { RunConfig::default() } else { RunConfig::load(config.config.as_deref())? };
            c.validate()?;
            print!("{}", c.to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
