use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use qerl::cli::{self, AblationAxis, CliError, QuantizeMode, RunConfig};
use qerl::quant::FormatKind;
use qerl::tasks::TaskKind;

/// Quantized-base LoRA policies trained with GRPO/DAPO and adaptive
/// quantization noise, at desk scale.
#[derive(Parser)]
#[command(name = "qerl", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quantize every float tensor of a QERLCKPT archive (or expand one back).
    Quantize {
        input: PathBuf,
        /// int4, fp4, nvfp4, mxfp4 or nf4.
        #[arg(long, default_value = "nvfp4")]
        format: String,
        #[arg(short, long)]
        output: PathBuf,
        /// Expand quantized entries to f64 instead.
        #[arg(long)]
        dequantize: bool,
    },
    /// List the entries of a QERLCKPT archive.
    Inspect { input: PathBuf },
    /// Pretrain, quantize and run RL into a run directory.
    Train(TrainArgs),
    /// Run one config across schedules, ranks or formats with a shared seed.
    Ablate {
        /// schedule, rank or format.
        #[arg(long)]
        axis: String,
        /// Comma-separated variant values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[command(flatten)]
        run: TrainArgs,
    },
    /// Join run metrics on step into a tab-separated table.
    Plotdata {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Time every codec on a random standard-normal matrix.
    BenchCodec {
        #[arg(long, default_value_t = 1024)]
        rows: usize,
        #[arg(long, default_value_t = 1024)]
        cols: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write task instances as JSON lines.
    ExportTasks {
        /// mod_arith, chain_sum or compare.
        #[arg(long, default_value = "mod_arith")]
        kind: String,
        #[arg(long, default_value_t = 2)]
        difficulty: u8,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print the resolved config with every key documented.
    Config(TrainArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. --set lr=0.002.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    sigma_start: Option<f64>,
    #[arg(long)]
    sigma_end: Option<f64>,
    #[arg(long)]
    decay: Option<String>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut o = self.set.clone();
        let quoted = |k: &str, v: &str| format!("{k}=\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\""));
        if let Some(v) = &self.algo {
            o.push(quoted("algo", v));
        }
        if let Some(v) = &self.format {
            o.push(quoted("format", v));
        }
        if let Some(v) = self.seed {
            o.push(format!("seed={v}"));
        }
        if let Some(v) = self.steps {
            o.push(format!("total_steps={v}"));
        }
        if let Some(v) = self.stages {
            o.push(format!("stages={v}"));
        }
        if let Some(v) = self.sigma_start {
            o.push(format!("sigma_start={v:e}"));
        }
        if let Some(v) = self.sigma_end {
            o.push(format!("sigma_end={v:e}"));
        }
        if let Some(v) = &self.decay {
            o.push(quoted("decay", v));
        }
        if let Some(v) = &self.out {
            o.push(quoted("out_dir", &v.to_string_lossy()));
        }
        RunConfig::resolve(self.config.as_deref(), &o)
    }
}

fn emit(output: Option<&PathBuf>, text: &str) -> Result<(), CliError> {
    match output {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Quantize { input, format, output, dequantize } => {
            let mode = if dequantize {
                QuantizeMode::Dequantize
            } else {
                QuantizeMode::Quantize(format.parse::<FormatKind>()?)
            };
            for line in cli::quantize_archive(&input, &output, mode)? {
                println!("{line}");
            }
        }
        Cmd::Inspect { input } => {
            for line in cli::inspect(&input)? {
                println!("{line}");
            }
        }
        Cmd::Train(args) => {
            let cfg = args.resolve()?;
            let s = cli::run_training(&cfg, None)?;
            println!("{}", serde_json::to_string(&s).expect("summary serializes"));
        }
        Cmd::Ablate { axis, values, run } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = run.resolve()?;
            let values = values.unwrap_or_else(|| axis.default_values());
            print!("{}", cli::ablation_table(&cli::ablate(&cfg, axis, &values)?));
        }
        Cmd::Plotdata { runs, output } => emit(output.as_ref(), &cli::plotdata(&runs)?)?,
        Cmd::BenchCodec { rows, cols, reps, seed } => print!("{}", cli::bench_codec(rows, cols, reps, seed)?),
        Cmd::ExportTasks { kind, difficulty, count, seed, output } => {
            let kind: TaskKind = kind.parse()?;
            emit(output.as_ref(), &cli::export_tasks(kind, difficulty, count, seed)?)?;
        }
        Cmd::Config(args) => print!("{}", args.resolve()?.to_commented_toml()),
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse().cmd) {
        eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
        std::process::exit(e.exit_code());
    }
}
