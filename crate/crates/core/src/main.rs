use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use unept::attention::bench::{to_csv, BenchSettings};
use unept::cli::gradcheck::parse_module;
use unept::cli::{
    cmd_bench_attention, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_infer, cmd_train, format_report, CliError, RunConfig,
};
use unept::data::Split;

#[derive(Parser)]
#[command(name = "unept", version, about = "Sparse-sampling pyramid transformer segmentation on synthetic scenes")]
struct Cli {
    /// `key = value` run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoints plus metrics.csv.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint overall and in the boundary band.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "off")]
        refine: Switch,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Segment one PPM image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value = "off")]
        refine: Switch,
        /// Also render the sampled locations for query pixel (Y, X).
        #[arg(long, num_args = 2, value_names = ["Y", "X"])]
        viz_samples: Option<Vec<usize>>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Dense against sparse attention timing, as CSV on stdout.
    BenchAttention {
        #[arg(default_values_t = [4096usize, 8192, 16384])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Write the synthetic dataset to the output directory.
    GenData,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse(&fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.scene.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Train { resume } => {
            let outcome = cmd_train(&cfg, resume.as_deref())?;
            println!("checkpoint {}", outcome.checkpoint.display());
            println!("metrics {}", outcome.metrics.display());
            if let Some(eval) = outcome.final_eval {
                println!("val miou {:.4} pix_acc {:.4}", eval.raw.overall.miou, eval.raw.overall.pix_acc);
            }
        }
        Command::Eval { checkpoint, refine, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let report = cmd_eval(&cfg, &checkpoint, split, matches!(refine, Switch::On))?;
            print!("{}", format_report(&report));
        }
        Command::Infer { checkpoint, image, refine, viz_samples } => {
            let viz = viz_samples.map(|v| (v[0], v[1]));
            let outcome = cmd_infer(&cfg, &checkpoint, &image, matches!(refine, Switch::On), viz)?;
            println!("prediction {}", outcome.prediction.display());
            println!("overlay {}", outcome.overlay.display());
            if let Some(path) = outcome.sample_points {
                println!("sample_points {} ({} points)", path.display(), outcome.points.len());
            }
        }
        Command::Gradcheck { module } => {
            let suites = parse_module(&module)?;
            cmd_gradcheck(&suites, cfg.seed, &mut std::io::stdout())?;
            println!("all groups below tolerance");
        }
        Command::BenchAttention { sizes, repeats } => {
            let m = &cfg.model;
            let settings = BenchSettings {
                d_model: m.d_model,
                heads: m.heads,
                head_dim: m.head_dim,
                points: m.points,
                levels: m.levels,
                repeats,
                seed: cfg.seed,
            };
            print!("{}", to_csv(&cmd_bench_attention(&settings, &sizes)?));
        }
        Command::GenData => {
            let data = cmd_gen_data(&cfg)?;
            println!("wrote {} train and {} val scenes to {}", data.train.len(), data.val.len(), cfg.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
