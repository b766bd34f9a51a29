mod ablate;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "mafn", version, about = "Referring segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of training samples.
        #[arg(long)]
        num: usize,
        /// Number of validation samples (default: num / 5, at least 1).
        #[arg(long)]
        val: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side in pixels.
        #[arg(long, default_value_t = 48)]
        size: usize,
    },
    /// Train a model and write metrics.csv, last.ckpt and best.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs in this invocation; resume later with --resume.
        #[arg(long)]
        stop_after: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate (default: the configured validation split).
        #[arg(long)]
        split: Option<String>,
        /// CSV destination (default: eval.csv next to the checkpoint).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Segment one image given an expression.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PPM input image.
        #[arg(long)]
        image: PathBuf,
        /// Space-separated expression, e.g. "red circle left".
        #[arg(long)]
        expr: String,
        /// Binary PGM output mask.
        #[arg(long)]
        out: PathBuf,
        /// Write per-stage feature-map PGMs into this directory.
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Run the gradient, oracle and reduction property suite.
    Verify {
        /// Negate the sigmoid backward rule while running the gradient checks.
        #[arg(long)]
        inject_sign_flip: bool,
    },
    /// Print a configuration preset in config-file form.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
    },
    /// Train every MSRC kernel set and print a comparison table.
    AblateKernels(AblateArgs),
    /// Train the module ladder (fusion, noise, MSRC) and print a comparison table.
    AblateModules(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Experiment,
    Pretrained,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    no_fusion: bool,
    #[arg(long)]
    no_noise: bool,
    #[arg(long)]
    no_msrc: bool,
    /// Replace text features by zeros (language-blind model).
    #[arg(long)]
    zero_text: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Base configuration (default: built-in defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            out,
            num,
            val,
            seed,
            size,
        } => commands::gen_data(&out, num, val, seed, size),
        Command::Train {
            config,
            data,
            out,
            resume,
            stop_after,
            overrides,
        } => commands::train(&config, &data, &out, resume.as_deref(), stop_after, &overrides),
        Command::Eval {
            checkpoint,
            data,
            split,
            csv,
        } => commands::eval(&checkpoint, &data, split.as_deref(), csv.as_deref()),
        Command::Infer {
            checkpoint,
            image,
            expr,
            out,
            dump_features,
        } => commands::infer(&checkpoint, &image, &expr, &out, dump_features.as_deref()),
        Command::Verify { inject_sign_flip } => commands::verify(inject_sign_flip),
        Command::Config { preset } => {
            print!("{}", commands::preset(preset).to_text());
            Ok(())
        }
        Command::AblateKernels(a) => ablate::kernels(&a),
        Command::AblateModules(a) => ablate::modules(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
