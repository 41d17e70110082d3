use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use sepmamba::bench::ReportFormat;
use sepmamba::data::WavEncoding;
use sepmamba::numerics::Precision;
use sepmamba::verify::Fault;
use sepmamba_cli::{
    cmd_bench, cmd_separate, cmd_train, cmd_verify, exit_code, keys_help, BenchArgs, SeparateArgs, TrainArgs,
};

#[derive(Parser)]
#[command(name = "sepmamba", version, about = "Bidirectional Mamba U-Net speaker separation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prec {
    F32,
    F64,
}

impl From<Prec> for Precision {
    fn from(p: Prec) -> Self {
        match p {
            Prec::F32 => Precision::F32,
            Prec::F64 => Precision::F64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Tsv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Encoding {
    Float32,
    Pcm16,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a separator; writes checkpoints and metrics.tsv to the output directory.
    Train {
        /// Configuration file.
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.max_steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Separate a mixture WAV into one file per source.
    Separate {
        checkpoint: PathBuf,
        input: PathBuf,
        /// Outputs are <prefix>_src1.wav, <prefix>_src2.wav (default: input path without extension).
        #[arg(long)]
        out_prefix: Option<String>,
        /// Reference sources, one per output, to report SI-SDRi on stderr.
        #[arg(long = "reference")]
        references: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Prec,
        #[arg(long, value_enum, default_value = "float32")]
        encoding: Encoding,
    },
    /// Parameter count, GMAC/s, forward time and training-memory estimate.
    Bench {
        /// Configuration files or checkpoints (default: the S and M presets).
        sources: Vec<PathBuf>,
        /// small, medium or toy.
        #[arg(long)]
        preset: Vec<String>,
        /// Audio length for timing and the memory estimate.
        #[arg(long, default_value_t = 4.0)]
        seconds: f64,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Skip the wall-clock measurement.
        #[arg(long)]
        no_timing: bool,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Prec,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
    /// Run self-checks; exits 0 iff every check passes.
    Verify {
        /// scan, grads, causality, metrics or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true, default_value = "none")]
        inject_fault: String,
    },
}

fn run(cmd: Cmd) -> sepmamba::Result<bool> {
    match cmd {
        Cmd::Train {
            config,
            resume,
            out_dir,
            seed,
            steps,
        } => cmd_train(&TrainArgs {
            config,
            resume,
            out_dir,
            seed,
            steps,
        })
        .map(|()| true),
        Cmd::Separate {
            checkpoint,
            input,
            out_prefix,
            references,
            precision,
            encoding,
        } => {
            let out = cmd_separate(&SeparateArgs {
                checkpoint,
                input,
                out_prefix,
                references,
                precision: precision.into(),
                encoding: match encoding {
                    Encoding::Float32 => WavEncoding::Float32,
                    Encoding::Pcm16 => WavEncoding::Pcm16,
                },
            })?;
            for p in out.outputs {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Cmd::Bench {
            sources,
            preset,
            seconds,
            repeats,
            warmup,
            no_timing,
            precision,
            format,
        } => {
            let text = cmd_bench(&BenchArgs {
                sources,
                presets: preset,
                seconds,
                repeats,
                warmup,
                timing: !no_timing,
                precision: precision.into(),
                format: match format {
                    Format::Markdown => ReportFormat::Markdown,
                    Format::Tsv => ReportFormat::Tsv,
                },
            })?;
            print!("{text}");
            Ok(true)
        }
        Cmd::Verify {
            suite,
            seed,
            inject_fault,
        } => {
            let fault: Fault = inject_fault.parse()?;
            cmd_verify(&suite, seed, fault, &mut std::io::stdout().lock())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let help = keys_help();
    let cmd = Cli::command()
        .after_help(help.clone())
        .mut_subcommand("train", |c| c.after_help(help.clone()))
        .mut_subcommand("bench", |c| c.after_help(help.clone()));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
