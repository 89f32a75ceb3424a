use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use crossdiff::commands::{run_command, Command, Settings};
use crossdiff::dataset::Split;
use crossdiff::sampling::SamplingMode;
use crossdiff::training::Stage;

/// Text-to-motion diffusion over paired 3D and 2D motion.
#[derive(Parser, Debug)]
#[command(name = "crossdiff", version)]
struct Cli {
    /// Seed applied to every seeded stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Settings file (TOML).
    #[arg(long, global = true, env = "CROSSDIFF_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Build a feature dataset from a HumanML3D-format directory or the synthetic generator.
    PrepareData {
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Train one stage, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Cap on optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate motions for text prompts.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "text")]
        texts: Vec<String>,
        /// One prompt per line.
        #[arg(long)]
        text_file: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, value_enum, default_value_t = Mode::Standard)]
        mode: Mode,
        #[arg(long)]
        alpha: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        frames: Option<usize>,
        /// Also write rendered frames per sample.
        #[arg(long)]
        render: bool,
    },
    /// Lift 2D keypoint sequences to 3D pseudo-labels.
    Lift {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        keypoints: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
    },
    /// Run the generation evaluation protocol.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Trained evaluator set; trained on the dataset when absent.
        #[arg(long)]
        evaluator: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Draw a features file as stick-figure frames.
    Render {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        skeleton: Option<PathBuf>,
        /// Encode frames to mp4 with ffmpeg.
        #[arg(long)]
        video: bool,
    },
    /// Evaluate mixture sampling over a list of switch steps.
    SweepAlpha {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        evaluator: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<usize>>,
        #[arg(long)]
        runs: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Standard,
    Mixture,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| format!("unknown stage `{s}` (expected I, II or finetune2d)"))
}

fn into_command(cmd: Cmd) -> Result<Command, String> {
    Ok(match cmd {
        Cmd::PrepareData { source } => Command::PrepareData { source },
        Cmd::Train {
            data,
            stage,
            resume,
            steps,
        } => Command::Train {
            data,
            stage,
            resume,
            steps,
        },
        Cmd::Sample {
            checkpoint,
            mut texts,
            text_file,
            count,
            mode,
            alpha,
            scale,
            frames,
            render,
        } => {
            if let Some(p) = text_file {
                let body = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
                texts.extend(body.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
            }
            Command::Sample {
                checkpoint,
                texts,
                count,
                mode: match mode {
                    Mode::Standard => SamplingMode::Standard,
                    Mode::Mixture => SamplingMode::Mixture,
                },
                alpha,
                scale,
                frames,
                render,
            }
        }
        Cmd::Lift {
            checkpoint,
            keypoints,
            mapping,
        } => Command::Lift {
            checkpoint,
            keypoints,
            mapping,
        },
        Cmd::Evaluate {
            checkpoint,
            data,
            evaluator,
            split,
            runs,
        } => Command::Evaluate {
            checkpoint,
            data,
            evaluator,
            split: split.map(|s| match s {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
                SplitArg::All => Split::All,
            }),
            runs,
        },
        Cmd::Render {
            features,
            skeleton,
            video,
        } => Command::Render {
            features,
            skeleton,
            video,
        },
        Cmd::SweepAlpha {
            checkpoint,
            data,
            evaluator,
            alphas,
            runs,
        } => Command::SweepAlpha {
            checkpoint,
            data,
            evaluator,
            alphas,
            runs,
        },
    })
}

fn fail(command: &str, kind: &str, message: &str) -> ExitCode {
    let record = serde_json::json!({ "status": "error", "command": command, "kind": kind, "message": message });
    eprintln!("{record}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    if std::env::var_os("RAYON_NUM_THREADS").is_none() {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = match into_command(cli.command) {
        Ok(c) => c,
        Err(e) => return fail("cli", "input", &e),
    };
    let name = command.name();
    let settings = match cli.config.as_deref().map(Settings::load).transpose() {
        Ok(s) => s.unwrap_or_default(),
        Err(e) => return fail(name, "config", &e.to_string()),
    };
    match run_command(&command, &settings, cli.seed, &cli.out) {
        Ok(outcome) => {
            let record = serde_json::json!({
                "status": "ok",
                "command": name,
                "out": cli.out,
                "summary": outcome.summary,
            });
            println!("{record}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(name, e.kind(), &e.to_string()),
    }
}
