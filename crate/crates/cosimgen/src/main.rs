use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cosimgen::commands::{self, Conditioning, DataSource};
use cosimgen::error::{usage, Result};

#[derive(Parser)]
#[command(name = "cosimgen", version, about = "Joint image and segmentation-mask diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root with images/, masks/ and palette.json.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use N procedural shape samples instead of a dataset directory.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, e.g. --set train.learning_rate=2e-4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

impl DataArgs {
    fn source(&self) -> Result<DataSource> {
        match (&self.data, self.synthetic) {
            (Some(d), None) => Ok(DataSource::Dir(d.clone())),
            (None, Some(count)) => Ok(DataSource::Synthetic { count, seed: self.seed.unwrap_or(0) }),
            _ => Err(usage("give --data DIR or --synthetic N")),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build palette.json from a class count and/or a names file.
    Palette {
        #[arg(long)]
        num_classes: Option<usize>,
        /// One class name per line, background first.
        #[arg(long)]
        names: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the diffusion model.
    Train(DataArgs),
    /// Train the super-resolution model.
    TrainSr {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated HR sizes, e.g. 256,512.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
    },
    /// Draw image-mask pairs from a class list or a text prompt.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: Option<String>,
        /// Comma-separated class names or ids.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        #[arg(short, long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write predicted x0 every K reverse steps (0 = off).
        #[arg(long, default_value_t = 0, value_name = "K")]
        snapshot_every: usize,
    },
    /// Upscale sampled or dataset pairs with a trained SR checkpoint.
    Superres {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of ×2 passes.
        #[arg(long, default_value_t = 1)]
        times: usize,
        /// Also decode upscaled masks to class maps.
        #[arg(long)]
        palette: Option<PathBuf>,
    },
    /// Compare generated pairs with real ones.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        palette: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Palette { num_classes, names, out } => {
            let p = commands::cmd_palette(num_classes, names.as_deref(), &out)?;
            Ok(format!("wrote {} ({} classes)", out.display(), p.num_classes()))
        }
        Command::Train(d) => {
            let args = commands::TrainArgs {
                data: d.source()?,
                config: d.config,
                overrides: d.overrides,
                out: d.out,
                seed: d.seed,
                steps: d.steps,
            };
            let records = commands::cmd_train(&args)?;
            let last = records.last().map_or_else(|| "no steps".into(), |r| format!("last l_total {:.6}", r.report.l_total));
            Ok(format!("trained {} steps into {} ({last})", records.len(), args.out.display()))
        }
        Command::TrainSr { data: d, scales } => {
            let args = commands::TrainSrArgs {
                data: d.source()?,
                config: d.config,
                overrides: d.overrides,
                out: d.out,
                seed: d.seed,
                steps: d.steps,
                scales,
            };
            let steps = commands::cmd_train_sr(&args)?;
            Ok(format!("trained super-resolution for {steps} steps into {}", args.out.display()))
        }
        Command::Sample { checkpoint, prompt, classes, n, seed, out, snapshot_every } => {
            let conditioning = Conditioning::from_flags(prompt, classes)?;
            let metas = commands::cmd_sample(&commands::SampleArgs { checkpoint, conditioning, n, seed, out: out.clone(), snapshot_every })?;
            Ok(format!("wrote {} samples to {}", metas.len(), out.display()))
        }
        Command::Superres { checkpoint, input, out, times, palette } => {
            let n = commands::cmd_superres(&commands::SuperresArgs { checkpoint, input, out: out.clone(), times, palette })?;
            Ok(format!("upscaled {n} pairs into {}", out.display()))
        }
        Command::Evaluate { real, generated, palette, out, seed } => {
            let r = commands::cmd_evaluate(&commands::EvaluateArgs { real, generated, palette, out: out.clone(), seed })?;
            Ok(format!("fid {:.4} kid {:.4}; report in {}", r.fid, r.kid, out.join("metrics.json").display()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", usage(first).to_json_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
