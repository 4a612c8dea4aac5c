use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serpent_cli::commands::{self, BenchOptions, EvalSplit};
use serpent_cli::{keys_help, CliError, RunConfig};

/// Serpent image restoration: train, evaluate, degrade, profile and benchmark.
///
/// Configuration comes from built-in defaults, then `--config`, then
/// `section.key=value` overrides after the subcommand.
/// Set SERPENT_LOG (error, warn, info, debug) to control verbosity.
#[derive(Parser, Debug)]
#[command(name = "serpent", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both `train.seed` and `degradation.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on `paths.data_dir`; writes metrics.jsonl, best.ckpt and last.ckpt to
    /// `paths.out_dir`. Resumes when `paths.checkpoint` is set.
    Train { overrides: Vec<String> },
    /// Evaluate `paths.checkpoint` (default `out_dir/best.ckpt`); writes eval_report.json.
    Eval {
        #[arg(long, value_enum, default_value = "all")]
        split: EvalSplit,
        /// Also write `input | output | target` strips to `out_dir/eval_images`.
        #[arg(long)]
        dump: bool,
        overrides: Vec<String>,
    },
    /// Parameter and FLOPs table for Serpent-B/L/H against an attention reference.
    Profile {
        /// Square input resolutions in pixels.
        #[arg(long, value_delimiter = ',', default_value = "64,256")]
        resolutions: Vec<usize>,
        overrides: Vec<String>,
    },
    /// Write degraded copies of `paths.data_dir` to `out_dir/degraded`.
    Degrade { overrides: Vec<String> },
    /// Operation counts and timings of the scan modes over sequence lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1,64,128,256,512,1024,2048")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 4)]
        state: usize,
        #[arg(long, default_value_t = 64)]
        chunk: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn load(cli: &Cli, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut all = overrides.to_vec();
    if let Some(seed) = cli.seed {
        all.push(format!("train.seed={seed}"));
        all.push(format!("degradation.seed={seed}"));
    }
    RunConfig::load(cli.config.as_deref(), &all)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train { overrides } => {
            let cfg = load(cli, overrides)?;
            let s = commands::train(&cfg)?;
            match s.best_psnr {
                Some(p) => println!("trained {} epochs; best validation PSNR {p:.3} dB", s.epochs_run),
                None => println!("nothing to do: checkpoint already at train.epochs"),
            }
            println!("log: {}\nbest checkpoint: {}", s.log.display(), s.best.display());
        }
        Command::Eval { split, dump, overrides } => {
            let cfg = load(cli, overrides)?;
            let (r, path) = commands::eval(&cfg, *split, *dump)?;
            println!(
                "{} images: PSNR {:.3} dB (input {:.3}), SSIM {:.4} (input {:.4}), {} ms",
                r.images.len(),
                r.mean_psnr,
                r.mean_input_psnr,
                r.mean_ssim,
                r.mean_input_ssim,
                r.wall_ms
            );
            println!("report: {}", path.display());
        }
        Command::Profile { resolutions, overrides } => {
            let cfg = load(cli, overrides)?;
            let rows = commands::profile(&cfg.model, resolutions)?;
            print!("{}", commands::profile_table(&rows));
        }
        Command::Degrade { overrides } => {
            let cfg = load(cli, overrides)?;
            let written = commands::degrade(&cfg)?;
            println!(
                "wrote {} images to {}",
                written.len(),
                cfg.paths.out_dir.join("degraded").display()
            );
        }
        Command::Bench {
            lengths,
            channels,
            state,
            chunk,
            repeats,
        } => {
            let opts = BenchOptions {
                lengths: lengths.clone(),
                channels: *channels,
                state_dim: *state,
                chunk: *chunk,
                repeats: *repeats,
                seed: cli.seed.unwrap_or(0),
            };
            print!("{}", commands::bench_table(&commands::bench(&opts)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SERPENT_LOG", "info"))
        .format_timestamp(None)
        .init();
    let matches = Cli::command()
        .after_long_help(keys_help())
        .after_help(keys_help())
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
