use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use statrefine::config::{Preset, RunConfig};
use statrefine::oracles::{run_oracle_suite, WorldFixture};
use statrefine::pipeline::{self, Run};
use statrefine::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Refine a base denoiser with an auxiliary-signal consistency criterion.
///
/// Settings come from the preset, then `--config`, then each `--set`, in
/// that order. Exit status: 0 on success, 2 for configuration errors
/// (including missing inputs), 1 for failures while running.
#[derive(Parser)]
#[command(name = "statrefine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random stream of the command.
    #[arg(long)]
    seed: u64,
    /// TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Starting preset: desk-gaussian or desk-saltpepper. Defaults to the
    /// one matching the configured noise.
    #[arg(long)]
    preset: Option<String>,
    /// Override as section.key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run directory; shorthand for --set paths.out=DIR.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic clean train and test images.
    GenData(Common),
    /// Corrupt the clean images with the configured noise.
    AddNoise(Common),
    /// Train the conditional-moment estimator on noisy training images.
    TrainEstimator(Common),
    /// Train the refiner against the base denoiser and the estimator.
    TrainRefiner(Common),
    /// Denoise the held-out noisy images with the trained refiner.
    Denoise {
        #[command(flatten)]
        common: Common,
        /// Run the base denoiser instead of the refiner.
        #[arg(long)]
        base: bool,
    },
    /// Fit consistency nets and report residual energies for the base
    /// denoiser and the refiner.
    Audit(Common),
    /// PSNR and SSIM against clean images.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Clean reference manifest; with --denoised, compares two arbitrary
        /// manifests instead of the run's outputs.
        #[arg(long, requires = "denoised")]
        clean: Option<PathBuf>,
        #[arg(long, requires = "clean")]
        denoised: Option<PathBuf>,
    },
    /// Exact enumeration and closed-form checks.
    VerifyOracles {
        #[command(flatten)]
        common: Common,
        /// Number of random consistent worlds.
        #[arg(long, default_value_t = 100)]
        worlds: usize,
        /// World fixture files (TOML).
        #[arg(long = "fixture")]
        fixtures: Vec<PathBuf>,
    },
    /// Every stage from data generation to the audit.
    Pipeline(Common),
    /// Print the merged config and its hash.
    ShowConfig(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::AddNoise(c)
            | Command::TrainEstimator(c)
            | Command::TrainRefiner(c)
            | Command::Audit(c)
            | Command::Pipeline(c)
            | Command::ShowConfig(c) => c,
            Command::Denoise { common, .. }
            | Command::Eval { common, .. }
            | Command::VerifyOracles { common, .. } => common,
        }
    }
}

fn load_config(c: &Common) -> statrefine::Result<RunConfig> {
    let preset = c.preset.as_deref().map(Preset::parse).transpose()?;
    let mut sets = c.sets.clone();
    sets.push(format!("seed={}", c.seed));
    if let Some(out) = &c.out {
        sets.push(format!("paths.out={:?}", out.display().to_string()));
    }
    RunConfig::load(c.config.as_deref(), &sets, preset)
}

fn save_config(run: &Run) -> statrefine::Result<()> {
    std::fs::create_dir_all(&run.dir)?;
    std::fs::write(run.path("config.toml"), run.cfg.to_toml_string())?;
    Ok(())
}

fn execute(cmd: &Command) -> statrefine::Result<()> {
    let cfg = load_config(cmd.common())?;
    let run = Run::new(cfg);
    if !matches!(cmd, Command::ShowConfig(_) | Command::VerifyOracles { .. }) {
        save_config(&run)?;
    }
    match cmd {
        Command::GenData(_) => pipeline::gen_data(&run)?,
        Command::AddNoise(_) => pipeline::add_noise(&run)?,
        Command::TrainEstimator(_) => {
            let est = pipeline::train_estimator_stage(&run)?;
            println!("t = {:?}", est.t);
            println!("held-out mean squares = {:?}", est.mean_squares);
        }
        Command::TrainRefiner(_) => {
            pipeline::train_refiner_stage(&run)?;
            println!("refiner saved to {}", run.refiner_dir().display());
        }
        Command::Denoise { base: true, .. } => pipeline::base_denoise(&run)?,
        Command::Denoise { base: false, .. } => pipeline::denoise(&run)?,
        Command::Audit(_) => {
            let a = pipeline::audit(&run)?;
            print!("{}{}", a.base.to_text(), a.refined.to_text());
            let c = &a.comparison;
            println!(
                "refined lower on {}/{} images, energy ratio refined/base {:.4}",
                c.b_wins,
                c.a_wins + c.b_wins + c.ties,
                c.ratio
            );
        }
        Command::Eval {
            clean: Some(clean),
            denoised: Some(den),
            ..
        } => print!("{}", pipeline::eval_manifests(clean, den)?.table()),
        Command::Eval { .. } => print!("{}", pipeline::eval(&run)?.table()),
        Command::VerifyOracles {
            worlds, fixtures, ..
        } => {
            let fx = fixtures
                .iter()
                .map(|p| WorldFixture::load(p))
                .collect::<statrefine::Result<Vec<_>>>()?;
            let report = run_oracle_suite(*worlds, run.cfg.seed, &fx)?;
            print!("{}", report.text());
            if !report.pass() {
                return Err(Error::CheckFailed("oracle suite".into()));
            }
        }
        Command::Pipeline(_) => print!("{}", pipeline::pipeline(&run)?.text()),
        Command::ShowConfig(_) => {
            print!("{}", run.cfg.to_toml_string());
            println!("# hash {}", run.hash);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::MissingFile(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
