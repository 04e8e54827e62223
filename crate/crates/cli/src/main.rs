use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qbm_cli::commands::{self, QqStep, SynthKind};
use qbm_cli::config::{Bypass, ConfigError, RunConfig};
use qbm_core::DenoiserSpec;

#[derive(Parser)]
#[command(name = "qbm", version, about = "Zero-shot diffusion image restoration")]
struct Cli {
    /// Worker threads for batch commands (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an example configuration.
    Init { path: PathBuf },
    /// Find the bypass start step on a calibration set.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Override the calibration noise seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore every configured input.
    Restore(RestoreArgs),
    /// PSNR and SSIM of restored images against references.
    Evaluate(EvaluateArgs),
    /// Normal Q-Q data as CSV.
    Qq(QqArgs),
    /// Generate synthetic clean images, measurements and a manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, value_enum, default_value_t = SynthKind::Mixture)]
        kind: SynthKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Clean image format.
        #[arg(long, default_value = "ntf", value_parser = ["ntf", "png"])]
        format: String,
    },
}

#[derive(Args)]
struct RestoreArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// auto, off or a start step.
    #[arg(long)]
    bypass: Option<Bypass>,
    #[arg(long)]
    seed: Option<u64>,
    /// zero, oracle or external:<addr>.
    #[arg(long)]
    denoiser: Option<DenoiserSpec>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Measurements to restore instead of the config's `inputs`.
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run manifest written by `restore`; supplies the restored images,
    /// method label and step count.
    #[arg(long, conflicts_with = "restored")]
    run: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    restored: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    reference: Vec<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Write the metrics as JSON here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct QqArgs {
    /// Tensor file whose values are tested directly.
    #[arg(long, conflicts_with = "config")]
    tensor: Option<PathBuf>,
    #[arg(long, requires = "sample")]
    config: Option<PathBuf>,
    /// Calibration sample index.
    #[arg(long)]
    sample: Option<usize>,
    /// Step for the residual: a number or `star` for the calibrated step.
    #[arg(long, default_value = "star")]
    step: QqStep,
    /// CSV path (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

fn restore(args: RestoreArgs, jobs: Option<usize>) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(eta) = args.eta {
        cfg.eta = eta;
    }
    if let Some(steps) = args.steps {
        cfg.num_steps = steps;
    }
    if let Some(bypass) = args.bypass {
        cfg.bypass = bypass;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(denoiser) = args.denoiser {
        cfg.denoiser = denoiser;
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if !args.inputs.is_empty() {
        cfg.inputs = args.inputs;
    }
    cfg.validate()?;
    let manifest = commands::restore_images(&cfg, jobs)?;
    println!(
        "run manifest: {}",
        commands::run_manifest_path(&manifest.config).display()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (restored, method, steps) = match &args.run {
        Some(path) => {
            let run = commands::load_run_manifest(path)?;
            let steps = run.images.first().map(|i| i.denoiser_calls);
            let restored = run.images.iter().map(|i| i.output.clone()).collect();
            (restored, run.method(), steps)
        }
        None => (args.restored, "restored".to_string(), None),
    };
    let evaluation = commands::evaluate(
        &restored,
        &args.reference,
        args.method.as_deref().unwrap_or(&method),
        args.steps.or(steps),
    )?;
    print!("{}", evaluation.table());
    if let Some(path) = args.output {
        commands::write_evaluation(&path, &evaluation)?;
    }
    Ok(())
}

fn qq(args: QqArgs) -> Result<()> {
    let data = match (&args.tensor, &args.config) {
        (Some(path), _) => commands::qq_of_file(path)?,
        (None, Some(config)) => {
            let cfg = RunConfig::load(config)?;
            let sample = args.sample.expect("clap requires --sample");
            let (t, data) = commands::qq_of_residual(&cfg, sample, args.step)?;
            eprintln!("sample {sample} residual at t={t}");
            data
        }
        (None, None) => bail!(ConfigError("qq needs --tensor or --config".into())),
    };
    eprintln!(
        "max deviation from the diagonal: {:.4}",
        data.max_deviation()
    );
    match args.output {
        Some(path) => std::fs::write(&path, data.to_csv())
            .with_context(|| format!("cannot write {}", path.display()))?,
        None => print!("{}", data.to_csv()),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { path } => {
            let text = serde_json::to_string_pretty(&RunConfig::example())?;
            std::fs::write(&path, text + "\n")
                .with_context(|| format!("cannot write {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        Command::Calibrate { config, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let (Some(seed), Some(cal)) = (seed, cfg.calibration.as_mut()) {
                cal.seed = seed;
            }
            commands::calibrate(&cfg, cli.jobs)?;
            println!("report: {}", cfg.calibration()?.report.display());
        }
        Command::Restore(args) => restore(args, cli.jobs)?,
        Command::Evaluate(args) => evaluate(args)?,
        Command::Qq(args) => qq(args)?,
        Command::Synth {
            config,
            out,
            count,
            kind,
            seed,
            format,
        } => {
            let cfg = RunConfig::load(&config)?;
            let manifest = commands::synthesize(&cfg, kind, count, seed, &out, &format)?;
            println!(
                "wrote {} pairs and {}",
                manifest.pairs.len(),
                out.join("manifest.json").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(qbm_cli::exit_code(&err))
        }
    }
}
