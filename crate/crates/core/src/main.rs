use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gmm_guidance::harness::{self, presets, Command, Experiment, ExperimentConfig};
use gmm_guidance::Error;

const DEFAULT_VERIFY_SEED: u64 = 7;

#[derive(Parser)]
#[command(name = "gmm-guidance", version, about = "Guided diffusion sampling on Gaussian mixtures")]
struct Cli {
    /// Experiment manifest (TOML).
    #[arg(long, global = true, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in manifest, e.g. fig2a.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides `n_samples` of the manifest.
    #[arg(long, global = true, value_name = "N")]
    n_samples: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Coupled guided/unguided trajectories.
    Simulate,
    /// DDIM confidence and DDPM confidence quantiles per strength.
    ConfidenceSweep,
    /// Output entropy per strength.
    EntropySweep,
    /// Terminal samples and a KDE grid per strength.
    DensityGrid,
    /// Contraction/splitting scan on the aligned three-component model.
    PhaseScan,
    /// Runs the property suite and prints a JSON report.
    Verify {
        #[arg(long, hide = true)]
        mutate_classifier_sign: bool,
    },
    /// Lists the built-in manifests.
    Presets,
}

fn load(cli: &Cli) -> gmm_guidance::Result<Experiment> {
    let (mut cfg, base) = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => (presets::preset(name)?, None),
        (None, None) => return Err(Error::Config("pass --config PATH or --preset NAME".into())),
    };
    if let Some(n) = cli.n_samples {
        cfg.n_samples = n;
    }
    Experiment::new(cfg, base.as_deref(), cli.seed, cli.out.clone())
}

fn run(cli: &Cli) -> gmm_guidance::Result<bool> {
    let command = match &cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::ConfidenceSweep => Command::ConfidenceSweep,
        Cmd::EntropySweep => Command::EntropySweep,
        Cmd::DensityGrid => Command::DensityGrid,
        Cmd::PhaseScan => Command::PhaseScan,
        Cmd::Presets => {
            for (name, _) in presets::PRESETS {
                println!("{name}");
            }
            return Ok(true);
        }
        Cmd::Verify { mutate_classifier_sign } => {
            let seed = cli.seed.unwrap_or(DEFAULT_VERIFY_SEED);
            let report = if *mutate_classifier_sign {
                harness::run_verify(&harness::FlippedClassifierGradient, seed)
            } else {
                harness::run_verify(&harness::Reference, seed)
            };
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            if let Some(dir) = &cli.out {
                harness::output::write_text(&dir.join("verify.json"), &text)?;
            }
            print!("{text}");
            return Ok(report.passed);
        }
    };
    let exp = load(cli)?;
    for file in harness::run(command, &exp)? {
        eprintln!("wrote {}", file.display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
