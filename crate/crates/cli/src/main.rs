//! `vicsek`: manifest-driven runs of the kinetic and particle models.
//!
//! Exit status: 0 all checks passed, 1 a check failed, 2 manifest error,
//! 3 resource guardrail, 4 numerical abort, 5 i/o error.

mod error;
mod experiments;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;
use manifest::{Experiment, Overrides, RunManifest};
use vicsek_kinetic::grid::{GridSpec, ModelParams};

#[derive(Parser)]
#[command(name = "vicsek", version, about = "Kinetic and particle Vicsek-type alignment models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ManifestArgs {
    manifest: PathBuf,
    /// Overrides the grid time step.
    #[arg(long)]
    dt: Option<f64>,
    /// Overrides the final time.
    #[arg(long = "T")]
    horizon: Option<f64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the experiment named in the manifest.
    Run(ManifestArgs),
    /// Checks the orientation-calculus identities.
    VerifyOps {
        #[arg(long, default_value_t = 64)]
        ntheta: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    ScalingStudy(ManifestArgs),
    ContinuityStudy(ManifestArgs),
    Particles(ManifestArgs),
    /// Compares kinetic and particle field dumps.
    Compare {
        kinetic_dir: PathBuf,
        particle_dir: PathBuf,
        /// Directory for `compare.dat`; defaults to the particle directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(args: &ManifestArgs, expected: Option<Experiment>) -> Result<RunManifest, CliError> {
    let mut m = RunManifest::load(&args.manifest)?;
    if let Some(e) = expected {
        if m.experiment != e {
            return Err(CliError::Schema(format!(
                "this subcommand needs experiment = {:?}, found {:?}",
                e, m.experiment
            )));
        }
    }
    m.apply(&Overrides {
        dt: args.dt,
        horizon: args.horizon,
        out: args.out.clone(),
    });
    Ok(m)
}

fn execute(m: &RunManifest) -> Result<bool, CliError> {
    let summary = experiments::run(m)?;
    for c in &summary.checks {
        println!(
            "{} {}: {:.6e} {} {:.6e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.relation,
            c.limit
        );
    }
    println!(
        "summary appended to {}",
        m.outputs.directory.join("summary.jsonl").display()
    );
    Ok(summary.pass)
}

fn verify_manifest(ntheta: usize, out: &Path) -> Result<RunManifest, CliError> {
    let grid = GridSpec::new(4, 1.0, ntheta, 0.1).map_err(|e| CliError::Schema(e.to_string()))?;
    let params = ModelParams::new(1.0, 1.0, 1.0).expect("unit parameters");
    let mut m = RunManifest {
        experiment: Experiment::VerifyOps,
        seed: 0,
        horizon: None,
        grid,
        kernel: None,
        params,
        initial_datum: None,
        outputs: Default::default(),
        limits: Default::default(),
        solver: Default::default(),
        force: None,
        nonlinear: None,
        particles: None,
        scaling: None,
        continuity: None,
    };
    m.outputs.directory = out.to_path_buf();
    Ok(m)
}

fn dispatch(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Run(a) => execute(&load(&a, None)?),
        Command::ScalingStudy(a) => execute(&load(&a, Some(Experiment::ScalingStudy))?),
        Command::ContinuityStudy(a) => execute(&load(&a, Some(Experiment::ContinuityStudy))?),
        Command::Particles(a) => execute(&load(&a, Some(Experiment::Particles))?),
        Command::VerifyOps { ntheta, out } => execute(&verify_manifest(ntheta, &out)?),
        Command::Compare {
            kinetic_dir,
            particle_dir,
            out,
        } => {
            let out = out.unwrap_or_else(|| particle_dir.clone());
            let rows = experiments::compare(&kinetic_dir, &particle_dir, &out)?;
            let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
            println!(
                "{} snapshots compared, max polarization gap {worst:.6e}; wrote {}",
                rows.len(),
                out.join("compare.dat").display()
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
