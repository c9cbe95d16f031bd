use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use manifold_mpc_core::config::RunConfig;
use manifold_mpc_core::experiments::{run_suite, write_run_csv, Suite};
use manifold_mpc_core::io::{write_json, DesignDocument};
use manifold_mpc_core::mpc::closed_loop;
use manifold_mpc_core::terminal::TerminalDesign;
use manifold_mpc_core::Error;

#[derive(Parser)]
#[command(name = "manifold-mpc", version, about = "Attitude MPC on SO(3): terminal design, closed-loop simulation, verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.directory`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the RNG seed (calibration seed for `design`, experiment seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the terminal cost, local law and terminal level; writes design.json.
    Design {
        #[command(flatten)]
        common: Common,
    },
    /// Run the closed loop from the configured initial state.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Design file produced by `design`.
        #[arg(long)]
        design: PathBuf,
    },
    /// Run a verification suite: conservation, local-law, lyapunov, discontinuity or all.
    Verify {
        suite: String,
        #[command(flatten)]
        common: Common,
        /// Design file; computed from the config when omitted.
        #[arg(long)]
        design: Option<PathBuf>,
    },
}

enum Failure {
    Verification,
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InfeasibleAt { .. }
        | Error::Infeasible { .. }
        | Error::RolloutFailure { .. }
        | Error::NotSolvableAt { .. } => 3,
        _ => 2,
    }
}

fn load_config(common: &Common, fallback: Option<&serde_json::Value>) -> Result<RunConfig, Error> {
    let config = match (&common.config, fallback) {
        (Some(path), _) => RunConfig::from_path(path)?,
        (None, Some(snapshot)) => RunConfig::from_json_str(&snapshot.to_string())?,
        (None, None) => RunConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn out_dir(common: &Common, config: &RunConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| config.output.directory.clone())
}

fn read_design(path: &Path) -> Result<(TerminalDesign, Option<serde_json::Value>), Error> {
    let doc = DesignDocument::read(path).map_err(|e| match e {
        Error::Io(io) => Error::InvalidParameter {
            name: "design".into(),
            reason: format!("cannot read {}: {io}", path.display()),
        },
        other => other,
    })?;
    Ok((doc.to_design()?, doc.config))
}

fn design(common: &Common) -> Result<(), Failure> {
    let mut config = load_config(common, None)?;
    if let Some(seed) = common.seed {
        config.calibration.seed = seed;
    }
    let design = config.design()?;
    let path = out_dir(common, &config).join("design.json");
    write_json(&path, &DesignDocument::from_design(&design, Some(config.to_json_value())))?;
    println!("DARE residual        {:.3e}", design.dare_residual);
    println!("spectral radius      {:.6}", design.spectral_radius);
    println!("terminal level c     {:.6}", design.c);
    if let Some(cert) = design.certification {
        let m = cert.margins;
        println!(
            "certification        {} samples (seed {}): decrease {:.3e}, invariance {:.3e}, input {}, failures {}",
            cert.n_samples,
            cert.seed,
            m.decrease,
            m.invariance,
            m.input.map_or("unbounded".to_string(), |v| format!("{v:.3e}")),
            m.failures
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn simulate(common: &Common, design_path: &Path) -> Result<(), Failure> {
    let (design, snapshot) = read_design(design_path)?;
    let mut config = load_config(common, snapshot.as_ref())?;
    if let Some(seed) = common.seed {
        config.experiment.seed = seed;
    }
    let h = design.h();
    let sys = config.attitude_system(design);
    let x0 = config.initial_state()?;
    let run = closed_loop(&sys, &x0, &config.mpc_config()?, &config.closed_loop_options())?;
    let dir = out_dir(common, &config);
    let csv = write_run_csv(&dir, "simulate", &run, h, config.output.csv_every_steps)?;
    let final_distance = run.states.last().map_or(0.0, |x| x.g.angle());
    let total_cost = run.records.iter().fold(0.0, |acc, r| acc + r.stage_cost);
    let summary = serde_json::json!({
        "steps": run.records.len(),
        "converged": run.converged(),
        "converged_at": run.converged_at,
        "final_distance": final_distance,
        "total_stage_cost": total_cost,
        "worst_decrease_margin": run.worst_decrease_margin(),
        "csv_paths": csv,
        "config": config.to_json_value(),
    });
    write_json(&dir.join("simulate.json"), &summary)?;
    println!(
        "steps={} converged={} converged_at={} final_distance={:.3e} total_stage_cost={:.6}",
        run.records.len(),
        run.converged(),
        run.converged_at.map_or("-".to_string(), |k| k.to_string()),
        final_distance,
        total_cost
    );
    Ok(())
}

fn verify(suite: &str, common: &Common, design_path: Option<&Path>) -> Result<(), Failure> {
    let suite: Suite = suite.parse()?;
    let loaded = design_path.map(read_design).transpose()?;
    let mut config = load_config(common, loaded.as_ref().and_then(|(_, s)| s.as_ref()))?;
    if let Some(seed) = common.seed {
        config.experiment.seed = seed;
    }
    let dir = out_dir(common, &config);
    std::fs::create_dir_all(&dir).map_err(Error::from)?;
    let reports = run_suite(suite, &config, loaded.as_ref().map(|(d, _)| d), Some(&dir))?;
    let passed = reports.iter().all(|r| r.passed);
    for r in &reports {
        print!("{r}");
    }
    let summary = serde_json::json!({ "passed": passed, "reports": reports });
    write_json(&dir.join("verify.json"), &summary)?;
    println!("{}", if passed { "PASS" } else { "FAIL" });
    if passed {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Design { common } => design(common),
        Command::Simulate { common, design } => simulate(common, design),
        Command::Verify { suite, common, design } => verify(suite, common, design.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
