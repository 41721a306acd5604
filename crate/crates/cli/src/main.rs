use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use l1crtbp::pipeline::{self, TrajectoryFile};
use l1crtbp::scenario::load_scenario;
use l1crtbp::sufficiency::{Classification, ConditionOpts};

/// Fuel-optimal low-thrust CRTBP transfers: indirect shooting with homotopy
/// continuation and second-order optimality certification.
#[derive(Parser)]
#[command(name = "l1crtbp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a scenario end to end and write trajectory, delta-trace, and
    /// report artifacts.
    Solve(SolveArgs),
    /// Re-run second-order certification on a stored extremal.
    Certify(CertifyArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Scenario file (.toml or .json).
    scenario: PathBuf,
    /// Output directory (default: the scenario's [output] dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Compute the J(xi) diagnostic curve even if the scenario disables it.
    #[arg(long)]
    jcurve: bool,
    /// Override the homotopy grid, e.g. --lambda-grid 0,0.5,1.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Override the Newton residual tolerance.
    #[arg(long)]
    tol_newton: Option<f64>,
    /// Override the integrator absolute/relative tolerance.
    #[arg(long)]
    tol_integ: Option<f64>,
    /// Override the switch localization tolerance on |H1|.
    #[arg(long)]
    tol_switch: Option<f64>,
    /// Override the switch regularity tolerance on |H01|.
    #[arg(long)]
    tol_regularity: Option<f64>,
}

#[derive(Args)]
struct CertifyArgs {
    /// Stored extremal (extremal.json from a solve run).
    trajectory: PathBuf,
    /// Output directory for the certification report.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve(args) => solve(args),
        Command::Certify(args) => certify(args),
    }
}

fn solve(args: SolveArgs) -> ExitCode {
    let mut scenario = match load_scenario(&args.scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if args.jcurve {
        scenario.jcurve.enabled = true;
    }
    if let Some(grid) = args.lambda_grid {
        scenario.problem.lambda_grid = Some(grid);
        scenario.problem.lambda_grid_step = None;
    }
    if let Some(tol) = args.tol_newton {
        scenario.tolerances.newton = Some(tol);
    }
    if let Some(tol) = args.tol_integ {
        scenario.tolerances.integ_abs = Some(tol);
        scenario.tolerances.integ_rel = Some(tol);
    }
    if let Some(tol) = args.tol_switch {
        scenario.tolerances.switch = Some(tol);
    }
    if let Some(tol) = args.tol_regularity {
        scenario.tolerances.regularity = Some(tol);
    }
    let outdir = args
        .out
        .unwrap_or_else(|| PathBuf::from(&scenario.output.dir));

    match pipeline::run_and_write(&scenario, &outdir) {
        Ok(artifacts) => {
            let r = &artifacts.report;
            println!(
                "converged: {} burn arcs, {} switching points, residual {:.3e}",
                r.switch_structure.burn_arcs,
                r.switch_structure.switch_count,
                r.residual_inf
            );
            println!("rho integral: {:.9}", r.rho_integral);
            println!("classification: {:?}", r.sufficiency.classification);
            println!("artifacts written to {}", outdir.display());
            ExitCode::from(pipeline::exit_code_for(r) as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn certify(args: CertifyArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&args.trajectory) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let file = match TrajectoryFile::from_json_str(&text) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match pipeline::certify_stored(&file, &ConditionOpts::default()) {
        Ok((report, trace, _traj)) => {
            if let Err(e) = std::fs::create_dir_all(&args.out) {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Err(e) = std::fs::write(args.out.join("certification.json"), json) {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            if let Err(e) =
                pipeline::write_delta_csv(&trace, &args.out.join("delta_trace.csv"))
            {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            println!("classification: {:?}", report.classification);
            if report.classification == Classification::StrictStrongLocalOptimum {
                ExitCode::from(0)
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
