use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use wb2flow::config::RunConfig;
use wb2flow::diagnostics::{run_diagnostics, CheckName, DiagnosticsOptions, Status};
use wb2flow::io::{self, fmt_f64, write_atomic, MANIFEST_NAME};
use wb2flow::jko::run_scheme;
use wb2flow::oracle::oracle_solve;
use wb2flow::wb2::{couple, solve_entropic, solve_exact, LineMeasure, TransportModel, TransportProblem};
use wb2flow::Error;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Minimizing-movement runs, reservoir transport costs and their diagnostics.
#[derive(Parser)]
#[command(name = "wb2flow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the minimizing-movement scheme described by a config file.
    Run {
        config: PathBuf,
        /// Output directory, overriding the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transport cost between two density CSV files.
    Wb2 {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = Model::Atomic)]
        model: Model,
        /// Also report the entropic upper estimate at this regularization.
        #[arg(long)]
        entropic: Option<f64>,
        /// Write the optimal plan as CSV.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Run the finite-difference reference solver described by a config file.
    Oracle {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a written trajectory against the discrete energy estimates.
    Diagnose {
        manifest: PathBuf,
        /// Directory for the report files; defaults to the manifest's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated checks; all trajectory checks when omitted.
        #[arg(long, value_delimiter = ',')]
        checks: Vec<String>,
        #[arg(long)]
        c_disc: Option<f64>,
        /// Add the metric speed bound for vanishing boundary data.
        #[arg(long)]
        zero_boundary_speed: bool,
    },
    /// Print the version.
    Version,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Atomic,
    PiecewiseConstant,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Expr { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("WB2FLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = value.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| Error::Config {
        field: "WB2FLOW_THREADS".into(),
        message: format!("expected a positive integer, got {value:?}"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Run { config, out } => cmd_run(&config, out.as_deref()),
        Command::Wb2 { a, b, model, entropic, plan } => cmd_wb2(&a, &b, model, entropic, plan.as_deref()),
        Command::Oracle { config, out } => cmd_oracle(&config, out.as_deref()),
        Command::Diagnose { manifest, out, checks, c_disc, zero_boundary_speed } => {
            cmd_diagnose(&manifest, out.as_deref(), &checks, c_disc, zero_boundary_speed)
        }
        Command::Version => {
            println!("wb2flow {}", env!("CARGO_PKG_VERSION"));
            Ok(0)
        }
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: &Path, out: Option<&Path>) -> Result<(RunConfig, wb2flow::config::Problem, String, PathBuf), Error> {
    let (cfg, base) = RunConfig::load(path)?;
    let problem = cfg.build(&base)?;
    let hash = cfg.config_hash(&base)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir(&base));
    Ok((cfg, problem, hash, dir))
}

fn cmd_run(path: &Path, out: Option<&Path>) -> Result<u8, Error> {
    let (cfg, p, hash, dir) = load_config(path, out)?;
    let traj = run_scheme(&p.energy, &p.rho0, &cfg.jko)?;
    let dir = dir.join("jko");
    io::write_jko_run(&dir, &p.energy, &traj, &cfg.jko, &hash)?;
    let unconverged = traj.certificates.iter().filter(|c| !c.converged).count();
    println!("steps {}", traj.n_steps());
    println!("energy_initial {}", fmt_f64(traj.step_energies[0]));
    println!("energy_final {}", fmt_f64(*traj.step_energies.last().unwrap()));
    println!("unconverged_steps {unconverged}");
    println!("config_hash {hash}");
    println!("manifest {}", dir.join(MANIFEST_NAME).display());
    if let Some(options) = &cfg.diagnostics {
        let report = run_diagnostics(&p.energy, &traj, options)?;
        write_report(&dir, &report)?;
        println!("diagnostics {}", if report.all_pass { "pass" } else { "fail" });
    }
    Ok(0)
}

fn write_report(dir: &Path, report: &wb2flow::diagnostics::DiagnosticsReport) -> Result<(), Error> {
    write_atomic(&dir.join("diagnostics.json"), (report.to_json()? + "\n").as_bytes())?;
    write_atomic(&dir.join("diagnostics.csv"), report.to_csv()?.as_bytes())
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)))
}

fn cmd_wb2(a: &Path, b: &Path, model: Model, entropic: Option<f64>, plan_path: Option<&Path>) -> Result<u8, Error> {
    let mu = io::read_density_file(a, None)?;
    let nu = io::read_density_file(b, Some(mu.grid()))?;
    match model {
        Model::Atomic => {
            let problem = TransportProblem::from_measures(&mu, &nu)?;
            let sol = solve_exact(&problem)?;
            print_cost(sol.cost, sol.plan.mass_to_boundary(), sol.plan.mass_from_boundary());
            let (plo, phi) = range(&sol.duals.phi_source);
            let (qlo, qhi) = range(&sol.duals.psi_target);
            println!("dual_source_range {} {}", fmt_f64(plo), fmt_f64(phi));
            println!("dual_target_range {} {}", fmt_f64(qlo), fmt_f64(qhi));
            println!("plan_interior_entries {}", sol.plan.interior.len());
            if let Some(eps) = entropic {
                if !(eps > 0.0 && eps.is_finite()) {
                    return Err(Error::Config { field: "--entropic".into(), message: format!("must be positive, got {eps}") });
                }
                let est = solve_entropic(&problem, eps, 100_000, 1e-12)?;
                println!("entropic_upper {}", fmt_f64(est.cost));
                println!("entropic_iterations {}", est.iterations);
            }
            if let Some(p) = plan_path {
                let mut buf = Vec::new();
                sol.plan.write_csv(&mut buf)?;
                write_atomic(p, &buf)?;
            }
        }
        Model::PiecewiseConstant => {
            if entropic.is_some() || plan_path.is_some() {
                return Err(Error::Config {
                    field: "--model".into(),
                    message: "--entropic and --plan need the atomic model".into(),
                });
            }
            TransportModel::PiecewiseConstant.check_dim(mu.grid().dim())?;
            let c = couple(&LineMeasure::from_density(&mu)?, &LineMeasure::from_density(&nu)?)?;
            let (to, from) = c.reservoir_exchange();
            print_cost(c.cost, to, from);
        }
    }
    Ok(0)
}

fn print_cost(cost: f64, to: f64, from: f64) {
    println!("wb2_squared {}", fmt_f64(cost));
    println!("wb2 {}", fmt_f64(cost.max(0.0).sqrt()));
    println!("mass_to_boundary {}", fmt_f64(to));
    println!("mass_from_boundary {}", fmt_f64(from));
}

fn cmd_oracle(path: &Path, out: Option<&Path>) -> Result<u8, Error> {
    let (cfg, p, hash, dir) = load_config(path, out)?;
    let oc = cfg.oracle.as_ref().ok_or_else(|| Error::Config {
        field: "oracle".into(),
        message: "the oracle command needs an oracle section".into(),
    })?;
    let sol = oracle_solve(&p.energy, oc, &p.rho0)?;
    let dir = dir.join("oracle");
    io::write_oracle_run(&dir, &p.energy, &sol, oc, &hash)?;
    println!("outputs {}", sol.times.len());
    println!("time_steps {}", sol.steps);
    println!("clipped_mass {}", fmt_f64(sol.clipped_mass));
    println!("mass_balance_error {}", fmt_f64(sol.mass_balance_error));
    println!("config_hash {hash}");
    println!("manifest {}", dir.join(MANIFEST_NAME).display());
    Ok(0)
}

fn cmd_diagnose(
    path: &Path,
    out: Option<&Path>,
    checks: &[String],
    c_disc: Option<f64>,
    zero_boundary_speed: bool,
) -> Result<u8, Error> {
    let (manifest, dir) = io::read_manifest(path)?;
    let (energy, traj) = io::load_jko_run(&manifest, &dir)?;
    let mut options = DiagnosticsOptions { zero_boundary_speed, ..DiagnosticsOptions::default() };
    if let Some(c) = c_disc {
        options.c_disc = c;
    }
    options.checks = checks
        .iter()
        .map(|c| {
            serde_json::from_value::<CheckName>(serde_json::Value::String(c.trim().into())).map_err(|_| Error::Config {
                field: "--checks".into(),
                message: format!("unknown check {c:?}"),
            })
        })
        .collect::<Result<_, _>>()?;
    options.validate()?;
    let report = run_diagnostics(&energy, &traj, &options)?;
    write_report(out.unwrap_or(&dir), &report)?;
    for r in &report.records {
        let status = match r.status {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Skipped => "skip",
        };
        println!("{status:4} {:?} lhs={} rhs={} {}", r.name, fmt_f64(r.lhs), fmt_f64(r.rhs), r.detail);
    }
    println!("failed {} skipped {}", report.failed, report.skipped);
    Ok(if report.all_pass { 0 } else { EXIT_CHECK_FAILED })
}
