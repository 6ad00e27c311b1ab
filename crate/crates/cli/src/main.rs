use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kinspray::driver::DriverFile;
use kinspray::harness::{
    compare_laws, driver_info, run_ensemble, write_coefficients, write_path_csv, write_records_csv, EnsembleOptions,
    EnsembleSummary, Model, RunConfig, Tolerances, CONFIG_HELP,
};
use kinspray::kinetic::simulate_kinetic;
use kinspray::rng::{substream, LANE_DRIVER, LANE_NOISE};
use kinspray::spde::simulate_spde;
use kinspray::verify::{Battery, Scale};
use kinspray::auxiliary::PathPoint;
use kinspray::Error;

const USAGE: u8 = 2;
const FAIL: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "kinspray", version, about = "Kinetic spray ensembles against their diffusion-limit SPDE", after_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a driver (or run config) file and print ν, γ and the Poisson-solution check.
    DriverInfo(ConfigArg),
    /// Emit the drift, covariance kernel and noise basis as CSV plus a JSON summary.
    Coeffs(CoeffsArgs),
    /// One kinetic or SPDE run, recorded at the configured output times.
    Simulate(SimulateArgs),
    /// Monte Carlo ensemble of observables at the horizon.
    Ensemble(EnsembleArgs),
    /// Run the acceptance battery on the telegraph preset.
    Verify(VerifyArgs),
    /// Compare stored kinetic summaries against a stored SPDE summary.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Run configuration (TOML); see the key reference below.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct CoeffsArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_model)]
    model: Model,
    /// Kinetic ε; defaults to the smallest configured value.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_model)]
    model: Model,
    #[arg(long, default_value_t = 512)]
    runs: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Reduced ensembles.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 20240601)]
    seed: u64,
    /// Override the ensemble size of the shared runs.
    #[arg(long)]
    runs: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Summary JSON holding the kinetic entries.
    #[arg(long)]
    kinetic: PathBuf,
    /// Summary JSON holding the reference (spde) entry.
    #[arg(long)]
    spde: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    z_max: f64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

fn parse_model(s: &str) -> Result<Model, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Invalid(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn out_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(path)?)
}

fn cmd_driver_info(args: &ConfigArg) -> Result<bool, Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", args.config.display())))?;
    let (file, n) = match RunConfig::parse(&text) {
        Ok(cfg) => (cfg.driver, cfg.grid.nx),
        Err(run_err) => match DriverFile::parse(&text) {
            Ok(f) => (f, 64),
            Err(_) => return Err(run_err.into()),
        },
    };
    let info = driver_info(&file, n)?;
    let nu: Vec<String> = info.stationary.iter().map(|v| format!("{v:.6}")).collect();
    println!("states          {}", info.states);
    println!("nu              ({})", nu.join(", "));
    println!("gamma           {:.6}", info.spectral_gap);
    println!("C*              {:.6}", info.c_star);
    println!("centered        {}", info.centered);
    println!("reversible      {}", info.reversible);
    let verdict = if info.pass() { "PASS" } else { "FAIL" };
    match info.telegraph_closed_form_error {
        Some(e) => println!("M^-1 I residual {:.2e}; Psi = -n/(2p) error {e:.2e} {verdict}", info.poisson_residual),
        None => println!("M^-1 I residual {:.2e} {verdict}", info.poisson_residual),
    }
    Ok(info.pass())
}

fn cmd_coeffs(args: &CoeffsArgs) -> Result<bool, Failure> {
    let cfg = load_config(&args.config)?;
    out_dir(&args.out_dir)?;
    let co = cfg.coefficients()?;
    let rep = write_coefficients(&args.out_dir, &co)?;
    println!(
        "nx {} gamma {:.6} modes {} retained {:.12} -> {}",
        rep.nx,
        rep.spectral_gap,
        rep.basis_eigenvalues.len(),
        rep.retained_fraction,
        args.out_dir.display()
    );
    Ok(true)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<bool, Failure> {
    let cfg = load_config(&args.config)?;
    out_dir(&args.out_dir)?;
    let (points, diagnostics): (Vec<PathPoint>, String) = match args.model {
        Model::Kinetic => {
            let eps = args.epsilon.unwrap_or_else(|| cfg.kinetic.epsilons.iter().copied().fold(f64::INFINITY, f64::min));
            let kc = cfg.kinetic_config(eps);
            kc.validate()?;
            let run = simulate_kinetic(&kc, &cfg.build_driver()?, &mut substream(args.seed, 0, LANE_DRIVER))?;
            let diag = serde_json::to_string_pretty(&run.diagnostics).map_err(|e| Failure::Runtime(e.to_string()))?;
            (run.snapshots.into_iter().map(|s| PathPoint { t: s.t, rho: s.rho, u: s.u }).collect(), diag)
        }
        Model::Spde => {
            let co = cfg.coefficients()?;
            let run = simulate_spde(&cfg.spde_config(), &co, &mut substream(args.seed, 0, LANE_NOISE))?;
            let diag = serde_json::to_string_pretty(&run.diagnostics).map_err(|e| Failure::Runtime(e.to_string()))?;
            (run.snapshots.into_iter().map(|s| PathPoint { t: s.t, rho: s.rho, u: s.u }).collect(), diag)
        }
    };
    write_path_csv(&args.out_dir.join("path.csv"), &points)?;
    std::fs::write(args.out_dir.join("diagnostics.json"), diagnostics)?;
    println!("{} run: {} recorded states -> {}", args.model, points.len(), args.out_dir.display());
    Ok(true)
}

fn cmd_ensemble(args: &EnsembleArgs) -> Result<bool, Failure> {
    let cfg = load_config(&args.config)?;
    out_dir(&args.out_dir)?;
    let res = run_ensemble(&cfg, args.model, args.runs, args.seed, &EnsembleOptions::default())?;
    write_records_csv(&args.out_dir.join(format!("runs_{}.csv", args.model)), &cfg.observable_ids(), &res.records)?;
    std::fs::write(args.out_dir.join(format!("summary_{}.json", args.model)), res.summary.to_json())?;
    for e in &res.summary.entries {
        let eps = e.epsilon.map_or("limit".to_string(), |v| format!("eps {v}"));
        for (id, s) in res.summary.observables.iter().zip(&e.stats) {
            println!("{} {eps} {id}: mean {:.6e} +/- {:.2e}, var {:.6e} +/- {:.2e}", e.model, s.mean, s.std_error, s.variance, s.variance_std_error);
        }
    }
    Ok(true)
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool, Failure> {
    out_dir(&args.out_dir)?;
    let mut scale = if args.quick { Scale::quick() } else { Scale::full() };
    if let Some(r) = args.runs {
        if r < 2 {
            return Err(Failure::Usage("--runs must be at least 2".into()));
        }
        scale.runs = r;
    }
    let battery = Battery::new(scale, args.seed, EnsembleOptions::default());
    let outcomes = battery.run_all(|o| println!("{o}"));
    let json = serde_json::to_string_pretty(&outcomes).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(args.out_dir.join("verify.json"), json)?;
    Ok(outcomes.iter().all(|o| o.pass))
}

fn cmd_compare(args: &CompareArgs) -> Result<bool, Failure> {
    let load = |p: &Path| EnsembleSummary::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())));
    let (kin, spde) = (load(&args.kinetic)?, load(&args.spde)?);
    out_dir(&args.out_dir)?;
    let report = compare_laws(&kin, &spde, &Tolerances { z_max: args.z_max })?;
    std::fs::write(args.out_dir.join("comparison.json"), report.to_json())?;
    for c in &report.comparisons {
        let z: Vec<String> = c.discrepancies.iter().map(|d| format!("{:.2}", d.z)).collect();
        println!("{} {:?}: z [{}] {}", c.observable, c.statistic, z.join(", "), if c.pass { "PASS" } else { "FAIL" });
    }
    println!("{}", if report.pass { "PASS" } else { "FAIL" });
    Ok(report.pass)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            if code == USAGE {
                eprintln!("\n{CONFIG_HELP}");
            }
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::DriverInfo(a) => cmd_driver_info(a),
        Command::Coeffs(a) => cmd_coeffs(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(FAIL),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{CONFIG_HELP}");
            ExitCode::from(USAGE)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(FAIL)
        }
    }
}
