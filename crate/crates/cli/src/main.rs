//! `acsma`: solve, integrate, simulate, compare and check capacity for
//! adaptive-CSMA scenarios. Every command writes plain CSV/text files into
//! the output directory and prints a short report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use acsma::compare::{compare, equilibrium_config, CompareOptions, LCSMA_RHO};
use acsma::csma::stationary_distribution;
use acsma::dynamics::{integrate_system, IntegrationConfig, IntegrationMode, Method};
use acsma::mac::{simulate_acsma_aqm, simulate_csma, AqmConfig};
use acsma::optimizer::{capacity_membership, solve_ep, solve_mp, SolverOptions, UtilityFunction};
use acsma::scenario::ScenarioError;
use acsma::{builtin_topology, enumerate_independent_sets, LinkRateVector, Scenario, TaVector, Topology};

#[derive(Debug, Parser)]
#[command(name = "acsma", version, about = "Rate control over adaptive-CSMA wireless networks")]
struct Cli {
    /// Directory receiving all output files.
    #[arg(long, global = true, env = "ACSMA_OUT", default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the entropy-regularized utility maximization.
    Solve(SolveArgs),
    /// Integrate a fluid model and write its trajectory.
    Integrate(IntegrateArgs),
    /// Run the discrete-event MAC simulation.
    Simulate(SimulateArgs),
    /// Compare legacy CSMA and the proposed scheme against the optimum.
    Compare(CompareArgs),
    /// Decide whether link rates lie in the capacity region.
    Capacity(CapacityArgs),
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Built-in topology: a, b, c, d or e.
    #[arg(long, value_parser = parse_topology, required_unless_present = "scenario", conflicts_with = "scenario")]
    topology: Option<Topology>,
    /// Scenario file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Entropy weight / backoff sharpness.
    #[arg(long)]
    beta: Option<f64>,
    /// TA step size.
    #[arg(long)]
    alpha: Option<f64>,
    /// Connections opened per second of RTT.
    #[arg(long)]
    k: Option<f64>,
    /// Cap on transmission aggressiveness.
    #[arg(long)]
    rmax: Option<f64>,
    /// Integration step.
    #[arg(long)]
    dt: Option<f64>,
    /// Integration or simulation horizon.
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum UtilityChoice {
    /// U(x) = -1/x.
    Inverse,
    /// U(x) = -2k²/x, tracked by the proposed system.
    Proposed,
    /// U(x) = ln x.
    Log,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, value_enum, default_value = "inverse")]
    utility: UtilityChoice,
    /// KKT residual tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

#[derive(Debug, Args)]
struct IntegrateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// proposed, proposed_wired, appendixB or reno_over_lcsma.
    #[arg(long, default_value = "proposed")]
    mode: IntegrationMode,
    /// euler, rk4 or semi_implicit.
    #[arg(long)]
    method: Option<Method>,
    /// Rows kept in the trajectory file (approximately).
    #[arg(long, default_value_t = 1000)]
    samples: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SimMode {
    /// Plain CSMA with fixed aggressiveness.
    Csma,
    /// Adaptive CSMA with queue-based AQM and Poisson arrivals.
    Aqm,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, value_enum, default_value = "csma")]
    mode: SimMode,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Independent runs with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    replications: u64,
    /// Per-link aggressiveness for csma mode; defaults to ln(rho)/beta.
    #[arg(long, value_delimiter = ',')]
    r: Option<Vec<f64>>,
    /// Per-link packet arrival rates for aqm mode.
    #[arg(long, value_delimiter = ',')]
    arrivals: Option<Vec<f64>>,
    /// Time between TA updates in aqm mode.
    #[arg(long, default_value_t = 1.0)]
    update_interval: f64,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Legacy backoff ratio; defaults to the scenario's rho.
    #[arg(long)]
    rho: Option<f64>,
}

#[derive(Debug, Args)]
struct CapacityArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Per-link rates to test.
    #[arg(long, value_delimiter = ',', required = true)]
    y: Vec<f64>,
}

/// Bad user input; maps to exit code 2.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_error(message: impl Into<String>) -> anyhow::Error {
    InputError(message.into()).into()
}

fn parse_topology(s: &str) -> Result<Topology, String> {
    s.parse::<Topology>().map_err(|e| e.to_string())
}

fn positive(name: &str, value: f64) -> Result<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(input_error(format!("--{name} must be finite and positive, got {value}")))
    }
}

impl ScenarioArgs {
    fn load(&self) -> Result<Scenario> {
        let mut scenario = match (&self.topology, &self.scenario) {
            (Some(t), _) => builtin_topology(*t),
            (None, Some(path)) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Scenario::parse(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            (None, None) => bail!(input_error("one of --topology or --scenario is required")),
        };
        let p = &mut scenario.params;
        for (name, value, slot) in [
            ("beta", self.beta, &mut p.beta),
            ("alpha", self.alpha, &mut p.alpha),
            ("k", self.k, &mut p.k),
            ("rmax", self.rmax, &mut p.r_max),
            ("dt", self.dt, &mut p.dt),
            ("horizon", self.horizon, &mut p.horizon),
        ] {
            if let Some(v) = value {
                *slot = positive(name, v)?;
            }
        }
        scenario.validate()?;
        Ok(scenario)
    }
}

fn write(out: &Path, name: &str, contents: &str) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn expect_len(name: &str, values: &[f64], links: usize) -> Result<()> {
    if values.len() != links {
        bail!(input_error(format!("--{name} needs {links} values, got {}", values.len())));
    }
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        bail!(input_error(format!("--{name} values must be finite and nonnegative")));
    }
    Ok(())
}

fn cmd_solve(args: &SolveArgs, out: &Path) -> Result<String> {
    let scenario = args.scenario.load()?;
    let tol = positive("tol", args.tol)?;
    write(out, "scenario.txt", &scenario.to_text())?;
    let utility = match args.utility {
        UtilityChoice::Inverse => UtilityFunction::alpha2(),
        UtilityChoice::Proposed => acsma::compare::proposed_utility(&scenario),
        UtilityChoice::Log => UtilityFunction::alpha_fair(1.0),
    };
    let options = SolverOptions {
        tol,
        ..SolverOptions::default()
    };
    let beta = scenario.params.beta;
    let solution = if scenario.has_wired() {
        solve_ep(&scenario, beta, &utility, &options)?
    } else {
        solve_mp(&scenario, beta, &utility, &options)?
    };
    let report = solution.report(&scenario);
    write(out, "solution.csv", &solution.to_csv(&scenario))?;
    write(out, "report.txt", &report)?;
    if !solution.converged {
        bail!("solver did not converge (KKT residual {:.3e})\n{report}", solution.kkt_residual);
    }
    Ok(report)
}

fn cmd_integrate(args: &IntegrateArgs, out: &Path) -> Result<String> {
    let given = &args.scenario;
    let mut scenario = given.load()?;
    let mut config = match args.mode {
        IntegrationMode::AppendixB => {
            // r* = (2 alpha²)^(1/3); beta puts the legacy ratio at r*
            let target: f64 = (2.0 * scenario.params.alpha.powi(2)).cbrt();
            if given.beta.is_none() {
                scenario.params.beta = LCSMA_RHO.ln() / target;
            }
            IntegrationConfig {
                dt: 1e-2,
                horizon: 2e4,
                method: Method::Rk4,
                ..IntegrationConfig::default()
            }
        }
        IntegrationMode::Proposed | IntegrationMode::ProposedWired => equilibrium_config(&scenario),
        IntegrationMode::RenoOverLcsma => IntegrationConfig {
            method: Method::Rk4,
            ..IntegrationConfig::from_scenario(&scenario)
        },
    };
    if let Some(dt) = given.dt {
        config.dt = dt;
    }
    if let Some(horizon) = given.horizon {
        config.horizon = horizon;
    }
    if config.horizon < config.dt {
        bail!(input_error("horizon must be at least dt"));
    }
    if let Some(method) = args.method {
        config.method = method;
    }
    let steps = (config.horizon / config.dt).ceil();
    config.sample_stride = ((steps / args.samples.max(1) as f64).round() as usize).max(1);
    write(out, "scenario.txt", &scenario.to_text())?;

    let traj = integrate_system(&scenario, args.mode, &config)?;
    write(out, "trajectory.csv", &traj.to_csv())?;
    let last = traj.final_state();
    let mut report = format!(
        "{:?} on {}: t = {} ({} samples, beta {})\n",
        args.mode,
        scenario.name,
        traj.times.last().copied().unwrap_or(0.0),
        traj.times.len(),
        scenario.params.beta
    );
    if let Some(t) = traj.steady_at() {
        let _ = writeln!(report, "steady at t = {t}");
    }
    for (id, x) in traj.flow_ids.iter().zip(&last.x) {
        let _ = writeln!(report, "  flow {id:<8} x = {x:.6}");
    }
    for ((name, r), y) in traj.link_names.iter().zip(&last.r).zip(traj.final_link_rates()) {
        let _ = writeln!(report, "  link {name:<8} r = {r:.6}  y = {y:.6}");
    }
    write(out, "report.txt", &report)?;
    Ok(report)
}

fn cmd_simulate(args: &SimulateArgs, out: &Path) -> Result<String> {
    let scenario = args.scenario.load()?;
    if args.replications == 0 {
        bail!(input_error("--replications must be at least 1"));
    }
    let links = scenario.link_count();
    let family = enumerate_independent_sets(&scenario.graph)?;
    let beta = scenario.params.beta;
    let horizon = scenario.params.horizon;
    let seeds: Vec<u64> = (0..args.replications).map(|i| args.seed.wrapping_add(i)).collect();
    write(out, "scenario.txt", &scenario.to_text())?;

    match args.mode {
        SimMode::Csma => {
            let r = match &args.r {
                Some(r) => {
                    expect_len("r", r, links)?;
                    r.clone()
                }
                None => vec![scenario.params.rho.ln() / beta; links],
            };
            let ta = TaVector::new(r);
            let exact = stationary_distribution(&family, &ta, beta);
            let runs = seeds
                .par_iter()
                .map(|&seed| simulate_csma(&family, &ta, beta, horizon, seed))
                .collect::<Result<Vec<_>, _>>()?;

            let mut tv_csv = String::from("seed,tv\n");
            let mut report = format!("CSMA on {} for {horizon} time units, beta {beta}\n", scenario.name);
            for (seed, run) in seeds.iter().zip(&runs) {
                let tv = run.distribution.total_variation(&exact);
                let _ = writeln!(tv_csv, "{seed},{tv}");
                let _ = writeln!(report, "  seed {seed}: TV distance {tv:.6}");
            }
            let mut dist = String::from("set");
            for seed in &seeds {
                let _ = write!(dist, ",seed_{seed}");
            }
            dist.push_str(",product_form\n");
            for (i, set) in family.sets().iter().enumerate() {
                let _ = write!(dist, "\"{set}\"");
                for run in &runs {
                    let _ = write!(dist, ",{}", run.distribution.probabilities()[i]);
                }
                let _ = writeln!(dist, ",{}", exact.probabilities()[i]);
            }
            write(out, "tv.csv", &tv_csv)?;
            write(out, "distribution.csv", &dist)?;
            write(out, "report.txt", &report)?;
            Ok(report)
        }
        SimMode::Aqm => {
            let Some(arrivals) = &args.arrivals else {
                bail!(input_error("--arrivals is required in aqm mode"));
            };
            expect_len("arrivals", arrivals, links)?;
            let update_interval = positive("update-interval", args.update_interval)?;
            let runs = seeds
                .par_iter()
                .map(|&seed| {
                    let mut config =
                        AqmConfig::new(arrivals.clone(), scenario.params.alpha, beta, horizon, seed);
                    config.update_interval = update_interval;
                    simulate_acsma_aqm(&family, &config)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut report = format!("adaptive CSMA with AQM on {} for {horizon} time units\n", scenario.name);
            for (seed, run) in seeds.iter().zip(&runs) {
                let _ = write!(report, "seed {seed}: {}", run.summary());
                write(out, &format!("trace_seed_{seed}.csv"), &run.trace_csv())?;
            }
            write(out, "report.txt", &report)?;
            Ok(report)
        }
    }
}

fn cmd_compare(args: &CompareArgs, out: &Path) -> Result<String> {
    let scenario = args.scenario.load()?;
    let mut options = CompareOptions::for_scenario(&scenario);
    options.rho = match args.rho {
        Some(rho) => positive("rho", rho)?,
        None => scenario.params.rho,
    };
    write(out, "scenario.txt", &scenario.to_text())?;
    let comparison = compare(&scenario, &options)?;
    let table = comparison.to_table();
    write(out, "compare.csv", &comparison.to_csv())?;
    write(out, "compare.txt", &table)?;
    Ok(table)
}

fn cmd_capacity(args: &CapacityArgs, out: &Path) -> Result<String> {
    let scenario = args.scenario.load()?;
    expect_len("y", &args.y, scenario.link_count())?;
    let family = enumerate_independent_sets(&scenario.graph)?;
    write(out, "scenario.txt", &scenario.to_text())?;
    let verdict = capacity_membership(&family, &LinkRateVector(args.y.clone()));
    let mut report = format!(
        "verdict: {}\nmax scaling: {}\n",
        format!("{:?}", verdict.membership).to_lowercase(),
        verdict.max_scaling
    );
    if let Some(cert) = &verdict.certificate {
        report.push_str("certificate:\n");
        for (set, p) in family.sets().iter().zip(cert.probabilities()) {
            if *p > 0.0 {
                let _ = writeln!(report, "  {set} {p}");
            }
        }
    }
    write(out, "capacity.txt", &report)?;
    Ok(report)
}

fn run(cli: &Cli) -> Result<String> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::Solve(a) => cmd_solve(a, &cli.out),
        Command::Integrate(a) => cmd_integrate(a, &cli.out),
        Command::Simulate(a) => cmd_simulate(a, &cli.out),
        Command::Compare(a) => cmd_compare(a, &cli.out),
        Command::Capacity(a) => cmd_capacity(a, &cli.out),
    }
}

fn is_input_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<InputError>() || e.is::<ScenarioError>() || e.is::<std::io::Error>()
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_input_error(&err) { 2 } else { 1 })
        }
    }
}
