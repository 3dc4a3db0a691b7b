mod plot;
mod validate;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qnetopt::costate::IhSolution;
use qnetopt::ssa::{sample_costs, simulate_with_rng, trial_rng};
use qnetopt::{
    build_network, extract_policy, extract_policy_ih, solve_costate_fh, solve_costate_ih,
    BangBangPolicy, CostEstimate, CostSpec, Costate, CostateError, CostateFile, FhOptions,
    NetworkDescription, NetworkState, QueueNetwork,
};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "qnetopt",
    version,
    about = "Optimal routing control for networks of M/M/inf queues"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the finite-horizon problem; writes costate.json and policy.json.
    SolveFh(SolveArgs),
    /// Solve the infinite-horizon problem; writes costate.json and policy.json.
    SolveIh(SolveArgs),
    /// Simulate a policy; writes trajectory_<i>.csv and estimate.json.
    Simulate(SimulateArgs),
    /// Cross-check a costate against the finite-state oracles; writes validation.json.
    Validate(ValidateArgs),
    /// Write plot data from solve and simulate artifacts.
    ///
    /// policy_vs_time.csv: time,u_1..u_m (sampled grid plus every switch time).
    /// states.csv: time,x_1..x_n, one row per jump (state after the jump).
    /// mean.csv: time,mu_1..mu_n from the mean ODE under the policy.
    /// value_grid.csv: x_1..x_n,V at t = 0 on a grid (networks of up to 3 queues).
    EmitPlot(PlotArgs),
}

#[derive(Args)]
struct Common {
    /// Network description (JSON).
    #[arg(long)]
    network: PathBuf,
    /// Cost coefficients and horizon: {"q": [..], "v": [..], "c": [..], "T": ..}.
    #[arg(long)]
    costs: PathBuf,
    /// Initial queue counts, comma separated (defaults to all zero).
    #[arg(long)]
    x0: Option<String>,
    /// Directory for output files.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Format of the summary printed on stdout.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    /// Costate integration step (default 1e-3 T).
    #[arg(long)]
    dt: Option<f64>,
    /// Switch-time localization tolerance (default 1e-8 T).
    #[arg(long)]
    switch_tol: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Policy file (default <out-dir>/policy.json).
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Master seed; trial i uses stream i of this seed.
    #[arg(long, env = "QNETOPT_SEED", default_value_t = 0)]
    seed: u64,
    /// Number of trajectories written as CSV.
    #[arg(long, default_value_t = 1)]
    paths: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Vi,
    MeanOde,
    Hjb,
    All,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    common: Common,
    /// Costate file to check (default: solve the finite-horizon problem).
    #[arg(long)]
    costate: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::All)]
    mode: Mode,
    /// Largest total count of the finite state space.
    #[arg(long, default_value_t = 6)]
    oracle_n: u64,
    /// Time steps of finite-horizon value iteration.
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    /// Convergence tolerance of infinite-horizon value iteration.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Maximum number of states the oracles may enumerate.
    #[arg(long, default_value_t = 200_000)]
    state_cap: usize,
    /// Step of the costate solve and the mean ODE.
    #[arg(long)]
    dt: Option<f64>,
    /// Switch-time localization tolerance of the costate solve.
    #[arg(long)]
    switch_tol: Option<f64>,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    /// Costate file (default <out-dir>/costate.json).
    #[arg(long)]
    costate: Option<PathBuf>,
    /// Policy file (default <out-dir>/policy.json).
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Trajectory CSV (default <out-dir>/trajectory_0.csv).
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Mean ODE step (default 1e-3 T).
    #[arg(long)]
    dt: Option<f64>,
    /// Number of intervals of the policy time grid.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Largest per-queue count of the value grid.
    #[arg(long, default_value_t = 10)]
    grid_max: u64,
}

/// Command failure with its exit status.
#[derive(Debug)]
pub(crate) enum Failure {
    ChecksFailed,
    Config(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::ChecksFailed => 1,
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

pub(crate) type CmdResult = Result<(), Failure>;

pub(crate) fn config(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

pub(crate) fn numerical(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Numerical(e.into())
}

/// Input problems exit 2, solver breakdowns exit 3.
pub(crate) fn costate_failure(e: CostateError) -> Failure {
    use CostateError::*;
    match e {
        DimensionMismatch { .. }
        | NegativeCost { .. }
        | BadHorizon(_)
        | BadStep(_)
        | BadTolerance(_)
        | NotAbsorbing(_)
        | NoExits
        | TooManyControls(_)
        | TimeOutOfRange { .. }
        | Malformed(_)
        | Io(_) => config(e),
        NonFinite { .. }
        | NegativeCostate { .. }
        | NoConsistentActiveSet
        | AllCandidatesSingular => numerical(e),
    }
}

/// Network, costs and initial state shared by every command.
pub(crate) struct Problem {
    pub net: QueueNetwork,
    pub costs: CostSpec,
    pub x0: NetworkState,
}

impl Common {
    fn load(&self) -> Result<Problem, Failure> {
        let desc = NetworkDescription::load(&self.network).map_err(config)?;
        let net = build_network(&desc).map_err(config)?;
        let costs = CostSpec::load(&self.costs).map_err(config)?;
        costs.validate(&net).map_err(config)?;
        let x0 = match &self.x0 {
            None => NetworkState::zeros(net.n()),
            Some(text) => parse_state(text)?,
        };
        net.check_state(&x0).map_err(config)?;
        Ok(Problem { net, costs, x0 })
    }

    fn output_dir(&self) -> Result<&Path, Failure> {
        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))
            .map_err(config)?;
        Ok(&self.out_dir)
    }

    fn default_path(&self, given: &Option<PathBuf>, file: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_dir.join(file))
    }
}

fn parse_state(text: &str) -> Result<NetworkState, Failure> {
    text.split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<Vec<_>, _>>()
        .map(NetworkState::new)
        .map_err(|e| config(anyhow!("--x0 `{text}`: {e}")))
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> CmdResult {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(config)
}

pub(crate) fn load_policy(path: &Path) -> Result<BangBangPolicy, Failure> {
    BangBangPolicy::load(path).map_err(config)
}

pub(crate) fn load_costate(path: &Path) -> Result<Costate, Failure> {
    CostateFile::load(path)
        .and_then(CostateFile::into_costate)
        .map_err(config)
}

fn print_summary(format: Format, text: &[String], value: serde_json::Value) {
    match format {
        Format::Text => text.iter().for_each(|line| println!("{line}")),
        Format::Json => println!("{}", serde_json::to_string_pretty(&value).unwrap()),
    }
}

fn solve_fh(args: &SolveArgs) -> CmdResult {
    let p = args.common.load()?;
    let opts = FhOptions {
        dt: args.dt,
        switch_tol: args.switch_tol,
    };
    let traj = solve_costate_fh(&p.net, &p.costs, opts).map_err(costate_failure)?;
    let policy = extract_policy(&traj, &p.costs, &p.net).map_err(numerical)?;
    let value = traj.value_at(&p.x0, 0.0).map_err(costate_failure)?;
    let dir = args.common.output_dir()?;
    write_file(
        &dir.join("costate.json"),
        traj.to_file().to_json().as_bytes(),
    )?;
    write_file(&dir.join("policy.json"), policy.to_json().as_bytes())?;
    let switches: Vec<&[f64]> = policy.controls().iter().map(|c| c.switches()).collect();
    let mut lines = vec![format!("value= {value}")];
    for (k, c) in policy.controls().iter().enumerate() {
        lines.push(format!(
            "control {}: initially {}, switches {:?}",
            k + 1,
            if c.initially_on() { "on" } else { "off" },
            c.switches()
        ));
    }
    print_summary(
        args.common.format,
        &lines,
        json!({ "value": value, "y0": traj.initial(), "switch_times": switches }),
    );
    Ok(())
}

fn solve_ih(args: &SolveArgs) -> CmdResult {
    let p = args.common.load()?;
    let sol: IhSolution = solve_costate_ih(&p.net, &p.costs).map_err(costate_failure)?;
    let policy = extract_policy_ih(&sol, &p.net);
    let value = sol.value_at(&p.x0);
    let dir = args.common.output_dir()?;
    write_file(
        &dir.join("costate.json"),
        sol.to_file().to_json().as_bytes(),
    )?;
    write_file(&dir.join("policy.json"), policy.to_json().as_bytes())?;
    // Routes are numbered from 1 for display.
    let active: Vec<usize> = sol.active_set.iter().map(|k| k + 1).collect();
    let shown = active
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    let mut lines = vec![
        format!("value= {value}"),
        format!("active_set= {{{shown}}}"),
        format!("y= {:?}", sol.y),
    ];
    if sol.degenerate {
        lines.push("warning: a switching value is zero; the active set is not unique".into());
    }
    print_summary(
        args.common.format,
        &lines,
        json!({ "value": value, "y": sol.y, "active_set": active, "degenerate": sol.degenerate }),
    );
    Ok(())
}

fn simulate(args: &SimulateArgs) -> CmdResult {
    let p = args.common.load()?;
    let policy = load_policy(&args.common.default_path(&args.policy, "policy.json"))?;
    let horizon = p.costs.horizon;
    if let Some(h) = policy.horizon() {
        if h != horizon {
            return Err(config(anyhow!(
                "policy horizon {h} does not match the cost horizon T = {horizon}"
            )));
        }
    }
    if policy.m_u() != p.net.m_u() || policy.u_max() != p.net.u_max() {
        return Err(config(anyhow!(
            "policy has {} controls with u_max {}, network has {} routes with u_max {}",
            policy.m_u(),
            policy.u_max(),
            p.net.m_u(),
            p.net.u_max()
        )));
    }
    if args.trials == 0 {
        return Err(config(anyhow!("--trials must be at least 1")));
    }
    let dir = args.common.output_dir()?;
    for i in 0..args.paths.min(args.trials) {
        let mut rng = trial_rng(args.seed, i as u64);
        let traj = simulate_with_rng(&p.net, &policy, &p.x0, horizon, &mut rng).map_err(config)?;
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).map_err(config)?;
        write_file(&dir.join(format!("trajectory_{i}.csv")), &buf)?;
    }
    let samples =
        sample_costs(&p.net, &policy, &p.costs, &p.x0, args.trials, args.seed).map_err(config)?;
    let (summary, text) = if args.trials == 1 {
        let doc = json!({ "mean": samples[0], "std_error": null, "trials": 1, "ci95": null });
        (doc, format!("mean= {} (single trial)", samples[0]))
    } else {
        let est = CostEstimate::from_samples(&samples).map_err(numerical)?;
        let doc: serde_json::Value = serde_json::from_str(&est.to_json()).unwrap();
        let text = format!(
            "mean= {} std_error= {} trials= {}",
            est.mean, est.std_error, est.trials
        );
        (doc, text)
    };
    write_file(
        &dir.join("estimate.json"),
        serde_json::to_string_pretty(&summary).unwrap().as_bytes(),
    )?;
    print_summary(args.common.format, &[text], summary);
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::SolveFh(a) => solve_fh(a),
        Command::SolveIh(a) => solve_ih(a),
        Command::Simulate(a) => simulate(a),
        Command::Validate(a) => validate::run(a),
        Command::EmitPlot(a) => plot::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure {
                Failure::ChecksFailed => eprintln!("validation failed"),
                Failure::Config(e) => eprintln!("error: {e:#}"),
                Failure::Numerical(e) => eprintln!("numerical failure: {e:#}"),
            }
            ExitCode::from(failure.code())
        }
    }
}
