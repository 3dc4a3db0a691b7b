use anyhow::anyhow;
use qnetopt::mdp_oracle::{state_count, StateSpace};
use qnetopt::{
    expected_cost, extract_policy, extract_policy_ih, forward_kolmogorov, hjb_residual,
    integrate_mean, solve_costate_fh, vi_finite_horizon, vi_infinite_horizon, BangBangPolicy,
    Costate, CostateTrajectory, FhOptions, IhSolution, NetworkState, OracleError,
};
use serde::Serialize;
use serde_json::json;

use crate::{
    config, costate_failure, load_costate, numerical, write_file, CmdResult, Failure, Format, Mode,
    Problem, ValidateArgs,
};

const VI_TOL: f64 = 1e-2;
const MEAN_TOL: f64 = 1e-6;
const HJB_TOL: f64 = 1e-6;

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    passed: bool,
    deviation: f64,
    tolerance: f64,
}

impl Check {
    fn new(name: &'static str, deviation: f64, tolerance: f64) -> Self {
        Self {
            name,
            passed: deviation <= tolerance,
            deviation,
            tolerance,
        }
    }
}

fn oracle_failure(e: OracleError) -> Failure {
    match e {
        OracleError::NoConvergence(_)
        | OracleError::MassDrift { .. }
        | OracleError::BadDistribution { .. } => numerical(e),
        OracleError::Costate(e) => costate_failure(e),
        _ => config(e),
    }
}

/// Largest relative gap between a value table and the linear value `y · x`,
/// over non-empty states.
fn linear_gap(space: &StateSpace, values: &[f64], y: &[f64]) -> f64 {
    space
        .states()
        .iter()
        .zip(values)
        .filter(|(x, _)| x.iter().any(|&c| c > 0))
        .map(|(x, v)| {
            let linear = NetworkState::new(x.clone()).dot(y);
            let gap = (v - linear).abs();
            if gap == 0.0 {
                0.0
            } else {
                gap / linear.abs().max(f64::MIN_POSITIVE)
            }
        })
        .fold(0.0, f64::max)
}

fn relative(a: f64, b: f64) -> f64 {
    let gap = (a - b).abs();
    if gap == 0.0 {
        0.0
    } else {
        gap / b.abs().max(a.abs())
    }
}

/// A stationary costate as a constant trajectory, so the time-dependent
/// residual applies with a zero time derivative.
fn constant_trajectory(sol: &IhSolution, horizon: f64, m_u: usize) -> CostateTrajectory {
    let grid: Vec<f64> = (0..=8).map(|i| horizon * i as f64 / 8.0).collect();
    let y = vec![sol.y.clone(); grid.len()];
    CostateTrajectory::from_parts(horizon, grid, y, vec![Vec::new(); m_u])
        .expect("constant trajectory is well formed")
}

struct Subject {
    /// Costate used for the residual check.
    traj: CostateTrajectory,
    policy: BangBangPolicy,
    /// Value coefficients at time zero.
    y0: Vec<f64>,
    /// Horizon of the mean-ODE comparisons.
    horizon: f64,
    stationary: bool,
}

fn vi_checks(p: &Problem, s: &Subject, args: &ValidateArgs, out: &mut Vec<Check>) -> CmdResult {
    let n_max = args.oracle_n;
    if s.stationary {
        let vi = vi_infinite_horizon(&p.net, &p.costs, n_max, args.tol, 10_000_000)
            .map_err(oracle_failure)?;
        out.push(Check::new(
            "vi-value",
            linear_gap(&vi.space, &vi.table.values, &s.y0),
            VI_TOL,
        ));
        return Ok(());
    }
    let vi = vi_finite_horizon(&p.net, &p.costs, n_max, p.costs.horizon, args.steps, true)
        .map_err(oracle_failure)?;
    out.push(Check::new(
        "vi-value",
        linear_gap(&vi.space, &vi.table.values, &s.y0),
        VI_TOL,
    ));
    let mut disagreements = 0usize;
    for per_state in vi.step_controls.as_deref().unwrap_or_default() {
        for (k, route) in p.net.routes().iter().enumerate() {
            let mut choices = vi
                .space
                .states()
                .iter()
                .zip(per_state)
                .filter(|(x, _)| x[route.from] > 0)
                .map(|(_, u)| u[k]);
            if let Some(first) = choices.next() {
                if choices.any(|c| c != first) {
                    disagreements += 1;
                }
            }
        }
    }
    out.push(Check::new(
        "vi-state-independence",
        disagreements as f64,
        0.0,
    ));
    Ok(())
}

fn mean_checks(p: &Problem, s: &Subject, args: &ValidateArgs, out: &mut Vec<Check>) -> CmdResult {
    let t_end = s.horizon;
    let mut costs = p.costs.clone();
    if s.stationary {
        costs.c = vec![0.0; p.net.n()];
        costs.horizon = t_end;
    }
    let fastest = p.net.max_exit_rate() + p.net.m_u() as f64 * p.net.u_max();
    let dt = args
        .dt
        .unwrap_or((1e-3 * t_end).min(1e-2 / fastest.max(1e-12)));
    let x0 = p.x0.to_f64();
    let cost = expected_cost(&p.net, &s.policy, &costs, &x0, t_end, dt).map_err(numerical)?;
    out.push(Check::new(
        "mean-ode-cost",
        relative(cost, p.x0.dot(&s.y0)),
        MEAN_TOL,
    ));

    // Distribution push-forward from x0, or from all N units in the first
    // queue when x0 does not fit the state space.
    let n_max = args.oracle_n;
    let space = StateSpace::new(p.net.n(), n_max);
    let start = if p.x0.total() <= n_max {
        p.x0.counts().to_vec()
    } else {
        let mut x = vec![0; p.net.n()];
        x[0] = n_max;
        x
    };
    let fk_end = if s.stationary { t_end / 10.0 } else { t_end };
    let bound = n_max as f64 * (p.net.max_exit_rate() + p.net.m_u() as f64 * p.net.u_max());
    let fk_dt = if bound > 0.0 {
        (1e-3 * fk_end).min(0.5 / bound)
    } else {
        1e-3 * fk_end
    };
    let p0 = space.delta(&start).expect("start state lies in the space");
    let dist = forward_kolmogorov(&p.net, &s.policy, &space, &p0, fk_end, fk_dt)
        .map_err(oracle_failure)?;
    let start_f: Vec<f64> = start.iter().map(|&c| c as f64).collect();
    let mean = integrate_mean(&p.net, &s.policy, &start_f, fk_end, fk_dt).map_err(numerical)?;
    let deviation = space
        .mean(&dist)
        .iter()
        .zip(mean.final_mean())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / (n_max as f64).max(1.0);
    out.push(Check::new("kolmogorov-mean", deviation, MEAN_TOL));
    Ok(())
}

fn hjb_check(p: &Problem, s: &Subject, args: &ValidateArgs, out: &mut Vec<Check>) -> CmdResult {
    let space = StateSpace::new(p.net.n(), args.oracle_n);
    let horizon = s.traj.horizon();
    let times: Vec<f64> = if s.stationary {
        vec![0.0]
    } else {
        (0..=20)
            .map(|j| (horizon * j as f64 / 20.0).min(horizon))
            .collect()
    };
    let samples: Vec<(NetworkState, f64)> = space
        .states()
        .iter()
        .flat_map(|x| {
            times
                .iter()
                .map(move |&t| (NetworkState::new(x.clone()), t))
        })
        .collect();
    let r = hjb_residual(&p.net, &p.costs, &s.traj, &samples).map_err(oracle_failure)?;
    out.push(Check::new("hjb-residual", r.max_relative, HJB_TOL));
    Ok(())
}

fn subject(p: &Problem, args: &ValidateArgs) -> Result<Subject, Failure> {
    let costate = match &args.costate {
        Some(path) => load_costate(path)?,
        None => {
            let opts = FhOptions {
                dt: args.dt,
                switch_tol: args.switch_tol,
            };
            Costate::FiniteHorizon(
                solve_costate_fh(&p.net, &p.costs, opts).map_err(costate_failure)?,
            )
        }
    };
    match costate {
        Costate::FiniteHorizon(traj) => {
            if traj.horizon() != p.costs.horizon {
                return Err(config(anyhow!(
                    "costate horizon {} does not match the cost horizon T = {}",
                    traj.horizon(),
                    p.costs.horizon
                )));
            }
            if traj.initial().len() != p.net.n() || traj.switch_times().len() != p.net.m_u() {
                return Err(config(anyhow!(
                    "costate does not match the network dimensions"
                )));
            }
            let policy = extract_policy(&traj, &p.costs, &p.net).map_err(numerical)?;
            Ok(Subject {
                y0: traj.initial().to_vec(),
                horizon: p.costs.horizon,
                policy,
                traj,
                stationary: false,
            })
        }
        Costate::InfiniteHorizon(sol) => {
            if sol.y.len() != p.net.n() {
                return Err(config(anyhow!(
                    "costate does not match the network dimensions"
                )));
            }
            let slowest = p
                .net
                .min_exit_rate()
                .ok_or_else(|| config(anyhow!("network has no exits")))?;
            let horizon = 50.0 / slowest;
            Ok(Subject {
                traj: constant_trajectory(&sol, horizon, p.net.m_u()),
                policy: extract_policy_ih(&sol, &p.net),
                y0: sol.y.clone(),
                horizon,
                stationary: true,
            })
        }
    }
}

pub(crate) fn run(args: &ValidateArgs) -> CmdResult {
    let p = args.common.load()?;
    let needed = state_count(p.net.n(), args.oracle_n);
    if needed > args.state_cap as u128 {
        return Err(config(anyhow!(
            "N = {} needs {needed} states; pass --state-cap {needed} or lower --oracle-n",
            args.oracle_n
        )));
    }
    let s = subject(&p, args)?;
    let mut checks = Vec::new();
    if matches!(args.mode, Mode::Vi | Mode::All) {
        vi_checks(&p, &s, args, &mut checks)?;
    }
    if matches!(args.mode, Mode::MeanOde | Mode::All) {
        mean_checks(&p, &s, args, &mut checks)?;
    }
    if matches!(args.mode, Mode::Hjb | Mode::All) {
        hjb_check(&p, &s, args, &mut checks)?;
    }
    let passed = checks.iter().all(|c| c.passed);
    let report = json!({
        "passed": passed,
        "oracle_n": args.oracle_n,
        "states": needed as u64,
        "checks": checks,
    });
    let dir = args.common.output_dir()?;
    write_file(
        &dir.join("validation.json"),
        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
    )?;
    match args.common.format {
        Format::Text => {
            for c in &checks {
                println!(
                    "{} {} deviation={:e} tolerance={:e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.deviation,
                    c.tolerance
                );
            }
        }
        Format::Json => println!("{}", serde_json::to_string_pretty(&report).unwrap()),
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::ChecksFailed)
    }
}
