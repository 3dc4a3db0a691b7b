//! Exact stochastic simulation of the network under an open-loop policy.
//!
//! Within each interval between policy switches the event rates depend only
//! on the state, so the direct Gillespie method is exact there. When the
//! next drawn jump would pass a switch time, the clock is advanced to the
//! switch and a fresh waiting time is drawn with the new rates; memoryless
//! waiting times make this exact.
//!
//! Every trial of [`estimate_cost`] draws from its own ChaCha8 stream,
//! selected by the trial index, so results do not depend on scheduling.

use std::io::{self, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::costate::CostSpec;
use crate::network::{NetworkState, QueueNetwork};
use crate::policy::BangBangPolicy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsaError {
    #[error("expected {expected} {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("simulation end {t_end} must be positive and within the policy horizon {horizon:?}")]
    BadEndTime { t_end: f64, horizon: Option<f64> },
    #[error("trajectory ends at {traj} but the cost horizon is {horizon}")]
    HorizonMismatch { traj: f64, horizon: f64 },
    #[error("at least 2 trials are required, got {0}")]
    TooFewTrials(usize),
}

/// One jump of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SsaEvent {
    pub time: f64,
    /// Index into `[exits | routes]`.
    pub event: usize,
    pub state: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsaTrajectory {
    pub x0: NetworkState,
    pub t_end: f64,
    pub events: Vec<SsaEvent>,
    /// Running plus terminal cost, set by [`accumulate_cost`].
    pub accumulated_cost: Option<f64>,
}

impl SsaTrajectory {
    /// State at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> &[u64] {
        let j = self.events.partition_point(|e| e.time <= t);
        if j == 0 {
            self.x0.counts()
        } else {
            &self.events[j - 1].state
        }
    }

    pub fn final_state(&self) -> &[u64] {
        self.events
            .last()
            .map_or(self.x0.counts(), |e| e.state.as_slice())
    }

    /// CSV dump: `time,event,x_1..x_n`; an initial row with an empty
    /// event column, then one row per event.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let header: Vec<String> = (1..=self.x0.len()).map(|i| format!("x_{i}")).collect();
        writeln!(out, "time,event,{}", header.join(","))?;
        writeln!(out, "0,,{}", join(self.x0.counts()))?;
        for e in &self.events {
            writeln!(out, "{},{},{}", e.time, e.event, join(&e.state))?;
        }
        Ok(())
    }
}

fn join(xs: &[u64]) -> String {
    xs.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

/// Generator for trial `index` of a run seeded with `master_seed`.
pub fn trial_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Uniform draw in the open interval (0, 1).
fn open01<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

fn check_inputs(
    net: &QueueNetwork,
    policy: &BangBangPolicy,
    x0: &NetworkState,
    t_end: f64,
) -> Result<(), SsaError> {
    if x0.len() != net.n() {
        return Err(SsaError::DimensionMismatch {
            what: "queue counts",
            expected: net.n(),
            got: x0.len(),
        });
    }
    if policy.m_u() != net.m_u() {
        return Err(SsaError::DimensionMismatch {
            what: "policy controls",
            expected: net.m_u(),
            got: policy.m_u(),
        });
    }
    let within = policy.horizon().is_none_or(|h| t_end <= h);
    if !(t_end > 0.0 && t_end.is_finite() && within) {
        return Err(SsaError::BadEndTime {
            t_end,
            horizon: policy.horizon(),
        });
    }
    Ok(())
}

/// Simulates one path from `x0` up to `t_end` with a generator seeded by
/// `seed`.
pub fn simulate(
    net: &QueueNetwork,
    policy: &BangBangPolicy,
    x0: &NetworkState,
    t_end: f64,
    seed: u64,
) -> Result<SsaTrajectory, SsaError> {
    simulate_with_rng(net, policy, x0, t_end, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn simulate_with_rng<R: Rng>(
    net: &QueueNetwork,
    policy: &BangBangPolicy,
    x0: &NetworkState,
    t_end: f64,
    rng: &mut R,
) -> Result<SsaTrajectory, SsaError> {
    check_inputs(net, policy, x0, t_end)?;
    let mut boundaries = policy.breakpoints(t_end);
    boundaries.push(t_end);

    let mut events = Vec::new();
    let mut x = x0.counts().to_vec();
    let mut total: u64 = x.iter().sum();
    let mut t = 0.0;
    let mut segment = 0;
    let mut u = policy.evaluate_unchecked(0.0);
    let mut rates = Vec::with_capacity(net.m_e() + net.m_u());

    while total > 0 {
        let boundary = boundaries[segment];
        net.fill_event_rates(&x, &u, &mut rates);
        let lambda: f64 = rates.iter().sum();
        let wait = if lambda > 0.0 {
            -open01(rng).ln() / lambda
        } else {
            f64::INFINITY
        };
        if t + wait > boundary {
            if segment + 1 == boundaries.len() {
                break;
            }
            t = boundary;
            segment += 1;
            u = policy.evaluate_unchecked(t);
            continue;
        }
        t += wait;
        let mut target = open01(rng) * lambda;
        let mut chosen = rates.len() - 1;
        for (i, &r) in rates.iter().enumerate() {
            if target < r {
                chosen = i;
                break;
            }
            target -= r;
        }
        // Guard against round-off picking a zero-rate event at the end.
        while rates[chosen] == 0.0 {
            chosen -= 1;
        }
        if chosen < net.m_e() {
            x[net.exits()[chosen].queue] -= 1;
            total -= 1;
        } else {
            let route = net.routes()[chosen - net.m_e()];
            x[route.from] -= 1;
            x[route.to] += 1;
        }
        events.push(SsaEvent {
            time: t,
            event: chosen,
            state: x.clone(),
        });
    }

    Ok(SsaTrajectory {
        x0: x0.clone(),
        t_end,
        events,
        accumulated_cost: None,
    })
}

/// Exact path cost: piecewise-constant stage cost integrated over the
/// segments cut by events and policy switches, plus the terminal cost.
/// The result is also stored on the trajectory.
pub fn accumulate_cost(
    net: &QueueNetwork,
    traj: &mut SsaTrajectory,
    costs: &CostSpec,
    policy: &BangBangPolicy,
    horizon: f64,
) -> Result<f64, SsaError> {
    let policy_ok = policy.horizon().is_none_or(|h| h == horizon);
    if traj.t_end != horizon || !policy_ok {
        return Err(SsaError::HorizonMismatch {
            traj: traj.t_end,
            horizon,
        });
    }
    let cost = path_cost(net, traj, costs, policy);
    traj.accumulated_cost = Some(cost);
    Ok(cost)
}

fn stage_rate(net: &QueueNetwork, costs: &CostSpec, x: &[u64], u: &[f64]) -> f64 {
    let holding: f64 = x.iter().zip(&costs.q).map(|(&xi, q)| q * xi as f64).sum();
    let routing: f64 = net
        .routes()
        .iter()
        .zip(u)
        .zip(&costs.v)
        .map(|((r, uk), vk)| vk * uk * x[r.from] as f64)
        .sum();
    holding + routing
}

fn path_cost(
    net: &QueueNetwork,
    traj: &SsaTrajectory,
    costs: &CostSpec,
    policy: &BangBangPolicy,
) -> f64 {
    let t_end = traj.t_end;
    let mut cuts: Vec<f64> = traj.events.iter().map(|e| e.time).collect();
    cuts.extend(policy.breakpoints(t_end));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.push(t_end);

    let mut cost = 0.0;
    let mut start = 0.0;
    for &end in &cuts {
        if end > start {
            let x = traj.state_at(start);
            let u = policy.evaluate_unchecked(start);
            cost += stage_rate(net, costs, x, &u) * (end - start);
        }
        start = end;
    }
    let terminal: f64 = traj
        .final_state()
        .iter()
        .zip(&costs.c)
        .map(|(&xi, c)| c * xi as f64)
        .sum();
    cost + terminal
}

/// Monte-Carlo summary of path costs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

impl CostEstimate {
    pub fn from_samples(samples: &[f64]) -> Result<Self, SsaError> {
        let trials = samples.len();
        if trials < 2 {
            return Err(SsaError::TooFewTrials(trials));
        }
        let n = trials as f64;
        let mean = neumaier_sum(samples.iter().copied()) / n;
        let ss = neumaier_sum(samples.iter().map(|s| (s - mean) * (s - mean)));
        let std_error = (ss / (n - 1.0)).sqrt() / n.sqrt();
        Ok(Self {
            mean,
            std_error,
            trials,
            ci95_low: mean - 1.96 * std_error,
            ci95_high: mean + 1.96 * std_error,
        })
    }

    /// `{"mean", "std_error", "trials", "ci95": [low, high]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "mean": self.mean,
            "std_error": self.std_error,
            "trials": self.trials,
            "ci95": [self.ci95_low, self.ci95_high],
        }))
        .expect("estimate serialization")
    }
}

fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Path costs of `trials` independent runs over the cost horizon, in trial
/// order. Trials run in parallel; output does not depend on scheduling.
pub fn sample_costs(
    net: &QueueNetwork,
    policy: &BangBangPolicy,
    costs: &CostSpec,
    x0: &NetworkState,
    trials: usize,
    master_seed: u64,
) -> Result<Vec<f64>, SsaError> {
    let horizon = costs.horizon;
    check_inputs(net, policy, x0, horizon)?;
    (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(master_seed, i);
            let mut traj = simulate_with_rng(net, policy, x0, horizon, &mut rng)?;
            accumulate_cost(net, &mut traj, costs, policy, horizon)
        })
        .collect()
}

pub fn estimate_cost(
    net: &QueueNetwork,
    policy: &BangBangPolicy,
    costs: &CostSpec,
    x0: &NetworkState,
    trials: usize,
    master_seed: u64,
) -> Result<CostEstimate, SsaError> {
    if trials < 2 {
        return Err(SsaError::TooFewTrials(trials));
    }
    CostEstimate::from_samples(&sample_costs(net, policy, costs, x0, trials, master_seed)?)
}
