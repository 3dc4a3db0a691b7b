//! Finite-state ground truth.
//!
//! No event increases the total number of units, so from any start with
//! `Σx ≤ N` the chain stays inside `{x ≥ 0 : Σx ≤ N}`. On that exact finite
//! state space this module builds the jump generator, solves the control
//! problem over all state-feedback policies by dynamic programming, pushes
//! distributions through the forward Kolmogorov equation, and measures the
//! HJB residual of a linear candidate value function.
//!
//! The Bellman bracket is affine in each `u_k` and the terms for different
//! routes do not interact, so the minimum over `[0, u_max]^{m_u}` is
//! attained at an endpoint and can be taken control by control:
//! `u_k = u_max` iff `x_src (v_k + V(x + r_k) - V(x)) < 0`, ties going to
//! `0`. This equals a search over all `2^{m_u}` endpoint combinations.

use std::collections::HashMap;
use std::io::{self, Write};

use thiserror::Error;

use crate::costate::{CostSpec, CostateError, CostateTrajectory};
use crate::network::{NetworkError, NetworkState, QueueNetwork};
use crate::policy::BangBangPolicy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Costate(#[from] CostateError),
    #[error("state space of {size} states exceeds the cap of {cap}")]
    TooManyStates { size: u128, cap: usize },
    #[error("time step {dt} violates the stability bound dt * {rate_bound} < 1")]
    StepTooLarge { dt: f64, rate_bound: f64 },
    #[error("queues {0:?} cannot reach an exit")]
    NotAbsorbing(Vec<usize>),
    #[error("value iteration did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("distribution must have {expected} entries summing to 1")]
    BadDistribution { expected: usize },
    #[error("probability mass drifted by {drift:e}; reduce dt")]
    MassDrift { drift: f64 },
    #[error("expected {expected} {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
}

/// Number of states with `n` queues and at most `total` units.
pub fn state_count(n: usize, total: u64) -> u128 {
    // C(total + n, n), evaluated incrementally to stay exact.
    let mut acc: u128 = 1;
    for i in 1..=n as u128 {
        acc = acc * (total as u128 + i) / i;
    }
    acc
}

/// All `x ≥ 0` with `Σx ≤ N`, in graded lexicographic order: by total, then
/// lexicographically descending in `(x_1, x_2, ...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    n: usize,
    total: u64,
    states: Vec<Vec<u64>>,
    index: HashMap<Vec<u64>, usize>,
}

impl StateSpace {
    pub fn new(n: usize, total: u64) -> Self {
        let mut states = Vec::new();
        for degree in 0..=total {
            let mut current = vec![0; n];
            compositions(&mut current, 0, degree, &mut states);
        }
        let index = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self {
            n,
            total,
            states,
            index,
        }
    }

    /// Like [`StateSpace::new`] but refuses spaces larger than `cap`.
    pub fn with_cap(n: usize, total: u64, cap: usize) -> Result<Self, OracleError> {
        let size = state_count(n, total);
        if size > cap as u128 {
            return Err(OracleError::TooManyStates { size, cap });
        }
        Ok(Self::new(n, total))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn queues(&self) -> usize {
        self.n
    }

    pub fn states(&self) -> &[Vec<u64>] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &[u64] {
        &self.states[i]
    }

    pub fn index_of(&self, x: &[u64]) -> Option<usize> {
        self.index.get(x).copied()
    }

    /// Point mass at `x`.
    pub fn delta(&self, x: &[u64]) -> Option<Vec<f64>> {
        let i = self.index_of(x)?;
        let mut p = vec![0.0; self.len()];
        p[i] = 1.0;
        Some(p)
    }

    /// Expected queue contents under distribution `p`.
    pub fn mean(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (x, &pi) in self.states.iter().zip(p) {
            for (o, &xi) in out.iter_mut().zip(x) {
                *o += pi * xi as f64;
            }
        }
        out
    }
}

fn compositions(current: &mut Vec<u64>, pos: usize, remaining: u64, out: &mut Vec<Vec<u64>>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for v in (0..=remaining).rev() {
        current[pos] = v;
        compositions(current, pos + 1, remaining - v, out);
    }
    current[pos] = 0;
}

/// Outgoing transitions of one state.
#[derive(Debug, Clone)]
struct StateTransitions {
    /// `(target, rate)` of every exit event with positive rate.
    exits: Vec<(usize, f64)>,
    /// `(target, source count)` per route; rate is `u_k * source count`.
    routes: Vec<(usize, f64)>,
}

fn transitions(net: &QueueNetwork, space: &StateSpace) -> Vec<StateTransitions> {
    let target_of = |x: &[u64], event: usize| -> usize {
        let change = net.event_change(event);
        let y: Vec<u64> = x
            .iter()
            .zip(&change)
            .map(|(&xi, &d)| (xi as i64 + d) as u64)
            .collect();
        space
            .index_of(&y)
            .expect("events never increase the total count")
    };
    space
        .states()
        .iter()
        .map(|x| StateTransitions {
            exits: net
                .exits()
                .iter()
                .enumerate()
                .filter(|(_, e)| x[e.queue] > 0)
                .map(|(k, e)| (target_of(x, k), e.rate * x[e.queue] as f64))
                .collect(),
            routes: net
                .routes()
                .iter()
                .enumerate()
                .map(|(k, r)| {
                    if x[r.from] > 0 {
                        (target_of(x, net.m_e() + k), x[r.from] as f64)
                    } else {
                        (usize::MAX, 0.0)
                    }
                })
                .collect(),
        })
        .collect()
}

/// Row-sparse generator of the jump process under a fixed control.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGenerator {
    /// Per row, `(column, value)` sorted by column, diagonal included.
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseGenerator {
    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .iter()
            .find(|(c, _)| *c == j)
            .map_or(0.0, |(_, v)| *v)
    }

    /// `Q v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, q)| q * v[j]).sum())
            .collect()
    }

    /// `p Q`.
    pub fn apply_left(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len()];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, q) in row {
                out[j] += p[i] * q;
            }
        }
        out
    }
}

/// Generator with off-diagonal entries `W_i(x, u)` for each transition
/// `x → x + r_i` and diagonal `-Σ rates`.
pub fn build_generator(
    net: &QueueNetwork,
    space: &StateSpace,
    u: &[f64],
) -> Result<SparseGenerator, OracleError> {
    net.check_controls(u)?;
    let rows = transitions(net, space)
        .into_iter()
        .enumerate()
        .map(|(i, tr)| {
            let mut entries: Vec<(usize, f64)> = tr
                .exits
                .iter()
                .copied()
                .chain(
                    tr.routes
                        .iter()
                        .zip(u)
                        .filter(|((_, base), uk)| *base > 0.0 && **uk > 0.0)
                        .map(|(&(j, base), uk)| (j, base * uk)),
                )
                .collect();
            let out_rate: f64 = entries.iter().map(|(_, r)| r).sum();
            entries.push((i, -out_rate));
            entries.sort_by_key(|(j, _)| *j);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
            for (j, v) in entries {
                match merged.last_mut() {
                    Some((last, acc)) if *last == j => *acc += v,
                    _ => merged.push((j, v)),
                }
            }
            merged
        })
        .collect();
    Ok(SparseGenerator { rows })
}

/// Values over a state space, with the minimizing controls per state.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub values: Vec<f64>,
    /// Per state, the argmin control vector (at `t = 0` for finite horizon).
    pub controls: Vec<Vec<f64>>,
}

impl ValueTable {
    /// CSV: `x_1..x_n,value,u_1..u_m`.
    pub fn write_csv<W: Write>(&self, space: &StateSpace, mut out: W) -> io::Result<()> {
        let m_u = self.controls.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (1..=space.queues()).map(|i| format!("x_{i}")).collect();
        header.push("value".into());
        header.extend((1..=m_u).map(|k| format!("u_{k}")));
        writeln!(out, "{}", header.join(","))?;
        for ((x, v), u) in space.states().iter().zip(&self.values).zip(&self.controls) {
            let mut row: Vec<String> = x.iter().map(u64::to_string).collect();
            row.push(v.to_string());
            row.extend(u.iter().map(f64::to_string));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FhValueResult {
    pub space: StateSpace,
    pub table: ValueTable,
    /// `step_controls[m][state][k]`: argmin at step `m` (time `m Δt`), when
    /// requested.
    pub step_controls: Option<Vec<Vec<Vec<bool>>>>,
}

fn rate_bound(net: &QueueNetwork, total: u64) -> f64 {
    total as f64 * (net.max_exit_rate() + net.m_u() as f64 * net.u_max())
}

/// One Bellman bracket minimization.
///
/// Returns `Σ_events rate (V(target) - V(x))` at the minimizing control
/// and the routes switched on.
fn minimized_drift(
    tr: &StateTransitions,
    values: &[f64],
    here: f64,
    v: &[f64],
    u_max: f64,
    on: &mut [bool],
) -> (f64, f64) {
    let mut drift = 0.0;
    for &(j, rate) in &tr.exits {
        drift += rate * (values[j] - here);
    }
    let mut routing_cost = 0.0;
    for (k, &(j, base)) in tr.routes.iter().enumerate() {
        on[k] = false;
        if base > 0.0 {
            let coeff = base * (v[k] + values[j] - here);
            if coeff < 0.0 {
                on[k] = true;
                drift += u_max * base * (values[j] - here);
                routing_cost += u_max * base * v[k];
            }
        }
    }
    (drift, routing_cost)
}

/// Backward dynamic programming on the Euler discretization of the
/// controlled chain, over all state-feedback policies.
pub fn vi_finite_horizon(
    net: &QueueNetwork,
    costs: &CostSpec,
    total: u64,
    horizon: f64,
    steps: usize,
    record_step_controls: bool,
) -> Result<FhValueResult, OracleError> {
    costs.validate(net)?;
    let dt = horizon / steps as f64;
    let bound = rate_bound(net, total);
    if !(dt > 0.0 && dt * bound < 1.0) {
        return Err(OracleError::StepTooLarge {
            dt,
            rate_bound: bound,
        });
    }
    let space = StateSpace::new(net.n(), total);
    let trs = transitions(net, &space);
    let holding: Vec<f64> = space
        .states()
        .iter()
        .map(|x| x.iter().zip(&costs.q).map(|(&xi, q)| q * xi as f64).sum())
        .collect();
    let mut values: Vec<f64> = space
        .states()
        .iter()
        .map(|x| x.iter().zip(&costs.c).map(|(&xi, c)| c * xi as f64).sum())
        .collect();
    let m_u = net.m_u();
    let u_max = net.u_max();
    let mut step_controls = record_step_controls.then(|| vec![Vec::new(); steps]);
    let mut controls = vec![vec![false; m_u]; space.len()];
    let mut next = vec![0.0; space.len()];
    for m in (0..steps).rev() {
        for (i, tr) in trs.iter().enumerate() {
            let (drift, routing) =
                minimized_drift(tr, &values, values[i], &costs.v, u_max, &mut controls[i]);
            next[i] = values[i] + dt * (holding[i] + routing + drift);
        }
        std::mem::swap(&mut values, &mut next);
        if let Some(rec) = step_controls.as_mut() {
            rec[m] = controls.clone();
        }
    }
    let table = ValueTable {
        values,
        controls: controls
            .iter()
            .map(|c| c.iter().map(|&on| if on { u_max } else { 0.0 }).collect())
            .collect(),
    };
    Ok(FhValueResult {
        space,
        table,
        step_controls,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IhValueResult {
    pub space: StateSpace,
    pub table: ValueTable,
    pub iterations: usize,
}

/// Value iteration on the uniformized chain with
/// `Λ = N (γ_max + m_u u_max) + 1`, until the sup-norm update is below
/// `tol`.
pub fn vi_infinite_horizon(
    net: &QueueNetwork,
    costs: &CostSpec,
    total: u64,
    tol: f64,
    max_iter: usize,
) -> Result<IhValueResult, OracleError> {
    costs.validate(net)?;
    let reach = net.validate_reachability();
    if !reach.ok {
        return Err(OracleError::NotAbsorbing(reach.unreachable_queues));
    }
    let lambda = rate_bound(net, total) + 1.0;
    let space = StateSpace::new(net.n(), total);
    let trs = transitions(net, &space);
    let holding: Vec<f64> = space
        .states()
        .iter()
        .map(|x| x.iter().zip(&costs.q).map(|(&xi, q)| q * xi as f64).sum())
        .collect();
    let u_max = net.u_max();
    let mut values = vec![0.0; space.len()];
    let mut next = vec![0.0; space.len()];
    let mut controls = vec![vec![false; net.m_u()]; space.len()];
    for iteration in 1..=max_iter {
        let mut change = 0.0_f64;
        for (i, tr) in trs.iter().enumerate() {
            let (drift, routing) =
                minimized_drift(tr, &values, values[i], &costs.v, u_max, &mut controls[i]);
            next[i] = values[i] + (holding[i] + routing + drift) / lambda;
            change = change.max((next[i] - values[i]).abs());
        }
        std::mem::swap(&mut values, &mut next);
        if change < tol {
            let table = ValueTable {
                values,
                controls: controls
                    .iter()
                    .map(|c| c.iter().map(|&on| if on { u_max } else { 0.0 }).collect())
                    .collect(),
            };
            return Ok(IhValueResult {
                space,
                table,
                iterations: iteration,
            });
        }
    }
    Err(OracleError::NoConvergence(max_iter))
}

/// Propagates `p0` through `dp/dt = p Q(u(t))` with RK4, restarting at each
/// policy switch. Tiny negative entries are clipped and the result
/// renormalized.
pub fn forward_kolmogorov(
    net: &QueueNetwork,
    policy: &BangBangPolicy,
    space: &StateSpace,
    p0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<Vec<f64>, OracleError> {
    let mass: f64 = p0.iter().sum();
    if p0.len() != space.len() || (mass - 1.0).abs() > 1e-9 || p0.iter().any(|&p| p < 0.0) {
        return Err(OracleError::BadDistribution {
            expected: space.len(),
        });
    }
    if policy.m_u() != net.m_u() {
        return Err(OracleError::DimensionMismatch {
            what: "policy controls",
            expected: net.m_u(),
            got: policy.m_u(),
        });
    }
    if let Some(h) = policy.horizon() {
        if t_end > h {
            return Err(OracleError::TimeOutOfRange {
                t: t_end,
                horizon: h,
            });
        }
    }
    let bound = rate_bound(net, space.total());
    if !(dt > 0.0 && dt * bound <= 2.5) {
        return Err(OracleError::StepTooLarge {
            dt,
            rate_bound: bound,
        });
    }
    let mut cuts = vec![0.0];
    cuts.extend(policy.breakpoints(t_end));
    cuts.push(t_end);
    let mut p = p0.to_vec();
    let axpy = |a: &[f64], k: &[f64], s: f64| -> Vec<f64> {
        a.iter().zip(k).map(|(ai, ki)| ai + s * ki).collect()
    };
    for w in cuts.windows(2) {
        let q = build_generator(net, space, &policy.evaluate_unchecked(w[0]))?;
        let steps = ((w[1] - w[0]) / dt).ceil().max(1.0) as usize;
        let h = (w[1] - w[0]) / steps as f64;
        for _ in 0..steps {
            let k1 = q.apply_left(&p);
            let k2 = q.apply_left(&axpy(&p, &k1, h / 2.0));
            let k3 = q.apply_left(&axpy(&p, &k2, h / 2.0));
            let k4 = q.apply_left(&axpy(&p, &k3, h));
            for i in 0..p.len() {
                p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
    let drift = (p.iter().sum::<f64>() - 1.0).abs();
    let most_negative = p.iter().fold(0.0_f64, |m, &v| m.min(v));
    if drift > 1e-6 || most_negative < -1e-6 {
        return Err(OracleError::MassDrift {
            drift: drift.max(-most_negative),
        });
    }
    for v in &mut p {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mass: f64 = p.iter().sum();
    for v in &mut p {
        *v /= mass;
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjbResidual {
    /// Largest absolute value of the HJB bracket.
    pub max_abs: f64,
    /// Largest bracket divided by the magnitude of its terms.
    pub max_relative: f64,
}

/// HJB bracket of `V(x, t) = y(t) · x` at the given samples:
///
/// ```text
/// ∂V/∂t + q·x + Σ_exits γ x_i (y·r_e) + min_u Σ_k u_k x_src (v_k + y·r_k)
/// ```
///
/// `∂V/∂t` is obtained by differentiating the stored trajectory in time,
/// never from the ODE right-hand side, so a trajectory that does not solve
/// the costate equation shows a nonzero residual.
pub fn hjb_residual(
    net: &QueueNetwork,
    costs: &CostSpec,
    traj: &CostateTrajectory,
    samples: &[(NetworkState, f64)],
) -> Result<HjbResidual, OracleError> {
    costs.validate(net)?;
    let mut out = HjbResidual {
        max_abs: 0.0,
        max_relative: 0.0,
    };
    let u_max = net.u_max();
    for (x, t) in samples {
        net.check_state(x)?;
        let (y, ydot) = traj.smooth_interpolate(*t)?;
        let xf = x.to_f64();
        let dot = |a: &[f64]| -> f64 { a.iter().zip(&xf).map(|(p, q)| p * q).sum() };
        let time_term = dot(&ydot);
        let holding = dot(&costs.q);
        let mut bracket = time_term + holding;
        let mut scale = time_term.abs() + holding;
        for e in net.exits() {
            let term = e.rate * xf[e.queue] * y[e.queue];
            bracket -= term;
            scale += term.abs();
        }
        for (r, vk) in net.routes().iter().zip(&costs.v) {
            let jump = y[r.to] - y[r.from];
            let coeff = u_max * xf[r.from] * (vk + jump);
            bracket += coeff.min(0.0);
            scale += u_max * xf[r.from] * (vk + jump.abs());
        }
        out.max_abs = out.max_abs.max(bracket.abs());
        if scale > 0.0 {
            out.max_relative = out.max_relative.max(bracket.abs() / scale);
        }
    }
    Ok(out)
}
