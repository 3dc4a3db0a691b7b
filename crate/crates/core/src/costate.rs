//! Costate solvers.
//!
//! With linear stage and terminal costs the value function is linear in the
//! state, `V(x, t) = y(t) · x`. The coefficient vector `y` solves a backward
//! ODE (finite horizon) or a piecewise-linear algebraic system (infinite
//! horizon). Writing `τ = T - t` and `s_k = y · r_k + v_k` for route `k`
//! (from queue `i`), the finite-horizon costate obeys, per queue `i`,
//!
//! ```text
//! dy_i/dτ = q_i - (Σ exit rates at i) y_i + u_max Σ_{k from i} min(s_k, 0)
//! y(τ = 0) = c
//! ```
//!
//! and the infinite-horizon costate is a root of the same right-hand side.

use std::fs;
use std::path::Path;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{NetworkState, QueueNetwork};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostateError {
    #[error("expected {expected} {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("cost coefficient {what}[{index}] = {value} must be finite and non-negative")]
    NegativeCost {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("step size must satisfy 0 < dt <= T, got {0}")]
    BadStep(f64),
    #[error("switch tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("non-finite costate at t = {t}; reduce dt")]
    NonFinite { t: f64 },
    #[error("costate component {index} became negative ({value}) at t = {t}")]
    NegativeCostate { index: usize, value: f64, t: f64 },
    #[error("queues {0:?} cannot reach an exit; the infinite-horizon cost is unbounded")]
    NotAbsorbing(Vec<usize>),
    #[error("no consistent active set: the stationarity equation has no solution for this model")]
    NoConsistentActiveSet,
    #[error("every candidate active set gave a singular system: dynamics are not absorbing")]
    AllCandidatesSingular,
    #[error("active-set enumeration over {0} controls is too large")]
    TooManyControls(usize),
    #[error("network has no exit events")]
    NoExits,
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("malformed costate data: {0}")]
    Malformed(String),
    #[error("{0}")]
    Io(String),
}

/// Linear cost coefficients and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    /// Holding cost per unit per time, one per queue.
    pub q: Vec<f64>,
    /// Routing cost per routed-unit rate, one per route.
    pub v: Vec<f64>,
    /// Terminal cost per unit, one per queue.
    pub c: Vec<f64>,
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl CostSpec {
    pub fn new(q: Vec<f64>, v: Vec<f64>, c: Vec<f64>, horizon: f64) -> Self {
        Self { q, v, c, horizon }
    }

    pub fn from_json(text: &str) -> Result<Self, CostateError> {
        serde_json::from_str(text).map_err(|e| CostateError::Malformed(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CostateError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CostateError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks dimensions against `net` and sign constraints. The horizon is
    /// checked separately since infinite-horizon solves ignore it.
    pub fn validate(&self, net: &QueueNetwork) -> Result<(), CostateError> {
        for (what, vals, expected) in [
            ("q", &self.q, net.n()),
            ("v", &self.v, net.m_u()),
            ("c", &self.c, net.n()),
        ] {
            if vals.len() != expected {
                return Err(CostateError::DimensionMismatch {
                    what,
                    expected,
                    got: vals.len(),
                });
            }
            if let Some((index, &value)) = vals
                .iter()
                .enumerate()
                .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
            {
                return Err(CostateError::NegativeCost { what, index, value });
            }
        }
        Ok(())
    }

    fn validate_horizon(&self) -> Result<(), CostateError> {
        if self.horizon > 0.0 && self.horizon.is_finite() {
            Ok(())
        } else {
            Err(CostateError::BadHorizon(self.horizon))
        }
    }
}

/// Right-hand side of the costate ODE in reversed time `τ = T - t`.
pub fn costate_rhs(net: &QueueNetwork, costs: &CostSpec, y: &[f64]) -> Vec<f64> {
    let mut out = costs.q.clone();
    for ev in net.exits() {
        out[ev.queue] -= ev.rate * y[ev.queue];
    }
    let u_max = net.u_max();
    for (route, &v) in net.routes().iter().zip(&costs.v) {
        let s = y[route.to] - y[route.from] + v;
        if s < 0.0 {
            out[route.from] += u_max * s;
        }
    }
    out
}

/// Routes whose switching value is strictly negative (control ON).
fn active_mask(net: &QueueNetwork, costs: &CostSpec, y: &[f64]) -> Vec<bool> {
    net.switching_values(y, &costs.v)
        .into_iter()
        .map(|s| s < 0.0)
        .collect()
}

fn rk4_step(net: &QueueNetwork, costs: &CostSpec, y: &[f64], h: f64) -> Vec<f64> {
    let axpy = |a: &[f64], k: &[f64], s: f64| -> Vec<f64> {
        a.iter().zip(k).map(|(ai, ki)| ai + s * ki).collect()
    };
    let k1 = costate_rhs(net, costs, y);
    let k2 = costate_rhs(net, costs, &axpy(y, &k1, h / 2.0));
    let k3 = costate_rhs(net, costs, &axpy(y, &k2, h / 2.0));
    let k4 = costate_rhs(net, costs, &axpy(y, &k3, h));
    (0..y.len())
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Finite-horizon solver settings. `None` picks the defaults
/// `dt = 1e-3 T` and `switch_tol = 1e-8 T`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FhOptions {
    pub dt: Option<f64>,
    pub switch_tol: Option<f64>,
}

impl FhOptions {
    pub fn resolve(&self, horizon: f64) -> (f64, f64) {
        (
            self.dt.unwrap_or(1e-3 * horizon),
            self.switch_tol.unwrap_or(1e-8 * horizon),
        )
    }
}

/// Time-gridded finite-horizon costate with located switching times.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateTrajectory {
    horizon: f64,
    grid: Vec<f64>,
    y: Vec<Vec<f64>>,
    switch_times: Vec<Vec<f64>>,
    /// Grid indices closest to a switch; the costate is only piecewise
    /// smooth across them.
    breaks: Vec<usize>,
}

impl CostateTrajectory {
    /// Assembles a trajectory from raw parts, checking shape invariants.
    pub fn from_parts(
        horizon: f64,
        grid: Vec<f64>,
        y: Vec<Vec<f64>>,
        mut switch_times: Vec<Vec<f64>>,
    ) -> Result<Self, CostateError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(CostateError::BadHorizon(horizon));
        }
        if grid.len() < 2 || grid.len() != y.len() {
            return Err(CostateError::Malformed(
                "grid and y must have equal length of at least 2".into(),
            ));
        }
        if grid[0] != 0.0 || *grid.last().unwrap() != horizon {
            return Err(CostateError::Malformed(
                "grid must start at 0 and end at the horizon".into(),
            ));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CostateError::Malformed(
                "grid must be strictly increasing".into(),
            ));
        }
        let n = y[0].len();
        if y.iter().any(|row| row.len() != n) {
            return Err(CostateError::Malformed("ragged y samples".into()));
        }
        let mut breaks = Vec::new();
        for times in &mut switch_times {
            times.sort_by(f64::total_cmp);
            if times.iter().any(|&t| !(t > 0.0 && t < horizon)) {
                return Err(CostateError::Malformed(
                    "switch times must lie strictly inside (0, T)".into(),
                ));
            }
            for &t in times.iter() {
                let j = grid.partition_point(|&g| g < t);
                let nearest = if j == 0 {
                    0
                } else if j == grid.len() || t - grid[j - 1] < grid[j] - t {
                    j - 1
                } else {
                    j
                };
                breaks.push(nearest);
            }
        }
        breaks.sort_unstable();
        breaks.dedup();
        Ok(Self {
            horizon,
            grid,
            y,
            switch_times,
            breaks,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.y
    }

    pub fn switch_times(&self) -> &[Vec<f64>] {
        &self.switch_times
    }

    /// Value coefficients at `t = 0`.
    pub fn initial(&self) -> &[f64] {
        &self.y[0]
    }

    fn check_time(&self, t: f64) -> Result<(), CostateError> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(CostateError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            })
        }
    }

    /// Piecewise-linear interpolation of `y` at time `t`.
    pub fn y_at(&self, t: f64) -> Result<Vec<f64>, CostateError> {
        self.check_time(t)?;
        let j = self.grid.partition_point(|&g| g <= t);
        if j >= self.grid.len() {
            return Ok(self.y[self.grid.len() - 1].clone());
        }
        let (t0, t1) = (self.grid[j - 1], self.grid[j]);
        let w = (t - t0) / (t1 - t0);
        Ok(self.y[j - 1]
            .iter()
            .zip(&self.y[j])
            .map(|(a, b)| a + w * (b - a))
            .collect())
    }

    /// `V(x, t) = y(t) · x`.
    pub fn value_at(&self, x: &NetworkState, t: f64) -> Result<f64, CostateError> {
        Ok(x.dot(&self.y_at(t)?))
    }

    /// High-order local interpolation of `y` and `dy/dt` at `t`, using a
    /// degree-4 Lagrange polynomial through nearby grid nodes that lie in
    /// the same smooth piece as `t`. Uses only the stored samples.
    pub fn smooth_interpolate(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>), CostateError> {
        self.check_time(t)?;
        let last = self.grid.len() - 1;
        let j = self.grid.partition_point(|&g| g <= t).clamp(1, last);
        // Piece [lo, hi] of node indices containing the interval [j-1, j].
        let lo = self
            .breaks
            .iter()
            .rev()
            .find(|&&b| b < j)
            .copied()
            .unwrap_or(0);
        let hi = self
            .breaks
            .iter()
            .find(|&&b| b >= j)
            .copied()
            .unwrap_or(last);
        const POINTS: usize = 5;
        let width = (hi - lo + 1).min(POINTS);
        let start = (j - 1)
            .saturating_sub((width - 1) / 2)
            .max(lo)
            .min(hi + 1 - width);
        let nodes = &self.grid[start..start + width];
        let n = self.y[0].len();
        let mut value = vec![0.0; n];
        let mut slope = vec![0.0; n];
        for a in 0..width {
            let (l, dl) = lagrange_basis(nodes, a, t);
            for i in 0..n {
                value[i] += l * self.y[start + a][i];
                slope[i] += dl * self.y[start + a][i];
            }
        }
        Ok((value, slope))
    }

    pub fn to_file(&self) -> CostateFile {
        CostateFile::FiniteHorizon {
            horizon: self.horizon,
            grid: self.grid.clone(),
            y: self.y.clone(),
            switch_times: self.switch_times.clone(),
            value_coefficients: self.y[0].clone(),
        }
    }
}

/// Lagrange basis polynomial `a` on `nodes` and its derivative at `t`.
fn lagrange_basis(nodes: &[f64], a: usize, t: f64) -> (f64, f64) {
    let ta = nodes[a];
    let mut value = 1.0;
    for (m, &tm) in nodes.iter().enumerate() {
        if m != a {
            value *= (t - tm) / (ta - tm);
        }
    }
    let mut slope = 0.0;
    for (m, &tm) in nodes.iter().enumerate() {
        if m == a {
            continue;
        }
        let mut term = 1.0 / (ta - tm);
        for (l, &tl) in nodes.iter().enumerate() {
            if l != a && l != m {
                term *= (t - tl) / (ta - tl);
            }
        }
        slope += term;
    }
    (value, slope)
}

/// Integrates the finite-horizon costate backward from `y(T) = c` with
/// fixed-step RK4, locating every sign change of a switching function by
/// bisection and inserting the located point into the grid.
pub fn solve_costate_fh(
    net: &QueueNetwork,
    costs: &CostSpec,
    opts: FhOptions,
) -> Result<CostateTrajectory, CostateError> {
    costs.validate(net)?;
    costs.validate_horizon()?;
    let horizon = costs.horizon;
    let (dt, switch_tol) = opts.resolve(horizon);
    if dt.is_nan() || dt <= 0.0 || dt > horizon {
        return Err(CostateError::BadStep(dt));
    }
    if switch_tol.is_nan() || switch_tol <= 0.0 {
        return Err(CostateError::BadTolerance(switch_tol));
    }
    let reach = net.validate_reachability();
    if !reach.ok {
        log::warn!(
            "queues {:?} cannot reach an exit; finite-horizon solve continues",
            reach.unreachable_queues
        );
    }

    let steps = (horizon / dt).ceil().max(1.0) as usize;
    let h = horizon / steps as f64;
    let mut taus = vec![0.0];
    let mut ys = vec![costs.c.clone()];
    let mut switches: Vec<Vec<f64>> = vec![Vec::new(); net.m_u()];

    let mut tau = 0.0;
    let mut y = costs.c.clone();
    let mut mask = active_mask(net, costs, &y);
    for j in 1..=steps {
        let target = if j == steps { horizon } else { j as f64 * h };
        loop {
            let step = target - tau;
            let y_end = rk4_step(net, costs, &y, step);
            if y_end.iter().any(|v| !v.is_finite()) {
                return Err(CostateError::NonFinite {
                    t: horizon - target,
                });
            }
            let mask_end = active_mask(net, costs, &y_end);
            if mask_end == mask {
                tau = target;
                y = y_end;
                break;
            }
            let (mut lo, mut hi) = (0.0, step);
            let mut y_hi = y_end;
            let mut mask_hi = mask_end;
            while hi - lo > switch_tol {
                let mid = 0.5 * (lo + hi);
                let y_mid = rk4_step(net, costs, &y, mid);
                let mask_mid = active_mask(net, costs, &y_mid);
                if mask_mid == mask {
                    lo = mid;
                } else {
                    hi = mid;
                    y_hi = y_mid;
                    mask_hi = mask_mid;
                }
            }
            let t_switch = horizon - (tau + 0.5 * (lo + hi));
            for (k, (before, after)) in mask.iter().zip(&mask_hi).enumerate() {
                if before != after {
                    switches[k].push(t_switch);
                }
            }
            mask = mask_hi;
            if hi == step {
                tau = target;
                y = y_hi;
                break;
            }
            tau += hi;
            y = y_hi;
            taus.push(tau);
            ys.push(y.clone());
        }
        taus.push(tau);
        ys.push(y.clone());
    }

    let scale = 1.0 + ys.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    for (tau, row) in taus.iter().zip(&ys) {
        if let Some((index, &value)) = row.iter().enumerate().find(|(_, v)| **v < -1e-9 * scale) {
            return Err(CostateError::NegativeCostate {
                index,
                value,
                t: horizon - tau,
            });
        }
    }

    let grid: Vec<f64> = taus
        .iter()
        .rev()
        .map(|&tau| if tau == horizon { 0.0 } else { horizon - tau })
        .collect();
    ys.reverse();
    for times in &mut switches {
        times.reverse();
    }
    CostateTrajectory::from_parts(horizon, grid, ys, switches)
}

/// Stationary costate for the infinite-horizon problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IhSolution {
    pub y: Vec<f64>,
    /// Routes switched ON (`s_k < 0`), ascending.
    pub active_set: Vec<usize>,
    /// Set when the solution sits on a tie (`s_k ≈ 0`) or more than one
    /// active set is consistent.
    pub degenerate: bool,
}

impl IhSolution {
    pub fn value_at(&self, x: &NetworkState) -> f64 {
        x.dot(&self.y)
    }

    pub fn to_file(&self) -> CostateFile {
        CostateFile::InfiniteHorizon {
            y: self.y.clone(),
            active_set: self.active_set.clone(),
            degenerate: self.degenerate,
            value_coefficients: self.y.clone(),
        }
    }
}

const MAX_ENUMERATED_CONTROLS: usize = 24;

/// Solves the infinite-horizon stationarity equation by enumerating active
/// sets in order of increasing size (lexicographic within a size). For a
/// candidate set `S` the equation is linear:
///
/// ```text
/// (R_E Γ E + u_max Σ_{k∈S} r_k h_kᵀ)ᵀ y = -q - u_max Σ_{k∈S} v_k h_k
/// ```
///
/// and `S` is accepted when the solved `y` switches exactly the routes in
/// `S` on.
pub fn solve_costate_ih(net: &QueueNetwork, costs: &CostSpec) -> Result<IhSolution, CostateError> {
    costs.validate(net)?;
    let reach = net.validate_reachability();
    if !reach.ok {
        return Err(CostateError::NotAbsorbing(reach.unreachable_queues));
    }
    let m_u = net.m_u();
    if m_u > MAX_ENUMERATED_CONTROLS {
        return Err(CostateError::TooManyControls(m_u));
    }
    let n = net.n();
    let u_max = net.u_max();
    let base = net.exit_operator();
    let r_d = net.r_d().map(f64::from);
    let h = net.h().map(f64::from);
    let v_max = costs.v.iter().fold(0.0_f64, |m, v| m.max(*v));

    let mut found: Option<IhSolution> = None;
    let mut any_nonsingular = false;
    for size in 0..=m_u {
        for set in (0..m_u).combinations(size) {
            let mut matrix: DMatrix<f64> = base.clone();
            let mut rhs = DVector::from_iterator(n, costs.q.iter().map(|q| -q));
            for &k in &set {
                matrix += u_max * r_d.column(k) * h.row(k);
                rhs -= u_max * costs.v[k] * h.row(k).transpose();
            }
            let Some(y) = matrix.transpose().lu().solve(&rhs) else {
                continue;
            };
            if y.iter().any(|v| !v.is_finite()) {
                continue;
            }
            any_nonsingular = true;
            let y: Vec<f64> = y.iter().copied().collect();
            let s = net.switching_values(&y, &costs.v);
            let tol = 1e-12 * (1.0 + v_max + y.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
            let consistent = s.iter().enumerate().all(|(k, &sk)| {
                if set.contains(&k) {
                    sk < tol
                } else {
                    sk > -tol
                }
            });
            if !consistent {
                continue;
            }
            match &mut found {
                None => {
                    let tie = s.iter().any(|sk| sk.abs() <= tol);
                    found = Some(IhSolution {
                        y,
                        active_set: set,
                        degenerate: tie,
                    });
                }
                Some(first) => {
                    first.degenerate = true;
                    return Ok(found.unwrap());
                }
            }
        }
    }
    match found {
        Some(sol) => Ok(sol),
        None if !any_nonsingular => Err(CostateError::AllCandidatesSingular),
        None => Err(CostateError::NoConsistentActiveSet),
    }
}

/// Infinite-horizon costate from a long finite-horizon integration with
/// zero terminal cost (`T = 100 / γ_min`). Cross-check for
/// [`solve_costate_ih`].
pub fn solve_costate_ih_long_horizon(
    net: &QueueNetwork,
    costs: &CostSpec,
) -> Result<IhSolution, CostateError> {
    costs.validate(net)?;
    let reach = net.validate_reachability();
    if !reach.ok {
        return Err(CostateError::NotAbsorbing(reach.unreachable_queues));
    }
    let gamma_min = net.min_exit_rate().ok_or(CostateError::NoExits)?;
    let long = CostSpec {
        c: vec![0.0; net.n()],
        horizon: 100.0 / gamma_min,
        ..costs.clone()
    };
    let traj = solve_costate_fh(net, &long, FhOptions::default())?;
    let y = traj.initial().to_vec();
    let active_set = net
        .switching_values(&y, &costs.v)
        .iter()
        .enumerate()
        .filter(|(_, s)| **s < 0.0)
        .map(|(k, _)| k)
        .collect();
    Ok(IhSolution {
        y,
        active_set,
        degenerate: false,
    })
}

/// On-disk costate document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostateFile {
    FiniteHorizon {
        horizon: f64,
        grid: Vec<f64>,
        y: Vec<Vec<f64>>,
        switch_times: Vec<Vec<f64>>,
        value_coefficients: Vec<f64>,
    },
    InfiniteHorizon {
        y: Vec<f64>,
        active_set: Vec<usize>,
        degenerate: bool,
        value_coefficients: Vec<f64>,
    },
}

/// A loaded costate of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Costate {
    FiniteHorizon(CostateTrajectory),
    InfiniteHorizon(IhSolution),
}

impl CostateFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("costate serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, CostateError> {
        serde_json::from_str(text).map_err(|e| CostateError::Malformed(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CostateError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CostateError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn into_costate(self) -> Result<Costate, CostateError> {
        match self {
            CostateFile::FiniteHorizon {
                horizon,
                grid,
                y,
                switch_times,
                ..
            } => CostateTrajectory::from_parts(horizon, grid, y, switch_times)
                .map(Costate::FiniteHorizon),
            CostateFile::InfiniteHorizon {
                y,
                active_set,
                degenerate,
                ..
            } => Ok(Costate::InfiniteHorizon(IhSolution {
                y,
                active_set,
                degenerate,
            })),
        }
    }
}
