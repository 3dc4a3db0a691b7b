//! First-moment oracle.
//!
//! Every event rate is linear in the state, so taking expectations in the
//! master equation closes at the first moment:
//!
//! ```text
//! d/dt E[x] = Σ_events r_i E[W_i(x, u)] = (R_E Γ E + R_D U H) E[x] = A(u) μ
//! ```
//!
//! For an open-loop policy `U(t)` is deterministic, and the stage cost
//! `q·x + v·U H x` is linear in `x`, so the expected cost of the policy is
//! exactly `∫ (q + Hᵀ U v) · μ dt + c · μ(T)`. None of this touches the
//! costate machinery, which makes it an independent check of `y(0) · x0`.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::costate::CostSpec;
use crate::network::QueueNetwork;
use crate::policy::BangBangPolicy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeanOdeError {
    #[error("expected {expected} {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("end time {t_end} must be positive and within the policy horizon {horizon:?}")]
    BadEndTime { t_end: f64, horizon: Option<f64> },
    #[error("non-finite mean at t = {t}")]
    NonFinite { t: f64 },
}

/// `A(u) = R_E Γ E + R_D diag(u) H`.
pub fn mean_dynamics_matrix(net: &QueueNetwork, u: &[f64]) -> DMatrix<f64> {
    let u_diag = DMatrix::from_diagonal(&DVector::from_column_slice(u));
    net.exit_operator() + net.r_d().map(f64::from) * u_diag * net.h().map(f64::from)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanTrajectory {
    pub grid: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
}

impl MeanTrajectory {
    pub fn final_mean(&self) -> &[f64] {
        self.mu.last().expect("non-empty trajectory")
    }

    /// Linear interpolation of the mean at `t`.
    pub fn mean_at(&self, t: f64) -> Vec<f64> {
        let j = self.grid.partition_point(|&g| g <= t);
        if j == 0 {
            return self.mu[0].clone();
        }
        if j >= self.grid.len() {
            return self.final_mean().to_vec();
        }
        let (t0, t1) = (self.grid[j - 1], self.grid[j]);
        let w = (t - t0) / (t1 - t0);
        self.mu[j - 1]
            .iter()
            .zip(&self.mu[j])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    /// CSV: `time,mu_1..mu_n`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let n = self.mu.first().map_or(0, Vec::len);
        let header: Vec<String> = (1..=n).map(|i| format!("mu_{i}")).collect();
        writeln!(out, "time,{}", header.join(","))?;
        for (t, mu) in self.grid.iter().zip(&self.mu) {
            let row: Vec<String> = mu.iter().map(f64::to_string).collect();
            writeln!(out, "{t},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Grid of one constant-control segment: an even number of equal steps no
/// longer than `dt` (even so that composite Simpson applies).
fn segment_steps(len: f64, dt: f64) -> usize {
    let m = (len / dt).ceil().max(1.0) as usize;
    m + m % 2
}

struct Segment {
    start: f64,
    end: f64,
    u: Vec<f64>,
}

/// A segment with its time nodes and the mean at each node.
type SegmentSamples = (Segment, Vec<f64>, Vec<DVector<f64>>);

fn segments(policy: &BangBangPolicy, t_end: f64) -> Vec<Segment> {
    let mut cuts = vec![0.0];
    cuts.extend(policy.breakpoints(t_end));
    cuts.push(t_end);
    cuts.windows(2)
        .map(|w| Segment {
            start: w[0],
            end: w[1],
            u: policy.evaluate_unchecked(w[0]),
        })
        .collect()
}

fn check(
    net: &QueueNetwork,
    policy: &BangBangPolicy,
    x0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<(), MeanOdeError> {
    if x0.len() != net.n() {
        return Err(MeanOdeError::DimensionMismatch {
            what: "initial means",
            expected: net.n(),
            got: x0.len(),
        });
    }
    if policy.m_u() != net.m_u() {
        return Err(MeanOdeError::DimensionMismatch {
            what: "policy controls",
            expected: net.m_u(),
            got: policy.m_u(),
        });
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(MeanOdeError::BadStep(dt));
    }
    let within = policy.horizon().is_none_or(|h| t_end <= h);
    if !(t_end > 0.0 && t_end.is_finite() && within) {
        return Err(MeanOdeError::BadEndTime {
            t_end,
            horizon: policy.horizon(),
        });
    }
    Ok(())
}

/// Per-segment RK4 samples: `(segment, times, means)`.
fn integrate_segments(
    net: &QueueNetwork,
    policy: &BangBangPolicy,
    x0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<Vec<SegmentSamples>, MeanOdeError> {
    check(net, policy, x0, t_end, dt)?;
    let mut mu = DVector::from_column_slice(x0);
    let mut out = Vec::new();
    for seg in segments(policy, t_end) {
        let a = mean_dynamics_matrix(net, &seg.u);
        let m = segment_steps(seg.end - seg.start, dt);
        let h = (seg.end - seg.start) / m as f64;
        let mut times = Vec::with_capacity(m + 1);
        let mut values = Vec::with_capacity(m + 1);
        times.push(seg.start);
        values.push(mu.clone());
        for i in 1..=m {
            let k1 = &a * &mu;
            let k2 = &a * (&mu + &k1 * (h / 2.0));
            let k3 = &a * (&mu + &k2 * (h / 2.0));
            let k4 = &a * (&mu + &k3 * h);
            mu += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            let t = if i == m {
                seg.end
            } else {
                seg.start + i as f64 * h
            };
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(MeanOdeError::NonFinite { t });
            }
            times.push(t);
            values.push(mu.clone());
        }
        out.push((seg, times, values));
    }
    Ok(out)
}

/// Integrates `dμ/dt = A(u(t)) μ` from `μ(0) = x0` to `t_end` with RK4,
/// restarting at every policy switch.
pub fn integrate_mean(
    net: &QueueNetwork,
    policy: &BangBangPolicy,
    x0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<MeanTrajectory, MeanOdeError> {
    let mut grid = Vec::new();
    let mut mu = Vec::new();
    for (_, times, values) in integrate_segments(net, policy, x0, t_end, dt)? {
        // Segment starts repeat the previous segment's end.
        let skip = usize::from(!grid.is_empty());
        grid.extend(times.into_iter().skip(skip));
        mu.extend(
            values
                .iter()
                .skip(skip)
                .map(|v| v.iter().copied().collect()),
        );
    }
    Ok(MeanTrajectory { grid, mu })
}

/// Exact expected cost of an open-loop policy over `[0, t_end]`, with
/// composite Simpson quadrature on each constant-control segment.
pub fn expected_cost(
    net: &QueueNetwork,
    policy: &BangBangPolicy,
    costs: &CostSpec,
    x0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<f64, MeanOdeError> {
    let pieces = integrate_segments(net, policy, x0, t_end, dt)?;
    let mut total = 0.0;
    let mut last = DVector::from_column_slice(x0);
    for (seg, times, values) in &pieces {
        // Cost rate coefficients q + Hᵀ U v on this segment.
        let mut weight = costs.q.clone();
        for ((route, uk), vk) in net.routes().iter().zip(&seg.u).zip(&costs.v) {
            weight[route.from] += uk * vk;
        }
        let w = DVector::from_vec(weight);
        let m = times.len() - 1;
        let h = (seg.end - seg.start) / m as f64;
        let mut acc = 0.0;
        for (i, mu) in values.iter().enumerate() {
            let coeff = if i == 0 || i == m {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += coeff * w.dot(mu);
        }
        total += acc * h / 3.0;
        last = values[m].clone();
    }
    let terminal: f64 = costs.c.iter().zip(last.iter()).map(|(c, m)| c * m).sum();
    Ok(total + terminal)
}
