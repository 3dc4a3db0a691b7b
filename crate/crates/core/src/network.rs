//! Queue network data model.
//!
//! A network is a set of `n` M/M/∞ queues with two kinds of events:
//!
//! * exit events: a unit leaves queue `i` at rate `gamma * x_i`;
//! * routing events: a unit moves from queue `i` to queue `j` at rate
//!   `u_k * x_i`, where `u_k ∈ [0, u_max]` is the control for route `k`.
//!
//! Event index order everywhere in the crate is exits first (`0..m_e`),
//! then routes (`m_e..m_e + m_u`), matching the column order of
//! `[R_E | R_D]`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("network must contain at least one queue")]
    NoQueues,
    #[error("queue index {index} out of range (network has {n} queues)")]
    QueueOutOfRange { index: usize, n: usize },
    #[error("unknown queue name `{0}`")]
    UnknownQueue(String),
    #[error("queue name `{0}` is used more than once")]
    DuplicateQueueName(String),
    #[error("route {from} -> {to} has the same source and destination")]
    SelfLoop { from: usize, to: usize },
    #[error("duplicate route {from} -> {to}")]
    DuplicateRoute { from: usize, to: usize },
    #[error("non-positive rate {value} for {what}")]
    NonPositiveRate { what: String, value: f64 },
    #[error("expected {expected} {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("control {index} = {value} outside [0, {u_max}]")]
    ControlOutOfBounds {
        index: usize,
        value: f64,
        u_max: f64,
    },
    #[error("failed to read network file: {0}")]
    Io(String),
    #[error("malformed network description: {0}")]
    Parse(String),
}

/// One exit event: units leave `queue` at rate `rate` each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitEvent {
    pub queue: usize,
    pub rate: f64,
}

/// One controlled routing event from `from` to `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Route {
    pub from: usize,
    pub to: usize,
}

/// Declarative network description, as stored in the JSON network file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDescription {
    pub queues: Vec<QueueDescription>,
    #[serde(default)]
    pub routes: Vec<RouteDescription>,
    pub u_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueDescription {
    pub name: String,
    /// Omitted or zero means the queue has no exit event.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteDescription {
    pub from: String,
    pub to: String,
}

impl NetworkDescription {
    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        serde_json::from_str(text).map_err(|e| NetworkError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| NetworkError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Immutable queue network with its structural matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueNetwork {
    names: Vec<String>,
    exits: Vec<ExitEvent>,
    routes: Vec<Route>,
    u_max: f64,
    r_e: DMatrix<i32>,
    r_d: DMatrix<i32>,
    h: DMatrix<i32>,
    e: DMatrix<i32>,
    gamma: DMatrix<f64>,
}

/// Builds a network from its declarative description.
///
/// Route order in the description defines the control index order.
pub fn build_network(desc: &NetworkDescription) -> Result<QueueNetwork, NetworkError> {
    let mut index = HashMap::with_capacity(desc.queues.len());
    for (i, q) in desc.queues.iter().enumerate() {
        if index.insert(q.name.as_str(), i).is_some() {
            return Err(NetworkError::DuplicateQueueName(q.name.clone()));
        }
    }
    let mut exits = Vec::new();
    for (i, q) in desc.queues.iter().enumerate() {
        match q.exit_rate {
            None => {}
            Some(0.0) => {}
            Some(r) if r > 0.0 && r.is_finite() => exits.push((i, r)),
            Some(r) => {
                return Err(NetworkError::NonPositiveRate {
                    what: format!("exit rate of queue `{}`", q.name),
                    value: r,
                })
            }
        }
    }
    let lookup = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| NetworkError::UnknownQueue(name.to_string()))
    };
    let routes = desc
        .routes
        .iter()
        .map(|r| Ok((lookup(&r.from)?, lookup(&r.to)?)))
        .collect::<Result<Vec<_>, NetworkError>>()?;
    let names = desc.queues.iter().map(|q| q.name.clone()).collect();
    QueueNetwork::with_names(names, &exits, &routes, desc.u_max)
}

impl QueueNetwork {
    /// Index-based constructor. Queue names default to `X1..Xn`.
    pub fn new(
        n: usize,
        exits: &[(usize, f64)],
        routes: &[(usize, usize)],
        u_max: f64,
    ) -> Result<Self, NetworkError> {
        let names = (1..=n).map(|i| format!("X{i}")).collect();
        Self::with_names(names, exits, routes, u_max)
    }

    fn with_names(
        names: Vec<String>,
        exits: &[(usize, f64)],
        routes: &[(usize, usize)],
        u_max: f64,
    ) -> Result<Self, NetworkError> {
        let n = names.len();
        if n == 0 {
            return Err(NetworkError::NoQueues);
        }
        if !(u_max > 0.0 && u_max.is_finite()) {
            return Err(NetworkError::NonPositiveRate {
                what: "u_max".into(),
                value: u_max,
            });
        }
        let check = |index: usize| {
            if index < n {
                Ok(())
            } else {
                Err(NetworkError::QueueOutOfRange { index, n })
            }
        };
        for &(queue, rate) in exits {
            check(queue)?;
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(NetworkError::NonPositiveRate {
                    what: format!("exit event at queue {queue}"),
                    value: rate,
                });
            }
        }
        let mut seen = HashSet::new();
        for &(from, to) in routes {
            check(from)?;
            check(to)?;
            if from == to {
                return Err(NetworkError::SelfLoop { from, to });
            }
            if !seen.insert((from, to)) {
                return Err(NetworkError::DuplicateRoute { from, to });
            }
        }

        let m_e = exits.len();
        let m_u = routes.len();
        let mut r_e = DMatrix::zeros(n, m_e);
        let mut e = DMatrix::zeros(m_e, n);
        for (k, &(queue, _)) in exits.iter().enumerate() {
            r_e[(queue, k)] = -1;
            e[(k, queue)] = 1;
        }
        let mut r_d = DMatrix::zeros(n, m_u);
        let mut h = DMatrix::zeros(m_u, n);
        for (k, &(from, to)) in routes.iter().enumerate() {
            r_d[(from, k)] = -1;
            r_d[(to, k)] = 1;
            h[(k, from)] = 1;
        }
        let gamma = DMatrix::from_fn(m_e, m_e, |a, b| if a == b { exits[a].1 } else { 0.0 });

        Ok(Self {
            names,
            exits: exits
                .iter()
                .map(|&(queue, rate)| ExitEvent { queue, rate })
                .collect(),
            routes: routes
                .iter()
                .map(|&(from, to)| Route { from, to })
                .collect(),
            u_max,
            r_e,
            r_d,
            h,
            e,
            gamma,
        })
    }

    pub fn n(&self) -> usize {
        self.names.len()
    }

    pub fn m_e(&self) -> usize {
        self.exits.len()
    }

    pub fn m_u(&self) -> usize {
        self.routes.len()
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn exits(&self) -> &[ExitEvent] {
        &self.exits
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    /// `n × m_e`; column `k` is `-e_i` for exit event `k` at queue `i`.
    pub fn r_e(&self) -> &DMatrix<i32> {
        &self.r_e
    }

    /// `n × m_u`; column `k` is `-e_i + e_j` for route `k` from `i` to `j`.
    pub fn r_d(&self) -> &DMatrix<i32> {
        &self.r_d
    }

    /// `m_u × n` source indicator of the routes.
    pub fn h(&self) -> &DMatrix<i32> {
        &self.h
    }

    /// `m_e × n` location indicator of the exit events.
    pub fn e(&self) -> &DMatrix<i32> {
        &self.e
    }

    /// Diagonal `m_e × m_e` matrix of exit rates.
    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    /// `R_E Γ E` as an `n × n` real matrix.
    pub fn exit_operator(&self) -> DMatrix<f64> {
        self.r_e.map(f64::from) * &self.gamma * self.e.map(f64::from)
    }

    /// Total exit rate per unit at each queue.
    pub fn exit_rate_per_queue(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for ev in &self.exits {
            out[ev.queue] += ev.rate;
        }
        out
    }

    /// Largest per-unit exit rate of any queue.
    pub fn max_exit_rate(&self) -> f64 {
        self.exit_rate_per_queue().into_iter().fold(0.0, f64::max)
    }

    /// Smallest strictly positive exit rate over all exit events.
    pub fn min_exit_rate(&self) -> Option<f64> {
        self.exits.iter().map(|e| e.rate).reduce(f64::min)
    }

    /// State change vector of event `index` in `[exits | routes]` order.
    pub fn event_change(&self, index: usize) -> Vec<i64> {
        let mut r = vec![0; self.n()];
        if index < self.m_e() {
            r[self.exits[index].queue] = -1;
        } else {
            let route = self.routes[index - self.m_e()];
            r[route.from] = -1;
            r[route.to] = 1;
        }
        r
    }

    /// `s_k = y · r_k + v_k` for every route `k`.
    pub fn switching_values(&self, y: &[f64], v: &[f64]) -> Vec<f64> {
        self.routes
            .iter()
            .zip(v)
            .map(|(r, &vk)| y[r.to] - y[r.from] + vk)
            .collect()
    }

    pub fn check_state(&self, x: &NetworkState) -> Result<(), NetworkError> {
        if x.len() != self.n() {
            return Err(NetworkError::DimensionMismatch {
                what: "queue counts",
                expected: self.n(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn check_controls(&self, u: &[f64]) -> Result<(), NetworkError> {
        if u.len() != self.m_u() {
            return Err(NetworkError::DimensionMismatch {
                what: "controls",
                expected: self.m_u(),
                got: u.len(),
            });
        }
        for (index, &value) in u.iter().enumerate() {
            if !(0.0..=self.u_max).contains(&value) {
                return Err(NetworkError::ControlOutOfBounds {
                    index,
                    value,
                    u_max: self.u_max,
                });
            }
        }
        Ok(())
    }

    /// Rates of all events in `[exits | routes]` order.
    pub fn event_rates(&self, x: &NetworkState, u: &[f64]) -> Result<Vec<f64>, NetworkError> {
        self.check_state(x)?;
        self.check_controls(u)?;
        let mut rates = Vec::with_capacity(self.m_e() + self.m_u());
        self.fill_event_rates(x.counts(), u, &mut rates);
        Ok(rates)
    }

    /// Unchecked rate evaluation into a reusable buffer.
    pub(crate) fn fill_event_rates(&self, x: &[u64], u: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.exits.iter().map(|e| e.rate * x[e.queue] as f64));
        out.extend(
            self.routes
                .iter()
                .zip(u)
                .map(|(r, &uk)| uk * x[r.from] as f64),
        );
    }

    /// Checks that every queue can reach a queue with an exit event along
    /// routing edges.
    pub fn validate_reachability(&self) -> ReachabilityReport {
        let n = self.n();
        let mut reaches = vec![false; n];
        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
        for r in &self.routes {
            incoming[r.to].push(r.from);
        }
        let mut queue = VecDeque::new();
        for ev in &self.exits {
            if !reaches[ev.queue] {
                reaches[ev.queue] = true;
                queue.push_back(ev.queue);
            }
        }
        while let Some(j) = queue.pop_front() {
            for &i in &incoming[j] {
                if !reaches[i] {
                    reaches[i] = true;
                    queue.push_back(i);
                }
            }
        }
        let unreachable_queues: Vec<usize> = (0..n).filter(|&i| !reaches[i]).collect();
        ReachabilityReport {
            ok: unreachable_queues.is_empty(),
            unreachable_queues,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReachabilityReport {
    pub ok: bool,
    pub unreachable_queues: Vec<usize>,
}

/// Number of units in each queue.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NetworkState(Vec<u64>);

impl NetworkState {
    pub fn new(counts: Vec<u64>) -> Self {
        Self(counts)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn counts(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&c| c as f64).collect()
    }

    pub fn dot(&self, coeffs: &[f64]) -> f64 {
        self.0.iter().zip(coeffs).map(|(&c, &w)| c as f64 * w).sum()
    }
}

impl From<Vec<u64>> for NetworkState {
    fn from(counts: Vec<u64>) -> Self {
        Self(counts)
    }
}
