//! Open-loop bang-bang routing policies.
//!
//! Each control takes only the values `0` and `u_max` and toggles at a
//! finite list of switch times. Evaluation is right-continuous: at a switch
//! time the new value already applies.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costate::{CostSpec, CostateTrajectory, IhSolution};
use crate::network::QueueNetwork;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("u_max must be positive and finite, got {0}")]
    BadBound(f64),
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("control {index} value {value} is neither 0 nor u_max = {u_max}")]
    NotAnEndpoint {
        index: usize,
        value: f64,
        u_max: f64,
    },
    #[error("control {index}: switch times must be strictly increasing and inside (0, T)")]
    BadSwitchTimes { index: usize },
    #[error("control {index}: an infinite-horizon policy cannot switch")]
    SwitchWithoutHorizon { index: usize },
    #[error("time {t} outside the policy horizon {horizon:?}")]
    TimeOutOfRange { t: f64, horizon: Option<f64> },
    #[error("malformed policy: {0}")]
    Malformed(String),
    #[error("{0}")]
    Io(String),
}

/// Schedule of a single control.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSchedule {
    initially_on: bool,
    switches: Vec<f64>,
}

impl ControlSchedule {
    pub fn initially_on(&self) -> bool {
        self.initially_on
    }

    pub fn switches(&self) -> &[f64] {
        &self.switches
    }

    fn is_on(&self, t: f64) -> bool {
        let toggles = self.switches.partition_point(|&s| s <= t);
        self.initially_on ^ (toggles % 2 == 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BangBangPolicy {
    u_max: f64,
    /// `None` for infinite-horizon (constant) policies.
    horizon: Option<f64>,
    controls: Vec<ControlSchedule>,
}

impl BangBangPolicy {
    /// Validated constructor. `controls` holds `(initially_on, switches)`
    /// per control.
    pub fn new(
        u_max: f64,
        horizon: Option<f64>,
        controls: Vec<(bool, Vec<f64>)>,
    ) -> Result<Self, PolicyError> {
        if !(u_max > 0.0 && u_max.is_finite()) {
            return Err(PolicyError::BadBound(u_max));
        }
        if let Some(h) = horizon {
            if !(h > 0.0 && h.is_finite()) {
                return Err(PolicyError::BadHorizon(h));
            }
        }
        let mut out = Vec::with_capacity(controls.len());
        for (index, (initially_on, switches)) in controls.into_iter().enumerate() {
            match horizon {
                None if !switches.is_empty() => {
                    return Err(PolicyError::SwitchWithoutHorizon { index })
                }
                Some(h) => {
                    let inside = switches.iter().all(|&s| s > 0.0 && s < h);
                    let increasing = switches.windows(2).all(|w| w[1] > w[0]);
                    if !(inside && increasing) {
                        return Err(PolicyError::BadSwitchTimes { index });
                    }
                }
                None => {}
            }
            out.push(ControlSchedule {
                initially_on,
                switches,
            });
        }
        Ok(Self {
            u_max,
            horizon,
            controls: out,
        })
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn horizon(&self) -> Option<f64> {
        self.horizon
    }

    pub fn m_u(&self) -> usize {
        self.controls.len()
    }

    pub fn controls(&self) -> &[ControlSchedule] {
        &self.controls
    }

    pub fn is_constant(&self) -> bool {
        self.controls.iter().all(|c| c.switches.is_empty())
    }

    /// Control vector at time `t` (right-continuous).
    pub fn evaluate(&self, t: f64) -> Result<Vec<f64>, PolicyError> {
        let in_range = match self.horizon {
            Some(h) => (0.0..=h).contains(&t),
            None => t >= 0.0,
        };
        if !in_range {
            return Err(PolicyError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(self.evaluate_unchecked(t))
    }

    pub(crate) fn evaluate_unchecked(&self, t: f64) -> Vec<f64> {
        self.controls
            .iter()
            .map(|c| if c.is_on(t) { self.u_max } else { 0.0 })
            .collect()
    }

    /// All switch times of all controls strictly inside `(0, t_end)`,
    /// sorted and deduplicated.
    pub fn breakpoints(&self, t_end: f64) -> Vec<f64> {
        let mut all: Vec<f64> = self
            .controls
            .iter()
            .flat_map(|c| c.switches.iter().copied())
            .filter(|&s| s > 0.0 && s < t_end)
            .collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PolicyFile::from(self)).expect("policy serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let file: PolicyFile =
            serde_json::from_str(text).map_err(|e| PolicyError::Malformed(e.to_string()))?;
        file.try_into()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PolicyError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Switch-free policy with the given endpoint values.
pub fn constant_policy(
    u: &[f64],
    u_max: f64,
    horizon: Option<f64>,
) -> Result<BangBangPolicy, PolicyError> {
    let controls = u
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value == 0.0 {
                Ok((false, Vec::new()))
            } else if value == u_max {
                Ok((true, Vec::new()))
            } else {
                Err(PolicyError::NotAnEndpoint {
                    index,
                    value,
                    u_max,
                })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    BangBangPolicy::new(u_max, horizon, controls)
}

/// Optimal finite-horizon policy: `u_k(t) = u_max` exactly where
/// `s_k(t) = y(t) · r_k + v_k < 0`.
pub fn extract_policy(
    traj: &CostateTrajectory,
    costs: &CostSpec,
    net: &QueueNetwork,
) -> Result<BangBangPolicy, PolicyError> {
    let s0 = net.switching_values(traj.initial(), &costs.v);
    let controls = s0
        .iter()
        .zip(traj.switch_times())
        .map(|(&s, times)| (s < 0.0, times.clone()))
        .collect();
    BangBangPolicy::new(net.u_max(), Some(traj.horizon()), controls)
}

/// Optimal infinite-horizon policy: constant, ON exactly on the active set.
pub fn extract_policy_ih(sol: &IhSolution, net: &QueueNetwork) -> BangBangPolicy {
    let controls = (0..net.m_u())
        .map(|k| (sol.active_set.contains(&k), Vec::new()))
        .collect();
    BangBangPolicy::new(net.u_max(), None, controls).expect("network bound is valid")
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    u_max: f64,
    horizon: Option<f64>,
    controls: Vec<ControlFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlFile {
    initial: f64,
    switches: Vec<f64>,
}

impl From<&BangBangPolicy> for PolicyFile {
    fn from(p: &BangBangPolicy) -> Self {
        Self {
            u_max: p.u_max,
            horizon: p.horizon,
            controls: p
                .controls
                .iter()
                .map(|c| ControlFile {
                    initial: if c.initially_on { p.u_max } else { 0.0 },
                    switches: c.switches.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<PolicyFile> for BangBangPolicy {
    type Error = PolicyError;

    fn try_from(f: PolicyFile) -> Result<Self, PolicyError> {
        let controls = f
            .controls
            .into_iter()
            .enumerate()
            .map(|(index, c)| {
                if c.initial == 0.0 {
                    Ok((false, c.switches))
                } else if c.initial == f.u_max {
                    Ok((true, c.switches))
                } else {
                    Err(PolicyError::NotAnEndpoint {
                        index,
                        value: c.initial,
                        u_max: f.u_max,
                    })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        BangBangPolicy::new(f.u_max, f.horizon, controls)
    }
}
