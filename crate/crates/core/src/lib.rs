//! Optimal routing for stochastic networks of M/M/∞ queues with linear
//! costs.
//!
//! The optimal policies are open-loop and bang-bang; they are computed from
//! a costate vector ([`costate`]) and turned into schedules ([`policy`]).
//! Three independent checks are provided: exact stochastic simulation
//! ([`ssa`]), the first-moment equation ([`meanode`]) and dynamic
//! programming on the finite state space ([`mdp_oracle`]).

pub mod costate;
pub mod mdp_oracle;
pub mod meanode;
pub mod network;
pub mod policy;
pub mod ssa;

pub use costate::{
    costate_rhs, solve_costate_fh, solve_costate_ih, solve_costate_ih_long_horizon, CostSpec,
    Costate, CostateError, CostateFile, CostateTrajectory, FhOptions, IhSolution,
};
pub use mdp_oracle::{
    build_generator, forward_kolmogorov, hjb_residual, vi_finite_horizon, vi_infinite_horizon,
    HjbResidual, OracleError, StateSpace, ValueTable,
};
pub use meanode::{expected_cost, integrate_mean, mean_dynamics_matrix, MeanTrajectory};
pub use network::{build_network, NetworkDescription, NetworkError, NetworkState, QueueNetwork};
pub use policy::{constant_policy, extract_policy, extract_policy_ih, BangBangPolicy, PolicyError};
pub use ssa::{accumulate_cost, estimate_cost, simulate, CostEstimate, SsaError, SsaTrajectory};
