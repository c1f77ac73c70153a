//! Language-measure routing: PFSA measures and optimal supervision, the
//! network-to-PFSA map, a centralized optimizer, the distributed per-node
//! engine, and a packet/scenario simulator.

// `!(x < y)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod pfsa;
pub mod network;
pub mod central;
pub mod engine;
pub mod sim;

pub use central::{
    enumerate_policies, optimize_centralized, performance_vector, solve_topology, theta_for_epsilon, CentralSolution,
    PerformanceVector, Policy,
};
pub use engine::{
    run_to_convergence, ConvergenceCriterion, Engine, NeighborReport, NodeState, RunReport, Schedule, ScheduleMode,
};
pub use error::{Error, Result};
pub use network::{build_pfsa, random_topology, Link, NetworkPfsa, NetworkTopology, NodeId, TopologyParams};
pub use pfsa::{compute_measure, DisablingSet, MeasureVector, Pfsa, StochasticMatrix};
pub use sim::{noise_robustness_run, run_scenario, simulate_packets, ScenarioScript};
