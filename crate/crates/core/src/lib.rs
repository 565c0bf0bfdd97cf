//! EV charging reservation scheduling.
//!
//! Requests ask for energy at one of several stations over a fixed set of
//! slots; a schedule accepts a subset of them subject to network capacity and
//! per-station occupancy. This crate provides the data model, an instance
//! generator, exact and heuristic solvers, and a learned solver built from a
//! fixed-length codec, a feed-forward network and a greedy extraction step.

pub mod bench;
pub mod codec;
pub mod files;
pub mod gen;
pub mod greedy;
pub mod lp;
pub mod model;
pub mod neuro;
pub mod oracle;
pub mod pipeline;
pub mod postproc;
pub mod seed;
pub mod solution;

pub use model::{
    check_feasibility, conditional_gain, evaluate_objective, ChargingOption, CostMode, FeasibilityReport, Horizon,
    Instance, LoadState, Request, Schedule, Station, StationId, UserId,
};
pub use solution::{Method, Solution};
