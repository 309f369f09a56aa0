//! Utility maximization over the CSMA capacity region.

mod capacity;
mod num;
mod simplex;
mod utility;

pub use capacity::{capacity_membership, CapacityVerdict, Membership, MEMBERSHIP_TOL};
pub use num::{
    dual_objective, solve_ep, solve_mp, utility_gap, wired_penalty, NumSolution, OptimizerError, SolverOptions,
    X_MAX, X_MIN,
};
pub use simplex::{maximize, LpOutcome};
pub use utility::{UtilityFunction, UtilityKind};
