//! Rate control over adaptive-CSMA wireless networks.
//!
//! * [`topology`] and [`scenario`]: conflict graphs, independent sets,
//!   built-in benchmark networks and the scenario file format.
//! * [`csma`]: exact product-form schedule distribution and link rates.
//! * [`dynamics`]: coupled TCP / CSMA fluid models.
//! * [`optimizer`]: entropy-regularized utility maximization and the
//!   capacity region.
//! * [`mac`]: discrete-event simulation of the CSMA chain and of adaptive
//!   CSMA with active queue management.
//! * [`compare`]: legacy vs. proposed scheme comparison tables.

pub mod compare;
pub mod csma;
pub mod dynamics;
mod linalg;
pub mod mac;
pub mod optimizer;
pub mod scenario;
pub mod topology;

pub use csma::{LinkRateVector, ScheduleDistribution, TaVector};
pub use scenario::{builtin_topology, Flow, FlowSet, Scenario, Topology};
pub use topology::{enumerate_independent_sets, ConflictGraph, IndependentSetFamily, LinkSet};
