//! Side-by-side rates of legacy CSMA and the proposed scheme against the
//! optimum, scored by the utility gap under `U(x) = -1/x`.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::csma::lcsma_throughput;
use crate::dynamics::{integrate_system, DynamicsError, IntegrationConfig, IntegrationMode, Method};
use crate::optimizer::{solve_ep, utility_gap, NumSolution, OptimizerError, SolverOptions, UtilityFunction};
use crate::scenario::Scenario;
use crate::topology::{enumerate_independent_sets, TopologyError};

/// Attempt probability ratio of legacy 802.11 links.
pub const LCSMA_RHO: f64 = 2.24;

#[derive(Debug, Error)]
pub enum CompareError {
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("optimizer did not converge (KKT residual {0:.3e})")]
    NotConverged(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    LcsmaFixedRho,
    ProposedFluid,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::LcsmaFixedRho => "L-CSMA-fixed-rho",
            Scheme::ProposedFluid => "proposed-fluid",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub scheme: Scheme,
    pub rates: Vec<f64>,
    /// `Σ U(x) - Σ U(x*)` with `U(x) = -1/x`; `-inf` if a flow gets nothing.
    pub utility_gap: f64,
}

impl ComparisonRow {
    /// Gap as a fraction of the optimal utility's magnitude.
    pub fn relative_gap(&self, optimum: &[f64]) -> f64 {
        let base: f64 = optimum.iter().map(|x| 1.0 / x).sum();
        self.utility_gap / base
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOptions {
    pub rho: f64,
    pub integration: IntegrationConfig,
    pub solver: SolverOptions,
}

impl CompareOptions {
    /// Legacy `rho`, default solver tolerance and [`equilibrium_config`].
    pub fn for_scenario(scenario: &Scenario) -> Self {
        Self {
            rho: LCSMA_RHO,
            integration: equilibrium_config(scenario),
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub flow_ids: Vec<String>,
    pub optimum: NumSolution,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, scheme: Scheme) -> &ComparisonRow {
        self.rows.iter().find(|r| r.scheme == scheme).expect("both schemes are always present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme");
        for id in &self.flow_ids {
            let _ = write!(out, ",{id}");
        }
        out.push_str(",delta_u\n");
        let mut line = |name: &str, rates: &[f64], gap: f64| {
            out.push_str(name);
            for x in rates {
                let _ = write!(out, ",{x}");
            }
            let _ = writeln!(out, ",{gap}");
        };
        line("optimal", &self.optimum.x_star, 0.0);
        for row in &self.rows {
            line(&row.scheme.to_string(), &row.rates, row.utility_gap);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<18}", "scheme");
        for id in &self.flow_ids {
            let _ = write!(out, "{id:>10}");
        }
        let _ = writeln!(out, "{:>14}", "delta_U");
        let mut line = |name: &str, rates: &[f64], gap: f64| {
            let _ = write!(out, "{name:<18}");
            for x in rates {
                let _ = write!(out, "{x:>10.4}");
            }
            let _ = writeln!(out, "{gap:>14.4}");
        };
        line("optimal", &self.optimum.x_star, 0.0);
        for row in &self.rows {
            line(&row.scheme.to_string(), &row.rates, row.utility_gap);
        }
        out
    }
}

/// Integration settings for running the proposed system to equilibrium.
/// The price loop is stiff (fast gain near `alpha * beta`, slow modes set by
/// utility curvature), so a linearly implicit step is used.
pub fn equilibrium_config(scenario: &Scenario) -> IntegrationConfig {
    let p = scenario.params;
    let dt = 0.5 / p.alpha;
    let horizon = 2e5 / p.alpha;
    IntegrationConfig {
        dt,
        horizon,
        sample_stride: ((horizon / dt / 1000.0).round() as usize).max(1),
        method: Method::SemiImplicit,
        steady_tol: Some(1e-10),
        ..IntegrationConfig::default()
    }
}

/// Utility whose optimum the proposed system tracks: `U(x) = -2k²/x`.
pub fn proposed_utility(scenario: &Scenario) -> UtilityFunction {
    let k = scenario.params.k;
    UtilityFunction::alpha2_weighted(2.0 * k * k)
}

/// Per-flow rates under legacy CSMA: every link runs at `rho`, link
/// throughput is split evenly among its flows, and a flow gets the smallest
/// share along its route (wired hops included).
pub fn lcsma_flow_rates(scenario: &Scenario, rho: f64) -> Result<Vec<f64>, TopologyError> {
    let family = enumerate_independent_sets(&scenario.graph)?;
    let y = lcsma_throughput(&family, rho);
    let share = |count: usize, capacity: f64| capacity / count.max(1) as f64;
    Ok(scenario
        .flows
        .iter()
        .map(|f| {
            let wireless = f.wireless_route.iter().map(|&l| {
                share(scenario.flows.iter().filter(|g| g.uses_link(l)).count(), y[l])
            });
            let wired = f.wired_route.iter().map(|&w| {
                share(
                    scenario.flows.iter().filter(|g| g.uses_wired(w)).count(),
                    scenario.wired[w].capacity,
                )
            });
            wireless.chain(wired).fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Integrates the proposed system and returns its final per-flow rates.
pub fn proposed_equilibrium(scenario: &Scenario, config: &IntegrationConfig) -> Result<Vec<f64>, DynamicsError> {
    let mode = if scenario.has_wired() {
        IntegrationMode::ProposedWired
    } else {
        IntegrationMode::Proposed
    };
    let traj = integrate_system(scenario, mode, config)?;
    Ok(traj.final_state().x.clone())
}

fn gap(rates: &[f64], optimum: &[f64]) -> f64 {
    if rates.iter().any(|&x| !(x > 0.0)) {
        return f64::NEG_INFINITY;
    }
    utility_gap(rates, optimum, &UtilityFunction::alpha2()).unwrap_or(f64::NEG_INFINITY)
}

pub fn compare(scenario: &Scenario, options: &CompareOptions) -> Result<Comparison, CompareError> {
    let optimum = solve_ep(scenario, scenario.params.beta, &proposed_utility(scenario), &options.solver)?;
    if !optimum.converged {
        return Err(CompareError::NotConverged(optimum.kkt_residual));
    }
    let legacy = lcsma_flow_rates(scenario, options.rho)?;
    let proposed = proposed_equilibrium(scenario, &options.integration)?;
    let rows = vec![
        ComparisonRow {
            scheme: Scheme::LcsmaFixedRho,
            utility_gap: gap(&legacy, &optimum.x_star),
            rates: legacy,
        },
        ComparisonRow {
            scheme: Scheme::ProposedFluid,
            utility_gap: gap(&proposed, &optimum.x_star),
            rates: proposed,
        },
    ];
    Ok(Comparison {
        flow_ids: scenario.flows.iter().map(|f| f.id.clone()).collect(),
        optimum,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{builtin_topology, Topology};

    #[test]
    fn legacy_rates_on_topology_a() {
        let a = builtin_topology(Topology::A);
        let rates = lcsma_flow_rates(&a, LCSMA_RHO).unwrap();
        let rho = LCSMA_RHO;
        let z = 2.0 * rho * rho + 4.0 * rho + 1.0;
        assert!((rates[1] - rho / z).abs() < 1e-12);
        assert!((rates[0] - (rho + 2.0 * rho * rho) / z).abs() < 1e-12);
        assert!((rates[2] - (rho + rho * rho) / z).abs() < 1e-12);
    }

    #[test]
    fn legacy_rates_respect_wired_shares() {
        let e = builtin_topology(Topology::E);
        let rates = lcsma_flow_rates(&e, LCSMA_RHO).unwrap();
        // two flows share the 2/11 bottleneck
        assert!(rates[0] <= 1.0 / 11.0 + 1e-15);
        assert!(rates[2] <= 1.0 / 11.0 + 1e-15);
    }

    #[test]
    fn gap_is_minus_infinity_for_starved_flows() {
        assert_eq!(gap(&[0.0, 1.0], &[0.5, 0.5]), f64::NEG_INFINITY);
        assert_eq!(gap(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
    }
}
