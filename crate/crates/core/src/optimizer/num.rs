//! Entropy-regularized utility maximization over the CSMA capacity region.
//!
//! The link constraints are dualized with prices `r >= 0`. For fixed `r`
//! the schedule term maximizes in closed form to the log-partition function
//! `g_beta(r)` (attained at the product form), and the rate term separates
//! per flow (or per wired bottleneck group). What remains is the smooth
//! convex dual
//!
//! ```text
//! D(r) = max_x [ Σ U(x_s) - Σ_l r_l Σ_{s∋l} x_s - Σ_w P_w(Σ_{s∋w} x_s) ] + g_beta(r)
//! ```
//!
//! with gradient `y(r) - A x(r)`, minimized by projected Newton steps.

use std::fmt::Write as _;

use thiserror::Error;

use super::utility::UtilityFunction;
use crate::csma::{
    log_partition_hessian, log_partition_slice, stationary_probabilities, ProductForm, ScheduleDistribution,
    TaVector,
};
use crate::dynamics::wired_price;
use crate::linalg::solve_linear;
use crate::scenario::Scenario;
use crate::topology::{enumerate_independent_sets, IndependentSetFamily, TopologyError};

/// Rates are kept in `[X_MIN, X_MAX]` while iterating.
pub const X_MIN: f64 = 1e-9;
pub const X_MAX: f64 = 1e6;

const STALL_ITERATIONS: usize = 50;
const CONTINUATION_START: f64 = 1.0;
const CONTINUATION_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("scenario routes flows over wired links; use the wired-aware solver")]
    WiredLinksPresent,
    #[error("tolerance must be positive")]
    BadTolerance,
    #[error("beta must be positive")]
    BadBeta,
    #[error("rate {0} is outside the utility's domain")]
    Domain(f64),
    #[error("rate vectors differ in length")]
    LengthMismatch,
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Target KKT residual.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iterations: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NumSolution {
    pub x_star: Vec<f64>,
    pub tau_star: ScheduleDistribution,
    /// Link prices, i.e. the transmission aggressiveness at the optimum.
    pub r_star: TaVector,
    /// Wired loss ratios at the optimum (empty without wired links).
    pub p_w_star: Vec<f64>,
    /// Primal objective `Σ U + H(tau)/beta - Σ P_w`.
    pub objective: f64,
    pub dual_objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl NumSolution {
    /// Rows `kind,id,value` covering rates, prices, objective and residual.
    pub fn to_csv(&self, scenario: &Scenario) -> String {
        let mut out = String::from("kind,id,value\n");
        for (f, x) in scenario.flows.iter().zip(&self.x_star) {
            let _ = writeln!(out, "flow,{},{x}", f.id);
        }
        for (name, r) in scenario.link_names.iter().zip(self.r_star.as_slice()) {
            let _ = writeln!(out, "link,{name},{r}");
        }
        for (w, p) in scenario.wired.iter().zip(&self.p_w_star) {
            let _ = writeln!(out, "wired,{},{p}", w.name);
        }
        let _ = writeln!(out, "objective,,{}", self.objective);
        let _ = writeln!(out, "dual_objective,,{}", self.dual_objective);
        let _ = writeln!(out, "kkt_residual,,{}", self.kkt_residual);
        out
    }

    pub fn report(&self, scenario: &Scenario) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scenario {} ({}): {} after {} iterations, KKT residual {:.3e}",
            scenario.name,
            match scenario.provenance {
                crate::scenario::Provenance::Exact => "exact",
                crate::scenario::Provenance::Reconstructed => "reconstructed",
            },
            if self.converged { "converged" } else { "NOT converged" },
            self.iterations,
            self.kkt_residual
        );
        let _ = writeln!(out, "objective {:.9} (dual {:.9})", self.objective, self.dual_objective);
        let _ = writeln!(out, "flow rates:");
        for (f, x) in scenario.flows.iter().zip(&self.x_star) {
            let _ = writeln!(out, "  {:<8} x* = {:.6}", f.id, x);
        }
        let _ = writeln!(out, "link prices:");
        for (name, r) in scenario.link_names.iter().zip(self.r_star.as_slice()) {
            let _ = writeln!(out, "  {:<8} r* = {:.6}", name, r);
        }
        for (w, p) in scenario.wired.iter().zip(&self.p_w_star) {
            let _ = writeln!(out, "  {:<8} p_w* = {:.6}", w.name, p);
        }
        out
    }
}

/// Penalty `∫_0^z (y - C)^+ / y dy = (z - C) - C ln(z / C)` for `z > C`.
pub fn wired_penalty(load: f64, capacity: f64) -> f64 {
    if load > capacity {
        (load - capacity) - capacity * (load / capacity).ln()
    } else {
        0.0
    }
}

fn wired_penalty_curvature(load: f64, capacity: f64) -> f64 {
    if load > capacity {
        capacity / (load * load)
    } else {
        0.0
    }
}

/// `L₂(x, r)`: utility minus priced load plus `g_beta(r)`, less the wired
/// penalties when the scenario has wired hops.
pub fn dual_objective(scenario: &Scenario, x: &[f64], r: &TaVector, beta: f64, utility: &UtilityFunction) -> Result<f64, OptimizerError> {
    if x.len() != scenario.flows.len() || r.len() != scenario.link_count() {
        return Err(OptimizerError::LengthMismatch);
    }
    let family = enumerate_independent_sets(&scenario.graph)?;
    let utility_sum: f64 = x.iter().map(|&v| utility.value(v)).sum();
    let priced: f64 = (0..scenario.link_count())
        .map(|l| r[l] * scenario.flows.link_load(x, l))
        .sum();
    let penalty: f64 = scenario
        .wired
        .iter()
        .enumerate()
        .map(|(w, link)| wired_penalty(scenario.flows.wired_load(x, w), link.capacity))
        .sum();
    Ok(utility_sum - priced + log_partition_slice(&family, r.as_slice(), beta) - penalty)
}

/// `Σ_s (U(x_s) - U(x*_s))`.
pub fn utility_gap(x_achieved: &[f64], x_star: &[f64], utility: &UtilityFunction) -> Result<f64, OptimizerError> {
    if x_achieved.len() != x_star.len() {
        return Err(OptimizerError::LengthMismatch);
    }
    let mut gap = 0.0;
    for (&x, &xs) in x_achieved.iter().zip(x_star) {
        for v in [x, xs] {
            if !(v > 0.0) && utility.is_barrier() {
                return Err(OptimizerError::Domain(v));
            }
        }
        gap += utility.value(x) - utility.value(xs);
    }
    Ok(gap)
}

/// Maximizes `Σ U(x_s) + H(tau)/beta` over the capacity region of a
/// wireless-only scenario.
pub fn solve_mp(
    scenario: &Scenario,
    beta: f64,
    utility: &UtilityFunction,
    options: &SolverOptions,
) -> Result<NumSolution, OptimizerError> {
    if scenario.has_wired() {
        return Err(OptimizerError::WiredLinksPresent);
    }
    solve(scenario, beta, utility, options)
}

/// As [`solve_mp`], with every wired link's arrival rate penalized by
/// `∫ (y - C_w)^+ / y dy`.
pub fn solve_ep(
    scenario: &Scenario,
    beta: f64,
    utility: &UtilityFunction,
    options: &SolverOptions,
) -> Result<NumSolution, OptimizerError> {
    solve(scenario, beta, utility, options)
}

struct Problem<'a> {
    family: IndependentSetFamily,
    product_form: ProductForm,
    beta: f64,
    utility: &'a UtilityFunction,
    links: usize,
    flow_links: Vec<Vec<usize>>,
    flow_wired: Vec<Vec<usize>>,
    capacities: Vec<f64>,
    coupled: bool,
}

struct Point {
    x: Vec<f64>,
    tau: Vec<f64>,
    y: Vec<f64>,
    load: Vec<f64>,
    dual: f64,
}

impl Problem<'_> {
    fn prices(&self, r: &[f64]) -> Vec<f64> {
        self.flow_links.iter().map(|ls| ls.iter().map(|&l| r[l]).sum()).collect()
    }

    fn wired_loads(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.capacities.len()];
        for (s, ws) in self.flow_wired.iter().enumerate() {
            for &w in ws {
                z[w] += x[s];
            }
        }
        z
    }

    fn inner_objective(&self, x: &[f64], q: &[f64]) -> f64 {
        let z = self.wired_loads(x);
        x.iter()
            .zip(q)
            .map(|(&v, &p)| self.utility.value(v) - p * v)
            .sum::<f64>()
            - z.iter()
                .zip(&self.capacities)
                .map(|(&zw, &c)| wired_penalty(zw, c))
                .sum::<f64>()
    }

    fn inner_gradient(&self, x: &[f64], q: &[f64]) -> Vec<f64> {
        let z = self.wired_loads(x);
        (0..x.len())
            .map(|s| {
                self.utility.marginal(x[s])
                    - q[s]
                    - self.flow_wired[s]
                        .iter()
                        .map(|&w| wired_price(z[w], self.capacities[w]))
                        .sum::<f64>()
            })
            .collect()
    }

    /// Hessian of the inner objective in `x` (negative definite).
    fn inner_hessian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n = x.len();
        let z = self.wired_loads(x);
        let mut h = vec![vec![0.0; n]; n];
        for s in 0..n {
            h[s][s] = self.utility.curvature(x[s]);
        }
        for (w, &c) in self.capacities.iter().enumerate() {
            let curv = wired_penalty_curvature(z[w], c);
            if curv == 0.0 {
                continue;
            }
            let members: Vec<usize> = (0..n).filter(|&s| self.flow_wired[s].contains(&w)).collect();
            for &a in &members {
                for &b in &members {
                    h[a][b] -= curv;
                }
            }
        }
        h
    }

    /// Rate-maximizing response to link prices `r`.
    fn best_rates(&self, r: &[f64]) -> Vec<f64> {
        let q = self.prices(r);
        let mut x: Vec<f64> = q
            .iter()
            .map(|&p| self.utility.inverse_marginal(p, X_MIN, X_MAX))
            .collect();
        if !self.coupled {
            return x;
        }
        // Newton ascent on the concave coupled objective
        for (s, ws) in self.flow_wired.iter().enumerate() {
            for &w in ws {
                x[s] = x[s].min(self.capacities[w].max(X_MIN));
            }
        }
        let mut f = self.inner_objective(&x, &q);
        for _ in 0..200 {
            let g = self.inner_gradient(&x, &q);
            let scale = x
                .iter()
                .map(|&v| self.utility.marginal(v).abs())
                .fold(1.0, f64::max);
            if g.iter().all(|v| v.abs() <= 1e-14 * scale) {
                break;
            }
            let neg_h: Vec<Vec<f64>> = self
                .inner_hessian(&x)
                .into_iter()
                .map(|row| row.into_iter().map(|v| -v).collect())
                .collect();
            let d = solve_linear(neg_h, g.clone()).unwrap_or_else(|| g.clone());
            let mut t: f64 = 1.0;
            for (v, dv) in x.iter().zip(&d) {
                if *dv < 0.0 {
                    t = t.min(0.99 * (v - X_MIN) / -dv);
                }
            }
            let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let mut accepted = false;
            while t > 1e-16 {
                let trial: Vec<f64> = x
                    .iter()
                    .zip(&d)
                    .map(|(v, dv)| (v + t * dv).clamp(X_MIN, X_MAX))
                    .collect();
                let ft = self.inner_objective(&trial, &q);
                if ft >= f + 1e-4 * t * slope || (ft >= f && t < 1e-8) {
                    x = trial;
                    f = ft;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        x
    }

    fn evaluate(&mut self, r: &[f64]) -> Point {
        let x = self.best_rates(r);
        let mut tau = vec![0.0; self.family.len()];
        let mut y = vec![0.0; self.links];
        self.product_form.evaluate(r, self.beta, &mut tau, &mut y);
        let mut load = vec![0.0; self.links];
        for (s, ls) in self.flow_links.iter().enumerate() {
            for &l in ls {
                load[l] += x[s];
            }
        }
        let q = self.prices(r);
        let dual = self.inner_objective(&x, &q) + log_partition_slice(&self.family, r, self.beta);
        Point { x, tau, y, load, dual }
    }

    fn kkt_residual(&self, r: &[f64], p: &Point) -> f64 {
        let mut res: f64 = 0.0;
        for l in 0..self.links {
            let excess = p.load[l] - p.y[l];
            res = res.max(excess.max(0.0));
            res = res.max((r[l] * excess).abs());
        }
        let q = self.prices(r);
        for (s, g) in self.inner_gradient(&p.x, &q).iter().enumerate() {
            let at_cap = (p.x[s] >= X_MAX && *g > 0.0) || (p.x[s] <= X_MIN && *g < 0.0);
            if !at_cap {
                res = res.max(g.abs() / self.utility.marginal(p.x[s]).max(1.0));
            }
        }
        res
    }

    /// Hessian of the dual: `beta Cov_tau - A H_x^{-1} Aᵀ`.
    fn dual_hessian(&self, p: &Point) -> Vec<Vec<f64>> {
        let mut m = log_partition_hessian(&self.family, &p.tau, self.beta);
        let flows = p.x.len();
        if flows == 0 {
            return m;
        }
        let h = self.inner_hessian(&p.x);
        let free: Vec<bool> = p.x.iter().map(|&v| v > X_MIN && v < X_MAX).collect();
        // columns of -H^{-1} Aᵀ restricted to free flows
        for l in 0..self.links {
            let rhs: Vec<f64> = (0..flows)
                .map(|s| if free[s] && self.flow_links[s].contains(&l) { 1.0 } else { 0.0 })
                .collect();
            if rhs.iter().all(|v| *v == 0.0) {
                continue;
            }
            let neg_h: Vec<Vec<f64>> = (0..flows)
                .map(|a| {
                    (0..flows)
                        .map(|b| {
                            if free[a] && free[b] {
                                -h[a][b]
                            } else if a == b {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            let Some(col) = solve_linear(neg_h, rhs) else { continue };
            for k in 0..self.links {
                let contribution: f64 = (0..flows)
                    .filter(|&s| free[s] && self.flow_links[s].contains(&k))
                    .map(|s| col[s])
                    .sum();
                m[k][l] += contribution;
            }
        }
        m
    }
}

fn solve(
    scenario: &Scenario,
    beta: f64,
    utility: &UtilityFunction,
    options: &SolverOptions,
) -> Result<NumSolution, OptimizerError> {
    if !(options.tol > 0.0) {
        return Err(OptimizerError::BadTolerance);
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(OptimizerError::BadBeta);
    }
    let family = enumerate_independent_sets(&scenario.graph)?;
    let links = scenario.link_count();
    let mut problem = Problem {
        product_form: ProductForm::new(&family),
        family,
        beta,
        utility,
        links,
        flow_links: scenario.flows.iter().map(|f| f.wireless_route.clone()).collect(),
        flow_wired: scenario.flows.iter().map(|f| f.wired_route.clone()).collect(),
        capacities: scenario.wired.iter().map(|w| w.capacity).collect(),
        coupled: scenario.has_wired(),
    };

    // continuation in beta: the dual is smooth for small beta and each
    // stage warm-starts the next
    let mut r = initial_prices(scenario, utility);
    let mut iterations = 0;
    let schedule = continuation_schedule(beta);
    let mut outcome = None;
    for (stage, &b) in schedule.iter().enumerate() {
        problem.beta = b;
        let last = stage + 1 == schedule.len();
        let tol = if last { options.tol } else { options.tol.max(1e-6) };
        let (r_new, point, residual, used) =
            newton(&mut problem, r, tol, options.max_iterations.saturating_sub(iterations));
        iterations += used;
        r = r_new;
        outcome = Some((point, residual));
    }
    let (point, residual) = outcome.expect("schedule ends at the target beta");

    let p_w_star: Vec<f64> = problem
        .wired_loads(&point.x)
        .iter()
        .zip(&problem.capacities)
        .map(|(&z, &c)| wired_price(z, c))
        .collect();
    let penalty: f64 = problem
        .wired_loads(&point.x)
        .iter()
        .zip(&problem.capacities)
        .map(|(&z, &c)| wired_penalty(z, c))
        .sum();
    let tau_star = ScheduleDistribution::from_weights(&problem.family, stationary_probabilities(&problem.family, &r, beta));
    let objective =
        point.x.iter().map(|&v| utility.value(v)).sum::<f64>() + tau_star.entropy() / beta - penalty;
    Ok(NumSolution {
        x_star: point.x,
        tau_star,
        r_star: TaVector::new(r),
        p_w_star,
        objective,
        dual_objective: point.dual,
        kkt_residual: residual,
        iterations,
        converged: residual <= options.tol,
    })
}

/// Geometric ladder of inverse temperatures ending at `beta`.
fn continuation_schedule(beta: f64) -> Vec<f64> {
    let mut ladder = vec![beta];
    while ladder.len() < 12 && *ladder.last().unwrap() > CONTINUATION_START {
        let next = ladder.last().unwrap() / CONTINUATION_FACTOR;
        ladder.push(next);
    }
    ladder.reverse();
    ladder
}

/// Projected Newton on the dual at the problem's current beta.
fn newton(problem: &mut Problem<'_>, mut r: Vec<f64>, tol: f64, max_iterations: usize) -> (Vec<f64>, Point, f64, usize) {
    let links = problem.links;
    let mut point = problem.evaluate(&r);
    let mut residual = problem.kkt_residual(&r, &point);
    let mut iterations = 0;
    // rounding bounds the attainable residual; stop once progress stalls
    let (mut best, mut since_best) = (residual, 0);
    while residual > tol && iterations < max_iterations && since_best < STALL_ITERATIONS {
        iterations += 1;
        let grad: Vec<f64> = (0..links).map(|l| point.y[l] - point.load[l]).collect();
        let hess = problem.dual_hessian(&point);

        let eps = (0..links)
            .map(|l| (r[l] - (r[l] - grad[l]).max(0.0)).abs())
            .fold(0.0, f64::max)
            .min(1e-6);
        let active: Vec<bool> = (0..links).map(|l| r[l] <= eps && grad[l] > 0.0).collect();
        let free: Vec<usize> = (0..links).filter(|&l| !active[l]).collect();

        let mut direction = vec![0.0; links];
        for l in 0..links {
            if active[l] {
                direction[l] = -grad[l] / hess[l][l].max(1e-12);
            }
        }
        if !free.is_empty() {
            let trace: f64 = free.iter().map(|&l| hess[l][l].abs()).sum::<f64>() / free.len() as f64;
            let ridge = 1e-12 * trace.max(1e-300);
            let sub: Vec<Vec<f64>> = free
                .iter()
                .map(|&a| {
                    free.iter()
                        .map(|&b| hess[a][b] + if a == b { ridge } else { 0.0 })
                        .collect()
                })
                .collect();
            let rhs: Vec<f64> = free.iter().map(|&l| -grad[l]).collect();
            match solve_linear(sub, rhs) {
                Some(step) => {
                    for (k, &l) in free.iter().enumerate() {
                        direction[l] = step[k];
                    }
                }
                None => {
                    for &l in &free {
                        direction[l] = -grad[l] / hess[l][l].max(1e-12);
                    }
                }
            }
        }

        let accepted = line_search(problem, &r, &point, residual, &grad, &direction).or_else(|| {
            // scaled projected gradient as fallback
            let fallback: Vec<f64> = (0..links).map(|l| -grad[l] / hess[l][l].max(1e-12)).collect();
            line_search(problem, &r, &point, residual, &grad, &fallback)
        });
        match accepted {
            Some((r_new, p_new, res_new)) => {
                let descent = point.dual - p_new.dual > 1e-13 * (1.0 + point.dual.abs());
                r = r_new;
                point = p_new;
                residual = res_new;
                if residual < 0.999 * best || descent {
                    best = best.min(residual);
                    since_best = 0;
                } else {
                    since_best += 1;
                }
            }
            None => break,
        }
    }
    (r, point, residual, iterations)
}

/// Backtracking along the projection arc `[r + t d]^+`.
fn line_search(
    problem: &mut Problem<'_>,
    r: &[f64],
    point: &Point,
    residual: f64,
    grad: &[f64],
    direction: &[f64],
) -> Option<(Vec<f64>, Point, f64)> {
    let mut t = 1.0;
    let tiny = 1e-13 * (1.0 + point.dual.abs());
    while t > 1e-20 {
        let trial: Vec<f64> = r.iter().zip(direction).map(|(v, d)| (v + t * d).max(0.0)).collect();
        let change: f64 = trial.iter().zip(r).zip(grad).map(|((a, b), g)| g * (a - b)).sum();
        let p = problem.evaluate(&trial);
        if p.dual.is_finite() {
            let sufficient = change < 0.0 && p.dual <= point.dual + 1e-4 * change;
            // near the optimum the dual is flat to rounding; fall back to the residual
            let flat = p.dual <= point.dual + tiny;
            let res = problem.kkt_residual(&trial, &p);
            if sufficient || (flat && res < residual) {
                return Some((trial, p, res));
            }
        }
        t *= 0.5;
    }
    None
}

/// Start with every flow priced as if it received an equal share of its
/// most crowded link.
fn initial_prices(scenario: &Scenario, utility: &UtilityFunction) -> Vec<f64> {
    let links = scenario.link_count();
    let crowd: Vec<usize> = (0..links)
        .map(|l| scenario.flows.iter().filter(|f| f.uses_link(l)).count())
        .collect();
    let mut r = vec![0.0; links];
    for f in scenario.flows.iter() {
        if f.wireless_route.is_empty() {
            continue;
        }
        let busiest = f.wireless_route.iter().map(|&l| crowd[l]).max().unwrap_or(1).max(1);
        let share = 0.5 / busiest as f64;
        let q = utility.marginal(share) / f.wireless_route.len() as f64;
        for &l in &f.wireless_route {
            r[l] = f64::max(r[l], q);
        }
    }
    r
}
