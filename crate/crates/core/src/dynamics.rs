//! Fluid models of TCP rate control coupled with adaptive CSMA.
//!
//! The CSMA chain is assumed to mix instantly, so every step recomputes the
//! exact product-form link rates from the current TA vector.

use std::fmt::Write as _;

use thiserror::Error;

use crate::csma::{link_rates, ProductForm};
use crate::scenario::Scenario;
use crate::topology::{enumerate_independent_sets, TopologyError};

/// Any state component beyond this magnitude counts as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("integration diverged at t = {time}")]
    Diverged { time: f64, last_finite: Box<SystemState> },
    #[error("invalid integration setup: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// `[g]^+_z`: `max(g, 0)` when `z <= 0`, else `g`.
#[inline]
pub fn projection_plus(g: f64, z: f64) -> f64 {
    if z <= 0.0 {
        g.max(0.0)
    } else {
        g
    }
}

/// TA drift `alpha * [a_l - d_l]^+_{r_l}`, additionally held at `r_max` when
/// a cap is set.
pub fn acsma_derivative(arrival: &[f64], service: &[f64], r: &[f64], alpha: f64, r_max: Option<f64>) -> Vec<f64> {
    assert!(arrival.len() == service.len() && service.len() == r.len());
    arrival
        .iter()
        .zip(service)
        .zip(r)
        .map(|((a, d), &rl)| {
            let drift = alpha * projection_plus(a - d, rl);
            match r_max {
                Some(cap) if rl >= cap => drift.min(0.0),
                _ => drift,
            }
        })
        .collect()
}

/// Aggregate rate drift of `n` parallel Reno connections sharing RTT `rtt`
/// and end-to-end loss `price`, projected at `x = 0`.
#[inline]
pub fn multiconn_derivative(x: f64, n: f64, rtt: f64, price: f64) -> f64 {
    // (x²/2n)(2n²/(T²x²) - p), expanded so that x = 0 is well defined
    projection_plus(n / (rtt * rtt) - x * x * price / (2.0 * n), x)
}

/// Single-connection Reno rate drift.
#[inline]
pub fn reno_derivative(x: f64, rtt: f64, price: f64) -> f64 {
    multiconn_derivative(x, 1.0, rtt, price)
}

/// Drop-tail loss ratio `(arrival - capacity)^+ / arrival`, zero on an idle link.
#[inline]
pub fn droptail_price(aggregate_arrival: f64, service: f64) -> f64 {
    if aggregate_arrival <= 0.0 {
        0.0
    } else {
        (aggregate_arrival - service).max(0.0) / aggregate_arrival
    }
}

/// Loss ratio of a drop-tail wired link of the given capacity.
#[inline]
pub fn wired_price(aggregate_arrival: f64, capacity: f64) -> f64 {
    droptail_price(aggregate_arrival, capacity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConnectionMode {
    /// `n = k T`, real valued.
    #[default]
    Fluid,
    /// `n = max(1, floor(k T))`, refreshed every `update_period` seconds.
    Integer,
}

/// Connections a flow opens to cancel its RTT bias.
pub fn connection_count(rtt: f64, k: f64, mode: ConnectionMode) -> f64 {
    let n = k * rtt;
    match mode {
        ConnectionMode::Fluid => n,
        ConnectionMode::Integer => n.floor().max(1.0),
    }
}

/// Connection rule targeting an arbitrary utility:
/// `n = k sqrt(U'(x) T² x² / 2)`.
pub fn connection_count_general(rtt: f64, x: f64, marginal_utility: f64, k: f64) -> f64 {
    k * (marginal_utility * rtt * rtt * x * x / 2.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndToEndPrice {
    /// `Σ r_l + Σ p_w`, the form the fluid models use.
    pub linearized: f64,
    /// `1 - Π (1 - p)` over every hop.
    pub exact: f64,
}

pub fn end_to_end_price(wireless: &[f64], wired: &[f64]) -> EndToEndPrice {
    let hops = wireless.iter().chain(wired);
    EndToEndPrice {
        linearized: hops.clone().sum(),
        exact: 1.0 - hops.map(|p| 1.0 - p).product::<f64>(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrationMode {
    /// Multi-connection Reno over adaptive CSMA with queue-proportional AQM.
    Proposed,
    /// As `Proposed`, with drop-tail wired links in the loop.
    ProposedWired,
    /// Single-connection Reno over adaptive CSMA, RTT closed by the queue.
    AppendixB,
    /// Single-connection Reno over legacy CSMA: TA frozen at `r_max`,
    /// drop-tail prices.
    RenoOverLcsma,
}

impl std::str::FromStr for IntegrationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "proposed" => Ok(Self::Proposed),
            "proposed_wired" => Ok(Self::ProposedWired),
            "appendixb" | "appendix_b" => Ok(Self::AppendixB),
            "reno_over_lcsma" => Ok(Self::RenoOverLcsma),
            other => Err(format!("unknown integration mode {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Euler,
    Rk4,
    /// Linearly implicit Euler with a finite-difference Jacobian; stable at
    /// steps far beyond the stiff price loop's explicit limit.
    SemiImplicit,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "euler" => Ok(Self::Euler),
            "rk4" => Ok(Self::Rk4),
            "semi_implicit" | "implicit" => Ok(Self::SemiImplicit),
            other => Err(format!("unknown integration method {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationConfig {
    pub dt: f64,
    pub horizon: f64,
    /// Keep every `sample_stride`-th step (the final state is always kept).
    pub sample_stride: usize,
    pub method: Method,
    pub connections: ConnectionMode,
    /// Refresh period of integer connection counts.
    pub connection_update_period: f64,
    /// Saturating cap on TA. Legacy mode freezes TA at the scenario's
    /// `r_max` regardless.
    pub r_cap: Option<f64>,
    pub x_init: f64,
    /// Initial TA; `None` picks 0 for the proposed modes and 0.01 for
    /// `AppendixB` (whose RTT closure is singular at zero TA).
    pub r_init: Option<f64>,
    /// Stop once every relative drift falls below this.
    pub steady_tol: Option<f64>,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 1e3,
            sample_stride: 1000,
            method: Method::Euler,
            connections: ConnectionMode::Fluid,
            connection_update_period: 5.0,
            r_cap: None,
            x_init: 0.1,
            r_init: None,
            steady_tol: None,
        }
    }
}

impl IntegrationConfig {
    /// Step and horizon taken from the scenario's parameter block.
    pub fn from_scenario(scenario: &Scenario) -> Self {
        Self {
            dt: scenario.params.dt,
            horizon: scenario.params.horizon,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
    pub rtt: Vec<f64>,
    pub p_wired: Vec<f64>,
}

impl SystemState {
    fn is_sane(&self) -> bool {
        [&self.x, &self.r, &self.n, &self.rtt, &self.p_wired]
            .iter()
            .flat_map(|v| v.iter())
            .all(|v| v.is_finite() && v.abs() <= DIVERGENCE_BOUND)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverEventKind {
    SaturationStart,
    SaturationEnd,
    Steady,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverEvent {
    pub time: f64,
    pub link: Option<usize>,
    pub kind: SolverEventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub mode: IntegrationMode,
    pub dt: f64,
    pub method: Method,
    pub times: Vec<f64>,
    pub states: Vec<SystemState>,
    /// Product-form link rates at each sample.
    pub link_rates: Vec<Vec<f64>>,
    pub events: Vec<SolverEvent>,
    pub flow_ids: Vec<String>,
    pub link_names: Vec<String>,
    pub wired_names: Vec<String>,
}

impl Trajectory {
    pub fn final_state(&self) -> &SystemState {
        self.states.last().expect("trajectory holds at least the initial state")
    }

    pub fn final_link_rates(&self) -> &[f64] {
        self.link_rates.last().expect("trajectory holds at least the initial state")
    }

    pub fn steady_at(&self) -> Option<f64> {
        self.events
            .iter()
            .find(|e| e.kind == SolverEventKind::Steady)
            .map(|e| e.time)
    }

    /// Header `t,flow:<id>:x,flow:<id>:n,flow:<id>:T,...,link:<id>:r,link:<id>:y,...,wired:<id>:p`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for f in &self.flow_ids {
            let _ = write!(out, ",flow:{f}:x,flow:{f}:n,flow:{f}:T");
        }
        for l in &self.link_names {
            let _ = write!(out, ",link:{l}:r,link:{l}:y");
        }
        for w in &self.wired_names {
            let _ = write!(out, ",wired:{w}:p");
        }
        out.push('\n');
        for ((t, s), y) in self.times.iter().zip(&self.states).zip(&self.link_rates) {
            let _ = write!(out, "{t}");
            for i in 0..s.x.len() {
                let _ = write!(out, ",{},{},{}", s.x[i], s.n[i], s.rtt[i]);
            }
            for l in 0..s.r.len() {
                let _ = write!(out, ",{},{}", s.r[l], y[l]);
            }
            for p in &s.p_wired {
                let _ = write!(out, ",{p}");
            }
            out.push('\n');
        }
        out
    }
}

/// Scenario data flattened for the inner loop.
struct Model {
    mode: IntegrationMode,
    beta: f64,
    alpha: f64,
    k: f64,
    propagation_delay: f64,
    r_cap: Option<f64>,
    flow_links: Vec<Vec<usize>>,
    flow_wired: Vec<Vec<usize>>,
    link_flows: Vec<Vec<usize>>,
    wired_flows: Vec<Vec<usize>>,
    capacities: Vec<f64>,
    product_form: ProductForm,
    tau: Vec<f64>,
    frozen_rates: Option<Vec<f64>>,
}

struct Derivative {
    dx: Vec<f64>,
    dr: Vec<f64>,
}

impl Model {
    fn rtt(&self, s: usize, x: &[f64], r: &[f64]) -> f64 {
        let queued: f64 = self.flow_links[s].iter().map(|&l| r[l]).sum::<f64>() / self.alpha;
        match self.mode {
            IntegrationMode::Proposed | IntegrationMode::ProposedWired => self.propagation_delay + queued,
            // queue-proportional TA: W ≈ Q = r/alpha and T = W/x; x is floored
            // to keep the closure finite when a flow is squeezed to zero
            IntegrationMode::AppendixB => queued / x[s].max(1e-300),
            IntegrationMode::RenoOverLcsma => self.propagation_delay,
        }
    }

    fn uses_connections(&self) -> bool {
        matches!(self.mode, IntegrationMode::Proposed | IntegrationMode::ProposedWired)
    }

    fn wired_prices(&self, x: &[f64]) -> Vec<f64> {
        self.wired_flows
            .iter()
            .zip(&self.capacities)
            .map(|(flows, &c)| wired_price(flows.iter().map(|&s| x[s]).sum(), c))
            .collect()
    }

    /// Returns the link rates used and fills the auxiliary variables.
    fn rates(&mut self, r: &[f64], y: &mut [f64]) {
        match &self.frozen_rates {
            Some(fixed) => y.copy_from_slice(fixed),
            None => self.product_form.evaluate(r, self.beta, &mut self.tau, y),
        }
    }

    fn derivative(&mut self, x: &[f64], r: &[f64], n: &[f64], y: &mut [f64]) -> Derivative {
        self.rates(r, y);
        let p_wired = if self.mode == IntegrationMode::ProposedWired || self.mode == IntegrationMode::RenoOverLcsma {
            self.wired_prices(x)
        } else {
            vec![0.0; self.capacities.len()]
        };
        let load: Vec<f64> = self
            .link_flows
            .iter()
            .map(|flows| flows.iter().map(|&s| x[s]).sum())
            .collect();

        let dx = (0..x.len())
            .map(|s| {
                let wired: f64 = self.flow_wired[s].iter().map(|&w| p_wired[w]).sum();
                let rtt = self.rtt(s, x, r);
                match self.mode {
                    IntegrationMode::Proposed | IntegrationMode::ProposedWired => {
                        let price: f64 = self.flow_links[s].iter().map(|&l| r[l]).sum::<f64>() + wired;
                        multiconn_derivative(x[s], n[s], rtt, price)
                    }
                    IntegrationMode::AppendixB => {
                        let price: f64 = self.flow_links[s].iter().map(|&l| r[l]).sum();
                        reno_derivative(x[s], rtt, price)
                    }
                    IntegrationMode::RenoOverLcsma => {
                        let price: f64 = self.flow_links[s]
                            .iter()
                            .map(|&l| droptail_price(load[l], y[l]))
                            .sum::<f64>()
                            + wired;
                        reno_derivative(x[s], rtt, price)
                    }
                }
            })
            .collect();

        let dr = if self.frozen_rates.is_some() {
            vec![0.0; r.len()]
        } else {
            acsma_derivative(&load, y, r, self.alpha, self.r_cap)
        };
        Derivative { dx, dr }
    }

    fn connections(&self, x: &[f64], r: &[f64], mode: ConnectionMode) -> Vec<f64> {
        (0..x.len())
            .map(|s| {
                if self.uses_connections() {
                    connection_count(self.rtt(s, x, r), self.k, mode)
                } else {
                    1.0
                }
            })
            .collect()
    }

    fn snapshot(&self, x: &[f64], r: &[f64], n: &[f64]) -> SystemState {
        SystemState {
            x: x.to_vec(),
            r: r.to_vec(),
            n: n.to_vec(),
            rtt: (0..x.len()).map(|s| self.rtt(s, x, r)).collect(),
            p_wired: self.wired_prices(x),
        }
    }

    fn project(&self, x: &mut [f64], r: &mut [f64]) {
        for v in x.iter_mut() {
            *v = v.max(0.0);
        }
        for v in r.iter_mut() {
            *v = v.max(0.0);
            if let Some(cap) = self.r_cap {
                *v = v.min(cap);
            }
        }
    }
}

/// Integrates the selected fluid system with a fixed step.
pub fn integrate_system(
    scenario: &Scenario,
    mode: IntegrationMode,
    config: &IntegrationConfig,
) -> Result<Trajectory, DynamicsError> {
    if !(config.dt > 0.0 && config.dt.is_finite()) {
        return Err(DynamicsError::InvalidConfig("dt must be positive".into()));
    }
    if !(config.horizon >= config.dt) {
        return Err(DynamicsError::InvalidConfig("horizon must be at least dt".into()));
    }
    if config.sample_stride == 0 {
        return Err(DynamicsError::InvalidConfig("sample stride must be at least 1".into()));
    }
    if mode == IntegrationMode::Proposed && scenario.has_wired() {
        return Err(DynamicsError::InvalidConfig(
            "scenario has wired links; use the proposed_wired mode".into(),
        ));
    }
    let params = scenario.params;
    let family = enumerate_independent_sets(&scenario.graph)?;
    let links = scenario.link_count();
    let flows = scenario.flows.len();

    let frozen_rates = (mode == IntegrationMode::RenoOverLcsma)
        .then(|| link_rates(&family, &vec![params.r_max; links], params.beta));
    let mut model = Model {
        mode,
        beta: params.beta,
        alpha: params.alpha,
        k: params.k,
        propagation_delay: params.propagation_delay,
        r_cap: config.r_cap,
        flow_links: scenario.flows.iter().map(|f| f.wireless_route.clone()).collect(),
        flow_wired: scenario.flows.iter().map(|f| f.wired_route.clone()).collect(),
        link_flows: (0..links)
            .map(|l| (0..flows).filter(|&s| scenario.flows.flows[s].uses_link(l)).collect())
            .collect(),
        wired_flows: (0..scenario.wired.len())
            .map(|w| (0..flows).filter(|&s| scenario.flows.flows[s].uses_wired(w)).collect())
            .collect(),
        capacities: scenario.wired.iter().map(|w| w.capacity).collect(),
        tau: vec![0.0; family.len()],
        product_form: ProductForm::new(&family),
        frozen_rates,
    };

    let r_init = match mode {
        IntegrationMode::RenoOverLcsma => params.r_max,
        IntegrationMode::AppendixB => config.r_init.unwrap_or(0.01),
        _ => config.r_init.unwrap_or(0.0),
    };
    let mut x = vec![config.x_init; flows];
    let mut r = vec![r_init; links];
    if mode != IntegrationMode::RenoOverLcsma {
        model.project(&mut x, &mut r);
    }
    let mut n = model.connections(&x, &r, config.connections);
    let mut next_connection_update = config.connection_update_period;

    let mut y = vec![0.0; links];
    model.rates(&r, &mut y);
    let mut traj = Trajectory {
        mode,
        dt: config.dt,
        method: config.method,
        times: vec![0.0],
        states: vec![model.snapshot(&x, &r, &n)],
        link_rates: vec![y.clone()],
        events: Vec::new(),
        flow_ids: scenario.flows.iter().map(|f| f.id.clone()).collect(),
        link_names: scenario.link_names.clone(),
        wired_names: scenario.wired.iter().map(|w| w.name.clone()).collect(),
    };
    let mut saturated: Vec<bool> = r.iter().map(|&v| config.r_cap.is_some_and(|c| v >= c)).collect();

    let steps = (config.horizon / config.dt).round() as u64;
    let dt = config.dt;
    let mut scratch = vec![0.0; links];
    for step in 1..=steps {
        let t = step as f64 * dt;
        let (dx, dr) = match config.method {
            Method::Euler => {
                let d = model.derivative(&x, &r, &n, &mut scratch);
                (d.dx, d.dr)
            }
            Method::Rk4 => rk4_increment(&mut model, &x, &r, &n, dt, &mut scratch),
            Method::SemiImplicit => semi_implicit_increment(&mut model, &x, &r, &n, dt, config.connections, &mut scratch),
        };
        for (v, d) in x.iter_mut().zip(&dx) {
            *v += dt * d;
        }
        for (v, d) in r.iter_mut().zip(&dr) {
            *v += dt * d;
        }
        model.project(&mut x, &mut r);

        match config.connections {
            ConnectionMode::Fluid => n = model.connections(&x, &r, ConnectionMode::Fluid),
            ConnectionMode::Integer => {
                if t + 0.5 * dt >= next_connection_update {
                    n = model.connections(&x, &r, ConnectionMode::Integer);
                    next_connection_update += config.connection_update_period;
                }
            }
        }

        if let Some(cap) = config.r_cap {
            for (l, &v) in r.iter().enumerate() {
                let now = v >= cap;
                if now != saturated[l] {
                    saturated[l] = now;
                    traj.events.push(SolverEvent {
                        time: t,
                        link: Some(l),
                        kind: if now {
                            SolverEventKind::SaturationStart
                        } else {
                            SolverEventKind::SaturationEnd
                        },
                    });
                }
            }
        }

        let last = step == steps;
        if step % config.sample_stride as u64 == 0 || last {
            let state = model.snapshot(&x, &r, &n);
            if !state.is_sane() {
                return Err(DynamicsError::Diverged {
                    time: t,
                    last_finite: Box::new(traj.final_state().clone()),
                });
            }
            model.rates(&r, &mut y);
            traj.times.push(t);
            traj.states.push(state);
            traj.link_rates.push(y.clone());

            if let Some(tol) = config.steady_tol {
                let still = dx.iter().zip(&x).all(|(d, v)| d.abs() <= tol * v.abs().max(1e-3))
                    && dr.iter().zip(&r).all(|(d, v)| d.abs() <= tol * v.abs().max(1e-3));
                if still && !last {
                    traj.events.push(SolverEvent {
                        time: t,
                        link: None,
                        kind: SolverEventKind::Steady,
                    });
                    break;
                }
            }
        } else if !(x.iter().chain(&r).all(|v| v.is_finite() && v.abs() <= DIVERGENCE_BOUND)) {
            return Err(DynamicsError::Diverged {
                time: t,
                last_finite: Box::new(traj.final_state().clone()),
            });
        }
    }
    Ok(traj)
}

/// Advances by `dt` with linearly implicit Euler substeps `(I - h J) Δ = h f`
/// and returns the average rate, so the caller's `z += dt * rate` lands on
/// the substep result. A substep is halved when the projection would clip a
/// component that `f` pushes upward or a rate more than doubles or vanishes,
/// which keeps the large steps from settling on spurious projected points.
fn semi_implicit_increment(
    model: &mut Model,
    x: &[f64],
    r: &[f64],
    n: &[f64],
    dt: f64,
    connections: ConnectionMode,
    scratch: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let flows = x.len();
    let dim = flows + r.len();
    let mut eval = |model: &mut Model, z: &[f64]| -> Vec<f64> {
        let (xs, rs) = z.split_at(flows);
        let ns = if connections == ConnectionMode::Fluid && model.uses_connections() {
            model.connections(xs, rs, ConnectionMode::Fluid)
        } else {
            n.to_vec()
        };
        let d = model.derivative(xs, rs, &ns, scratch);
        d.dx.into_iter().chain(d.dr).collect()
    };
    let start: Vec<f64> = x.iter().chain(r).copied().collect();
    let mut z = start.clone();
    let mut remaining = dt;
    let mut h = dt;
    while remaining > 1e-12 * dt {
        h = h.min(remaining);
        let f0 = eval(model, &z);
        let mut jacobian = vec![vec![0.0; dim]; dim];
        for j in 0..dim {
            let step = 1e-7 * z[j].abs().max(1e-3);
            let mut zp = z.clone();
            zp[j] += step;
            let fp = eval(model, &zp);
            for i in 0..dim {
                jacobian[i][j] = (fp[i] - f0[i]) / step;
            }
        }
        loop {
            let system: Vec<Vec<f64>> = (0..dim)
                .map(|i| (0..dim).map(|j| f64::from(u8::from(i == j)) - h * jacobian[i][j]).collect())
                .collect();
            let rhs: Vec<f64> = f0.iter().map(|v| h * v).collect();
            let delta = crate::linalg::solve_linear(system, rhs.clone()).unwrap_or(rhs);
            let acceptable = (0..dim).all(|i| {
                let next = z[i] + delta[i];
                let clipped_upward = next < 0.0 && f0[i] > 0.0;
                let rate_jump = i < flows && z[i] > 0.0 && (next > 2.0 * z[i] + 1e-3 || next < 0.0);
                !(clipped_upward || rate_jump)
            });
            if acceptable || h <= 1e-9 * dt {
                for (v, d) in z.iter_mut().zip(&delta) {
                    *v += d;
                }
                let (xs, rs) = z.split_at_mut(flows);
                model.project(xs, rs);
                remaining -= h;
                // let the next substep try a longer stride again
                h *= 2.0;
                break;
            }
            h *= 0.5;
        }
    }
    let rate: Vec<f64> = z.iter().zip(&start).map(|(a, b)| (a - b) / dt).collect();
    let (dx, dr) = rate.split_at(flows);
    (dx.to_vec(), dr.to_vec())
}

fn rk4_increment(
    model: &mut Model,
    x: &[f64],
    r: &[f64],
    n: &[f64],
    dt: f64,
    scratch: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let stage = |model: &mut Model, d: &Derivative, h: f64, scratch: &mut [f64]| {
        let mut xs: Vec<f64> = x.iter().zip(&d.dx).map(|(v, k)| v + h * k).collect();
        let mut rs: Vec<f64> = r.iter().zip(&d.dr).map(|(v, k)| v + h * k).collect();
        model.project(&mut xs, &mut rs);
        let ns = if model.uses_connections() && n.iter().any(|v| v.fract() != 0.0) {
            model.connections(&xs, &rs, ConnectionMode::Fluid)
        } else {
            n.to_vec()
        };
        model.derivative(&xs, &rs, &ns, scratch)
    };
    let k1 = model.derivative(x, r, n, scratch);
    let k2 = stage(model, &k1, 0.5 * dt, scratch);
    let k3 = stage(model, &k2, 0.5 * dt, scratch);
    let k4 = stage(model, &k3, dt, scratch);
    let combine = |a: &[f64], b: &[f64], c: &[f64], d: &[f64]| -> Vec<f64> {
        (0..a.len()).map(|i| (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i]) / 6.0).collect()
    };
    (
        combine(&k1.dx, &k2.dx, &k3.dx, &k4.dx),
        combine(&k1.dr, &k2.dr, &k3.dr, &k4.dr),
    )
}
