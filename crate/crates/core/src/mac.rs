//! Discrete-event simulation of the CSMA Markov chain, with and without
//! queue-driven transmission aggressiveness and active queue management.
//!
//! Every idle link counts down an exponential backoff whose mean is
//! `exp(-beta r_l)` (times the packet length). A link freezes its counter
//! while any conflicting link transmits and resumes it afterwards. On expiry
//! the link holds the channel for one packet time: exponential with mean one
//! in [`simulate_csma`], exactly one unit in [`simulate_acsma_aqm`].
//!
//! Each link draws from two dedicated ChaCha streams (backoff and arrivals),
//! so changing one link's parameters leaves the other links' draws intact.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use thiserror::Error;

use crate::csma::{service_from_probabilities, LinkRateVector, ScheduleDistribution, TaVector};
use crate::topology::{IndependentSetFamily, LinkSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MacError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MacEventKind {
    CountdownExpired,
    TransmissionEnd,
    PacketArrival,
    PacketServed,
    Drop,
}

impl MacEventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MacEventKind::CountdownExpired => "countdown_expired",
            MacEventKind::TransmissionEnd => "transmission_end",
            MacEventKind::PacketArrival => "packet_arrival",
            MacEventKind::PacketServed => "packet_served",
            MacEventKind::Drop => "drop",
        }
    }
}

impl fmt::Display for MacEventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacEvent {
    pub time: f64,
    pub kind: MacEventKind,
    pub link: usize,
    /// Queue length right after the event.
    pub queue: u64,
    pub r: f64,
}

/// Per-link MAC state as seen at the end of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkMacState {
    pub active: bool,
    pub frozen: bool,
    /// Absolute expiry time when counting, remaining time when frozen,
    /// `NaN` while transmitting.
    pub countdown_deadline: f64,
    pub queue_length: u64,
    pub r: f64,
}

/// `time,link,kind,queue,r` rows.
pub fn events_to_csv(events: &[MacEvent]) -> String {
    let mut out = String::from("time,link,kind,queue,r\n");
    for e in events {
        let _ = writeln!(out, "{},{},{},{},{}", e.time, e.link, e.kind, e.queue, e.r);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsmaSimResult {
    /// Time-weighted occupancy of each independent set.
    pub distribution: ScheduleDistribution,
    /// Fraction of time each link transmitted.
    pub airtime: LinkRateVector,
    pub transmissions: Vec<u64>,
    /// Empty unless requested.
    pub events: Vec<MacEvent>,
    pub final_state: Vec<LinkMacState>,
}

/// Simulates plain CSMA with fixed aggressiveness `r` for `horizon` time
/// units.
pub fn simulate_csma(
    family: &IndependentSetFamily,
    r: &TaVector,
    beta: f64,
    horizon: f64,
    seed: u64,
) -> Result<CsmaSimResult, MacError> {
    run_csma(family, r, beta, horizon, seed, false)
}

/// As [`simulate_csma`], also returning the full event log.
pub fn simulate_csma_logged(
    family: &IndependentSetFamily,
    r: &TaVector,
    beta: f64,
    horizon: f64,
    seed: u64,
) -> Result<CsmaSimResult, MacError> {
    run_csma(family, r, beta, horizon, seed, true)
}

fn run_csma(
    family: &IndependentSetFamily,
    r: &TaVector,
    beta: f64,
    horizon: f64,
    seed: u64,
    record: bool,
) -> Result<CsmaSimResult, MacError> {
    if r.len() != family.link_count() {
        return Err(MacError::InvalidConfig("TA vector length differs from link count".into()));
    }
    check_common(beta, horizon)?;
    let mut engine = Engine::new(
        family,
        EngineConfig {
            beta,
            horizon,
            seed,
            record,
            service: Service::Exponential,
            arrivals: vec![0.0; family.link_count()],
            policy: TaPolicy::Fixed(r.clone()),
            alpha: 0.0,
            update_interval: f64::INFINITY,
            trace_interval: f64::INFINITY,
        },
    );
    engine.run();
    let distribution = engine.distribution();
    let airtime = LinkRateVector(service_from_probabilities(family, distribution.probabilities()));
    Ok(CsmaSimResult {
        distribution,
        airtime,
        transmissions: engine.links.iter().map(|l| l.transmissions).collect(),
        final_state: engine.final_state(),
        events: engine.log,
    })
}

/// How the aggressiveness evolves during an AQM run.
#[derive(Debug, Clone, PartialEq)]
pub enum TaPolicy {
    /// `r_l = alpha * Q_l` at every update instant.
    QueueProportional,
    /// Held constant (legacy CSMA).
    Fixed(TaVector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AqmConfig {
    /// Poisson packet arrival rate per link, in packets per packet time.
    pub arrival_rates: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub update_interval: f64,
    pub horizon: f64,
    pub seed: u64,
    pub policy: TaPolicy,
    /// Time between trace samples.
    pub trace_interval: f64,
    pub record_events: bool,
}

impl AqmConfig {
    pub fn new(arrival_rates: Vec<f64>, alpha: f64, beta: f64, horizon: f64, seed: u64) -> Self {
        Self {
            arrival_rates,
            alpha,
            beta,
            update_interval: 1.0,
            horizon,
            seed,
            policy: TaPolicy::QueueProportional,
            trace_interval: horizon / 1000.0,
            record_events: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AqmSample {
    pub time: f64,
    pub r: Vec<f64>,
    pub queue: Vec<u64>,
    pub drops: Vec<u64>,
    /// Cumulative transmitting time per link.
    pub airtime: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSummary {
    pub arrived: u64,
    pub served: u64,
    pub dropped: u64,
    pub queued: u64,
    pub dummies: u64,
    /// Fraction of the horizon spent transmitting (real or dummy).
    pub airtime: f64,
    /// Served packets per unit time.
    pub service_rate: f64,
    pub mean_r: f64,
    pub max_queue: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AqmSimResult {
    pub horizon: f64,
    pub links: Vec<LinkSummary>,
    pub trace: Vec<AqmSample>,
    pub distribution: ScheduleDistribution,
    pub events: Vec<MacEvent>,
    pub final_state: Vec<LinkMacState>,
}

impl AqmSimResult {
    /// Plain-text block with per-link counters.
    pub fn summary(&self) -> String {
        let mut out = String::from("{\n");
        let _ = writeln!(out, "  horizon: {}", self.horizon);
        for (l, s) in self.links.iter().enumerate() {
            let _ = writeln!(
                out,
                "  link {l}: {{ airtime: {:.6}, service_rate: {:.6}, arrived: {}, served: {}, dropped: {}, queued: {}, dummies: {}, mean_r: {:.6e}, max_queue: {} }}",
                s.airtime, s.service_rate, s.arrived, s.served, s.dropped, s.queued, s.dummies, s.mean_r, s.max_queue
            );
        }
        out.push_str("}\n");
        out
    }

    /// `t,link:<l>:r,link:<l>:queue,link:<l>:drops,link:<l>:airtime,...`
    pub fn trace_csv(&self) -> String {
        let n = self.links.len();
        let mut out = String::from("t");
        for l in 0..n {
            let _ = write!(out, ",link:{l}:r,link:{l}:queue,link:{l}:drops,link:{l}:airtime");
        }
        out.push('\n');
        for s in &self.trace {
            let _ = write!(out, "{}", s.time);
            for l in 0..n {
                let _ = write!(out, ",{},{},{},{}", s.r[l], s.queue[l], s.drops[l], s.airtime[l]);
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the queue-driven CSMA of the AQM scheme: exogenous Poisson arrivals
/// are tail-dropped with probability `min(r_l, 1)`, `r_l` tracks
/// `alpha * Q_l` at every update, and a link with an empty queue sends a
/// dummy packet (exempt from dropping) when its backoff expires.
pub fn simulate_acsma_aqm(family: &IndependentSetFamily, config: &AqmConfig) -> Result<AqmSimResult, MacError> {
    let links = family.link_count();
    if config.arrival_rates.len() != links {
        return Err(MacError::InvalidConfig("arrival vector length differs from link count".into()));
    }
    if config.arrival_rates.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(MacError::InvalidConfig("arrival rates must be finite and nonnegative".into()));
    }
    check_common(config.beta, config.horizon)?;
    if !(config.alpha >= 0.0 && config.alpha.is_finite()) {
        return Err(MacError::InvalidConfig("alpha must be finite and nonnegative".into()));
    }
    if !(config.update_interval > 0.0) || !(config.trace_interval > 0.0) {
        return Err(MacError::InvalidConfig("update and trace intervals must be positive".into()));
    }
    if let TaPolicy::Fixed(r) = &config.policy {
        if r.len() != links {
            return Err(MacError::InvalidConfig("TA vector length differs from link count".into()));
        }
    }
    let mut engine = Engine::new(
        family,
        EngineConfig {
            beta: config.beta,
            horizon: config.horizon,
            seed: config.seed,
            record: config.record_events,
            service: Service::Unit,
            arrivals: config.arrival_rates.clone(),
            policy: config.policy.clone(),
            alpha: config.alpha,
            update_interval: config.update_interval,
            trace_interval: config.trace_interval,
        },
    );
    engine.run();
    let horizon = config.horizon;
    let summaries = engine
        .links
        .iter()
        .map(|l| {
            assert_eq!(l.arrived, l.served + l.dropped + l.queue, "packet accounting broke");
            LinkSummary {
                arrived: l.arrived,
                served: l.served,
                dropped: l.dropped,
                queued: l.queue,
                dummies: l.dummies,
                airtime: l.airtime / horizon,
                service_rate: l.served as f64 / horizon,
                mean_r: l.r_integral / horizon,
                max_queue: l.max_queue,
            }
        })
        .collect();
    Ok(AqmSimResult {
        horizon,
        links: summaries,
        distribution: engine.distribution(),
        final_state: engine.final_state(),
        trace: std::mem::take(&mut engine.trace),
        events: std::mem::take(&mut engine.log),
    })
}

fn check_common(beta: f64, horizon: f64) -> Result<(), MacError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(MacError::InvalidConfig("beta must be positive".into()));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(MacError::InvalidConfig("horizon must be positive".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Service {
    Exponential,
    Unit,
}

struct EngineConfig {
    beta: f64,
    horizon: f64,
    seed: u64,
    record: bool,
    service: Service,
    arrivals: Vec<f64>,
    policy: TaPolicy,
    alpha: f64,
    update_interval: f64,
    trace_interval: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    Countdown,
    TxEnd,
    Arrival,
    Update,
    Trace,
}

#[derive(Debug, Clone, Copy)]
struct Scheduled {
    time: f64,
    link: usize,
    kind: Pending,
    generation: u64,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.link.cmp(&self.link))
            .then_with(|| other.kind.cmp(&self.kind))
            .then_with(|| other.generation.cmp(&self.generation))
    }
}

struct LinkRuntime {
    neighbors: LinkSet,
    transmitting: bool,
    sending_dummy: bool,
    blockers: u32,
    deadline: f64,
    remaining: f64,
    generation: u64,
    r: f64,
    queue: u64,
    arrived: u64,
    served: u64,
    dropped: u64,
    dummies: u64,
    transmissions: u64,
    airtime: f64,
    tx_started: f64,
    r_integral: f64,
    r_since: f64,
    max_queue: u64,
    mac_rng: ChaCha8Rng,
    arrival_rng: ChaCha8Rng,
}

struct Engine<'a> {
    family: &'a IndependentSetFamily,
    config: EngineConfig,
    links: Vec<LinkRuntime>,
    heap: BinaryHeap<Scheduled>,
    now: f64,
    active: LinkSet,
    active_since: f64,
    occupancy: Vec<f64>,
    log: Vec<MacEvent>,
    trace: Vec<AqmSample>,
}

impl<'a> Engine<'a> {
    fn new(family: &'a IndependentSetFamily, config: EngineConfig) -> Self {
        let graph = family.graph();
        let initial_r = |l: usize| match &config.policy {
            TaPolicy::Fixed(r) => r[l],
            TaPolicy::QueueProportional => 0.0,
        };
        let links = (0..family.link_count())
            .map(|l| {
                let mut mac_rng = ChaCha8Rng::seed_from_u64(config.seed);
                mac_rng.set_stream(2 * l as u64);
                let mut arrival_rng = ChaCha8Rng::seed_from_u64(config.seed);
                arrival_rng.set_stream(2 * l as u64 + 1);
                LinkRuntime {
                    neighbors: graph.neighbors(l),
                    transmitting: false,
                    sending_dummy: false,
                    blockers: 0,
                    deadline: f64::NAN,
                    remaining: f64::NAN,
                    generation: 0,
                    r: initial_r(l),
                    queue: 0,
                    arrived: 0,
                    served: 0,
                    dropped: 0,
                    dummies: 0,
                    transmissions: 0,
                    airtime: 0.0,
                    tx_started: 0.0,
                    r_integral: 0.0,
                    r_since: 0.0,
                    max_queue: 0,
                    mac_rng,
                    arrival_rng,
                }
            })
            .collect();
        Self {
            family,
            links,
            heap: BinaryHeap::new(),
            now: 0.0,
            active: LinkSet::EMPTY,
            active_since: 0.0,
            occupancy: vec![0.0; family.len()],
            log: Vec::new(),
            trace: Vec::new(),
            config,
        }
    }

    fn push(&mut self, time: f64, link: usize, kind: Pending, generation: u64) {
        if time <= self.config.horizon {
            self.heap.push(Scheduled { time, link, kind, generation });
        }
    }

    fn record(&mut self, link: usize, kind: MacEventKind) {
        if self.config.record {
            let l = &self.links[link];
            self.log.push(MacEvent {
                time: self.now,
                kind,
                link,
                queue: l.queue,
                r: l.r,
            });
        }
    }

    fn backoff(&mut self, link: usize) -> f64 {
        let l = &mut self.links[link];
        let draw: f64 = l.mac_rng.sample(Exp1);
        // packet length is one unit in both service models
        draw * (-self.config.beta * l.r).exp()
    }

    fn start_countdown(&mut self, link: usize) {
        let wait = self.backoff(link);
        let l = &mut self.links[link];
        l.deadline = self.now + wait;
        l.generation += 1;
        let (deadline, generation) = (l.deadline, l.generation);
        self.push(deadline, link, Pending::Countdown, generation);
    }

    fn schedule_arrival(&mut self, link: usize) {
        let rate = self.config.arrivals[link];
        if rate > 0.0 {
            let draw: f64 = self.links[link].arrival_rng.sample(Exp1);
            let t = self.now + draw / rate;
            self.push(t, link, Pending::Arrival, 0);
        }
    }

    fn set_active(&mut self, next: LinkSet) {
        let index = self
            .family
            .index_of(self.active)
            .expect("live schedule must be an independent set");
        self.occupancy[index] += self.now - self.active_since;
        self.active_since = self.now;
        self.active = next;
    }

    fn run(&mut self) {
        let n = self.links.len();
        for l in 0..n {
            self.start_countdown(l);
            self.schedule_arrival(l);
        }
        if self.config.update_interval.is_finite() {
            self.push(0.0, n, Pending::Update, 0);
        }
        if self.config.trace_interval.is_finite() {
            self.push(0.0, n + 1, Pending::Trace, 0);
        }
        while let Some(ev) = self.heap.pop() {
            self.now = ev.time;
            match ev.kind {
                Pending::Countdown => {
                    if ev.generation == self.links[ev.link].generation {
                        self.on_countdown(ev.link);
                    }
                }
                Pending::TxEnd => self.on_tx_end(ev.link),
                Pending::Arrival => self.on_arrival(ev.link),
                Pending::Update => {
                    self.on_update();
                    let next = self.now + self.config.update_interval;
                    self.push(next, n, Pending::Update, 0);
                }
                Pending::Trace => {
                    self.sample_trace();
                    let next = self.now + self.config.trace_interval;
                    self.push(next, n + 1, Pending::Trace, 0);
                }
            }
        }
        self.now = self.config.horizon;
        self.set_active(self.active);
        for l in &mut self.links {
            if l.transmitting {
                l.airtime += self.now - l.tx_started;
                l.tx_started = self.now;
            }
            l.r_integral += l.r * (self.now - l.r_since);
            l.r_since = self.now;
        }
    }

    fn on_countdown(&mut self, link: usize) {
        let l = &self.links[link];
        assert!(
            l.blockers == 0 && !l.transmitting && (self.active.0 & l.neighbors.0) == 0,
            "link {link} expired while blocked"
        );
        self.record(link, MacEventKind::CountdownExpired);
        let duration = match self.config.service {
            Service::Exponential => self.links[link].mac_rng.sample::<f64, _>(Exp1),
            Service::Unit => 1.0,
        };
        self.set_active(self.active.with(link));
        let neighbors = self.links[link].neighbors;
        let now = self.now;
        {
            let l = &mut self.links[link];
            l.transmitting = true;
            l.sending_dummy = l.queue == 0;
            l.transmissions += 1;
            l.tx_started = now;
            l.deadline = f64::NAN;
        }
        for m in neighbors.links() {
            let nb = &mut self.links[m];
            if nb.blockers == 0 && !nb.transmitting {
                nb.remaining = nb.deadline - now;
                nb.deadline = f64::NAN;
                nb.generation += 1;
            }
            nb.blockers += 1;
        }
        self.push(now + duration, link, Pending::TxEnd, 0);
    }

    fn on_tx_end(&mut self, link: usize) {
        let now = self.now;
        let mut next = self.active;
        next.0 &= !(1u32 << link);
        self.set_active(next);
        let neighbors = self.links[link].neighbors;
        let served_real = {
            let l = &mut self.links[link];
            l.transmitting = false;
            l.airtime += now - l.tx_started;
            if l.sending_dummy {
                l.dummies += 1;
                false
            } else {
                l.queue -= 1;
                l.served += 1;
                true
            }
        };
        self.record(link, MacEventKind::TransmissionEnd);
        if served_real {
            self.record(link, MacEventKind::PacketServed);
        }
        for m in neighbors.links() {
            let nb = &mut self.links[m];
            nb.blockers -= 1;
            if nb.blockers == 0 && !nb.transmitting {
                nb.deadline = now + nb.remaining;
                nb.remaining = f64::NAN;
                nb.generation += 1;
                let (deadline, generation) = (nb.deadline, nb.generation);
                self.push(deadline, m, Pending::Countdown, generation);
            }
        }
        // neighbors stayed silent while this link held the channel
        debug_assert_eq!(self.links[link].blockers, 0);
        self.start_countdown(link);
    }

    fn on_arrival(&mut self, link: usize) {
        let drop = {
            let l = &mut self.links[link];
            l.arrived += 1;
            let p = l.r.min(1.0);
            let u: f64 = l.arrival_rng.random();
            if u < p {
                l.dropped += 1;
                true
            } else {
                l.queue += 1;
                l.max_queue = l.max_queue.max(l.queue);
                false
            }
        };
        self.record(
            link,
            if drop {
                MacEventKind::Drop
            } else {
                MacEventKind::PacketArrival
            },
        );
        self.schedule_arrival(link);
    }

    fn on_update(&mut self) {
        if self.config.policy != TaPolicy::QueueProportional {
            return;
        }
        let now = self.now;
        let alpha = self.config.alpha;
        for l in &mut self.links {
            l.r_integral += l.r * (now - l.r_since);
            l.r_since = now;
            l.r = alpha * l.queue as f64;
        }
    }

    fn sample_trace(&mut self) {
        let now = self.now;
        self.trace.push(AqmSample {
            time: now,
            r: self.links.iter().map(|l| l.r).collect(),
            queue: self.links.iter().map(|l| l.queue).collect(),
            drops: self.links.iter().map(|l| l.dropped).collect(),
            airtime: self
                .links
                .iter()
                .map(|l| l.airtime + if l.transmitting { now - l.tx_started } else { 0.0 })
                .collect(),
        });
    }

    fn distribution(&self) -> ScheduleDistribution {
        ScheduleDistribution::from_weights(self.family, self.occupancy.clone())
    }

    fn final_state(&self) -> Vec<LinkMacState> {
        self.links
            .iter()
            .map(|l| LinkMacState {
                active: l.transmitting,
                frozen: l.blockers > 0,
                countdown_deadline: if l.transmitting {
                    f64::NAN
                } else if l.blockers > 0 {
                    l.remaining
                } else {
                    l.deadline
                },
                queue_length: l.queue,
                r: l.r,
            })
            .collect()
    }
}
