//! Scenarios: a conflict graph, the flows routed over it, wired links and
//! run parameters. Includes the built-in benchmark topologies and the
//! plain-text scenario file format.
//!
//! # File format
//!
//! ```text
//! # comment (anything after '#' is ignored)
//! [meta]
//! name = a
//! provenance = exact            # exact | reconstructed
//!
//! [links]                       # one wireless link name per line
//! L1
//! L2
//!
//! [conflicts]                   # one conflicting pair per line
//! L1 L2
//!
//! [wired]                       # name capacity (normalized units)
//! fg 0.18
//!
//! [flows]                       # name: ordered hops, each kind:link
//! f1: wireless:L1 wired:fg
//!
//! [params]                      # key = value
//! beta = 800
//! ```
//!
//! Recognized parameters: `beta`, `alpha`, `k`, `r_max`, `dt`, `horizon`,
//! `propagation_delay`, `rho`. Missing keys take their defaults.
//! Serialization writes every section and every parameter, so
//! parse, serialize and parse again yields an identical scenario.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::topology::{ConflictGraph, TopologyError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("{0}")]
    Invalid(String),
}

fn parse_err(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        message: message.into(),
    }
}

/// An end-to-end session routed over wireless and wired links.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub id: String,
    /// Wireless link indices, in route order.
    pub wireless_route: Vec<usize>,
    /// Wired link indices, in route order.
    pub wired_route: Vec<usize>,
    /// Full hop sequence, kept so files round-trip with their original order.
    pub hops: Vec<Hop>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hop {
    Wireless(usize),
    Wired(usize),
}

impl Flow {
    pub fn from_hops(id: impl Into<String>, hops: Vec<Hop>) -> Self {
        let wireless_route = hops
            .iter()
            .filter_map(|h| match h {
                Hop::Wireless(l) => Some(*l),
                Hop::Wired(_) => None,
            })
            .collect();
        let wired_route = hops
            .iter()
            .filter_map(|h| match h {
                Hop::Wired(w) => Some(*w),
                Hop::Wireless(_) => None,
            })
            .collect();
        Self {
            id: id.into(),
            wireless_route,
            wired_route,
            hops,
        }
    }

    /// Single-hop flow over one wireless link.
    pub fn single_link(id: impl Into<String>, link: usize) -> Self {
        Self::from_hops(id, vec![Hop::Wireless(link)])
    }

    pub fn uses_link(&self, link: usize) -> bool {
        self.wireless_route.contains(&link)
    }

    pub fn uses_wired(&self, wired: usize) -> bool {
        self.wired_route.contains(&wired)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowSet {
    pub flows: Vec<Flow>,
}

impl FlowSet {
    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Flow> {
        self.flows.iter()
    }

    /// Sum of `x_s` over flows crossing wireless link `link`.
    pub fn link_load(&self, x: &[f64], link: usize) -> f64 {
        self.flows
            .iter()
            .zip(x)
            .filter(|(f, _)| f.uses_link(link))
            .map(|(_, xs)| xs)
            .sum()
    }

    /// Sum of `x_s` over flows crossing wired link `wired`.
    pub fn wired_load(&self, x: &[f64], wired: usize) -> f64 {
        self.flows
            .iter()
            .zip(x)
            .filter(|(f, _)| f.uses_wired(wired))
            .map(|(_, xs)| xs)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WiredLink {
    pub name: String,
    pub capacity: f64,
}

/// Numeric run parameters stored with a scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterBlock {
    /// Entropy weight / backoff sharpness.
    pub beta: f64,
    /// TA step size.
    pub alpha: f64,
    /// Connections opened per second of RTT.
    pub k: f64,
    /// Cap on transmission aggressiveness.
    pub r_max: f64,
    pub dt: f64,
    pub horizon: f64,
    /// Fixed part of every flow's RTT.
    pub propagation_delay: f64,
    /// Legacy-CSMA backoff ratio exp(beta * r).
    pub rho: f64,
}

impl Default for ParameterBlock {
    fn default() -> Self {
        Self {
            beta: 800.0,
            alpha: 0.05,
            k: 10.0,
            r_max: 0.01,
            dt: 1e-3,
            horizon: 1e3,
            propagation_delay: 0.01,
            rho: 2.24,
        }
    }
}

impl ParameterBlock {
    const KEYS: [&'static str; 8] = [
        "beta",
        "alpha",
        "k",
        "r_max",
        "dt",
        "horizon",
        "propagation_delay",
        "rho",
    ];

    fn get_mut(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "beta" => &mut self.beta,
            "alpha" => &mut self.alpha,
            "k" => &mut self.k,
            "r_max" => &mut self.r_max,
            "dt" => &mut self.dt,
            "horizon" => &mut self.horizon,
            "propagation_delay" => &mut self.propagation_delay,
            "rho" => &mut self.rho,
            _ => return None,
        })
    }

    fn get(&self, key: &str) -> f64 {
        let mut copy = *self;
        *copy.get_mut(key).expect("known key")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        for key in Self::KEYS {
            let v = self.get(key);
            if !(v.is_finite() && v > 0.0) {
                return Err(ScenarioError::Invalid(format!(
                    "parameter {key} must be finite and positive, got {v}"
                )));
            }
        }
        if self.horizon < self.dt {
            return Err(ScenarioError::Invalid("horizon must be at least dt".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Conflict graph given exactly by its independent sets.
    Exact,
    /// Conflict graph rebuilt from a described outcome.
    Reconstructed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub provenance: Provenance,
    pub link_names: Vec<String>,
    pub graph: ConflictGraph,
    pub wired: Vec<WiredLink>,
    pub flows: FlowSet,
    pub params: ParameterBlock,
}

impl Scenario {
    /// Checks routes against the graph, wired capacities and parameters.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.link_names.len() != self.graph.link_count() {
            return Err(ScenarioError::Invalid(
                "link name count does not match the conflict graph".into(),
            ));
        }
        for w in &self.wired {
            if !(w.capacity.is_finite() && w.capacity > 0.0) {
                return Err(ScenarioError::Invalid(format!(
                    "wired link {} needs a positive capacity",
                    w.name
                )));
            }
        }
        for f in self.flows.iter() {
            if f.hops.is_empty() {
                return Err(ScenarioError::Invalid(format!("flow {} has an empty route", f.id)));
            }
            if let Some(l) = f.wireless_route.iter().find(|&&l| l >= self.graph.link_count()) {
                return Err(ScenarioError::Invalid(format!(
                    "flow {} references missing wireless link {l}",
                    f.id
                )));
            }
            if let Some(w) = f.wired_route.iter().find(|&&w| w >= self.wired.len()) {
                return Err(ScenarioError::Invalid(format!(
                    "flow {} references missing wired link {w}",
                    f.id
                )));
            }
        }
        self.params.validate()
    }

    pub fn has_wired(&self) -> bool {
        self.flows.iter().any(|f| !f.wired_route.is_empty())
    }

    pub fn link_count(&self) -> usize {
        self.graph.link_count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let provenance = match self.provenance {
            Provenance::Exact => "exact",
            Provenance::Reconstructed => "reconstructed",
        };
        let _ = writeln!(out, "[meta]\nname = {}\nprovenance = {}\n", self.name, provenance);
        out.push_str("[links]\n");
        for name in &self.link_names {
            let _ = writeln!(out, "{name}");
        }
        out.push_str("\n[conflicts]\n");
        for (u, v) in self.graph.conflict_pairs() {
            let _ = writeln!(out, "{} {}", self.link_names[u], self.link_names[v]);
        }
        out.push_str("\n[wired]\n");
        for w in &self.wired {
            let _ = writeln!(out, "{} {}", w.name, w.capacity);
        }
        out.push_str("\n[flows]\n");
        for f in self.flows.iter() {
            let hops: Vec<String> = f
                .hops
                .iter()
                .map(|h| match *h {
                    Hop::Wireless(l) => format!("wireless:{}", self.link_names[l]),
                    Hop::Wired(w) => format!("wired:{}", self.wired[w].name),
                })
                .collect();
            let _ = writeln!(out, "{}: {}", f.id, hops.join(" "));
        }
        out.push_str("\n[params]\n");
        for key in ParameterBlock::KEYS {
            let _ = writeln!(out, "{key} = {}", self.params.get(key));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        #[derive(PartialEq, Clone, Copy)]
        enum Section {
            None,
            Meta,
            Links,
            Conflicts,
            Wired,
            Flows,
            Params,
        }

        let mut section = Section::None;
        let mut name = String::from("custom");
        let mut provenance = Provenance::Exact;
        let mut link_names: Vec<String> = Vec::new();
        let mut link_index: HashMap<String, usize> = HashMap::new();
        let mut conflicts = Vec::new();
        let mut wired: Vec<WiredLink> = Vec::new();
        let mut wired_index: HashMap<String, usize> = HashMap::new();
        let mut flows = Vec::new();
        let mut params = ParameterBlock::default();

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                section = match line {
                    "[meta]" => Section::Meta,
                    "[links]" => Section::Links,
                    "[conflicts]" => Section::Conflicts,
                    "[wired]" => Section::Wired,
                    "[flows]" => Section::Flows,
                    "[params]" => Section::Params,
                    other => return Err(parse_err(lineno, format!("unknown section {other}"))),
                };
                continue;
            }
            match section {
                Section::None => {
                    return Err(parse_err(lineno, "content before the first section header"))
                }
                Section::Meta => {
                    let (key, value) = split_kv(line).ok_or_else(|| parse_err(lineno, "expected key = value"))?;
                    match key {
                        "name" => name = value.to_string(),
                        "provenance" => {
                            provenance = match value {
                                "exact" => Provenance::Exact,
                                "reconstructed" => Provenance::Reconstructed,
                                other => {
                                    return Err(parse_err(lineno, format!("unknown provenance {other}")))
                                }
                            }
                        }
                        other => return Err(parse_err(lineno, format!("unknown meta key {other}"))),
                    }
                }
                Section::Links => {
                    let mut parts = line.split_whitespace();
                    let link = parts.next().unwrap();
                    if parts.next().is_some() {
                        return Err(parse_err(lineno, "expected a single link name"));
                    }
                    if link_index.contains_key(link) || wired_index.contains_key(link) {
                        return Err(parse_err(lineno, format!("duplicate link name {link}")));
                    }
                    link_index.insert(link.to_string(), link_names.len());
                    link_names.push(link.to_string());
                }
                Section::Conflicts => {
                    let parts: Vec<&str> = line.split_whitespace().collect();
                    if parts.len() != 2 {
                        return Err(parse_err(lineno, "expected two link names"));
                    }
                    let lookup = |n: &str| {
                        link_index
                            .get(n)
                            .copied()
                            .ok_or_else(|| parse_err(lineno, format!("unknown wireless link {n}")))
                    };
                    let (u, v) = (lookup(parts[0])?, lookup(parts[1])?);
                    if u == v {
                        return Err(parse_err(lineno, format!("link {} conflicts with itself", parts[0])));
                    }
                    conflicts.push((u, v));
                }
                Section::Wired => {
                    let parts: Vec<&str> = line.split_whitespace().collect();
                    if parts.len() != 2 {
                        return Err(parse_err(lineno, "expected: name capacity"));
                    }
                    let capacity: f64 = parts[1]
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad capacity {}", parts[1])))?;
                    if !(capacity.is_finite() && capacity > 0.0) {
                        return Err(parse_err(lineno, "wired capacity must be positive"));
                    }
                    if link_index.contains_key(parts[0]) || wired_index.contains_key(parts[0]) {
                        return Err(parse_err(lineno, format!("duplicate link name {}", parts[0])));
                    }
                    wired_index.insert(parts[0].to_string(), wired.len());
                    wired.push(WiredLink {
                        name: parts[0].to_string(),
                        capacity,
                    });
                }
                Section::Flows => {
                    let (id, route) = line
                        .split_once(':')
                        .ok_or_else(|| parse_err(lineno, "expected name: hops"))?;
                    let id = id.trim();
                    if id.is_empty() || id.contains(char::is_whitespace) {
                        return Err(parse_err(lineno, "bad flow name"));
                    }
                    let mut hops = Vec::new();
                    for hop in route.split_whitespace() {
                        let (kind, link) = hop
                            .split_once(':')
                            .ok_or_else(|| parse_err(lineno, format!("hop {hop} must be kind:link")))?;
                        let h = match kind {
                            "wireless" => Hop::Wireless(
                                *link_index
                                    .get(link)
                                    .ok_or_else(|| parse_err(lineno, format!("unknown wireless link {link}")))?,
                            ),
                            "wired" => Hop::Wired(
                                *wired_index
                                    .get(link)
                                    .ok_or_else(|| parse_err(lineno, format!("unknown wired link {link}")))?,
                            ),
                            other => {
                                return Err(parse_err(lineno, format!("unknown link kind {other}")))
                            }
                        };
                        hops.push(h);
                    }
                    if hops.is_empty() {
                        return Err(parse_err(lineno, format!("flow {id} has an empty route")));
                    }
                    flows.push(Flow::from_hops(id, hops));
                }
                Section::Params => {
                    let (key, value) = split_kv(line).ok_or_else(|| parse_err(lineno, "expected key = value"))?;
                    let slot = params
                        .get_mut(key)
                        .ok_or_else(|| parse_err(lineno, format!("unknown parameter {key}")))?;
                    *slot = value
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad value for {key}: {value}")))?;
                }
            }
        }

        let graph = ConflictGraph::new(link_names.len(), &conflicts)?;
        let scenario = Scenario {
            name,
            provenance,
            link_names,
            graph,
            wired,
            flows: FlowSet { flows },
            params,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

fn split_kv(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

/// Names of the built-in benchmark topologies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    A,
    B,
    C,
    D,
    E,
}

impl Topology {
    pub const ALL: [Topology; 5] = [Topology::A, Topology::B, Topology::C, Topology::D, Topology::E];

    pub fn name(self) -> &'static str {
        match self {
            Topology::A => "a",
            Topology::B => "b",
            Topology::C => "c",
            Topology::D => "d",
            Topology::E => "e",
        }
    }
}

impl std::str::FromStr for Topology {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Topology::A),
            "b" => Ok(Topology::B),
            "c" => Ok(Topology::C),
            "d" => Ok(Topology::D),
            "e" => Ok(Topology::E),
            other => Err(ScenarioError::Invalid(format!("unknown topology {other}"))),
        }
    }
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn single_hop(
    name: &str,
    provenance: Provenance,
    conflicts: &[(usize, usize)],
    params: ParameterBlock,
) -> Scenario {
    let graph = ConflictGraph::new(4, conflicts).expect("builtin graph is valid");
    Scenario {
        name: name.to_string(),
        provenance,
        link_names: numbered("L", 4),
        graph,
        wired: Vec::new(),
        flows: FlowSet {
            flows: (0..4).map(|l| Flow::single_link(format!("f{}", l + 1), l)).collect(),
        },
        params,
    }
}

/// Built-in benchmark topologies (links named `L1..`, flows `f1..`).
///
/// * `a`: four WLANs; link 2 hears every other link, 3 and 4 hear each other.
/// * `b`: link 1 hears links 2, 3, 4, which are mutually silent.
/// * `c`: links 2 and 3 hear every link, links 1 and 4 are mutually silent.
/// * `d`: six links carrying three two-hop flows; the middle flow's links
///   hear every link.
/// * `e`: AP cell with three mutually conflicting links plus an isolated
///   cell, joined through wired links with a bottleneck of 2/11.
///
/// Topology `a` is exact; the others are reconstructions chosen to reproduce
/// the starvation pattern each is known for.
pub fn builtin_topology(topology: Topology) -> Scenario {
    let mut params = ParameterBlock {
        beta: 2000.0,
        ..ParameterBlock::default()
    };
    match topology {
        Topology::A => single_hop(
            "a",
            Provenance::Exact,
            &[(0, 1), (1, 2), (1, 3), (2, 3)],
            ParameterBlock {
                beta: 800.0,
                ..ParameterBlock::default()
            },
        ),
        Topology::B => single_hop("b", Provenance::Reconstructed, &[(0, 1), (0, 2), (0, 3)], params),
        Topology::C => single_hop(
            "c",
            Provenance::Reconstructed,
            &[(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)],
            params,
        ),
        Topology::D => {
            let mut conflicts = vec![(0, 1), (4, 5)];
            for middle in [2, 3] {
                for other in 0..6 {
                    if other != middle && !(middle == 3 && other == 2) {
                        conflicts.push((middle.min(other), middle.max(other)));
                    }
                }
            }
            let graph = ConflictGraph::new(6, &conflicts).expect("builtin graph is valid");
            Scenario {
                name: "d".into(),
                provenance: Provenance::Reconstructed,
                link_names: numbered("L", 6),
                graph,
                wired: Vec::new(),
                flows: FlowSet {
                    flows: (0..3)
                        .map(|s| {
                            Flow::from_hops(
                                format!("f{}", s + 1),
                                vec![Hop::Wireless(2 * s), Hop::Wireless(2 * s + 1)],
                            )
                        })
                        .collect(),
                },
                params,
            }
        }
        Topology::E => {
            params.horizon = 1e4;
            let graph = ConflictGraph::new(4, &[(0, 1), (0, 2), (1, 2)]).expect("builtin graph is valid");
            let wired = [("de", 20.0), ("ef", 20.0), ("hf", 20.0), ("fg", 2.0)]
                .into_iter()
                .map(|(n, mbps)| WiredLink {
                    name: n.into(),
                    capacity: mbps / 11.0,
                })
                .collect();
            Scenario {
                name: "e".into(),
                provenance: Provenance::Reconstructed,
                link_names: vec!["ad".into(), "bd".into(), "dc".into(), "ih".into()],
                graph,
                wired,
                flows: FlowSet {
                    flows: vec![
                        Flow::from_hops(
                            "ag",
                            vec![Hop::Wireless(0), Hop::Wired(0), Hop::Wired(1), Hop::Wired(3)],
                        ),
                        Flow::from_hops("bc", vec![Hop::Wireless(1), Hop::Wireless(2)]),
                        Flow::from_hops("ig", vec![Hop::Wireless(3), Hop::Wired(2), Hop::Wired(3)]),
                    ],
                },
                params,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::enumerate_independent_sets;

    #[test]
    fn builtin_shapes() {
        let a = builtin_topology(Topology::A);
        assert_eq!(a.link_count(), 4);
        assert_eq!(a.graph.conflict_pairs().len(), 4);
        assert_eq!(a.flows.len(), 4);
        assert_eq!(a.provenance, Provenance::Exact);

        let b = builtin_topology(Topology::B);
        assert_eq!(b.graph.neighbors(0).len(), 3);
        for (u, v) in [(1, 2), (1, 3), (2, 3)] {
            assert!(!b.graph.conflicts(u, v));
        }

        let d = builtin_topology(Topology::D);
        assert_eq!(d.link_count(), 6);
        assert_eq!(d.flows.len(), 3);
        assert_eq!(d.graph.neighbors(2).len(), 5);
        assert_eq!(d.graph.neighbors(3).len(), 5);
        assert!(!d.graph.conflicts(0, 4));

        let e = builtin_topology(Topology::E);
        assert!(e.has_wired());
        assert_eq!(e.flows.len(), 3);
        for t in Topology::ALL {
            let s = builtin_topology(t);
            s.validate().unwrap();
            assert!(enumerate_independent_sets(&s.graph).is_ok());
        }
    }

    #[test]
    fn builtins_round_trip_through_text() {
        for t in Topology::ALL {
            let s = builtin_topology(t);
            let text = s.to_text();
            let parsed = Scenario::parse(&text).unwrap();
            assert_eq!(parsed, s, "topology {}", t.name());
            assert_eq!(parsed.to_text(), text);
        }
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = "[links]\nL1\nL2\n[conflicts]\nL1 L3\n";
        match Scenario::parse(text) {
            Err(ScenarioError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
        let text = "[links]\nL1\n[flows]\nf1: radio:L1\n";
        assert!(matches!(Scenario::parse(text), Err(ScenarioError::Parse { line: 4, .. })));
        let text = "[wired]\nw 0\n";
        assert!(matches!(Scenario::parse(text), Err(ScenarioError::Parse { line: 2, .. })));
        let text = "L1\n";
        assert!(matches!(Scenario::parse(text), Err(ScenarioError::Parse { line: 1, .. })));
    }

    #[test]
    fn comments_and_defaults() {
        let text = "# two links\n[links]\nL1 # first\nL2\n[conflicts]\nL1 L2\n[flows]\nf: wireless:L1 wireless:L2\n[params]\nbeta = 5\n";
        let s = Scenario::parse(text).unwrap();
        assert_eq!(s.params.beta, 5.0);
        assert_eq!(s.params.k, ParameterBlock::default().k);
        assert_eq!(s.flows.flows[0].wireless_route, vec![0, 1]);
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        let text = "[links]\nL1\n[params]\nalpha = -1\n";
        assert!(matches!(Scenario::parse(text), Err(ScenarioError::Invalid(_))));
    }
}
