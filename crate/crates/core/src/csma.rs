//! Stationary behavior of the CSMA Markov chain.
//!
//! With link `l` counting down for an exponential time of mean
//! `exp(-beta * r_l)` and holding the channel for unit mean, the chain over
//! independent sets is reversible with product-form law
//! `tau_i ∝ exp(beta * Σ_{l∈i} r_l)`. Everything here is evaluated in log
//! space with max subtraction, since `beta * r` reaches the thousands.

use crate::topology::IndependentSetFamily;

/// Per-link transmission aggressiveness.
#[derive(Debug, Clone, PartialEq)]
pub struct TaVector {
    r: Vec<f64>,
    r_max: Option<f64>,
}

impl TaVector {
    /// Panics if any entry is negative or not finite.
    pub fn new(r: Vec<f64>) -> Self {
        assert!(
            r.iter().all(|v| v.is_finite() && *v >= 0.0),
            "transmission aggressiveness must be finite and nonnegative"
        );
        Self { r, r_max: None }
    }

    pub fn zeros(links: usize) -> Self {
        Self::new(vec![0.0; links])
    }

    pub fn uniform(links: usize, value: f64) -> Self {
        Self::new(vec![value; links])
    }

    /// Attaches an upper bound, saturating entries above it.
    pub fn with_cap(mut self, r_max: f64) -> Self {
        for v in &mut self.r {
            *v = v.min(r_max);
        }
        self.r_max = Some(r_max);
        self
    }

    pub fn r_max(&self) -> Option<f64> {
        self.r_max
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.r
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.r
    }
}

impl std::ops::Index<usize> for TaVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.r[i]
    }
}

/// Probability of each schedule in a family (same order as `family.sets()`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDistribution {
    tau: Vec<f64>,
    family: IndependentSetFamily,
}

impl ScheduleDistribution {
    /// Wraps raw probabilities; they are renormalized to sum to one.
    pub fn from_weights(family: &IndependentSetFamily, mut tau: Vec<f64>) -> Self {
        assert_eq!(tau.len(), family.len());
        let total: f64 = tau.iter().sum();
        assert!(total > 0.0 && tau.iter().all(|p| *p >= 0.0));
        for p in &mut tau {
            *p /= total;
        }
        Self {
            tau,
            family: family.clone(),
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.tau
    }

    pub fn family(&self) -> &IndependentSetFamily {
        &self.family
    }

    /// Total-variation distance to another distribution over the same family.
    pub fn total_variation(&self, other: &ScheduleDistribution) -> f64 {
        assert_eq!(self.tau.len(), other.tau.len());
        0.5 * self
            .tau
            .iter()
            .zip(&other.tau)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .tau
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// Fraction of airtime per link (unit link capacity).
#[derive(Debug, Clone, PartialEq)]
pub struct LinkRateVector(pub Vec<f64>);

impl LinkRateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for LinkRateVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Exponents `beta * Σ_{l∈i} r_l`, one per schedule.
fn schedule_exponents(family: &IndependentSetFamily, r: &[f64], beta: f64) -> Vec<f64> {
    assert_eq!(r.len(), family.link_count(), "TA vector length must match the graph");
    family
        .sets()
        .iter()
        .map(|s| beta * s.links().map(|l| r[l]).sum::<f64>())
        .collect()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for p in &mut w {
        *p /= total;
    }
    w
}

pub fn stationary_distribution(family: &IndependentSetFamily, r: &TaVector, beta: f64) -> ScheduleDistribution {
    assert!(beta > 0.0, "beta must be positive");
    ScheduleDistribution {
        tau: stationary_probabilities(family, r.as_slice(), beta),
        family: family.clone(),
    }
}

/// Slice form of [`stationary_distribution`] for hot loops.
pub fn stationary_probabilities(family: &IndependentSetFamily, r: &[f64], beta: f64) -> Vec<f64> {
    softmax(&schedule_exponents(family, r, beta))
}

/// `y_l = Σ_{i∋l} tau_i`.
pub fn link_service_rates(dist: &ScheduleDistribution) -> LinkRateVector {
    LinkRateVector(service_from_probabilities(dist.family(), dist.probabilities()))
}

pub fn service_from_probabilities(family: &IndependentSetFamily, tau: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; family.link_count()];
    for (set, p) in family.sets().iter().zip(tau) {
        for l in set.links() {
            y[l] += p;
        }
    }
    y
}

/// Link rates under the product form, straight from `r`.
pub fn link_rates(family: &IndependentSetFamily, r: &[f64], beta: f64) -> Vec<f64> {
    service_from_probabilities(family, &stationary_probabilities(family, r, beta))
}

/// Legacy CSMA: every link uses the same backoff ratio `rho = exp(beta * r)`,
/// so a schedule's weight is `rho^|i|`.
pub fn lcsma_throughput(family: &IndependentSetFamily, rho: f64) -> LinkRateVector {
    assert!(rho > 0.0, "rho must be positive");
    let ln_rho = rho.ln();
    let exponents: Vec<f64> = family.sets().iter().map(|s| s.len() as f64 * ln_rho).collect();
    LinkRateVector(service_from_probabilities(family, &softmax(&exponents)))
}

/// `g_beta(r) = (1/beta) ln Σ_i exp(beta Σ_{l∈i} r_l)`.
pub fn log_partition(family: &IndependentSetFamily, r: &TaVector, beta: f64) -> f64 {
    log_partition_slice(family, r.as_slice(), beta)
}

pub fn log_partition_slice(family: &IndependentSetFamily, r: &[f64], beta: f64) -> f64 {
    assert!(beta > 0.0, "beta must be positive");
    log_sum_exp(&schedule_exponents(family, r, beta)) / beta
}

/// Analytic gradient of `g_beta`, equal to the link service rates.
pub fn log_partition_gradient(family: &IndependentSetFamily, r: &TaVector, beta: f64) -> Vec<f64> {
    link_rates(family, r.as_slice(), beta)
}

/// Link-by-link covariance of schedule membership under `tau`, scaled by
/// `beta`; this is the Hessian of `g_beta`.
pub fn log_partition_hessian(family: &IndependentSetFamily, tau: &[f64], beta: f64) -> Vec<Vec<f64>> {
    let n = family.link_count();
    let y = service_from_probabilities(family, tau);
    let mut h = vec![vec![0.0; n]; n];
    for (set, p) in family.sets().iter().zip(tau) {
        for a in set.links() {
            for b in set.links() {
                h[a][b] += p;
            }
        }
    }
    for a in 0..n {
        for b in 0..n {
            h[a][b] = beta * (h[a][b] - y[a] * y[b]);
        }
    }
    h
}

/// Reusable evaluator of the product form for repeated calls on one family.
#[derive(Debug, Clone)]
pub struct ProductForm {
    sets: Vec<Vec<usize>>,
    link_count: usize,
    exponents: Vec<f64>,
}

impl ProductForm {
    pub fn new(family: &IndependentSetFamily) -> Self {
        Self {
            sets: family.sets().iter().map(|s| s.links().collect()).collect(),
            link_count: family.link_count(),
            exponents: vec![0.0; family.len()],
        }
    }

    /// Writes `tau(r)` into `tau` and the link rates into `y`.
    pub fn evaluate(&mut self, r: &[f64], beta: f64, tau: &mut [f64], y: &mut [f64]) {
        debug_assert_eq!(r.len(), self.link_count);
        let mut max = f64::NEG_INFINITY;
        for (e, set) in self.exponents.iter_mut().zip(&self.sets) {
            *e = beta * set.iter().map(|&l| r[l]).sum::<f64>();
            max = max.max(*e);
        }
        let mut total = 0.0;
        for (p, e) in tau.iter_mut().zip(&self.exponents) {
            *p = (e - max).exp();
            total += *p;
        }
        y.iter_mut().for_each(|v| *v = 0.0);
        for (p, set) in tau.iter_mut().zip(&self.sets) {
            *p /= total;
            for &l in set {
                y[l] += *p;
            }
        }
    }
}
