//! Membership in the capacity region: rate vectors dominated by a convex
//! combination of independent-set indicators.

use super::simplex::{maximize, LpOutcome};
use crate::csma::{LinkRateVector, ScheduleDistribution};
use crate::topology::IndependentSetFamily;

/// Relative tolerance on the scaling factor that separates the verdicts.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Membership {
    /// `y` can be scaled up and stay schedulable.
    Inside,
    /// `y` is schedulable with no room to scale up.
    Boundary,
    Outside,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapacityVerdict {
    pub membership: Membership,
    /// Largest `λ` with `λ·y` in the region (`inf` for `y = 0`).
    pub max_scaling: f64,
    /// Schedule distribution serving at least `y`, when one exists.
    pub certificate: Option<ScheduleDistribution>,
}

impl CapacityVerdict {
    pub fn is_feasible(&self) -> bool {
        self.membership != Membership::Outside
    }
}

/// Decides whether some `tau` on the simplex has `Σ_{i∋l} tau_i >= y_l` for
/// every link by maximizing the uniform scaling `λ` of `y`.
pub fn capacity_membership(family: &IndependentSetFamily, y: &LinkRateVector) -> CapacityVerdict {
    let links = family.link_count();
    assert_eq!(y.len(), links);
    assert!(y.as_slice().iter().all(|v| *v >= 0.0 && v.is_finite()), "rates must be nonnegative");

    let empty = family.index_of(crate::topology::LinkSet::EMPTY).expect("empty set is always present");
    if y.as_slice().iter().all(|v| *v == 0.0) {
        let mut tau = vec![0.0; family.len()];
        tau[empty] = 1.0;
        return CapacityVerdict {
            membership: Membership::Inside,
            max_scaling: f64::INFINITY,
            certificate: Some(ScheduleDistribution::from_weights(family, tau)),
        };
    }

    // variables: tau over non-empty sets, then λ; the empty set absorbs slack
    let columns: Vec<usize> = (0..family.len()).filter(|&i| i != empty).collect();
    let n = columns.len() + 1;
    let mut a = Vec::with_capacity(links + 1);
    let mut b = Vec::with_capacity(links + 1);
    for l in 0..links {
        let mut row: Vec<f64> = columns
            .iter()
            .map(|&i| if family.sets()[i].contains(l) { -1.0 } else { 0.0 })
            .collect();
        row.push(y[l]);
        a.push(row);
        b.push(0.0);
    }
    let mut simplex_row = vec![1.0; columns.len()];
    simplex_row.push(0.0);
    a.push(simplex_row);
    b.push(1.0);
    let mut c = vec![0.0; n];
    c[n - 1] = 1.0;

    let LpOutcome::Optimal { x, value } = maximize(&c, &a, &b) else {
        unreachable!("λ is bounded once some y_l > 0");
    };
    let mut tau = vec![0.0; family.len()];
    for (k, &i) in columns.iter().enumerate() {
        tau[i] = x[k].max(0.0);
    }
    let used: f64 = tau.iter().sum();
    tau[empty] = (1.0 - used).max(0.0);

    let membership = if value > 1.0 + MEMBERSHIP_TOL {
        Membership::Inside
    } else if value >= 1.0 - MEMBERSHIP_TOL {
        Membership::Boundary
    } else {
        Membership::Outside
    };
    CapacityVerdict {
        membership,
        max_scaling: value,
        certificate: (membership != Membership::Outside).then(|| ScheduleDistribution::from_weights(family, tau)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csma::{link_service_rates, lcsma_throughput};
    use crate::topology::{enumerate_independent_sets, ConflictGraph};
    use proptest::prelude::*;

    fn family_a() -> IndependentSetFamily {
        enumerate_independent_sets(&ConflictGraph::new(4, &[(0, 1), (1, 2), (1, 3), (2, 3)]).unwrap()).unwrap()
    }

    fn dominates(cert: &ScheduleDistribution, y: &[f64]) -> bool {
        link_service_rates(cert)
            .as_slice()
            .iter()
            .zip(y)
            .all(|(s, d)| *s >= d - 1e-9)
    }

    #[test]
    fn explicit_certificate_on_topology_a() {
        let y = [0.5, 0.0, 0.5, 0.5];
        let v = capacity_membership(&family_a(), &LinkRateVector(y.to_vec()));
        assert!(v.is_feasible());
        // tau({1,3}) = tau({1,4}) = 1/2 is the only way to serve links 3 and 4
        assert_eq!(v.membership, Membership::Boundary);
        assert!(dominates(v.certificate.as_ref().unwrap(), &y));
    }

    #[test]
    fn zero_is_inside_and_overload_is_outside() {
        let v = capacity_membership(&family_a(), &LinkRateVector(vec![0.0; 4]));
        assert_eq!(v.membership, Membership::Inside);
        let single = enumerate_independent_sets(&ConflictGraph::new(1, &[]).unwrap()).unwrap();
        let v = capacity_membership(&single, &LinkRateVector(vec![1.01]));
        assert_eq!(v.membership, Membership::Outside);
        assert!(v.certificate.is_none());
        assert!((v.max_scaling - 1.0 / 1.01).abs() < 1e-12);
    }

    #[test]
    fn interior_point_of_topology_a() {
        let y = [0.3, 0.3, 0.3, 0.3];
        let v = capacity_membership(&family_a(), &LinkRateVector(y.to_vec()));
        assert_eq!(v.membership, Membership::Inside);
        assert!(dominates(v.certificate.as_ref().unwrap(), &y));
    }

    proptest! {
        #[test]
        fn product_form_rates_are_schedulable(rho in 0.1f64..10.0, scale in 0.5f64..1.5) {
            let fam = family_a();
            let y = lcsma_throughput(&fam, rho);
            let scaled = LinkRateVector(y.as_slice().iter().map(|v| v * scale).collect());
            let v = capacity_membership(&fam, &scaled);
            if scale < 1.0 {
                prop_assert!(v.is_feasible());
                prop_assert!(dominates(v.certificate.as_ref().unwrap(), scaled.as_slice()));
            }
            // y itself is schedulable, so λ*(scale·y) >= 1/scale
            prop_assert!(v.max_scaling >= 1.0 / scale - 1e-9);
        }
    }
}
