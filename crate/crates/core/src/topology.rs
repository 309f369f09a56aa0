//! Conflict graphs and the independent sets (feasible schedules) they admit.
//!
//! Links are indexed `0..link_count` and a schedule is stored as a bitmask
//! over those indices, so graphs are capped at [`MAX_LINKS`] links.

use std::fmt;

use thiserror::Error;

/// Upper bound on the number of links an enumerable graph may have.
pub const MAX_LINKS: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("conflict graph has {0} links, enumeration is limited to {MAX_LINKS}")]
    TooManyLinks(usize),
    #[error("conflict graph needs at least one link")]
    Empty,
    #[error("link {link} is out of range for a graph with {link_count} links")]
    LinkOutOfRange { link: usize, link_count: usize },
    #[error("link {0} cannot conflict with itself")]
    SelfConflict(usize),
}

/// A set of links encoded as a bitmask (bit `l` set means link `l` is in the set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct LinkSet(pub u32);

impl LinkSet {
    pub const EMPTY: LinkSet = LinkSet(0);

    pub fn from_links<I: IntoIterator<Item = usize>>(links: I) -> Self {
        LinkSet(links.into_iter().fold(0u32, |acc, l| acc | (1 << l)))
    }

    #[inline]
    pub fn contains(self, link: usize) -> bool {
        self.0 >> link & 1 == 1
    }

    #[inline]
    pub fn with(self, link: usize) -> Self {
        LinkSet(self.0 | (1 << link))
    }

    #[inline]
    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn links(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..32).filter(move |l| bits >> l & 1 == 1)
    }
}

impl fmt::Display for LinkSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, l) in self.links().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", l)?;
        }
        f.write_str("}")
    }
}

/// Wireless links plus the symmetric carrier-sensing (conflict) relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictGraph {
    link_count: usize,
    // neighbors[l] has bit m set iff l and m conflict
    neighbors: Vec<LinkSet>,
}

impl ConflictGraph {
    pub fn new(link_count: usize, conflicts: &[(usize, usize)]) -> Result<Self, TopologyError> {
        if link_count == 0 {
            return Err(TopologyError::Empty);
        }
        if link_count > MAX_LINKS {
            return Err(TopologyError::TooManyLinks(link_count));
        }
        let mut neighbors = vec![LinkSet::EMPTY; link_count];
        for &(u, v) in conflicts {
            for link in [u, v] {
                if link >= link_count {
                    return Err(TopologyError::LinkOutOfRange { link, link_count });
                }
            }
            if u == v {
                return Err(TopologyError::SelfConflict(u));
            }
            neighbors[u] = neighbors[u].with(v);
            neighbors[v] = neighbors[v].with(u);
        }
        Ok(Self { link_count, neighbors })
    }

    /// Every pair of links conflicts.
    pub fn complete(link_count: usize) -> Result<Self, TopologyError> {
        let pairs: Vec<_> = (0..link_count)
            .flat_map(|u| (u + 1..link_count).map(move |v| (u, v)))
            .collect();
        Self::new(link_count, &pairs)
    }

    pub fn link_count(&self) -> usize {
        self.link_count
    }

    pub fn neighbors(&self, link: usize) -> LinkSet {
        self.neighbors[link]
    }

    pub fn conflicts(&self, u: usize, v: usize) -> bool {
        self.neighbors[u].contains(v)
    }

    /// Conflict pairs `(u, v)` with `u < v`, in lexicographic order.
    pub fn conflict_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.link_count)
            .flat_map(|u| {
                self.neighbors[u]
                    .links()
                    .filter(move |&v| v > u)
                    .map(move |v| (u, v))
            })
            .collect()
    }

    pub fn is_independent(&self, set: LinkSet) -> bool {
        set.links().all(|l| (self.neighbors[l].0 & set.0) == 0)
    }
}

/// All independent sets of a conflict graph, ascending by bitmask value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndependentSetFamily {
    sets: Vec<LinkSet>,
    graph: ConflictGraph,
}

impl IndependentSetFamily {
    pub fn sets(&self) -> &[LinkSet] {
        &self.sets
    }

    pub fn graph(&self) -> &ConflictGraph {
        &self.graph
    }

    pub fn link_count(&self) -> usize {
        self.graph.link_count
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    /// Always false: the empty schedule is a member of every family.
    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn index_of(&self, set: LinkSet) -> Option<usize> {
        self.sets.binary_search(&set).ok()
    }
}

/// Enumerates every independent set of `graph`.
///
/// Sets are grown one link at a time: link `l` is appended to each set built
/// from links `< l` that contains none of `l`'s neighbors.
pub fn enumerate_independent_sets(graph: &ConflictGraph) -> Result<IndependentSetFamily, TopologyError> {
    if graph.link_count > MAX_LINKS {
        return Err(TopologyError::TooManyLinks(graph.link_count));
    }
    let mut sets = vec![LinkSet::EMPTY];
    for l in 0..graph.link_count {
        let blocked = graph.neighbors[l].0;
        let extended: Vec<LinkSet> = sets
            .iter()
            .filter(|s| s.0 & blocked == 0)
            .map(|s| s.with(l))
            .collect();
        sets.extend(extended);
    }
    sets.sort_unstable();
    Ok(IndependentSetFamily {
        sets,
        graph: graph.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn topology_a() -> ConflictGraph {
        // links 1..4 of the four-WLAN example, stored zero-based
        ConflictGraph::new(4, &[(0, 1), (1, 2), (1, 3), (2, 3)]).unwrap()
    }

    fn brute_force(graph: &ConflictGraph) -> Vec<LinkSet> {
        (0..1u32 << graph.link_count())
            .map(LinkSet)
            .filter(|s| graph.is_independent(*s))
            .collect()
    }

    #[test]
    fn topology_a_sets() {
        let family = enumerate_independent_sets(&topology_a()).unwrap();
        let expected: Vec<LinkSet> = [
            vec![],
            vec![0],
            vec![1],
            vec![2],
            vec![3],
            vec![0, 2],
            vec![0, 3],
        ]
        .into_iter()
        .map(LinkSet::from_links)
        .collect();
        let mut expected_sorted = expected.clone();
        expected_sorted.sort();
        assert_eq!(family.sets(), expected_sorted.as_slice());
    }

    #[test]
    fn single_link() {
        let g = ConflictGraph::new(1, &[]).unwrap();
        let family = enumerate_independent_sets(&g).unwrap();
        assert_eq!(family.sets(), &[LinkSet(0), LinkSet(1)]);
    }

    #[test]
    fn clique_admits_only_singletons() {
        let g = ConflictGraph::complete(3).unwrap();
        let family = enumerate_independent_sets(&g).unwrap();
        assert_eq!(family.sets(), &[LinkSet(0), LinkSet(1), LinkSet(2), LinkSet(4)]);
    }

    #[test]
    fn rejects_bad_graphs() {
        assert_eq!(ConflictGraph::new(31, &[]), Err(TopologyError::TooManyLinks(31)));
        assert_eq!(ConflictGraph::new(0, &[]), Err(TopologyError::Empty));
        assert_eq!(ConflictGraph::new(2, &[(1, 1)]), Err(TopologyError::SelfConflict(1)));
        assert_eq!(
            ConflictGraph::new(2, &[(0, 2)]),
            Err(TopologyError::LinkOutOfRange { link: 2, link_count: 2 })
        );
    }

    #[test]
    fn thirty_link_clique_enumerates() {
        let g = ConflictGraph::complete(MAX_LINKS).unwrap();
        assert_eq!(enumerate_independent_sets(&g).unwrap().len(), MAX_LINKS + 1);
    }

    fn arb_graph(max_links: usize) -> impl Strategy<Value = ConflictGraph> {
        (1..=max_links).prop_flat_map(|n| {
            let pairs: Vec<(usize, usize)> =
                (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
            let m = pairs.len();
            proptest::collection::vec(any::<bool>(), m).prop_map(move |mask| {
                let chosen: Vec<_> = pairs
                    .iter()
                    .zip(&mask)
                    .filter(|(_, &keep)| keep)
                    .map(|(p, _)| *p)
                    .collect();
                ConflictGraph::new(n, &chosen).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(g in arb_graph(12)) {
            let family = enumerate_independent_sets(&g).unwrap();
            let expected = brute_force(&g);
            prop_assert_eq!(family.sets(), expected.as_slice());
        }

        #[test]
        fn size_bound_tight_only_for_complete_graphs(g in arb_graph(8)) {
            let family = enumerate_independent_sets(&g).unwrap();
            let n = g.link_count();
            prop_assert!(family.len() >= n + 1);
            let complete = g.conflict_pairs().len() == n * (n - 1) / 2;
            prop_assert_eq!(family.len() == n + 1, complete);
        }

        #[test]
        fn every_member_is_independent(g in arb_graph(10)) {
            let family = enumerate_independent_sets(&g).unwrap();
            prop_assert!(family.sets().contains(&LinkSet::EMPTY));
            for s in family.sets() {
                for (u, v) in g.conflict_pairs() {
                    prop_assert!(!(s.contains(u) && s.contains(v)));
                }
            }
        }
    }
}
