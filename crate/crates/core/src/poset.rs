//! Finite posets given by cover pairs.
//!
//! Edges are supplied in ledger orientation: `(child, parent)` means the
//! child approved the parent, so `parent < child`. The genesis is the unique
//! minimal element of a ledger poset and tips are its maximal elements.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

/// Opaque element identifier supplied by the caller.
pub type ElementId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PosetError {
    #[error("unknown element {0}")]
    UnknownElement(ElementId),
    #[error("not acyclic")]
    Cyclic,
}

/// Largest exact-width computation; bigger posets report an estimate.
pub const EXACT_WIDTH_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
struct BitSet {
    words: Vec<u64>,
}

impl BitSet {
    fn new(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
        }
    }

    fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn contains(&self, i: usize) -> bool {
        self.words[i / 64] & (1 << (i % 64)) != 0
    }

    fn union_with(&mut self, other: &BitSet) {
        for (w, o) in self.words.iter_mut().zip(&other.words) {
            *w |= o;
        }
    }

    fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// An immutable finite poset with its reachability closure precomputed.
#[derive(Debug, Clone)]
pub struct Poset {
    ids: Vec<ElementId>,
    index: HashMap<ElementId, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    // down[i] holds every j with j <= i, including i itself.
    down: Vec<BitSet>,
    ranks: Vec<usize>,
}

/// Partition of a poset into antichains, layer `k` holding the elements of
/// rank `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AntichainDecomposition {
    pub layers: Vec<Vec<ElementId>>,
}

impl AntichainDecomposition {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// One line per layer, member ids ascending and space separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for layer in &self.layers {
            let line: Vec<String> = layer.iter().map(|id| id.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Size of the largest antichain. `exact` is false when the value is the
/// largest Mirsky layer rather than a verified maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Width {
    pub size: usize,
    pub exact: bool,
}

impl Poset {
    /// Builds a poset over `elements` with the given `(child, parent)` cover
    /// pairs. Every id mentioned in a pair must be listed in `elements`.
    pub fn new<E, C>(elements: E, covers: C) -> Result<Self, PosetError>
    where
        E: IntoIterator<Item = ElementId>,
        C: IntoIterator<Item = (ElementId, ElementId)>,
    {
        let ids: Vec<ElementId> = elements
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<ElementId, usize> =
            ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let n = ids.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        for (child, parent) in covers {
            let c = *index.get(&child).ok_or(PosetError::UnknownElement(child))?;
            let p = *index.get(&parent).ok_or(PosetError::UnknownElement(parent))?;
            if c == p {
                return Err(PosetError::Cyclic);
            }
            if seen.insert((c, p)) {
                parents[c].push(p);
                children[p].push(c);
            }
        }

        let order = topological_order(&parents, &children).ok_or(PosetError::Cyclic)?;
        let mut down: Vec<BitSet> = (0..n).map(|_| BitSet::new(n)).collect();
        let mut ranks = vec![0usize; n];
        for &v in &order {
            let mut set = BitSet::new(n);
            set.insert(v);
            let mut rank = 0;
            for &p in &parents[v] {
                set.union_with(&down[p]);
                rank = rank.max(ranks[p] + 1);
            }
            down[v] = set;
            ranks[v] = rank;
        }

        Ok(Self {
            ids,
            index,
            parents,
            children,
            down,
            ranks,
        })
    }

    /// Builds a poset from an edge list alone; the element set is every id
    /// that appears in an edge.
    pub fn from_edges(edges: &[(ElementId, ElementId)]) -> Result<Self, PosetError> {
        let elements = edges.iter().flat_map(|&(c, p)| [c, p]);
        Self::new(elements, edges.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Element ids in ascending order.
    pub fn elements(&self) -> &[ElementId] {
        &self.ids
    }

    fn idx(&self, e: ElementId) -> Result<usize, PosetError> {
        self.index
            .get(&e)
            .copied()
            .ok_or(PosetError::UnknownElement(e))
    }

    /// `a <= b`: `b` reaches `a` through approvals, or they are equal.
    pub fn leq(&self, a: ElementId, b: ElementId) -> Result<bool, PosetError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        Ok(self.down[b].contains(a))
    }

    pub fn comparable(&self, a: ElementId, b: ElementId) -> Result<bool, PosetError> {
        Ok(self.leq(a, b)? || self.leq(b, a)?)
    }

    /// Longest-path rank: 0 on minimal elements.
    pub fn rank(&self, e: ElementId) -> Result<usize, PosetError> {
        Ok(self.ranks[self.idx(e)?])
    }

    pub fn minimal_elements(&self) -> Vec<ElementId> {
        (0..self.len())
            .filter(|&i| self.parents[i].is_empty())
            .map(|i| self.ids[i])
            .collect()
    }

    pub fn maximal_elements(&self) -> Vec<ElementId> {
        (0..self.len())
            .filter(|&i| self.children[i].is_empty())
            .map(|i| self.ids[i])
            .collect()
    }

    /// Number of maximal elements whose down-set contains `e`.
    pub fn reverse_rank(&self, e: ElementId) -> Result<usize, PosetError> {
        let i = self.idx(e)?;
        Ok((0..self.len())
            .filter(|&m| self.children[m].is_empty() && self.down[m].contains(i))
            .count())
    }

    /// Size of the down-set of `e`, `e` included.
    pub fn down_set_size(&self, e: ElementId) -> Result<usize, PosetError> {
        Ok(self.down[self.idx(e)?].count())
    }

    /// Partition into antichains by rank. The layer count equals the length
    /// of the longest chain.
    pub fn mirsky_decompose(&self) -> AntichainDecomposition {
        let mut layers: Vec<Vec<ElementId>> = vec![Vec::new(); self.height()];
        for (i, &rank) in self.ranks.iter().enumerate() {
            layers[rank].push(self.ids[i]);
        }
        AntichainDecomposition { layers }
    }

    /// Number of elements in the longest chain.
    pub fn height(&self) -> usize {
        self.ranks.iter().map(|r| r + 1).max().unwrap_or(0)
    }

    pub fn width(&self) -> Width {
        if self.len() <= EXACT_WIDTH_LIMIT {
            Width {
                size: self.exact_width(),
                exact: true,
            }
        } else {
            let size = self
                .mirsky_decompose()
                .layers
                .iter()
                .map(Vec::len)
                .max()
                .unwrap_or(0);
            Width { size, exact: false }
        }
    }

    fn exact_width(&self) -> usize {
        let n = self.len();
        // incomparable[i] = mask of elements incomparable with i
        let incomparable: Vec<u32> = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && !self.down[i].contains(j) && !self.down[j].contains(i))
                    .fold(0u32, |m, j| m | (1 << j))
            })
            .collect();
        let all = if n == 0 { 0 } else { u32::MAX >> (32 - n) };
        let mut best = 0;
        max_independent(all, 0, &incomparable, &mut best);
        best
    }

    /// Cover pairs that survive transitive reduction.
    pub fn reduced_edges(&self) -> BTreeSet<(ElementId, ElementId)> {
        let redundant = self.redundant_edge_set();
        self.edge_pairs()
            .filter(|e| !redundant.contains(e))
            .collect()
    }

    fn edge_pairs(&self) -> impl Iterator<Item = (ElementId, ElementId)> + '_ {
        (0..self.len()).flat_map(move |c| self.parents[c].iter().map(move |&p| (self.ids[c], self.ids[p])))
    }

    fn redundant_edge_set(&self) -> BTreeSet<(ElementId, ElementId)> {
        let mut out = BTreeSet::new();
        for c in 0..self.len() {
            for &a in &self.parents[c] {
                let shortcut = self.parents[c]
                    .iter()
                    .any(|&p| p != a && self.down[p].contains(a));
                if shortcut {
                    out.insert((self.ids[c], self.ids[a]));
                }
            }
        }
        out
    }
}

fn max_independent(candidates: u32, chosen: usize, incomparable: &[u32], best: &mut usize) {
    if chosen + candidates.count_ones() as usize <= *best {
        return;
    }
    if candidates == 0 {
        *best = chosen;
        return;
    }
    let v = candidates.trailing_zeros() as usize;
    let rest = candidates & !(1 << v);
    max_independent(rest & incomparable[v], chosen + 1, incomparable, best);
    max_independent(rest, chosen, incomparable, best);
}

fn topological_order(parents: &[Vec<usize>], children: &[Vec<usize>]) -> Option<Vec<usize>> {
    let n = parents.len();
    let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = ready.pop() {
        order.push(v);
        for &c in &children[v] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(c);
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// Every edge `(child, parent)` whose parent is also reachable from the child
/// through a longer path.
pub fn redundant_edges(
    vertices: &[ElementId],
    edges: &[(ElementId, ElementId)],
) -> Result<BTreeSet<(ElementId, ElementId)>, PosetError> {
    let poset = Poset::new(vertices.iter().copied(), edges.iter().copied())?;
    Ok(poset.redundant_edge_set())
}

/// Parses the `edge <child> <parent>` text format. Blank lines and `#`
/// comments are ignored.
pub fn parse_edge_list(text: &str) -> Result<Vec<(ElementId, ElementId)>, String> {
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["edge", child, parent] => {
                let child = child
                    .parse()
                    .map_err(|_| format!("line {}: bad child id {child:?}", lineno + 1))?;
                let parent = parent
                    .parse()
                    .map_err(|_| format!("line {}: bad parent id {parent:?}", lineno + 1))?;
                edges.push((child, parent));
            }
            _ => return Err(format!("line {}: expected `edge <child> <parent>`", lineno + 1)),
        }
    }
    Ok(edges)
}

/// Groups the members of each layer, keyed by rank. Handy for printing.
pub fn layers_by_rank(poset: &Poset) -> BTreeMap<usize, Vec<ElementId>> {
    poset
        .mirsky_decompose()
        .layers
        .into_iter()
        .enumerate()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: u64) -> Poset {
        let edges: Vec<_> = (1..n).map(|i| (i + 1, i)).collect();
        Poset::new(1..=n, edges).unwrap()
    }

    fn antichain(n: u64) -> Poset {
        Poset::new(1..=n, []).unwrap()
    }

    #[test]
    fn chain_is_totally_ordered() {
        let p = chain(3);
        assert!(p.comparable(1, 3).unwrap());
        assert_eq!(p.rank(3).unwrap(), 2);
        assert_eq!(p.height(), 3);
        assert_eq!(p.width(), Width { size: 1, exact: true });
        assert_eq!(p.mirsky_decompose().layers, vec![vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn antichain_has_one_layer() {
        let p = antichain(4);
        assert!(!p.comparable(1, 2).unwrap());
        assert_eq!(p.height(), 1);
        assert_eq!(p.width().size, 4);
        assert_eq!(p.mirsky_decompose().layers, vec![vec![1, 2, 3, 4]]);
    }

    #[test]
    fn singleton_reverse_rank() {
        let p = antichain(1);
        assert_eq!(p.reverse_rank(1).unwrap(), 1);
    }

    #[test]
    fn unknown_element() {
        let p = chain(2);
        assert_eq!(p.rank(9), Err(PosetError::UnknownElement(9)));
        assert_eq!(p.comparable(1, 9), Err(PosetError::UnknownElement(9)));
        assert!(matches!(
            Poset::new([1], [(1, 2)]),
            Err(PosetError::UnknownElement(2))
        ));
    }

    #[test]
    fn cycles_rejected() {
        assert_eq!(
            Poset::from_edges(&[(1, 2), (2, 3), (3, 1)]).unwrap_err(),
            PosetError::Cyclic
        );
        assert_eq!(Poset::from_edges(&[(4, 4)]).unwrap_err(), PosetError::Cyclic);
        assert!(redundant_edges(&[1, 2], &[(1, 2), (2, 1)]).is_err());
    }

    #[test]
    fn redundant_edge_cases() {
        let shortcut = redundant_edges(&[2, 5, 9], &[(5, 2), (9, 5), (9, 2)]).unwrap();
        assert_eq!(shortcut, BTreeSet::from([(9, 2)]));

        // diamond c -> a, c -> b, a -> g, b -> g
        let diamond = redundant_edges(&[1, 2, 3, 4], &[(4, 2), (4, 3), (2, 1), (3, 1)]).unwrap();
        assert!(diamond.is_empty());

        // a=1, b=2, c=3: (b,a), (c,b), (c,a)
        let skip = redundant_edges(&[1, 2, 3], &[(2, 1), (3, 2), (3, 1)]).unwrap();
        assert_eq!(skip, BTreeSet::from([(3, 1)]));
    }

    #[test]
    fn longest_path_rank_on_non_graded_input() {
        // 4 approves 3 (rank 2) and 1 (rank 0): longest path puts 4 at rank 3.
        let p = Poset::from_edges(&[(2, 1), (3, 2), (4, 3), (4, 1)]).unwrap();
        assert_eq!(p.rank(4).unwrap(), 3);
    }

    #[test]
    fn edge_list_parsing() {
        let text = "# a chain\nedge 2 1\n\nedge 3 2 # trailing\n";
        assert_eq!(parse_edge_list(text).unwrap(), vec![(2, 1), (3, 2)]);
        let err = parse_edge_list("edge 2 1\nvertex 3\n").unwrap_err();
        assert!(err.starts_with("line 2"), "{err}");
        assert!(parse_edge_list("edge x 1").is_err());
    }

    #[test]
    fn decomposition_text() {
        let p = Poset::from_edges(&[(3, 1), (2, 1)]).unwrap();
        assert_eq!(p.mirsky_decompose().to_text(), "1\n2 3\n");
    }

    #[test]
    fn reduced_edges_drop_shortcuts() {
        let p = Poset::from_edges(&[(2, 1), (3, 2), (3, 1)]).unwrap();
        assert_eq!(p.reduced_edges(), BTreeSet::from([(2, 1), (3, 2)]));
    }

    #[test]
    fn width_estimate_beyond_limit() {
        let p = antichain(25);
        assert_eq!(p.width(), Width { size: 25, exact: false });
    }
}
