//! User-item-bundle tripartite graph and its propagation structures.
//!
//! Two adjacency forms are built from the same graph: a symmetrically
//! normalized block adjacency for the plain-GCN path, and six row-normalized
//! relation matrices for the relational path. Both support edge-deleted views
//! for the sampling-deleting-predict training scheme; views are rebuilt sparse
//! structures with normalization constants recomputed over surviving edges.

use std::collections::BTreeSet;
use std::sync::Arc;

use thiserror::Error;

use crate::numcore::SparseMatrix;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge index out of range: {0}")]
    OutOfRange(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// The three undirected interaction edge types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeType {
    UserBundle,
    UserItem,
    BundleItem,
}

/// The six directed relations (each edge type in both directions). The name
/// reads target-from-source: `UserFromBundle` aggregates bundle neighbors
/// into user rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    UserFromItem,
    ItemFromUser,
    UserFromBundle,
    BundleFromUser,
    BundleFromItem,
    ItemFromBundle,
}

pub const RELATIONS: [Relation; 6] = [
    Relation::UserFromItem,
    Relation::ItemFromUser,
    Relation::UserFromBundle,
    Relation::BundleFromUser,
    Relation::BundleFromItem,
    Relation::ItemFromBundle,
];

impl Relation {
    pub fn index(self) -> usize {
        match self {
            Relation::UserFromItem => 0,
            Relation::ItemFromUser => 1,
            Relation::UserFromBundle => 2,
            Relation::BundleFromUser => 3,
            Relation::BundleFromItem => 4,
            Relation::ItemFromBundle => 5,
        }
    }

    pub fn inverse(self) -> Relation {
        match self {
            Relation::UserFromItem => Relation::ItemFromUser,
            Relation::ItemFromUser => Relation::UserFromItem,
            Relation::UserFromBundle => Relation::BundleFromUser,
            Relation::BundleFromUser => Relation::UserFromBundle,
            Relation::BundleFromItem => Relation::ItemFromBundle,
            Relation::ItemFromBundle => Relation::BundleFromItem,
        }
    }
}

/// A set of typed edges, in local (per-side) indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeSet {
    pub ub: BTreeSet<(u32, u32)>,
    pub ui: BTreeSet<(u32, u32)>,
    pub bi: BTreeSet<(u32, u32)>,
}

impl EdgeSet {
    pub fn is_empty(&self) -> bool {
        self.ub.is_empty() && self.ui.is_empty() && self.bi.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ub.len() + self.ui.len() + self.bi.len()
    }

    pub fn insert(&mut self, etype: EdgeType, pair: (u32, u32)) {
        match etype {
            EdgeType::UserBundle => self.ub.insert(pair),
            EdgeType::UserItem => self.ui.insert(pair),
            EdgeType::BundleItem => self.bi.insert(pair),
        };
    }
}

/// Immutable user-item-bundle interaction graph.
///
/// Edge lists are deduplicated and sorted; pairs are (user, bundle),
/// (user, item) and (bundle, item) in local per-type indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripartiteGraph {
    n_users: usize,
    n_items: usize,
    n_bundles: usize,
    edges_ub: Vec<(u32, u32)>,
    edges_ui: Vec<(u32, u32)>,
    edges_bi: Vec<(u32, u32)>,
}

/// Warnings surfaced at graph build time (not hard errors).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GraphWarnings {
    /// Bundles with fewer than 2 constituent items.
    pub small_bundles: Vec<u32>,
}

pub fn build_graph(
    n_users: usize,
    n_items: usize,
    n_bundles: usize,
    edges_ub: &[(u32, u32)],
    edges_ui: &[(u32, u32)],
    edges_bi: &[(u32, u32)],
) -> Result<(TripartiteGraph, GraphWarnings), GraphError> {
    let check = |edges: &[(u32, u32)], amax: usize, bmax: usize, name: &str| {
        for (i, &(a, b)) in edges.iter().enumerate() {
            if a as usize >= amax || b as usize >= bmax {
                return Err(GraphError::OutOfRange(format!(
                    "{name} edge {i}: ({a},{b}) outside ({amax},{bmax})"
                )));
            }
        }
        Ok(())
    };
    check(edges_ub, n_users, n_bundles, "user-bundle")?;
    check(edges_ui, n_users, n_items, "user-item")?;
    check(edges_bi, n_bundles, n_items, "bundle-item")?;

    let dedup = |edges: &[(u32, u32)]| {
        let mut v = edges.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let g = TripartiteGraph {
        n_users,
        n_items,
        n_bundles,
        edges_ub: dedup(edges_ub),
        edges_ui: dedup(edges_ui),
        edges_bi: dedup(edges_bi),
    };

    let mut bundle_sizes = vec![0usize; n_bundles];
    for &(b, _) in &g.edges_bi {
        bundle_sizes[b as usize] += 1;
    }
    let small_bundles = (0..n_bundles as u32)
        .filter(|&b| bundle_sizes[b as usize] < 2)
        .collect();
    Ok((g, GraphWarnings { small_bundles }))
}

impl TripartiteGraph {
    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_bundles(&self) -> usize {
        self.n_bundles
    }

    /// Total node count N = N_u + N_i + N_b.
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items + self.n_bundles
    }

    pub fn edges(&self, etype: EdgeType) -> &[(u32, u32)] {
        match etype {
            EdgeType::UserBundle => &self.edges_ub,
            EdgeType::UserItem => &self.edges_ui,
            EdgeType::BundleItem => &self.edges_bi,
        }
    }

    pub fn has_edge(&self, etype: EdgeType, pair: (u32, u32)) -> bool {
        self.edges(etype).binary_search(&pair).is_ok()
    }

    /// Global node index: users, then items, then bundles.
    pub fn user_global(&self, u: u32) -> usize {
        u as usize
    }

    pub fn item_global(&self, i: u32) -> usize {
        self.n_users + i as usize
    }

    pub fn bundle_global(&self, b: u32) -> usize {
        self.n_users + self.n_items + b as usize
    }

    /// Items of one bundle, ascending.
    pub fn bundle_items(&self, b: u32) -> Vec<u32> {
        let lo = self.edges_bi.partition_point(|&(bb, _)| bb < b);
        let hi = self.edges_bi.partition_point(|&(bb, _)| bb <= b);
        self.edges_bi[lo..hi].iter().map(|&(_, i)| i).collect()
    }

    /// Bundles interacted with by one user, ascending.
    pub fn user_bundles(&self, u: u32) -> Vec<u32> {
        self.edges_ub
            .iter()
            .filter(|&&(uu, _)| uu == u)
            .map(|&(_, b)| b)
            .collect()
    }

    /// The same graph with user-item and bundle-item edges dropped
    /// (the user-bundle bipartite setting).
    pub fn user_bundle_only(&self) -> TripartiteGraph {
        TripartiteGraph {
            edges_ui: Vec::new(),
            edges_bi: Vec::new(),
            ..self.clone()
        }
    }

    /// Copy of the graph with `deleted` removed. Deleting an absent edge is a
    /// contract error (it signals a sampler bug upstream).
    pub fn without_edges(&self, deleted: &EdgeSet) -> Result<TripartiteGraph, GraphError> {
        for (etype, set) in [
            (EdgeType::UserBundle, &deleted.ub),
            (EdgeType::UserItem, &deleted.ui),
            (EdgeType::BundleItem, &deleted.bi),
        ] {
            for &pair in set {
                if !self.has_edge(etype, pair) {
                    return Err(GraphError::Contract(format!(
                        "cannot delete absent {etype:?} edge {pair:?}"
                    )));
                }
            }
        }
        Ok(TripartiteGraph {
            n_users: self.n_users,
            n_items: self.n_items,
            n_bundles: self.n_bundles,
            edges_ub: self
                .edges_ub
                .iter()
                .filter(|p| !deleted.ub.contains(p))
                .copied()
                .collect(),
            edges_ui: self
                .edges_ui
                .iter()
                .filter(|p| !deleted.ui.contains(p))
                .copied()
                .collect(),
            edges_bi: self
                .edges_bi
                .iter()
                .filter(|p| !deleted.bi.contains(p))
                .copied()
                .collect(),
        })
    }
}

/// Symmetrically normalized block adjacency with self-loops:
/// D̃^{-1/2}(A+I)D̃^{-1/2} over the NxN block matrix.
#[derive(Clone, Debug)]
pub struct BlockAdjacency {
    a_hat: Arc<SparseMatrix>,
    n_users: usize,
    n_items: usize,
    n_bundles: usize,
}

impl BlockAdjacency {
    pub fn a_hat(&self) -> &Arc<SparseMatrix> {
        &self.a_hat
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items + self.n_bundles
    }
}

pub fn build_block_adjacency(g: &TripartiteGraph) -> BlockAdjacency {
    let n = g.n_nodes();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(
        2 * (g.edges_ub.len() + g.edges_ui.len() + g.edges_bi.len()) + n,
    );
    // A + I, off-diagonal blocks only (no interaction self-loops exist).
    for i in 0..n {
        triplets.push((i, i, 1.0));
    }
    for &(u, b) in &g.edges_ub {
        triplets.push((g.user_global(u), g.bundle_global(b), 1.0));
        triplets.push((g.bundle_global(b), g.user_global(u), 1.0));
    }
    for &(u, i) in &g.edges_ui {
        triplets.push((g.user_global(u), g.item_global(i), 1.0));
        triplets.push((g.item_global(i), g.user_global(u), 1.0));
    }
    for &(b, i) in &g.edges_bi {
        triplets.push((g.bundle_global(b), g.item_global(i), 1.0));
        triplets.push((g.item_global(i), g.bundle_global(b), 1.0));
    }
    let mut degree = vec![0.0f64; n];
    for &(r, _, v) in &triplets {
        degree[r] += v;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|&d| 1.0 / d.sqrt()).collect();
    for t in &mut triplets {
        t.2 *= inv_sqrt[t.0] * inv_sqrt[t.1];
    }
    let a_hat =
        SparseMatrix::from_triplets(n, n, triplets).expect("validated edges produce a valid CSR");
    BlockAdjacency {
        a_hat: Arc::new(a_hat),
        n_users: g.n_users,
        n_items: g.n_items,
        n_bundles: g.n_bundles,
    }
}

/// Six row-normalized relation matrices in global NxN coordinates. Row i of
/// relation r holds weight 1/|N_i^r| on each neighbor of node i under r.
#[derive(Clone, Debug)]
pub struct RelationalAdjacency {
    relations: [Arc<SparseMatrix>; 6],
    n_nodes: usize,
}

impl RelationalAdjacency {
    pub fn relation(&self, r: Relation) -> &Arc<SparseMatrix> {
        &self.relations[r.index()]
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }
}

pub fn build_relational_adjacency(g: &TripartiteGraph) -> RelationalAdjacency {
    let n = g.n_nodes();
    // Directed pairs (target_global, source_global) per relation.
    let mut pairs: [Vec<(usize, usize)>; 6] = Default::default();
    for &(u, b) in &g.edges_ub {
        pairs[Relation::UserFromBundle.index()].push((g.user_global(u), g.bundle_global(b)));
        pairs[Relation::BundleFromUser.index()].push((g.bundle_global(b), g.user_global(u)));
    }
    for &(u, i) in &g.edges_ui {
        pairs[Relation::UserFromItem.index()].push((g.user_global(u), g.item_global(i)));
        pairs[Relation::ItemFromUser.index()].push((g.item_global(i), g.user_global(u)));
    }
    for &(b, i) in &g.edges_bi {
        pairs[Relation::BundleFromItem.index()].push((g.bundle_global(b), g.item_global(i)));
        pairs[Relation::ItemFromBundle.index()].push((g.item_global(i), g.bundle_global(b)));
    }
    let relations = pairs.map(|pair_list| {
        let mut counts = vec![0usize; n];
        for &(t, _) in &pair_list {
            counts[t] += 1;
        }
        let triplets = pair_list
            .into_iter()
            .map(|(t, s)| (t, s, 1.0 / counts[t] as f64))
            .collect();
        Arc::new(SparseMatrix::from_triplets(n, n, triplets).expect("valid CSR"))
    });
    RelationalAdjacency {
        relations,
        n_nodes: n,
    }
}

/// Adjacency form consumed by model propagation.
#[derive(Clone, Debug)]
pub enum Adjacency {
    Block(BlockAdjacency),
    Relational(RelationalAdjacency),
}

impl Adjacency {
    pub fn n_nodes(&self) -> usize {
        match self {
            Adjacency::Block(b) => b.n_nodes(),
            Adjacency::Relational(r) => r.n_nodes(),
        }
    }
}

/// Which adjacency form to (re)build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjacencyKind {
    Block,
    Relational,
}

pub fn build_adjacency(g: &TripartiteGraph, kind: AdjacencyKind) -> Adjacency {
    match kind {
        AdjacencyKind::Block => Adjacency::Block(build_block_adjacency(g)),
        AdjacencyKind::Relational => Adjacency::Relational(build_relational_adjacency(g)),
    }
}

/// Adjacency rebuilt with a batch of edges deleted; normalization constants
/// are recomputed over the surviving neighbor sets. The base graph is
/// untouched.
#[derive(Clone, Debug)]
pub struct EdgeDeletedView {
    pub adjacency: Adjacency,
    pub deleted: EdgeSet,
}

pub fn delete_edges(
    g: &TripartiteGraph,
    kind: AdjacencyKind,
    deleted: &EdgeSet,
) -> Result<EdgeDeletedView, GraphError> {
    let filtered = g.without_edges(deleted)?;
    Ok(EdgeDeletedView {
        adjacency: build_adjacency(&filtered, kind),
        deleted: deleted.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_graph() -> TripartiteGraph {
        // Fig-3-style schematic: 3 users, 4 items, 3 bundles.
        let (g, _) = build_graph(
            3,
            4,
            3,
            &[(0, 0), (1, 0), (1, 1), (2, 2)],
            &[(0, 0), (0, 1), (1, 1), (2, 3)],
            &[(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3)],
        )
        .unwrap();
        g
    }

    #[test]
    fn empty_graph_is_valid() {
        let (g, _) = build_graph(2, 2, 2, &[], &[], &[]).unwrap();
        assert_eq!(g.edges(EdgeType::UserBundle).len(), 0);
        assert_eq!(g.n_nodes(), 6);
    }

    #[test]
    fn schematic_round_trips_counts() {
        let g = toy_graph();
        assert_eq!(
            (g.n_users(), g.n_items(), g.n_bundles()),
            (3, 4, 3)
        );
        assert_eq!(g.edges(EdgeType::UserBundle).len(), 4);
        assert_eq!(g.bundle_items(1), vec![1, 2]);
    }

    #[test]
    fn duplicate_edges_collapse() {
        let (g, _) = build_graph(1, 1, 1, &[(0, 0), (0, 0)], &[], &[(0, 0)]).unwrap();
        assert_eq!(g.edges(EdgeType::UserBundle), &[(0, 0)]);
    }

    #[test]
    fn out_of_range_edge_rejected() {
        let err = build_graph(1, 1, 1, &[(0, 1)], &[], &[]).unwrap_err();
        assert!(err.to_string().contains("(0,1)"));
    }

    #[test]
    fn small_bundle_warns() {
        let (_, w) = build_graph(1, 2, 2, &[], &[], &[(0, 0), (0, 1), (1, 0)]).unwrap();
        assert_eq!(w.small_bundles, vec![1]);
    }

    #[test]
    fn edgeless_block_adjacency_is_identity() {
        let (g, _) = build_graph(1, 2, 1, &[], &[], &[]).unwrap();
        let adj = build_block_adjacency(&g);
        assert_eq!(**adj.a_hat(), SparseMatrix::identity(4));
    }

    #[test]
    fn single_edge_block_adjacency_is_half_everywhere() {
        // one user, one bundle, one edge: A~=[[1,1],[1,1]], D~=2I, A^=0.5 everywhere
        let (g, _) = build_graph(1, 0, 1, &[(0, 0)], &[], &[]).unwrap();
        let adj = build_block_adjacency(&g);
        for r in 0..2 {
            for c in 0..2 {
                assert!((adj.a_hat().get(r, c) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn block_adjacency_symmetric_bit_exact() {
        let adj = build_block_adjacency(&toy_graph());
        assert!(adj.a_hat().is_symmetric());
        // entries in (0, 1]
        for r in 0..adj.n_nodes() {
            for (_, v) in adj.a_hat().row_entries(r) {
                assert!(v > 0.0 && v <= 1.0);
            }
        }
    }

    #[test]
    fn relation_rows_sum_to_one() {
        let g = toy_graph();
        let rel = build_relational_adjacency(&g);
        for r in RELATIONS {
            let m = rel.relation(r);
            for row in 0..m.rows() {
                let s = m.row_sum(row);
                assert!(s == 0.0 || (s - 1.0).abs() < 1e-12, "{r:?} row {row}: {s}");
            }
        }
    }

    #[test]
    fn user_with_two_bundles_gets_half_weights() {
        let (g, _) = build_graph(1, 0, 2, &[(0, 0), (0, 1)], &[], &[]).unwrap();
        let rel = build_relational_adjacency(&g);
        let m = rel.relation(Relation::UserFromBundle);
        assert!((m.get(0, g.bundle_global(0)) - 0.5).abs() < 1e-15);
        assert!((m.get(0, g.bundle_global(1)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn relation_patterns_transpose() {
        let g = toy_graph();
        let rel = build_relational_adjacency(&g);
        for r in RELATIONS {
            let a = rel.relation(r);
            let b = rel.relation(r.inverse()).transpose();
            assert_eq!(a.rows(), b.rows());
            for row in 0..a.rows() {
                let pa: Vec<usize> = a.row_entries(row).map(|(c, _)| c).collect();
                let pb: Vec<usize> = b.row_entries(row).map(|(c, _)| c).collect();
                assert_eq!(pa, pb, "{r:?} row {row}");
            }
        }
    }

    #[test]
    fn isolated_node_has_zero_row() {
        let (g, _) = build_graph(2, 1, 1, &[(0, 0)], &[], &[]).unwrap();
        let rel = build_relational_adjacency(&g);
        // user 1 never interacts: zero rows in all relations
        for r in RELATIONS {
            assert_eq!(rel.relation(r).row_sum(1), 0.0);
        }
    }

    #[test]
    fn delete_recomputes_normalization() {
        let (g, _) = build_graph(1, 0, 2, &[(0, 0), (0, 1)], &[], &[]).unwrap();
        let mut del = EdgeSet::default();
        del.insert(EdgeType::UserBundle, (0, 0));
        let view = delete_edges(&g, AdjacencyKind::Relational, &del).unwrap();
        let Adjacency::Relational(rel) = &view.adjacency else {
            panic!()
        };
        let m = rel.relation(Relation::UserFromBundle);
        assert_eq!(m.get(0, g.bundle_global(0)), 0.0);
        assert_eq!(m.get(0, g.bundle_global(1)), 1.0);
        // base unchanged
        assert!(g.has_edge(EdgeType::UserBundle, (0, 0)));
    }

    #[test]
    fn delete_all_edges_of_node_zeroes_rows() {
        let (g, _) = build_graph(1, 0, 2, &[(0, 0), (0, 1)], &[], &[]).unwrap();
        let mut del = EdgeSet::default();
        del.insert(EdgeType::UserBundle, (0, 0));
        del.insert(EdgeType::UserBundle, (0, 1));
        let view = delete_edges(&g, AdjacencyKind::Relational, &del).unwrap();
        let Adjacency::Relational(rel) = &view.adjacency else {
            panic!()
        };
        assert_eq!(rel.relation(Relation::UserFromBundle).row_sum(0), 0.0);
    }

    #[test]
    fn deleting_absent_edge_is_contract_error() {
        let (g, _) = build_graph(1, 1, 1, &[], &[], &[]).unwrap();
        let mut del = EdgeSet::default();
        del.insert(EdgeType::UserBundle, (0, 0));
        assert!(matches!(
            delete_edges(&g, AdjacencyKind::Relational, &del),
            Err(GraphError::Contract(_))
        ));
    }

    #[test]
    fn permutation_equivariance_block() {
        // permute user ids with P = reverse; A^ entries must move accordingly
        let g = toy_graph();
        let nu = g.n_users() as u32;
        let perm = |u: u32| nu - 1 - u;
        let edges_ub: Vec<_> = g
            .edges(EdgeType::UserBundle)
            .iter()
            .map(|&(u, b)| (perm(u), b))
            .collect();
        let edges_ui: Vec<_> = g
            .edges(EdgeType::UserItem)
            .iter()
            .map(|&(u, i)| (perm(u), i))
            .collect();
        let (gp, _) = build_graph(
            g.n_users(),
            g.n_items(),
            g.n_bundles(),
            &edges_ub,
            &edges_ui,
            g.edges(EdgeType::BundleItem),
        )
        .unwrap();
        let a = build_block_adjacency(&g);
        let ap = build_block_adjacency(&gp);
        let map = |i: usize| {
            if i < nu as usize {
                perm(i as u32) as usize
            } else {
                i
            }
        };
        for r in 0..g.n_nodes() {
            for (c, v) in a.a_hat().row_entries(r) {
                let vp = ap.a_hat().get(map(r), map(c));
                assert_eq!(v, vp);
            }
        }
    }
}
