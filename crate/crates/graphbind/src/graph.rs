//! The modality graph: correlation edge weights, fully connected and
//! minimum-spanning-tree construction, node pruning, and smoothed updates.

use crate::alignment::distance_from_correlation;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Fcg,
    Mst,
}

impl std::fmt::Display for GraphKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraphKind::Fcg => write!(f, "fcg"),
            GraphKind::Mst => write!(f, "mst"),
        }
    }
}

/// Symmetric modality-by-modality correlation weights. The diagonal is
/// ignored; an invalid entry excludes the edge everywhere downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    n: usize,
    rho: Vec<f64>,
    valid: Vec<bool>,
    distance: Vec<f64>,
}

impl EdgeWeights {
    pub fn new(n_modalities: usize) -> Self {
        EdgeWeights {
            n: n_modalities,
            rho: vec![0.0; n_modalities * n_modalities],
            valid: vec![false; n_modalities * n_modalities],
            distance: vec![f64::INFINITY; n_modalities * n_modalities],
        }
    }

    pub fn n_modalities(&self) -> usize {
        self.n
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n && i != j);
        i * self.n + j
    }

    /// Mark edge (i, j) valid with the given correlation; both orientations
    /// are written so the matrix stays exactly symmetric.
    pub fn set_edge(&mut self, i: usize, j: usize, rho: f64) -> Result<()> {
        let d = distance_from_correlation(rho)?;
        for index in [self.idx(i, j), self.idx(j, i)] {
            self.rho[index] = rho;
            self.valid[index] = true;
            self.distance[index] = d;
        }
        Ok(())
    }

    /// Fixture-only setter that stores a distance directly instead of
    /// deriving it from rho. Tree construction consumes only the distance
    /// ordering, so hand examples can use arbitrary positive weights.
    #[cfg(test)]
    pub(crate) fn set_edge_raw(&mut self, i: usize, j: usize, rho: f64, distance: f64) {
        for index in [self.idx(i, j), self.idx(j, i)] {
            self.rho[index] = rho;
            self.valid[index] = true;
            self.distance[index] = distance;
        }
    }

    pub fn clear_edge(&mut self, i: usize, j: usize) {
        for index in [self.idx(i, j), self.idx(j, i)] {
            self.rho[index] = 0.0;
            self.valid[index] = false;
            self.distance[index] = f64::INFINITY;
        }
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        i != j && self.valid[i * self.n + j]
    }

    pub fn rho(&self, i: usize, j: usize) -> Option<f64> {
        self.is_valid(i, j).then(|| self.rho[i * self.n + j])
    }

    pub fn distance(&self, i: usize, j: usize) -> Option<f64> {
        self.is_valid(i, j).then(|| self.distance[i * self.n + j])
    }

    /// Valid (i < j) pairs in lexicographic order.
    pub fn valid_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.is_valid(i, j) {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }
}

/// Smoothed edge update: EMA over correlations where both sides have an
/// estimate, direct adoption where only the observation exists, carry-over
/// where only the history exists. Distances are recomputed from the result.
pub fn update_edge_weights(
    prev: &EdgeWeights,
    observed: &EdgeWeights,
    beta: f64,
) -> Result<EdgeWeights> {
    if prev.n != observed.n {
        return Err(Error::Shape {
            op: "update_edge_weights",
            lhs: format!("{} modalities", prev.n),
            rhs: format!("{} modalities", observed.n),
        });
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("beta must be in [0, 1], got {beta}")));
    }
    let mut merged = EdgeWeights::new(prev.n);
    for i in 0..prev.n {
        for j in (i + 1)..prev.n {
            match (prev.rho(i, j), observed.rho(i, j)) {
                (Some(p), Some(o)) => merged.set_edge(i, j, beta * p + (1.0 - beta) * o)?,
                (None, Some(o)) => merged.set_edge(i, j, o)?,
                (Some(p), None) => merged.set_edge(i, j, p)?,
                (None, None) => {}
            }
        }
    }
    Ok(merged)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    pub rho: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityGraph {
    pub nodes: Vec<GraphNode>,
    /// For MST graphs the order is Kruskal acceptance order; for FCG it is
    /// lexicographic. The trainer walks edges in this order.
    pub edges: Vec<GraphEdge>,
    pub kind: GraphKind,
}

impl ModalityGraph {
    pub fn active_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| n.active.then_some(n.id))
            .collect()
    }
}

/// Union-find with path compression and union by rank.
#[derive(Debug, Clone)]
pub struct DisjointSets {
    parent: Vec<usize>,
    rank: Vec<u32>,
    components: usize,
}

impl DisjointSets {
    pub fn new(n: usize) -> Self {
        DisjointSets {
            parent: (0..n).collect(),
            rank: vec![0; n],
            components: n,
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    /// Merge the sets holding `a` and `b`; false if already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        self.components -= 1;
        true
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn same(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }
}

fn check_active(active: &[bool], weights: &EdgeWeights) -> Result<Vec<usize>> {
    if active.len() != weights.n_modalities() {
        return Err(Error::Shape {
            op: "modality_graph",
            lhs: format!("{} active flags", active.len()),
            rhs: format!("{} modalities", weights.n_modalities()),
        });
    }
    let ids: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
    if ids.len() < 2 {
        return Err(Error::Graph(format!(
            "need at least 2 active modalities, got {}",
            ids.len()
        )));
    }
    Ok(ids)
}

fn nodes_from_flags(active: &[bool]) -> Vec<GraphNode> {
    active
        .iter()
        .enumerate()
        .map(|(id, &a)| GraphNode { id, active: a })
        .collect()
}

/// Fully connected graph over the active modalities: every valid pair.
pub fn build_fcg(weights: &EdgeWeights, active: &[bool]) -> Result<ModalityGraph> {
    check_active(active, weights)?;
    let edges = weights
        .valid_pairs()
        .into_iter()
        .filter(|&(i, j)| active[i] && active[j])
        .map(|(i, j)| GraphEdge {
            i,
            j,
            rho: weights.rho(i, j).expect("valid pair"),
            distance: weights.distance(i, j).expect("valid pair"),
        })
        .collect();
    Ok(ModalityGraph {
        nodes: nodes_from_flags(active),
        edges,
        kind: GraphKind::Fcg,
    })
}

/// Kruskal over correlation distances: edges sorted ascending by distance
/// (most correlated first), ties broken lexicographically, cycle-free
/// insertions via disjoint sets. Disconnected inputs yield a forest.
pub fn kruskal_mst(weights: &EdgeWeights, active: &[bool]) -> Result<ModalityGraph> {
    let ids = check_active(active, weights)?;
    let mut candidates: Vec<GraphEdge> = weights
        .valid_pairs()
        .into_iter()
        .filter(|&(i, j)| active[i] && active[j])
        .map(|(i, j)| GraphEdge {
            i,
            j,
            rho: weights.rho(i, j).expect("valid pair"),
            distance: weights.distance(i, j).expect("valid pair"),
        })
        .collect();
    candidates.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });

    // Union-find over positions in the active id list.
    let position: std::collections::HashMap<usize, usize> =
        ids.iter().enumerate().map(|(pos, &id)| (id, pos)).collect();
    let mut sets = DisjointSets::new(ids.len());
    let mut edges = Vec::new();
    for edge in candidates {
        if sets.union(position[&edge.i], position[&edge.j]) {
            edges.push(edge);
            if edges.len() == ids.len() - 1 {
                break;
            }
        }
    }
    Ok(ModalityGraph {
        nodes: nodes_from_flags(active),
        edges,
        kind: GraphKind::Mst,
    })
}

/// Deactivate the `prune_count` unprotected nodes with the lowest sum of
/// valid correlation weights to other active nodes. Ties prune the higher
/// id first. If protection leaves fewer candidates than requested, all
/// candidates are pruned.
pub fn prune_nodes(
    weights: &EdgeWeights,
    active: &[bool],
    prune_count: usize,
    protected: &std::collections::BTreeSet<usize>,
) -> Result<Vec<bool>> {
    let ids = check_active(active, weights)?;
    if prune_count == 0 {
        return Ok(active.to_vec());
    }
    if prune_count + 2 > ids.len() {
        return Err(Error::Config(format!(
            "prune_count {} must leave at least 2 of {} active modalities",
            prune_count,
            ids.len()
        )));
    }
    let score = |i: usize| -> f64 {
        ids.iter()
            .filter(|&&j| j != i)
            .filter_map(|&j| weights.rho(i, j))
            .sum()
    };
    let mut candidates: Vec<usize> = ids
        .iter()
        .copied()
        .filter(|id| !protected.contains(id))
        .collect();
    candidates.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a)));
    let mut updated = active.to_vec();
    for &id in candidates.iter().take(prune_count) {
        updated[id] = false;
    }
    Ok(updated)
}

/// One graph-rebuild record for the snapshot log (one JSON object per line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub step: u64,
    pub kind: GraphKind,
    pub active: Vec<usize>,
    pub edges: Vec<GraphEdge>,
}

impl GraphSnapshot {
    pub fn of(step: u64, graph: &ModalityGraph) -> Self {
        GraphSnapshot {
            step,
            kind: graph.kind,
            active: graph.active_ids(),
            edges: graph.edges.clone(),
        }
    }
}
