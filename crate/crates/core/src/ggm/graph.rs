//! Undirected simple graphs over metabolite nodes, stored as a bitset over
//! unordered node pairs. No self loops by construction.

use serde_json::json;

use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;

/// Largest node count for exhaustive graph enumeration (2^10 graphs).
pub const MAX_ENUMERATE_NODES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Graph {
    p: usize,
    bits: Vec<u64>,
}

/// Triangular index of the unordered pair (h, k), h < k, over p nodes.
fn pair_index(p: usize, h: usize, k: usize) -> usize {
    debug_assert!(h < k && k < p);
    // Pairs ordered (0,1), (0,2), ..., (0,p-1), (1,2), ...
    h * p - h * (h + 1) / 2 + (k - h - 1)
}

impl Graph {
    pub fn empty(p: usize) -> Self {
        let n_pairs = p * p.saturating_sub(1) / 2;
        Graph { p, bits: vec![0u64; n_pairs.div_ceil(64).max(1)] }
    }

    pub fn complete(p: usize) -> Self {
        let mut g = Graph::empty(p);
        for h in 0..p {
            for k in (h + 1)..p {
                g.set_edge(h, k, true);
            }
        }
        g
    }

    /// Builds from an explicit edge list; rejects self loops, out-of-range
    /// nodes and duplicate edges.
    pub fn from_edges(p: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Graph::empty(p);
        for &(a, b) in edges {
            if a == b {
                return Err(Error::InvalidArgument(format!("self loop at node {a}")));
            }
            let (h, k) = if a < b { (a, b) } else { (b, a) };
            if k >= p {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a}, {b}) out of range for {p} nodes"
                )));
            }
            if g.has_edge(h, k) {
                return Err(Error::InvalidArgument(format!("duplicate edge ({h}, {k})")));
            }
            g.set_edge(h, k, true);
        }
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.p
    }

    pub fn n_pairs(&self) -> usize {
        self.p * self.p.saturating_sub(1) / 2
    }

    pub fn has_edge(&self, h: usize, k: usize) -> bool {
        if h == k {
            return false;
        }
        let (h, k) = if h < k { (h, k) } else { (k, h) };
        let idx = pair_index(self.p, h, k);
        self.bits[idx / 64] >> (idx % 64) & 1 == 1
    }

    pub fn set_edge(&mut self, h: usize, k: usize, present: bool) {
        debug_assert_ne!(h, k);
        let (h, k) = if h < k { (h, k) } else { (k, h) };
        let idx = pair_index(self.p, h, k);
        if present {
            self.bits[idx / 64] |= 1 << (idx % 64);
        } else {
            self.bits[idx / 64] &= !(1 << (idx % 64));
        }
    }

    pub fn flip_edge(&mut self, h: usize, k: usize) {
        let now = self.has_edge(h, k);
        self.set_edge(h, k, !now);
    }

    pub fn n_edges(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Edges as sorted (h, k) pairs with h < k.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_edges());
        for h in 0..self.p {
            for k in (h + 1)..self.p {
                if self.has_edge(h, k) {
                    out.push((h, k));
                }
            }
        }
        out
    }

    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        (0..self.p).filter(|&u| u != v && self.has_edge(u, v)).collect()
    }

    /// All unordered pairs, edge or not, in index order.
    pub fn all_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_pairs());
        for h in 0..self.p {
            for k in (h + 1)..self.p {
                out.push((h, k));
            }
        }
        out
    }

    /// Stable identity for cache keys.
    pub fn key(&self) -> (usize, Vec<u64>) {
        (self.p, self.bits.clone())
    }

    /// JSON document {"nodes": [...], "edges": [[h, k], ...]} with edges
    /// referring to positions in the node list.
    pub fn to_json(&self, node_names: &[String]) -> serde_json::Value {
        assert_eq!(node_names.len(), self.p, "node name count must match graph order");
        json!({
            "nodes": node_names,
            "edges": self.edges().iter().map(|&(h, k)| vec![h, k]).collect::<Vec<_>>(),
        })
    }
}

/// Log pmf of the Bernoulli edge prior: |E| log d + (pairs - |E|) log(1-d).
pub fn graph_prior_logpmf(graph: &Graph, d: f64) -> Result<f64> {
    if !(d > 0.0 && d < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "edge prior probability must lie in (0,1), got {d}"
        )));
    }
    let e = graph.n_edges() as f64;
    let pairs = graph.n_pairs() as f64;
    Ok(e * d.ln() + (pairs - e) * (1.0 - d).ln())
}

/// Draws a graph with independent Bernoulli(d) edges.
pub fn sample_graph_prior(p: usize, d: f64, rng: &mut Rng) -> Result<Graph> {
    if !(d > 0.0 && d < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "edge prior probability must lie in (0,1), got {d}"
        )));
    }
    let mut g = Graph::empty(p);
    for h in 0..p {
        for k in (h + 1)..p {
            if rng.random::<f64>() < d {
                g.set_edge(h, k, true);
            }
        }
    }
    Ok(g)
}

/// Every graph on p nodes, in edge-bitmask order. Exponential in the pair
/// count, so p is capped at MAX_ENUMERATE_NODES.
pub fn enumerate_graphs(p: usize) -> Result<Vec<Graph>> {
    if p > MAX_ENUMERATE_NODES {
        return Err(Error::InvalidArgument(format!(
            "graph enumeration is only supported for p <= {MAX_ENUMERATE_NODES}, got {p}"
        )));
    }
    let pairs: Vec<(usize, usize)> = Graph::empty(p).all_pairs();
    let n_pairs = pairs.len();
    let mut out = Vec::with_capacity(1usize << n_pairs);
    for mask in 0u64..(1u64 << n_pairs) {
        let mut g = Graph::empty(p);
        for (i, &(h, k)) in pairs.iter().enumerate() {
            if mask >> i & 1 == 1 {
                g.set_edge(h, k, true);
            }
        }
        out.push(g);
    }
    Ok(out)
}
