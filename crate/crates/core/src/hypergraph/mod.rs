//! Placement hypergraph and balanced k-way partitioning.
//!
//! Vertices carry a two-dimensional weight `[flops, bytes]`. The objective is
//! the connectivity metric `sum_e s_e * (lambda_e - 1)` where `lambda_e` is the
//! number of parts spanned by hyperedge `e`.

mod exhaustive;
mod heuristic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blockgen::{BlockGraph, CompBlockId, DataBlockId, GroupId};

pub use exhaustive::{partition_exhaustive, EXHAUSTIVE_MAX_VERTICES};
pub use heuristic::{
    partition_heuristic, partition_heuristic_with, HeuristicConfig, PartitionStats,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PartitionError {
    #[error("vertex {vertex} weighs {weight:?}, above the per-part cap {cap:?}")]
    VertexTooHeavy {
        vertex: usize,
        weight: [u64; 2],
        cap: [f64; 2],
    },
    #[error("no balanced {parts}-way partition found")]
    Infeasible { parts: usize },
    #[error("{vertices} vertices exceeds the exhaustive search limit of {limit}")]
    TooLarge { vertices: usize, limit: usize },
    #[error("part count must be at least 1")]
    NoParts,
}

/// Hypergraph in compressed sparse form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypergraph {
    weights: Vec<[u64; 2]>,
    edge_weights: Vec<u64>,
    edge_offsets: Vec<usize>,
    pins: Vec<u32>,
    vertex_offsets: Vec<usize>,
    incidence: Vec<u32>,
}

impl Hypergraph {
    /// Pins of each edge are sorted and deduplicated.
    pub fn new(weights: Vec<[u64; 2]>, edges: Vec<(u64, Vec<u32>)>) -> Self {
        let n = weights.len();
        let mut edge_weights = Vec::with_capacity(edges.len());
        let mut edge_offsets = Vec::with_capacity(edges.len() + 1);
        let mut pins = Vec::new();
        let mut degree = vec![0usize; n];
        edge_offsets.push(0);
        for (w, mut p) in edges {
            p.sort_unstable();
            p.dedup();
            for &v in &p {
                assert!((v as usize) < n, "pin {v} out of range");
                degree[v as usize] += 1;
            }
            pins.extend(p);
            edge_weights.push(w);
            edge_offsets.push(pins.len());
        }
        let mut vertex_offsets = Vec::with_capacity(n + 1);
        vertex_offsets.push(0);
        for d in &degree {
            vertex_offsets.push(vertex_offsets.last().unwrap() + d);
        }
        let mut fill = vertex_offsets.clone();
        let mut incidence = vec![0u32; pins.len()];
        for e in 0..edge_weights.len() {
            for &v in &pins[edge_offsets[e]..edge_offsets[e + 1]] {
                incidence[fill[v as usize]] = e as u32;
                fill[v as usize] += 1;
            }
        }
        Hypergraph {
            weights,
            edge_weights,
            edge_offsets,
            pins,
            vertex_offsets,
            incidence,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.weights.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_weights.len()
    }

    pub fn weight(&self, v: usize) -> [u64; 2] {
        self.weights[v]
    }

    pub fn weights(&self) -> &[[u64; 2]] {
        &self.weights
    }

    pub fn edge_weight(&self, e: usize) -> u64 {
        self.edge_weights[e]
    }

    pub fn pins(&self, e: usize) -> &[u32] {
        &self.pins[self.edge_offsets[e]..self.edge_offsets[e + 1]]
    }

    pub fn incident(&self, v: usize) -> &[u32] {
        &self.incidence[self.vertex_offsets[v]..self.vertex_offsets[v + 1]]
    }

    pub fn total_weight(&self) -> [u64; 2] {
        self.weights
            .iter()
            .fold([0, 0], |acc, w| [acc[0] + w[0], acc[1] + w[1]])
    }

    /// Sub-hypergraph on `vertices` (in the given order). Edges keep only
    /// their pins inside the subset; edges left with fewer than two pins are
    /// dropped since they can never be cut. Returns the graph and, per new
    /// edge, the index of the edge it came from.
    pub fn induced(&self, vertices: &[usize]) -> (Hypergraph, Vec<usize>) {
        let mut local = vec![u32::MAX; self.num_vertices()];
        for (i, &v) in vertices.iter().enumerate() {
            local[v] = i as u32;
        }
        let mut seen = vec![false; self.num_edges()];
        let mut edges = Vec::new();
        let mut origin = Vec::new();
        for &v in vertices {
            for &e in self.incident(v) {
                let e = e as usize;
                if std::mem::replace(&mut seen[e], true) {
                    continue;
                }
                let p: Vec<u32> = self
                    .pins(e)
                    .iter()
                    .filter_map(|&u| {
                        let l = local[u as usize];
                        (l != u32::MAX).then_some(l)
                    })
                    .collect();
                if p.len() >= 2 {
                    edges.push((self.edge_weights[e], p));
                    origin.push(e);
                }
            }
        }
        let weights = vertices.iter().map(|&v| self.weights[v]).collect();
        (Hypergraph::new(weights, edges), origin)
    }
}

/// `sum_e s_e * (lambda_e - 1)` for a total assignment.
pub fn connectivity_cost(h: &Hypergraph, assignment: &[u32]) -> u64 {
    assert_eq!(assignment.len(), h.num_vertices());
    let mut seen: Vec<u32> = Vec::new();
    let mut cost = 0;
    for e in 0..h.num_edges() {
        seen.clear();
        for &v in h.pins(e) {
            let p = assignment[v as usize];
            if !seen.contains(&p) {
                seen.push(p);
            }
        }
        cost += h.edge_weight(e) * (seen.len().max(1) as u64 - 1);
    }
    cost
}

/// Per-part weight caps `[1 + eps_comp, 1 + eps_data] * w(N) / R`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalanceCaps {
    pub cap: [f64; 2],
}

impl BalanceCaps {
    pub fn new(total: [u64; 2], parts: usize, eps_comp: f64, eps_data: f64) -> Self {
        let r = parts as f64;
        BalanceCaps {
            cap: [
                (1.0 + eps_comp) * total[0] as f64 / r,
                (1.0 + eps_data) * total[1] as f64 / r,
            ],
        }
    }

    pub fn for_graph(h: &Hypergraph, parts: usize, eps_comp: f64, eps_data: f64) -> Self {
        Self::new(h.total_weight(), parts, eps_comp, eps_data)
    }

    pub fn fits_dim(&self, dim: usize, load: u64) -> bool {
        let cap = self.cap[dim];
        load as f64 <= cap + 1e-9 * cap.max(1.0)
    }

    pub fn fits(&self, load: [u64; 2]) -> bool {
        self.fits_dim(0, load[0]) && self.fits_dim(1, load[1])
    }
}

/// Assignment of every vertex to a part in `[0, parts)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub assignment: Vec<u32>,
    pub parts: usize,
    pub eps_comp: f64,
    pub eps_data: f64,
}

impl Partition {
    pub fn part_weights(&self, h: &Hypergraph) -> Vec<[u64; 2]> {
        let mut w = vec![[0u64; 2]; self.parts];
        for (v, &p) in self.assignment.iter().enumerate() {
            let x = h.weight(v);
            w[p as usize][0] += x[0];
            w[p as usize][1] += x[1];
        }
        w
    }

    pub fn caps(&self, h: &Hypergraph) -> BalanceCaps {
        BalanceCaps::for_graph(h, self.parts, self.eps_comp, self.eps_data)
    }

    /// Whether every part satisfies both caps.
    pub fn is_balanced(&self, h: &Hypergraph) -> bool {
        let caps = self.caps(h);
        self.part_weights(h).iter().all(|&w| caps.fits(w))
    }

    pub fn cost(&self, h: &Hypergraph) -> u64 {
        connectivity_cost(h, &self.assignment)
    }

    /// `{vertex_id: part}` as JSON.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<usize, u32> = self.assignment.iter().copied().enumerate().collect();
        serde_json::to_string_pretty(&map).expect("partition serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VertexKind {
    Group(GroupId),
    Comp(CompBlockId),
}

/// The hypergraph of a block graph plus the maps back to blocks.
///
/// Vertex `i < groups.len()` is co-location group `i`; the remaining vertices
/// are computation blocks in id order. Edge `i` belongs to data block `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockHypergraph {
    pub graph: Hypergraph,
    pub num_groups: usize,
}

impl BlockHypergraph {
    pub fn group_vertex(&self, g: GroupId) -> usize {
        g.index()
    }

    pub fn comp_vertex(&self, c: CompBlockId) -> usize {
        self.num_groups + c.index()
    }

    pub fn kind(&self, v: usize) -> VertexKind {
        if v < self.num_groups {
            VertexKind::Group(GroupId(v as u32))
        } else {
            VertexKind::Comp(CompBlockId((v - self.num_groups) as u32))
        }
    }

    pub fn edge_block(&self, e: usize) -> DataBlockId {
        DataBlockId(e as u32)
    }
}

/// One vertex per computation block, one per co-location group, one hyperedge
/// per data block joining its group to every computation block that reads or
/// writes it.
pub fn build_hypergraph(g: &BlockGraph) -> BlockHypergraph {
    let num_groups = g.groups.len();
    let mut weights = Vec::with_capacity(num_groups + g.comp_blocks.len());
    weights.extend(g.groups.iter().map(|grp| [0, grp.size_bytes]));
    weights.extend(g.comp_blocks.iter().map(|c| [c.flops, 0]));
    let users = g.users();
    let edges = g
        .data_blocks
        .iter()
        .zip(users)
        .map(|(d, comps)| {
            let mut pins = Vec::with_capacity(comps.len() + 1);
            pins.push(d.group.0);
            pins.extend(comps.iter().map(|c| (num_groups + c.index()) as u32));
            (d.size_bytes, pins)
        })
        .collect();
    BlockHypergraph {
        graph: Hypergraph::new(weights, edges),
        num_groups,
    }
}
