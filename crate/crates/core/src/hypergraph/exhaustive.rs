//! Branch-and-bound search for the optimal balanced partition of small graphs.

use super::{BalanceCaps, Hypergraph, Partition, PartitionError};

pub const EXHAUSTIVE_MAX_VERTICES: usize = 16;

struct Search<'a> {
    h: &'a Hypergraph,
    k: usize,
    caps: BalanceCaps,
    assign: Vec<u32>,
    pins_in: Vec<u32>,
    lambda: Vec<u32>,
    load: Vec<[u64; 2]>,
    cost: u64,
    best: Option<(u64, Vec<u32>)>,
}

impl Search<'_> {
    fn place(&mut self, v: usize, p: usize) -> u64 {
        let mut added = 0;
        for &e in self.h.incident(v) {
            let e = e as usize;
            let slot = &mut self.pins_in[e * self.k + p];
            if *slot == 0 {
                if self.lambda[e] > 0 {
                    added += self.h.edge_weight(e);
                }
                self.lambda[e] += 1;
            }
            *slot += 1;
        }
        let w = self.h.weight(v);
        self.load[p][0] += w[0];
        self.load[p][1] += w[1];
        self.assign[v] = p as u32;
        self.cost += added;
        added
    }

    fn unplace(&mut self, v: usize, p: usize, added: u64) {
        for &e in self.h.incident(v) {
            let e = e as usize;
            let slot = &mut self.pins_in[e * self.k + p];
            *slot -= 1;
            if *slot == 0 {
                self.lambda[e] -= 1;
            }
        }
        let w = self.h.weight(v);
        self.load[p][0] -= w[0];
        self.load[p][1] -= w[1];
        self.cost -= added;
    }

    fn dfs(&mut self, v: usize, used: usize) {
        if let Some((b, _)) = &self.best {
            if self.cost >= *b {
                return;
            }
        }
        if v == self.h.num_vertices() {
            self.best = Some((self.cost, self.assign.clone()));
            return;
        }
        let w = self.h.weight(v);
        // parts beyond the first unused one are symmetric
        let limit = (used + 1).min(self.k);
        for p in 0..limit {
            let l = [self.load[p][0] + w[0], self.load[p][1] + w[1]];
            if !self.caps.fits(l) {
                continue;
            }
            let added = self.place(v, p);
            self.dfs(v + 1, used.max(p + 1));
            self.unplace(v, p, added);
        }
    }
}

/// Optimal balanced partition by enumeration; ties resolve to the
/// lexicographically smallest assignment.
pub fn partition_exhaustive(
    h: &Hypergraph,
    parts: usize,
    eps_comp: f64,
    eps_data: f64,
) -> Result<Partition, PartitionError> {
    let n = h.num_vertices();
    if n > EXHAUSTIVE_MAX_VERTICES {
        return Err(PartitionError::TooLarge {
            vertices: n,
            limit: EXHAUSTIVE_MAX_VERTICES,
        });
    }
    if parts == 0 {
        return Err(PartitionError::NoParts);
    }
    let mut search = Search {
        h,
        k: parts,
        caps: BalanceCaps::for_graph(h, parts, eps_comp, eps_data),
        assign: vec![0; n],
        pins_in: vec![0; h.num_edges() * parts],
        lambda: vec![0; h.num_edges()],
        load: vec![[0; 2]; parts],
        cost: 0,
        best: None,
    };
    search.dfs(0, 0);
    match search.best {
        Some((_, assignment)) => Ok(Partition {
            assignment,
            parts,
            eps_comp,
            eps_data,
        }),
        None => Err(PartitionError::Infeasible { parts }),
    }
}
