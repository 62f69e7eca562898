//! Multilevel partitioner: heavy-edge coarsening, greedy initial placement and
//! k-way FM refinement under two-dimensional caps.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BalanceCaps, Hypergraph, Partition, PartitionError};

/// Edges larger than this are ignored when rating contraction partners.
const RATING_EDGE_LIMIT: usize = 64;
/// Edges larger than this do not trigger eager gain updates during FM.
const UPDATE_EDGE_LIMIT: usize = 256;
const SWAP_CANDIDATES: usize = 12;
/// Exchanges [`rebalance`] may fall back on, and overloaded vertices each considers.
const REPAIR_SWAPS: usize = 32;
const REPAIR_CANDIDATES: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct HeuristicConfig {
    pub parts: usize,
    pub eps_comp: f64,
    pub eps_data: f64,
    pub seed: u64,
    /// Greedy initial partitions tried on the coarsest level.
    pub initial_tries: usize,
    /// Refinement passes per level.
    pub max_passes: usize,
    /// Stop coarsening at this many vertices; 0 picks a size from `parts`.
    pub coarsen_until: usize,
}

impl HeuristicConfig {
    pub fn new(parts: usize, eps_comp: f64, eps_data: f64, seed: u64) -> Self {
        HeuristicConfig {
            parts,
            eps_comp,
            eps_data,
            seed,
            initial_tries: 8,
            max_passes: 12,
            coarsen_until: 0,
        }
    }
}

/// What the partitioner did, for diagnostics and tests.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartitionStats {
    /// `(cost before, cost after)` of every refinement pass, all levels.
    pub passes: Vec<(u64, u64)>,
    /// Final cost of each candidate pipeline, `None` when it found no balanced result.
    pub candidates: Vec<(&'static str, Option<u64>)>,
    pub chosen: &'static str,
}

/// Balanced partition of `h` into `parts` parts with the default configuration.
pub fn partition_heuristic(
    h: &Hypergraph,
    parts: usize,
    eps_comp: f64,
    eps_data: f64,
    seed: u64,
) -> Result<Partition, PartitionError> {
    let cfg = HeuristicConfig::new(parts, eps_comp, eps_data, seed);
    partition_heuristic_with(h, &cfg, None).map(|(p, _)| p)
}

/// Like [`partition_heuristic`], optionally also refining a caller-supplied
/// starting assignment; the best balanced candidate wins.
pub fn partition_heuristic_with(
    h: &Hypergraph,
    cfg: &HeuristicConfig,
    hint: Option<&[u32]>,
) -> Result<(Partition, PartitionStats), PartitionError> {
    let k = cfg.parts;
    if k == 0 {
        return Err(PartitionError::NoParts);
    }
    let caps = BalanceCaps::for_graph(h, k, cfg.eps_comp, cfg.eps_data);
    for v in 0..h.num_vertices() {
        if !caps.fits(h.weight(v)) {
            return Err(PartitionError::VertexTooHeavy {
                vertex: v,
                weight: h.weight(v),
                cap: caps.cap,
            });
        }
    }
    let finish = |assignment: Vec<u32>| Partition {
        assignment,
        parts: k,
        eps_comp: cfg.eps_comp,
        eps_data: cfg.eps_data,
    };
    let mut stats = PartitionStats::default();
    if k == 1 {
        stats.chosen = "single";
        return Ok((finish(vec![0; h.num_vertices()]), stats));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(u64, Vec<u32>, &'static str)> = None;
    let mut consider =
        |name: &'static str, result: Option<Vec<u32>>, stats: &mut PartitionStats| {
            let cost = result.as_ref().map(|a| super::connectivity_cost(h, a));
            stats.candidates.push((name, cost));
            if let (Some(a), Some(c)) = (result, cost) {
                if best.as_ref().is_none_or(|(b, _, _)| c < *b) {
                    best = Some((c, a, name));
                }
            }
        };

    let ml = multilevel(h, cfg, &caps, &mut rng, &mut stats);
    consider("multilevel", ml, &mut stats);
    let rr = refine_start(h, k, &caps, round_robin(h, k), cfg.max_passes, &mut stats);
    consider("round_robin", rr, &mut stats);
    let chunks = refine_start(h, k, &caps, contiguous(h, k), cfg.max_passes, &mut stats);
    consider("contiguous", chunks, &mut stats);
    if let Some(hint) = hint {
        assert_eq!(hint.len(), h.num_vertices(), "hint length");
        let refined = refine_start(h, k, &caps, hint.to_vec(), cfg.max_passes, &mut stats);
        consider("hint", refined, &mut stats);
    }

    match best {
        Some((_, assignment, name)) => {
            stats.chosen = name;
            Ok((finish(assignment), stats))
        }
        None => Err(PartitionError::Infeasible { parts: k }),
    }
}

/// Mutable partition with per-edge pin counts.
struct State<'a> {
    h: &'a Hypergraph,
    k: usize,
    assign: Vec<u32>,
    pins_in: Vec<u32>,
    load: Vec<[u64; 2]>,
    cost: u64,
    conn: Vec<u64>,
}

impl<'a> State<'a> {
    fn new(h: &'a Hypergraph, k: usize, assign: Vec<u32>) -> Self {
        let mut pins_in = vec![0u32; h.num_edges() * k];
        let mut cost = 0;
        for e in 0..h.num_edges() {
            let mut lambda = 0;
            for &v in h.pins(e) {
                let slot = &mut pins_in[e * k + assign[v as usize] as usize];
                if *slot == 0 {
                    lambda += 1;
                }
                *slot += 1;
            }
            cost += h.edge_weight(e) * (lambda.max(1) - 1);
        }
        let mut load = vec![[0u64; 2]; k];
        for (v, &p) in assign.iter().enumerate() {
            let w = h.weight(v);
            load[p as usize][0] += w[0];
            load[p as usize][1] += w[1];
        }
        State {
            h,
            k,
            assign,
            pins_in,
            load,
            cost,
            conn: vec![0; k],
        }
    }

    fn count(&self, e: usize, p: usize) -> u32 {
        self.pins_in[e * self.k + p]
    }

    fn gain(&self, v: usize, to: usize) -> i64 {
        let from = self.assign[v] as usize;
        if from == to {
            return 0;
        }
        let mut g = 0i64;
        for &e in self.h.incident(v) {
            let e = e as usize;
            let s = self.h.edge_weight(e) as i64;
            if self.count(e, from) == 1 {
                g += s;
            }
            if self.count(e, to) == 0 {
                g -= s;
            }
        }
        g
    }

    fn move_to(&mut self, v: usize, to: usize) {
        let from = self.assign[v] as usize;
        if from == to {
            return;
        }
        let g = self.gain(v, to);
        for &e in self.h.incident(v) {
            let e = e as usize;
            self.pins_in[e * self.k + from] -= 1;
            self.pins_in[e * self.k + to] += 1;
        }
        let w = self.h.weight(v);
        self.load[from][0] -= w[0];
        self.load[from][1] -= w[1];
        self.load[to][0] += w[0];
        self.load[to][1] += w[1];
        self.assign[v] = to as u32;
        self.cost = (self.cost as i64 - g) as u64;
    }

    fn fits_after_add(&self, p: usize, w: [u64; 2], caps: &BalanceCaps) -> bool {
        (w[0] == 0 || caps.fits_dim(0, self.load[p][0] + w[0]))
            && (w[1] == 0 || caps.fits_dim(1, self.load[p][1] + w[1]))
    }

    /// Highest-gain move of `v` to a part that stays within caps; lowest part on ties.
    fn best_move(&mut self, v: usize, caps: &BalanceCaps) -> Option<(usize, i64)> {
        let from = self.assign[v] as usize;
        let w = self.h.weight(v);
        self.conn.iter_mut().for_each(|c| *c = 0);
        let mut base = 0i64;
        let mut total = 0i64;
        for &e in self.h.incident(v) {
            let e = e as usize;
            let s = self.h.edge_weight(e);
            total += s as i64;
            if self.count(e, from) == 1 {
                base += s as i64;
            }
            for p in 0..self.k {
                if self.pins_in[e * self.k + p] > 0 {
                    self.conn[p] += s;
                }
            }
        }
        let mut best: Option<(usize, i64)> = None;
        for p in 0..self.k {
            if p == from || !self.fits_after_add(p, w, caps) {
                continue;
            }
            let g = base - (total - self.conn[p] as i64);
            if best.is_none_or(|(_, bg)| g > bg) {
                best = Some((p, g));
            }
        }
        best
    }

    fn is_balanced(&self, caps: &BalanceCaps) -> bool {
        self.load.iter().all(|&l| caps.fits(l))
    }

    fn on_boundary(&self, v: usize) -> bool {
        self.h.incident(v).iter().any(|&e| {
            let e = e as usize;
            (0..self.k)
                .filter(|&p| self.count(e, p) > 0)
                .nth(1)
                .is_some()
        })
    }
}

/// One FM pass with rollback to the best prefix. Never increases the cost.
fn fm_pass(st: &mut State, caps: &BalanceCaps) -> u64 {
    let n = st.h.num_vertices();
    let mut heap: BinaryHeap<(i64, Reverse<usize>, usize)> = BinaryHeap::new();
    for v in 0..n {
        if st.on_boundary(v) {
            if let Some((to, g)) = st.best_move(v, caps) {
                heap.push((g, Reverse(v), to));
            }
        }
    }
    let mut locked = vec![false; n];
    let mut moves: Vec<(usize, usize)> = Vec::new();
    let mut running = 0i64;
    let mut best = 0i64;
    let mut best_len = 0;
    let stall_limit = 50.max(n / 8);
    let mut stalled = 0;
    while let Some((g, Reverse(v), to)) = heap.pop() {
        if locked[v] {
            continue;
        }
        match st.best_move(v, caps) {
            None => continue,
            Some((to2, g2)) if to2 != to || g2 != g => {
                heap.push((g2, Reverse(v), to2));
                continue;
            }
            Some(_) => {}
        }
        let from = st.assign[v] as usize;
        st.move_to(v, to);
        locked[v] = true;
        moves.push((v, from));
        running += g;
        if running > best {
            best = running;
            best_len = moves.len();
            stalled = 0;
        } else {
            stalled += 1;
            if stalled > stall_limit {
                break;
            }
        }
        let h = st.h;
        for &e in h.incident(v) {
            let pins = h.pins(e as usize);
            if pins.len() > UPDATE_EDGE_LIMIT {
                continue;
            }
            for &u in pins {
                let u = u as usize;
                if !locked[u] {
                    if let Some((t, gu)) = st.best_move(u, caps) {
                        heap.push((gu, Reverse(u), t));
                    }
                }
            }
        }
    }
    for &(v, from) in moves[best_len..].iter().rev() {
        st.move_to(v, from);
    }
    best.max(0) as u64
}

/// Pairwise exchanges of data-carrying vertices between parts. Useful when
/// data caps are tight and single moves are blocked.
fn swap_pass(st: &mut State, caps: &BalanceCaps) -> u64 {
    let n = st.h.num_vertices();
    let mut improved = 0u64;
    let mut touched = vec![false; n];
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); st.k];
    for v in 0..n {
        if st.h.weight(v)[1] > 0 {
            buckets[st.assign[v] as usize].push(v);
        }
    }
    let top = |st: &State, touched: &[bool], from: usize, to: usize| {
        let mut c: Vec<(i64, usize)> = buckets[from]
            .iter()
            .filter(|&&v| !touched[v] && st.assign[v] as usize == from)
            .map(|&v| (st.gain(v, to), v))
            .collect();
        c.sort_by_key(|&(g, v)| (Reverse(g), v));
        c.truncate(SWAP_CANDIDATES);
        c
    };
    for a in 0..st.k {
        for b in (a + 1)..st.k {
            let ua = top(st, &touched, a, b);
            let ub = top(st, &touched, b, a);
            for &(ga, u) in &ua {
                for &(gb, v) in &ub {
                    if touched[u] || touched[v] || ga + gb <= 0 && ga.max(gb) <= 0 {
                        continue;
                    }
                    let (wu, wv) = (st.h.weight(u), st.h.weight(v));
                    let la = [st.load[a][0] - wu[0] + wv[0], st.load[a][1] - wu[1] + wv[1]];
                    let lb = [st.load[b][0] - wv[0] + wu[0], st.load[b][1] - wv[1] + wu[1]];
                    let ok_a = (wv[0] <= wu[0] || caps.fits_dim(0, la[0]))
                        && (wv[1] <= wu[1] || caps.fits_dim(1, la[1]));
                    let ok_b = (wu[0] <= wv[0] || caps.fits_dim(0, lb[0]))
                        && (wu[1] <= wv[1] || caps.fits_dim(1, lb[1]));
                    if !(ok_a && ok_b) {
                        continue;
                    }
                    let before = st.cost;
                    st.move_to(u, b);
                    st.move_to(v, a);
                    if st.cost < before {
                        improved += before - st.cost;
                        touched[u] = true;
                        touched[v] = true;
                    } else {
                        st.move_to(v, b);
                        st.move_to(u, a);
                    }
                }
            }
        }
    }
    improved
}

fn refine(st: &mut State, caps: &BalanceCaps, max_passes: usize, stats: &mut PartitionStats) {
    for _ in 0..max_passes {
        let before = st.cost;
        let mut gained = fm_pass(st, caps);
        if st.k > 1 {
            gained += swap_pass(st, caps);
        }
        debug_assert_eq!(before - gained, st.cost);
        stats.passes.push((before, st.cost));
        if gained == 0 {
            break;
        }
    }
}

/// Move vertices out of overloaded parts, cheapest first, until every part
/// fits. Returns false when stuck.
fn rebalance(st: &mut State, caps: &BalanceCaps) -> bool {
    let n = st.h.num_vertices();
    let mut swaps = 0;
    for _round in 0..(2 * n + 8) {
        let mut worst: Option<(f64, usize, usize)> = None;
        for p in 0..st.k {
            for d in 0..2 {
                if !caps.fits_dim(d, st.load[p][d]) {
                    let ratio = st.load[p][d] as f64 / caps.cap[d].max(f64::MIN_POSITIVE);
                    if worst.is_none_or(|(r, _, _)| ratio > r) {
                        worst = Some((ratio, p, d));
                    }
                }
            }
        }
        let Some((_, p, d)) = worst else {
            return true;
        };
        let mut cands: Vec<(i64, usize, usize)> = Vec::new();
        for v in 0..n {
            if st.assign[v] as usize == p && st.h.weight(v)[d] > 0 {
                if let Some((to, g)) = st.best_move(v, caps) {
                    cands.push((g, v, to));
                }
            }
        }
        cands.sort_by_key(|&(g, v, _)| (Reverse(g), v));
        let mut moved = false;
        for (_, v, to) in cands {
            if caps.fits_dim(d, st.load[p][d]) {
                break;
            }
            if st.fits_after_add(to, st.h.weight(v), caps) {
                st.move_to(v, to);
                moved = true;
            }
        }
        if !moved {
            swaps += 1;
            if swaps > REPAIR_SWAPS || !rebalance_swap(st, caps, p, d) {
                return false;
            }
        }
    }
    st.is_balanced(caps)
}

/// Exchange a vertex of overloaded part `p` for a lighter one elsewhere so
/// that `p` sheds load in dimension `d` and the other part stays within caps.
fn rebalance_swap(st: &mut State, caps: &BalanceCaps, p: usize, d: usize) -> bool {
    let n = st.h.num_vertices();
    let other = 1 - d;
    let mut heavy: Vec<usize> = (0..n)
        .filter(|&u| st.assign[u] as usize == p && st.h.weight(u)[d] > 0)
        .collect();
    heavy.sort_by_key(|&u| (Reverse(st.h.weight(u)[d]), u));
    heavy.truncate(REPAIR_CANDIDATES);
    let mut best: Option<(u64, i64, usize, usize)> = None;
    for u in heavy {
        let wu = st.h.weight(u);
        for v in (0..n).filter(|&v| st.assign[v] as usize != p) {
            let wv = st.h.weight(v);
            if wv[d] >= wu[d] {
                continue;
            }
            let q = st.assign[v] as usize;
            let lq = [st.load[q][0] + wu[0] - wv[0], st.load[q][1] + wu[1] - wv[1]];
            let lp_other = st.load[p][other] + wv[other] - wu[other];
            if !caps.fits(lq) || (wv[other] > wu[other] && !caps.fits_dim(other, lp_other)) {
                continue;
            }
            let shed = wu[d] - wv[d];
            let gain = st.gain(u, q) + st.gain(v, p);
            if best.is_none_or(|(s, g, _, _)| (shed, gain) > (s, g)) {
                best = Some((shed, gain, u, v));
            }
        }
    }
    let Some((_, _, u, v)) = best else {
        return false;
    };
    let q = st.assign[v] as usize;
    st.move_to(u, q);
    st.move_to(v, p);
    true
}

fn refine_start(
    h: &Hypergraph,
    k: usize,
    caps: &BalanceCaps,
    assign: Vec<u32>,
    max_passes: usize,
    stats: &mut PartitionStats,
) -> Option<Vec<u32>> {
    let mut st = State::new(h, k, assign);
    if !rebalance(&mut st, caps) {
        return None;
    }
    refine(&mut st, caps, max_passes, stats);
    Some(st.assign)
}

/// Part of the data-carrying vertex sharing the heaviest edge with `v`.
fn anchor_part(h: &Hypergraph, v: usize, assign: &[u32]) -> Option<u32> {
    let mut best: Option<(u64, u32)> = None;
    for &e in h.incident(v) {
        let e = e as usize;
        for &u in h.pins(e) {
            let u = u as usize;
            if h.weight(u)[1] > 0 && assign[u] != u32::MAX {
                if best.is_none_or(|(w, _)| h.edge_weight(e) > w) {
                    best = Some((h.edge_weight(e), assign[u]));
                }
                break;
            }
        }
    }
    best.map(|(_, p)| p)
}

fn follow_anchors(h: &Hypergraph, k: usize, mut assign: Vec<u32>) -> Vec<u32> {
    let mut next = 0;
    for v in 0..h.num_vertices() {
        if assign[v] == u32::MAX {
            assign[v] = anchor_part(h, v, &assign).unwrap_or_else(|| {
                next += 1;
                ((next - 1) % k) as u32
            });
        }
    }
    assign
}

/// Data vertices dealt round-robin; the rest follow their data neighbour.
fn round_robin(h: &Hypergraph, k: usize) -> Vec<u32> {
    let mut assign = vec![u32::MAX; h.num_vertices()];
    let mut next = 0;
    for (v, slot) in assign.iter_mut().enumerate() {
        if h.weight(v)[1] > 0 {
            *slot = (next % k) as u32;
            next += 1;
        }
    }
    follow_anchors(h, k, assign)
}

/// Data vertices cut into `k` contiguous runs of equal bytes.
fn contiguous(h: &Hypergraph, k: usize) -> Vec<u32> {
    let total = h.total_weight()[1].max(1) as u128;
    let mut assign = vec![u32::MAX; h.num_vertices()];
    let mut seen = 0u128;
    for (v, slot) in assign.iter_mut().enumerate() {
        let w = h.weight(v)[1];
        if w > 0 {
            *slot = ((seen * k as u128 / total) as usize).min(k - 1) as u32;
            seen += w as u128;
        }
    }
    follow_anchors(h, k, assign)
}

/// Greedy seeding, heaviest vertices first. Each goes to the fitting part it
/// shares the most edge weight with, or with `pack` set, to the fitting part
/// left least loaded.
fn greedy_initial(
    h: &Hypergraph,
    k: usize,
    caps: &BalanceCaps,
    pack: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let n = h.num_vertices();
    let total = h.total_weight();
    let norm = |w: [u64; 2]| {
        let a = if total[0] > 0 {
            w[0] as f64 / total[0] as f64
        } else {
            0.0
        };
        let b = if total[1] > 0 {
            w[1] as f64 / total[1] as f64
        } else {
            0.0
        };
        a.max(b)
    };
    let mut order: Vec<(f64, u32, usize)> = (0..n)
        .map(|v| (norm(h.weight(v)), rng.random::<u32>(), v))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut assign = vec![u32::MAX; n];
    let mut pins_in = vec![0u32; h.num_edges() * k];
    let mut load = vec![[0u64; 2]; k];
    let mut conn = vec![0u64; k];
    for &(_, _, v) in &order {
        let w = h.weight(v);
        conn.iter_mut().for_each(|c| *c = 0);
        for &e in h.incident(v) {
            let e = e as usize;
            for p in 0..k {
                if pins_in[e * k + p] > 0 {
                    conn[p] += h.edge_weight(e);
                }
            }
        }
        let after = |p: usize| [load[p][0] + w[0], load[p][1] + w[1]];
        let fits = |p: usize| {
            let l = after(p);
            (w[0] == 0 || caps.fits_dim(0, l[0])) && (w[1] == 0 || caps.fits_dim(1, l[1]))
        };
        let pressure = |p: usize| norm(after(p));
        let choice = (0..k)
            .filter(|&p| fits(p))
            .max_by(|&a, &b| {
                let by_conn = conn[a].cmp(&conn[b]);
                let by_room = pressure(b).total_cmp(&pressure(a));
                if pack {
                    by_room.then(by_conn)
                } else {
                    by_conn.then(by_room)
                }
                .then(b.cmp(&a))
            })
            .unwrap_or_else(|| {
                (0..k)
                    .min_by(|&a, &b| pressure(a).total_cmp(&pressure(b)).then(a.cmp(&b)))
                    .unwrap()
            });
        assign[v] = choice as u32;
        load[choice][0] += w[0];
        load[choice][1] += w[1];
        for &e in h.incident(v) {
            pins_in[e as usize * k + choice] += 1;
        }
    }
    assign
}

/// One round of heavy-edge matching. Returns the coarse graph and the
/// fine-to-coarse vertex map, or `None` if the graph barely shrinks.
fn coarsen(
    h: &Hypergraph,
    max_w: [u64; 2],
    rng: &mut ChaCha8Rng,
) -> Option<(Hypergraph, Vec<u32>)> {
    let n = h.num_vertices();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut cluster = vec![u32::MAX; n];
    let mut score = vec![0f64; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut next = 0u32;
    for &u in &order {
        if cluster[u] != u32::MAX {
            continue;
        }
        for &e in h.incident(u) {
            let pins = h.pins(e as usize);
            if pins.len() < 2 || pins.len() > RATING_EDGE_LIMIT {
                continue;
            }
            let r = h.edge_weight(e as usize) as f64 / (pins.len() - 1) as f64;
            for &v in pins {
                let v = v as usize;
                if v != u && cluster[v] == u32::MAX {
                    if score[v] == 0.0 {
                        touched.push(v);
                    }
                    score[v] += r;
                }
            }
        }
        let wu = h.weight(u);
        let mut best: Option<(f64, usize)> = None;
        for &v in &touched {
            let wv = h.weight(v);
            if wu[0] + wv[0] > max_w[0] || wu[1] + wv[1] > max_w[1] {
                continue;
            }
            if best.is_none_or(|(s, b)| score[v] > s || (score[v] == s && v < b)) {
                best = Some((score[v], v));
            }
        }
        for &v in &touched {
            score[v] = 0.0;
        }
        touched.clear();
        cluster[u] = next;
        if let Some((_, v)) = best {
            cluster[v] = next;
        }
        next += 1;
    }
    let coarse_n = next as usize;
    if coarse_n as f64 > 0.95 * n as f64 {
        return None;
    }
    let mut weights = vec![[0u64; 2]; coarse_n];
    for v in 0..n {
        let c = cluster[v] as usize;
        weights[c][0] += h.weight(v)[0];
        weights[c][1] += h.weight(v)[1];
    }
    let mut edges = Vec::with_capacity(h.num_edges());
    for e in 0..h.num_edges() {
        let mut p: Vec<u32> = h.pins(e).iter().map(|&v| cluster[v as usize]).collect();
        p.sort_unstable();
        p.dedup();
        if p.len() >= 2 {
            edges.push((h.edge_weight(e), p));
        }
    }
    Some((Hypergraph::new(weights, edges), cluster))
}

fn multilevel(
    h: &Hypergraph,
    cfg: &HeuristicConfig,
    caps: &BalanceCaps,
    rng: &mut ChaCha8Rng,
    stats: &mut PartitionStats,
) -> Option<Vec<u32>> {
    let k = cfg.parts;
    let limit = if cfg.coarsen_until > 0 {
        cfg.coarsen_until
    } else {
        (30 * k).max(120)
    };
    let heaviest = h
        .weights()
        .iter()
        .fold([0u64; 2], |m, w| [m[0].max(w[0]), m[1].max(w[1])]);
    let max_w = [
        ((caps.cap[0] / 3.0) as u64).max(heaviest[0]),
        ((caps.cap[1] / 3.0) as u64).max(heaviest[1]),
    ];
    let mut levels: Vec<(Hypergraph, Vec<u32>)> = Vec::new();
    loop {
        let cur = levels.last().map(|(g, _)| g).unwrap_or(h);
        if cur.num_vertices() <= limit {
            break;
        }
        match coarsen(cur, max_w, rng) {
            Some(level) => levels.push(level),
            None => break,
        }
    }

    let coarsest = levels.last().map(|(g, _)| g).unwrap_or(h);
    let mut chosen: Option<(bool, u64, Vec<u32>)> = None;
    let tries = cfg.initial_tries.max(1);
    for t in 0..2 * tries {
        // packing-first seeds only when no connectivity-first seed balanced
        let pack = t >= tries;
        if pack && chosen.as_ref().is_some_and(|c| c.0) {
            break;
        }
        let mut st = State::new(coarsest, k, greedy_initial(coarsest, k, caps, pack, rng));
        let balanced = rebalance(&mut st, caps);
        if balanced {
            refine(&mut st, caps, cfg.max_passes, stats);
        }
        let better = match &chosen {
            None => true,
            Some((b, c, _)) => (balanced && !b) || (balanced == *b && st.cost < *c),
        };
        if better {
            chosen = Some((balanced, st.cost, st.assign));
        }
    }
    let (_, _, mut assign) = chosen?;

    for i in (0..levels.len()).rev() {
        let map = &levels[i].1;
        let finer = if i == 0 { h } else { &levels[i - 1].0 };
        let projected: Vec<u32> = map.iter().map(|&c| assign[c as usize]).collect();
        let mut st = State::new(finer, k, projected);
        if rebalance(&mut st, caps) {
            refine(&mut st, caps, cfg.max_passes, stats);
        }
        assign = st.assign;
    }
    let st = State::new(h, k, assign);
    st.is_balanced(caps).then_some(st.assign)
}
