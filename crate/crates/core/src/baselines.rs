//! Fixed-configuration baselines: ring and zigzag context parallelism and
//! pure data parallelism.

use serde::{Deserialize, Serialize};

use crate::blockgen::{BlockGraph, BlockKind};
use crate::model::DeviceTopology;
use crate::placement::{PlacementResult, PlacementStrategy};
use crate::scheduler::{
    schedule, schedule_from_parts, DeviceDivision, DivisionSchedule, Message, ScheduleError,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BaselineError {
    #[error(
        "sequence {seq_id} ({tokens} tokens) does not fit the per-device cap of {cap:.1} tokens"
    )]
    Infeasible {
        seq_id: String,
        tokens: usize,
        cap: f64,
    },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Ring,
    Zigzag,
    Dp,
}

impl std::str::FromStr for Baseline {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ring" => Ok(Baseline::Ring),
            "zigzag" => Ok(Baseline::Zigzag),
            "dp" => Ok(Baseline::Dp),
            other => Err(format!("unknown baseline {other:?}")),
        }
    }
}

/// Place every computation block with its Q block.
fn follow_queries(
    g: &BlockGraph,
    topo: &DeviceTopology,
    strategy: PlacementStrategy,
    group_device: Vec<u32>,
) -> PlacementResult {
    let comps = g
        .comp_blocks
        .iter()
        .map(|c| group_device[g.group_of(c.q_block).index()])
        .collect();
    PlacementResult::from_assignment(g, topo, strategy, group_device, comps)
}

/// Chunk of tile `t` when `tiles` tiles are cut into `chunks` contiguous
/// chunks and the last chunk takes the remainder.
fn chunk_of(t: usize, tiles: usize, chunks: usize) -> usize {
    let size = (tiles / chunks).max(1);
    (t / size).min(chunks - 1)
}

/// Chunk `i` of every sequence on device `i`.
pub fn ring_placement(g: &BlockGraph, topo: &DeviceTopology) -> PlacementResult {
    let r = topo.num_devices();
    let groups = g
        .groups
        .iter()
        .map(|grp| chunk_of(grp.tile, g.sequences[grp.seq].tiles, r) as u32)
        .collect();
    follow_queries(g, topo, PlacementStrategy::Ring, groups)
}

/// Each sequence cut into `2R` chunks; device `i` owns chunks `i` and `2R - 1 - i`.
pub fn zigzag_placement(g: &BlockGraph, topo: &DeviceTopology) -> PlacementResult {
    let r = topo.num_devices();
    let groups = g
        .groups
        .iter()
        .map(|grp| {
            let c = chunk_of(grp.tile, g.sequences[grp.seq].tiles, 2 * r);
            c.min(2 * r - 1 - c) as u32
        })
        .collect();
    follow_queries(g, topo, PlacementStrategy::Zigzag, groups)
}

/// Whole sequences, longest first, each onto the device holding the fewest
/// tokens so far.
pub fn dp_placement(
    g: &BlockGraph,
    topo: &DeviceTopology,
    token_budget: usize,
    eps_data: f64,
) -> Result<PlacementResult, BaselineError> {
    let r = topo.num_devices();
    let cap = token_budget as f64 / r as f64 * (1.0 + eps_data);
    let mut order: Vec<usize> = (0..g.sequences.len()).collect();
    order.sort_by_key(|&s| (std::cmp::Reverse(g.sequences[s].length), s));
    let mut tokens = vec![0usize; r];
    let mut seq_device = vec![0u32; g.sequences.len()];
    for s in order {
        let d = (0..r)
            .min_by_key(|&d| (tokens[d], d))
            .expect("at least one device");
        let len = g.sequences[s].length;
        if (tokens[d] + len) as f64 > cap + 1e-9 {
            return Err(BaselineError::Infeasible {
                seq_id: g.sequences[s].seq_id.clone(),
                tokens: len,
                cap,
            });
        }
        tokens[d] += len;
        seq_device[s] = d as u32;
    }
    let groups = g.groups.iter().map(|grp| seq_device[grp.seq]).collect();
    Ok(follow_queries(
        g,
        topo,
        PlacementStrategy::DataParallel,
        groups,
    ))
}

/// The ring's fixed communication: in step `s` device `r` receives from
/// device `r - 1` every KV block originally placed on device `r - s`,
/// whether or not any of its queries attend to it, and computes against them.
///
/// Requires a placement whose computation blocks sit with their Q blocks,
/// as produced by [`ring_placement`] and [`zigzag_placement`].
pub fn ring_schedule(g: &BlockGraph, pl: &PlacementResult) -> DivisionSchedule {
    let r = pl.num_devices;
    let mut owned_kv: Vec<Vec<Message>> = vec![Vec::new(); r];
    for d in g.data_blocks.iter().filter(|d| d.kind == BlockKind::Kv) {
        owned_kv[pl.device_of_data(d.id)].push(Message {
            block: d.id,
            kind: d.kind,
            src: 0,
            dst: 0,
            bytes: d.size_bytes,
        });
    }
    let mut divisions = vec![vec![DeviceDivision::default(); r]; r];
    for c in &g.comp_blocks {
        let here = pl.comp_device[c.id.index()] as usize;
        let origin = pl.device_of_data(c.kv_block);
        let step = (here + r - origin) % r;
        let div = &mut divisions[step][here];
        div.comps.push(c.id);
        div.flops += c.flops;
    }
    for (step, div) in divisions.iter_mut().enumerate().skip(1) {
        for (here, d) in div.iter_mut().enumerate() {
            let origin = (here + r - step) % r;
            let prev = (here + r - 1) % r;
            d.fetches = owned_kv[origin]
                .iter()
                .map(|m| Message {
                    src: prev,
                    dst: here,
                    ..*m
                })
                .collect();
        }
    }
    schedule_from_parts(g, pl, divisions)
}

/// Placement and schedule of a baseline. Ring and zigzag use the ring's
/// step schedule; data parallelism runs the regular scheduler and moves nothing.
pub fn baseline_plan(
    kind: Baseline,
    g: &BlockGraph,
    topo: &DeviceTopology,
    token_budget: usize,
    eps_data: f64,
    divisions: usize,
) -> Result<(PlacementResult, DivisionSchedule), BaselineError> {
    match kind {
        Baseline::Ring => {
            let pl = ring_placement(g, topo);
            let s = ring_schedule(g, &pl);
            Ok((pl, s))
        }
        Baseline::Zigzag => {
            let pl = zigzag_placement(g, topo);
            let s = ring_schedule(g, &pl);
            Ok((pl, s))
        }
        Baseline::Dp => {
            let pl = dp_placement(g, topo, token_budget, eps_data)?;
            let s = schedule(g, &pl, divisions.max(2))?;
            Ok((pl, s))
        }
    }
}

/// KV transfers a schedule performs and how many of them carry a block no
/// computation on the receiving device reads.
pub fn kv_redundancy(g: &BlockGraph, pl: &PlacementResult, s: &DivisionSchedule) -> (usize, usize) {
    let users = g.users();
    let mut total = 0;
    let mut redundant = 0;
    for m in s.all_messages().filter(|m| m.kind == BlockKind::Kv) {
        total += 1;
        let needed = users[m.block.index()]
            .iter()
            .any(|c| pl.comp_device[c.index()] as usize == m.dst);
        if !needed {
            redundant += 1;
        }
    }
    (total, redundant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockgen::generate_blocks;
    use crate::mask::MaskDescriptor;
    use crate::model::{AttentionShape, Batch, SequenceSpec};
    use crate::placement::communication_volume;

    fn graph(lengths: &[usize], b: usize) -> BlockGraph {
        let seqs = lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| SequenceSpec::new(format!("s{i}"), l, MaskDescriptor::Causal))
            .collect();
        let shape = AttentionShape {
            heads: 1,
            kv_groups: 1,
            head_dim: 2,
            bytes_per_element: 1,
        };
        generate_blocks(&Batch::new(seqs, 64, shape).unwrap(), b).unwrap()
    }

    #[test]
    fn zigzag_pairs_outer_chunks() {
        let g = graph(&[8], 1);
        let pl = zigzag_placement(&g, &DeviceTopology::flat(2).unwrap());
        assert_eq!(pl.group_device, vec![0, 0, 1, 1, 1, 1, 0, 0]);
    }

    #[test]
    fn ring_on_one_device_moves_nothing() {
        let g = graph(&[8, 4], 2);
        let topo = DeviceTopology::flat(1).unwrap();
        let pl = ring_placement(&g, &topo);
        assert_eq!(ring_schedule(&g, &pl).total_bytes(), 0);
    }

    #[test]
    fn causal_ring_loads_last_device_most() {
        let g = graph(&[16, 16], 1);
        let pl = ring_placement(&g, &DeviceTopology::flat(4).unwrap());
        let flops: Vec<u64> = pl.balance.iter().map(|b| b.flops).collect();
        assert!(flops.windows(2).all(|w| w[0] < w[1]), "{flops:?}");
    }

    #[test]
    fn zigzag_balances_causal_compute() {
        let g = graph(&[32], 1);
        let pl = zigzag_placement(&g, &DeviceTopology::flat(4).unwrap());
        let flops: Vec<u64> = pl.balance.iter().map(|b| b.flops).collect();
        let mean = flops.iter().sum::<u64>() as f64 / 4.0;
        // one query row of the largest tile: 32 pairs, 4 * 2 flops each
        let tile = 32.0 * 4.0 * 2.0;
        assert!(
            flops.iter().all(|&f| (f as f64 - mean).abs() <= tile),
            "{flops:?}"
        );
    }

    #[test]
    fn zigzag_and_ring_circulate_the_same_bytes() {
        let g = graph(&[16, 8], 1);
        let topo = DeviceTopology::flat(4).unwrap();
        let ring = ring_schedule(&g, &ring_placement(&g, &topo)).total_bytes();
        let zig = ring_schedule(&g, &zigzag_placement(&g, &topo)).total_bytes();
        assert_eq!(ring, zig);
    }

    #[test]
    fn dp_moves_nothing_and_balances_equal_sequences() {
        let g = graph(&[8, 8, 8, 8], 4);
        let topo = DeviceTopology::flat(2).unwrap();
        let pl = dp_placement(&g, &topo, 32, 0.0).unwrap();
        assert_eq!(communication_volume(&g, &pl).total, 0);
        assert_eq!(pl.balance[0].flops, pl.balance[1].flops);
    }

    #[test]
    fn dp_rejects_oversized_sequence() {
        let g = graph(&[40, 8], 4);
        let topo = DeviceTopology::flat(2).unwrap();
        assert!(matches!(
            dp_placement(&g, &topo, 64, 0.05),
            Err(BaselineError::Infeasible { .. })
        ));
    }
}
