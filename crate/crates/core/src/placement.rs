//! Hierarchical placement of blocks onto machines and then devices, and the
//! communication volume a placement implies.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockgen::{BlockGraph, BlockKind, DataBlockId};
use crate::hypergraph::{
    build_hypergraph, connectivity_cost, partition_heuristic_with, BalanceCaps, BlockHypergraph,
    HeuristicConfig, PartitionError, VertexKind,
};
use crate::mask::Span;
use crate::model::DeviceTopology;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlacementLevel {
    Machine,
    Device,
}

impl fmt::Display for PlacementLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlacementLevel::Machine => f.write_str("machine"),
            PlacementLevel::Device => f.write_str("device"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlacementError {
    #[error("{level}-level placement{}: {source}", .machine.map(|m| format!(" on machine {m}")).unwrap_or_default())]
    Partition {
        level: PlacementLevel,
        machine: Option<usize>,
        #[source]
        source: PartitionError,
    },
    #[error("sequence {seq_id} has {tokens} tokens, above the per-device cap of {cap}")]
    SequenceTooLong {
        seq_id: String,
        tokens: usize,
        cap: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementConfig {
    /// Computation imbalance tolerance across machines.
    pub eps_inter: f64,
    /// Computation imbalance tolerance across the devices of one machine.
    pub eps_intra: f64,
    /// Data imbalance tolerance at both levels.
    pub eps_data: f64,
    pub seed: u64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            eps_inter: 0.4,
            eps_intra: 0.1,
            eps_data: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementStrategy {
    Hierarchical,
    Flat,
    Ring,
    Zigzag,
    DataParallel,
    Manual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceLoad {
    pub device: usize,
    pub flops: u64,
    pub bytes: u64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub strategy: PlacementStrategy,
    pub num_devices: usize,
    pub devices_per_machine: usize,
    pub group_device: Vec<u32>,
    pub data_device: Vec<u32>,
    pub comp_device: Vec<u32>,
    /// Machine-level connectivity cost of the assignment.
    pub inter_machine_bytes: u64,
    /// Sum over machines of the device-level connectivity cost restricted to that machine.
    pub intra_machine_bytes: u64,
    pub balance: Vec<DeviceLoad>,
}

/// Tokens a device holds as model input, per sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenManifest {
    pub device: usize,
    pub sequences: Vec<(String, Vec<Span>)>,
}

impl PlacementResult {
    /// Derive data-block devices, per-level costs and loads from group and
    /// computation block devices.
    pub fn from_assignment(
        g: &BlockGraph,
        topo: &DeviceTopology,
        strategy: PlacementStrategy,
        group_device: Vec<u32>,
        comp_device: Vec<u32>,
    ) -> Self {
        assert_eq!(group_device.len(), g.groups.len());
        assert_eq!(comp_device.len(), g.comp_blocks.len());
        let r = topo.num_devices();
        assert!(
            group_device
                .iter()
                .chain(&comp_device)
                .all(|&d| (d as usize) < r),
            "device id out of range"
        );
        let data_device: Vec<u32> = g
            .data_blocks
            .iter()
            .map(|d| group_device[d.group.index()])
            .collect();
        let mut balance: Vec<DeviceLoad> = (0..r)
            .map(|device| DeviceLoad {
                device,
                flops: 0,
                bytes: 0,
                tokens: 0,
            })
            .collect();
        for (grp, &d) in g.groups.iter().zip(&group_device) {
            balance[d as usize].bytes += grp.size_bytes;
            balance[d as usize].tokens += grp.tokens.len();
        }
        for (c, &d) in g.comp_blocks.iter().zip(&comp_device) {
            balance[d as usize].flops += c.flops;
        }
        let mut pl = PlacementResult {
            strategy,
            num_devices: r,
            devices_per_machine: topo.devices_per_machine,
            group_device,
            data_device,
            comp_device,
            inter_machine_bytes: 0,
            intra_machine_bytes: 0,
            balance,
        };
        let users = g.users();
        let y = topo.devices_per_machine;
        let mut machines: Vec<u32> = Vec::new();
        let mut devices: Vec<u32> = Vec::new();
        for d in &g.data_blocks {
            machines.clear();
            devices.clear();
            let owner = pl.data_device[d.id.index()];
            devices.push(owner);
            devices.extend(
                users[d.id.index()]
                    .iter()
                    .map(|c| pl.comp_device[c.index()]),
            );
            devices.sort_unstable();
            devices.dedup();
            machines.extend(devices.iter().map(|&x| x / y as u32));
            machines.dedup();
            pl.inter_machine_bytes += d.size_bytes * (machines.len() as u64 - 1);
            // devices are sorted, so each machine's devices are contiguous
            pl.intra_machine_bytes += d.size_bytes * (devices.len() - machines.len()) as u64;
        }
        pl
    }

    pub fn device_of_data(&self, d: DataBlockId) -> usize {
        self.data_device[d.index()] as usize
    }

    pub fn machine_of(&self, device: usize) -> usize {
        device / self.devices_per_machine
    }

    /// Device of every hypergraph vertex.
    pub fn vertex_assignment(&self, bh: &BlockHypergraph) -> Vec<u32> {
        (0..bh.graph.num_vertices())
            .map(|v| match bh.kind(v) {
                VertexKind::Group(gid) => self.group_device[gid.index()],
                VertexKind::Comp(c) => self.comp_device[c.index()],
            })
            .collect()
    }

    /// Largest per-device computation load over the mean.
    pub fn compute_imbalance(&self) -> f64 {
        let total: u64 = self.balance.iter().map(|b| b.flops).sum();
        let max = self.balance.iter().map(|b| b.flops).max().unwrap_or(0);
        if total == 0 {
            return 1.0;
        }
        max as f64 * self.num_devices as f64 / total as f64
    }

    pub fn token_manifest(&self, g: &BlockGraph) -> Vec<TokenManifest> {
        let mut out: Vec<TokenManifest> = (0..self.num_devices)
            .map(|device| TokenManifest {
                device,
                sequences: Vec::new(),
            })
            .collect();
        for grp in &g.groups {
            let seq_id = &g.sequences[grp.seq].seq_id;
            let entry = &mut out[self.group_device[grp.id.index()] as usize].sequences;
            match entry.last_mut() {
                Some((id, spans)) if id == seq_id => match spans.last_mut() {
                    Some(last) if last.end == grp.tokens.start => last.end = grp.tokens.end,
                    _ => spans.push(grp.tokens),
                },
                _ => entry.push((seq_id.clone(), vec![grp.tokens])),
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("placement serializes")
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Two-level placement: machines first, then the devices of each machine.
pub fn place(
    g: &BlockGraph,
    topo: &DeviceTopology,
    cfg: &PlacementConfig,
) -> Result<PlacementResult, PlacementError> {
    place_with_hint(g, topo, cfg, None)
}

/// [`place`] that also refines `hint` (a device per hypergraph vertex) at
/// both levels and keeps it if it is better.
pub fn place_with_hint(
    g: &BlockGraph,
    topo: &DeviceTopology,
    cfg: &PlacementConfig,
    hint: Option<&[u32]>,
) -> Result<PlacementResult, PlacementError> {
    let bh = build_hypergraph(g);
    let h = &bh.graph;
    let n = h.num_vertices();
    let x = topo.machines;
    let y = topo.devices_per_machine;

    let machine: Vec<u32> = if x > 1 {
        let hc = HeuristicConfig::new(x, cfg.eps_inter, cfg.eps_data, cfg.seed);
        let machine_hint: Option<Vec<u32>> =
            hint.map(|hd| hd.iter().map(|&d| d / y as u32).collect());
        partition_heuristic_with(h, &hc, machine_hint.as_deref())
            .map_err(|source| PlacementError::Partition {
                level: PlacementLevel::Machine,
                machine: None,
                source,
            })?
            .0
            .assignment
    } else {
        vec![0; n]
    };

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); x];
    for (v, &m) in machine.iter().enumerate() {
        members[m as usize].push(v);
    }
    let local: Vec<Result<Vec<u32>, PlacementError>> = members
        .par_iter()
        .enumerate()
        .map(|(m, vs)| {
            if y == 1 || vs.is_empty() {
                return Ok(vec![0; vs.len()]);
            }
            let (sub, _) = h.induced(vs);
            let hc =
                HeuristicConfig::new(y, cfg.eps_intra, cfg.eps_data, mix_seed(cfg.seed, m as u64));
            let sub_hint: Option<Vec<u32>> =
                hint.map(|hd| vs.iter().map(|&v| hd[v] % y as u32).collect());
            partition_heuristic_with(&sub, &hc, sub_hint.as_deref())
                .map(|(p, _)| p.assignment)
                .map_err(|source| PlacementError::Partition {
                    level: PlacementLevel::Device,
                    machine: Some(m),
                    source,
                })
        })
        .collect();

    let mut device = vec![0u32; n];
    for (m, (vs, parts)) in members.iter().zip(local).enumerate() {
        let parts = parts?;
        for (&v, p) in vs.iter().zip(parts) {
            device[v] = (m * y) as u32 + p;
        }
    }
    Ok(split_vertices(
        g,
        &bh,
        topo,
        PlacementStrategy::Hierarchical,
        &device,
    ))
}

/// Whether `pl` meets the caps [`place`] enforces: machine loads against the
/// inter-machine tolerance, then device loads against their machine's.
pub fn within_caps(pl: &PlacementResult, topo: &DeviceTopology, cfg: &PlacementConfig) -> bool {
    let y = topo.devices_per_machine;
    let machines: Vec<[u64; 2]> = pl
        .balance
        .chunks(y)
        .map(|ds| {
            ds.iter()
                .fold([0, 0], |a, d| [a[0] + d.flops, a[1] + d.bytes])
        })
        .collect();
    let total = machines
        .iter()
        .fold([0, 0], |a, m| [a[0] + m[0], a[1] + m[1]]);
    let caps = BalanceCaps::new(total, machines.len(), cfg.eps_inter, cfg.eps_data);
    if machines.len() > 1 && !machines.iter().all(|&m| caps.fits(m)) {
        return false;
    }
    pl.balance.chunks(y).zip(&machines).all(|(ds, &m)| {
        let caps = BalanceCaps::new(m, y, cfg.eps_intra, cfg.eps_data);
        y == 1 || ds.iter().all(|d| caps.fits([d.flops, d.bytes]))
    })
}

/// Attempts made by [`place_relaxed`] after the first.
pub const MAX_RELAXATIONS: usize = 6;

/// [`place_with_hint`], retried with the data tolerance doubled (and at
/// least 0.1) while no balanced partition is found. Coarse blocks on a small
/// batch can make the configured tolerance unreachable. Returns the
/// placement and the data tolerance it satisfies.
pub fn place_relaxed(
    g: &BlockGraph,
    topo: &DeviceTopology,
    cfg: &PlacementConfig,
    hint: Option<&[u32]>,
) -> Result<(PlacementResult, f64), PlacementError> {
    let mut c = cfg.clone();
    let mut attempt = 0;
    loop {
        match place_with_hint(g, topo, &c, hint) {
            Ok(pl) => return Ok((pl, c.eps_data)),
            Err(PlacementError::Partition { .. }) if attempt < MAX_RELAXATIONS => {
                attempt += 1;
                let next = (c.eps_data * 2.0).max(0.1);
                log::debug!(
                    "no placement at eps_data {}, retrying at {next}",
                    c.eps_data
                );
                c.eps_data = next;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Single-level placement straight onto all `X * Y` devices.
pub fn place_flat(
    g: &BlockGraph,
    topo: &DeviceTopology,
    eps_comp: f64,
    eps_data: f64,
    seed: u64,
) -> Result<PlacementResult, PlacementError> {
    let bh = build_hypergraph(g);
    let hc = HeuristicConfig::new(topo.num_devices(), eps_comp, eps_data, seed);
    let (p, _) = partition_heuristic_with(&bh.graph, &hc, None).map_err(|source| {
        PlacementError::Partition {
            level: PlacementLevel::Device,
            machine: None,
            source,
        }
    })?;
    Ok(split_vertices(
        g,
        &bh,
        topo,
        PlacementStrategy::Flat,
        &p.assignment,
    ))
}

fn split_vertices(
    g: &BlockGraph,
    bh: &BlockHypergraph,
    topo: &DeviceTopology,
    strategy: PlacementStrategy,
    device: &[u32],
) -> PlacementResult {
    let group_device = device[..bh.num_groups].to_vec();
    let comp_device = device[bh.num_groups..].to_vec();
    PlacementResult::from_assignment(g, topo, strategy, group_device, comp_device)
}

/// Map a placement of a coarser blocking of the same batch onto `fine`.
///
/// Every fine tile must sit inside one coarse tile (coarse block sizes are
/// multiples of the fine ones). Returns a device per vertex of `fine`'s
/// hypergraph, usable as a hint.
pub fn project_placement(
    coarse: &BlockGraph,
    coarse_pl: &PlacementResult,
    fine: &BlockGraph,
) -> Option<Vec<u32>> {
    if coarse.sequences.len() != fine.sequences.len() {
        return None;
    }
    let ratio: Vec<usize> = coarse
        .sequences
        .iter()
        .zip(&fine.sequences)
        .map(|(c, f)| {
            (c.length == f.length && c.block_size % f.block_size == 0)
                .then_some(c.block_size / f.block_size)
        })
        .collect::<Option<_>>()?;
    let comp_index: HashMap<(usize, usize, usize, usize), usize> = coarse
        .comp_blocks
        .iter()
        .map(|c| ((c.seq, c.head, c.q_tile, c.kv_tile), c.id.index()))
        .collect();
    let mut out = Vec::with_capacity(fine.groups.len() + fine.comp_blocks.len());
    for grp in &fine.groups {
        let cg = coarse.sequences[grp.seq].group(grp.tile / ratio[grp.seq]);
        out.push(coarse_pl.group_device[cg.index()]);
    }
    for c in &fine.comp_blocks {
        let r = ratio[c.seq];
        let cc = comp_index.get(&(c.seq, c.head, c.q_tile / r, c.kv_tile / r))?;
        out.push(coarse_pl.comp_device[*cc]);
    }
    Some(out)
}

/// One required block movement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Transfer {
    pub block: DataBlockId,
    pub src: usize,
    pub dst: usize,
}

/// Input blocks travel from their owner to every other device computing with
/// them; partial outputs travel from every other producing device to the
/// owner. Each block moves at most once per device pair.
pub fn required_transfers(g: &BlockGraph, pl: &PlacementResult) -> Vec<Transfer> {
    let users = g.users();
    let mut out = Vec::new();
    let mut devices: Vec<usize> = Vec::new();
    for d in &g.data_blocks {
        let owner = pl.device_of_data(d.id);
        devices.clear();
        devices.extend(
            users[d.id.index()]
                .iter()
                .map(|c| pl.comp_device[c.index()] as usize)
                .filter(|&x| x != owner),
        );
        devices.sort_unstable();
        devices.dedup();
        for &other in &devices {
            let (src, dst) = match d.kind {
                BlockKind::O => (other, owner),
                BlockKind::Q | BlockKind::Kv => (owner, other),
            };
            out.push(Transfer {
                block: d.id,
                src,
                dst,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommVolume {
    pub total: u64,
    pub per_device_send: Vec<u64>,
    pub per_device_recv: Vec<u64>,
    pub inter_machine: u64,
    pub transfers: usize,
    pub kv_transfers: usize,
}

impl CommVolume {
    /// Largest send-plus-receive volume of any device.
    pub fn max_per_device(&self) -> u64 {
        self.per_device_send
            .iter()
            .zip(&self.per_device_recv)
            .map(|(s, r)| s + r)
            .max()
            .unwrap_or(0)
    }
}

/// Bytes moved by a placement, with per-device fetch deduplication.
pub fn communication_volume(g: &BlockGraph, pl: &PlacementResult) -> CommVolume {
    let mut v = CommVolume {
        total: 0,
        per_device_send: vec![0; pl.num_devices],
        per_device_recv: vec![0; pl.num_devices],
        inter_machine: 0,
        transfers: 0,
        kv_transfers: 0,
    };
    for t in required_transfers(g, pl) {
        let d = g.data(t.block);
        v.total += d.size_bytes;
        v.per_device_send[t.src] += d.size_bytes;
        v.per_device_recv[t.dst] += d.size_bytes;
        if pl.machine_of(t.src) != pl.machine_of(t.dst) {
            v.inter_machine += d.size_bytes;
        }
        v.transfers += 1;
        if d.kind == BlockKind::Kv {
            v.kv_transfers += 1;
        }
    }
    v
}

/// Bytes moved if every computation block fetched its own inputs and shipped
/// its own output, without sharing transfers.
pub fn communication_volume_undeduplicated(g: &BlockGraph, pl: &PlacementResult) -> u64 {
    g.comp_blocks
        .iter()
        .map(|c| {
            let here = pl.comp_device[c.id.index()] as usize;
            [c.q_block, c.kv_block, c.o_block]
                .iter()
                .filter(|&&b| pl.device_of_data(b) != here)
                .map(|&b| g.data(b).size_bytes)
                .sum::<u64>()
        })
        .sum()
}

/// Connectivity cost of the flat device assignment of `pl`.
pub fn placement_connectivity(g: &BlockGraph, pl: &PlacementResult) -> u64 {
    let bh = build_hypergraph(g);
    connectivity_cost(&bh.graph, &pl.vertex_assignment(&bh))
}
