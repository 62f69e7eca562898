//! Fixtures, a seeded fuzz-case generator and independent checkers shared by
//! the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcp_core::blockgen::{generate_blocks, BlockGraph, BlockKind};
use dcp_core::hypergraph::{build_hypergraph, connectivity_cost, Hypergraph, Partition};
use dcp_core::mask::{gen_mask, MaskDescriptor};
use dcp_core::model::{AttentionShape, Batch, DeviceTopology, SequenceSpec};
use dcp_core::placement::{place, place_relaxed, PlacementConfig, PlacementResult};
use dcp_core::plan::{compile, verify_plans, CompileOptions};
use dcp_core::scheduler::{schedule, DivisionSchedule};
use dcp_core::simexec::{run, Payload};

pub fn shape(heads: usize, kv_groups: usize, head_dim: usize) -> AttentionShape {
    AttentionShape {
        heads,
        kv_groups,
        head_dim,
        bytes_per_element: 2,
    }
}

pub fn batch(specs: &[(usize, MaskDescriptor)], shape: AttentionShape) -> Batch {
    let seqs = specs
        .iter()
        .enumerate()
        .map(|(i, (l, m))| SequenceSpec::new(format!("s{i}"), *l, m.clone()))
        .collect();
    Batch::new(seqs, 1 << 24, shape).unwrap()
}

/// Three causal sequences of 4, 4 and 8 tokens, one head.
pub fn three_sequences() -> Batch {
    batch(
        &[
            (4, MaskDescriptor::Causal),
            (4, MaskDescriptor::Causal),
            (8, MaskDescriptor::Causal),
        ],
        shape(1, 1, 4),
    )
}

/// One 16-token sequence: a 2-token question and answers of 2, 4 and 8 tokens.
pub fn shared_question_16() -> Batch {
    batch(
        &[(
            16,
            MaskDescriptor::SharedQuestion {
                question_len: 2,
                answer_lens: vec![2, 4, 8],
            },
        )],
        shape(1, 1, 4),
    )
}

/// One 6-token sequence: a 2-token question and two 2-token answers.
pub fn shared_question_6() -> Batch {
    batch(
        &[(
            6,
            MaskDescriptor::SharedQuestion {
                question_len: 2,
                answer_lens: vec![2, 2],
            },
        )],
        shape(1, 1, 4),
    )
}

/// Short sequences whole on devices 0 and 1, the long one zigzagged.
pub fn mixed_placement(g: &BlockGraph, topo: &DeviceTopology) -> PlacementResult {
    let zig = dcp_core::baselines::zigzag_placement(g, topo);
    let groups: Vec<u32> = g
        .groups
        .iter()
        .zip(&zig.group_device)
        .map(|(grp, &z)| match grp.seq {
            0 => 0,
            1 => 1,
            _ => z,
        })
        .collect();
    let comps = g
        .comp_blocks
        .iter()
        .map(|c| groups[g.group_of(c.q_block).index()])
        .collect();
    PlacementResult::from_assignment(
        g,
        topo,
        dcp_core::placement::PlacementStrategy::Manual,
        groups,
        comps,
    )
}

pub fn random_mask(rng: &mut ChaCha8Rng, len: usize) -> MaskDescriptor {
    let m = match rng.random_range(0..4) {
        0 => MaskDescriptor::Causal,
        1 => MaskDescriptor::Lambda {
            sink_tokens: rng.random_range(0..=len / 4),
            window: rng.random_range(1..=len),
        },
        2 => MaskDescriptor::CausalBlockwise {
            block: rng.random_range(1..=8),
            window_blocks: rng.random_range(1..=3),
            sink_blocks: rng.random_range(0..=2),
            test_blocks: rng.random_range(0..=2),
        },
        _ => {
            let question_len = rng.random_range(1..=len);
            let mut rest = len - question_len;
            let mut answer_lens = Vec::new();
            while rest > 0 {
                let a = rng.random_range(1..=rest);
                answer_lens.push(a);
                rest -= a;
            }
            MaskDescriptor::SharedQuestion {
                question_len,
                answer_lens,
            }
        }
    };
    if gen_mask(&m, len).is_ok() {
        m
    } else {
        MaskDescriptor::Causal
    }
}

#[derive(Clone, Debug)]
pub struct FuzzCase {
    pub seed: u64,
    pub batch: Batch,
    pub block_size: usize,
    pub topo: DeviceTopology,
    pub divisions: usize,
    pub cfg: PlacementConfig,
}

/// A random small configuration: up to 4 sequences of at most 512 tokens
/// (and at most 24 tiles each), up to 4 heads of dimension at most 16,
/// 1 to 8 devices and every mask family.
pub fn fuzz_case(seed: u64) -> FuzzCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block_size = [1, 2, 8, 64][rng.random_range(0..4)];
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let divisors: Vec<usize> = (1..=heads).filter(|g| heads % g == 0).collect();
    let kv_groups = divisors[rng.random_range(0..divisors.len())];
    let head_dim = [1, 4, 8, 16][rng.random_range(0..4)];
    let max_len = (block_size * 24).min(512);
    let n = rng.random_range(1..=4);
    let specs: Vec<(usize, MaskDescriptor)> = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (len, random_mask(&mut rng, len))
        })
        .collect();
    let (x, y) = match [1, 2, 4, 8][rng.random_range(0..4)] {
        1 => (1, 1),
        2 => [(1, 2), (2, 1)][rng.random_range(0..2)],
        4 => [(1, 4), (2, 2)][rng.random_range(0..2)],
        _ => (2, 4),
    };
    FuzzCase {
        seed,
        batch: batch(&specs, shape(heads, kv_groups, head_dim)),
        block_size,
        topo: DeviceTopology::new(x, y).unwrap(),
        divisions: [2, 3, 4, 6][rng.random_range(0..4)],
        cfg: PlacementConfig {
            eps_inter: 0.4,
            eps_intra: 0.1,
            eps_data: 0.3,
            seed,
        },
    }
}

fn within(load: u64, cap: f64) -> bool {
    load as f64 <= cap * (1.0 + 1e-9) + 1e-9
}

/// Part loads against `[1 + eps_comp, 1 + eps_data] * w(N) / R`, recomputed
/// from the raw vertex weights.
pub fn check_partition_balance(h: &Hypergraph, p: &Partition) -> Result<(), String> {
    let mut total = [0u64; 2];
    let mut load = vec![[0u64; 2]; p.parts];
    for v in 0..h.num_vertices() {
        let w = h.weight(v);
        let part = p.assignment[v] as usize;
        if part >= p.parts {
            return Err(format!("vertex {v} in part {part} of {}", p.parts));
        }
        for d in 0..2 {
            total[d] += w[d];
            load[part][d] += w[d];
        }
    }
    let r = p.parts as f64;
    let caps = [
        (1.0 + p.eps_comp) * total[0] as f64 / r,
        (1.0 + p.eps_data) * total[1] as f64 / r,
    ];
    for (i, l) in load.iter().enumerate() {
        if !within(l[0], caps[0]) || !within(l[1], caps[1]) {
            return Err(format!("part {i} load {l:?} over caps {caps:?}"));
        }
    }
    Ok(())
}

/// Machine loads within the inter-machine caps and device loads within each
/// machine's caps, for both compute and data.
pub fn check_hierarchical_balance(
    pl: &PlacementResult,
    topo: &DeviceTopology,
    cfg: &PlacementConfig,
) -> Result<(), String> {
    let (x, y) = (topo.machines, topo.devices_per_machine);
    let mut machine = vec![[0u64; 2]; x];
    for b in &pl.balance {
        let m = b.device / y;
        machine[m][0] += b.flops;
        machine[m][1] += b.bytes;
    }
    let total = [
        machine.iter().map(|m| m[0]).sum::<u64>(),
        machine.iter().map(|m| m[1]).sum::<u64>(),
    ];
    if x > 1 {
        let caps = [
            (1.0 + cfg.eps_inter) * total[0] as f64 / x as f64,
            (1.0 + cfg.eps_data) * total[1] as f64 / x as f64,
        ];
        for (i, m) in machine.iter().enumerate() {
            if !within(m[0], caps[0]) || !within(m[1], caps[1]) {
                return Err(format!("machine {i} load {m:?} over caps {caps:?}"));
            }
        }
    }
    for b in &pl.balance {
        let m = machine[b.device / y];
        let caps = [
            (1.0 + cfg.eps_intra) * m[0] as f64 / y as f64,
            (1.0 + cfg.eps_data) * m[1] as f64 / y as f64,
        ];
        if !within(b.flops, caps[0]) || !within(b.bytes, caps[1]) {
            return Err(format!(
                "device {} load {:?} over caps {caps:?}",
                b.device,
                (b.flops, b.bytes)
            ));
        }
    }
    Ok(())
}

/// Division 0 fetches nothing; middle divisions stay within `1/T` of each
/// peer's total (a recorded exception admits a single block's inputs);
/// every computation block runs exactly once on its device, after all its
/// remote inputs arrived, and every fetch is needed.
pub fn check_schedule(
    g: &BlockGraph,
    pl: &PlacementResult,
    s: &DivisionSchedule,
) -> Result<(), String> {
    let t_count = s.num_divisions;
    let r = s.num_devices;
    let mut seen = vec![0usize; g.comp_blocks.len()];
    for (dev, d0) in s.divisions[0].iter().enumerate() {
        if !d0.fetches.is_empty() {
            return Err(format!("device {dev} fetches in division 0"));
        }
    }
    for dev in 0..r {
        let mut arrived: BTreeSet<_> = BTreeSet::new();
        let mut needed: BTreeSet<_> = BTreeSet::new();
        for t in 0..t_count {
            let div = &s.divisions[t][dev];
            let mut per_src: BTreeMap<usize, (u64, usize)> = BTreeMap::new();
            for m in &div.fetches {
                if m.dst != dev || m.src == dev {
                    return Err(format!("bad fetch {m:?} on device {dev}"));
                }
                if pl.device_of_data(m.block) != m.src {
                    return Err(format!("fetch {m:?} not from the owner"));
                }
                if !arrived.insert(m.block) {
                    return Err(format!("block {:?} fetched twice by device {dev}", m.block));
                }
                let e = per_src.entry(m.src).or_default();
                e.0 += m.bytes;
                e.1 += 1;
            }
            if t > 0 && t + 1 < t_count {
                for (&src, &(bytes, count)) in &per_src {
                    let total = s.comm_requirements[dev][src];
                    if bytes * t_count as u64 > total {
                        // only one block's inputs may break the limit
                        if !div.limit_exceptions.contains(&src) || count > 2 {
                            return Err(format!(
                                "division {t} device {dev} fetches {bytes} of {total} bytes from {src}"
                            ));
                        }
                    }
                }
            }
            for &c in &div.comps {
                seen[c.index()] += 1;
                if pl.comp_device[c.index()] as usize != dev {
                    return Err(format!("{c:?} scheduled on device {dev}"));
                }
                for b in g.comp(c).inputs() {
                    if pl.device_of_data(b) != dev {
                        needed.insert(b);
                        if !arrived.contains(&b) {
                            return Err(format!("{c:?} runs in division {t} before {b:?} arrives"));
                        }
                    }
                }
            }
        }
        if arrived != needed {
            return Err(format!("device {dev} fetches blocks it never reads"));
        }
    }
    if let Some(c) = seen.iter().position(|&n| n != 1) {
        return Err(format!("computation block {c} scheduled {} times", seen[c]));
    }
    Ok(())
}

/// Everything observed on one fuzz case.
#[derive(Debug)]
pub struct FuzzOutcome {
    pub max_abs_error: f64,
    pub sim_bytes: u64,
    pub connectivity: u64,
    /// `Ok(true)` balanced placement, `Ok(false)` explicit partitioning error.
    pub balance: Result<bool, String>,
    pub schedule: Result<(), String>,
}

/// Relaxed placement; when a single computation tile outweighs the compute
/// cap, the compute tolerances widen until it fits.
pub fn relaxed_placement(case: &FuzzCase, g: &BlockGraph) -> PlacementResult {
    let r = case.topo.num_devices() as f64;
    for eps_comp in [None, Some(1.0), Some(r)] {
        let mut cfg = case.cfg.clone();
        if let Some(e) = eps_comp {
            cfg.eps_inter = e;
            cfg.eps_intra = e;
        }
        if let Ok((pl, _)) = place_relaxed(g, &case.topo, &cfg, None) {
            return pl;
        }
    }
    panic!("seed {}: no placement even with wide tolerances", case.seed)
}

/// Place (strictly, then relaxed if that errs), schedule, compile and execute
/// with random tensors against the dense reference.
pub fn run_fuzz_case(case: &FuzzCase) -> FuzzOutcome {
    let g = generate_blocks(&case.batch, case.block_size).unwrap();
    let (pl, balance) = match place(&g, &case.topo, &case.cfg) {
        Ok(pl) => {
            let b = check_hierarchical_balance(&pl, &case.topo, &case.cfg).map(|_| true);
            (pl, b)
        }
        Err(_) => (relaxed_placement(case, &g), Ok(false)),
    };
    let s = schedule(&g, &pl, case.divisions).unwrap();
    let sched = check_schedule(&g, &pl, &s);
    let plans = compile(&s, &g, &pl, &CompileOptions::default()).unwrap();
    verify_plans(&plans).unwrap();
    let payload = Payload::random(&case.batch, case.seed);
    let out = run(&plans, Some(&payload), &case.topo).unwrap();
    let bh = build_hypergraph(&g);
    FuzzOutcome {
        max_abs_error: out.report.max_abs_error.unwrap(),
        sim_bytes: out.report.total_bytes,
        connectivity: connectivity_cost(&bh.graph, &pl.vertex_assignment(&bh)),
        balance,
        schedule: sched,
    }
}

/// Bytes a placement moves, computed straight from the mask: for every data
/// block, its size times the number of devices other than its owner that
/// touch it.
pub fn oracle_comm_bytes(g: &BlockGraph, pl: &PlacementResult) -> u64 {
    let mut touch: BTreeMap<usize, BTreeSet<u32>> = BTreeMap::new();
    for c in &g.comp_blocks {
        let dev = pl.comp_device[c.id.index()];
        for b in [c.q_block, c.kv_block, c.o_block] {
            touch.entry(b.index()).or_default().insert(dev);
        }
    }
    g.data_blocks
        .iter()
        .map(|d| {
            let owner = pl.data_device[d.id.index()];
            let others = touch
                .get(&d.id.index())
                .map(|s| s.iter().filter(|&&x| x != owner).count())
                .unwrap_or(0);
            d.size_bytes * others as u64
        })
        .sum()
}

pub fn kv_blocks_moved(g: &BlockGraph, pl: &PlacementResult) -> usize {
    let mut pairs = BTreeSet::new();
    for c in &g.comp_blocks {
        let dev = pl.comp_device[c.id.index()];
        if pl.data_device[c.kv_block.index()] != dev {
            pairs.insert((c.kv_block, dev));
        }
    }
    debug_assert!(pairs.iter().all(|(b, _)| g.data(*b).kind == BlockKind::Kv));
    pairs.len()
}
