//! Per-device instruction lists compiled from a division schedule.
//!
//! Each device holds four buffers of equally sized block slots: Q inputs, KV
//! inputs, partial outputs with their softmax statistics, and final outputs.
//! Instructions name slots by `(kind, index)` and indices are reused once the
//! block they held is dead.

mod alloc;
mod verify;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockgen::{BlockGraph, BlockKind, CompBlockId, DataBlockId};
use crate::mask::{MaskDescriptor, Span};
use crate::model::AttentionShape;
use crate::placement::PlacementResult;
use crate::scheduler::{DivisionSchedule, Message};

pub use alloc::{allocate_buffers, BufferAllocator, Capacities, LiveRange};
pub use verify::verify_plans;

pub const PLAN_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    Q = 0,
    Kv = 1,
    Partial = 2,
    Output = 3,
}

impl BufferKind {
    pub const ALL: [BufferKind; 4] = [
        BufferKind::Q,
        BufferKind::Kv,
        BufferKind::Partial,
        BufferKind::Output,
    ];

    /// Buffer holding blocks of `kind` while they move or accumulate.
    pub fn for_block(kind: BlockKind) -> Self {
        match kind {
            BlockKind::Q => BufferKind::Q,
            BlockKind::Kv => BufferKind::Kv,
            BlockKind::O => BufferKind::Partial,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Send,
    Recv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tag {
    pub iteration: u64,
    /// Division whose compute consumes the blocks; the output phase uses the
    /// division count.
    pub division: u32,
    pub src: u32,
    pub dst: u32,
    pub kind: BufferKind,
    pub seq: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionItem {
    pub comp: CompBlockId,
    pub seq: usize,
    pub head: usize,
    pub q: u32,
    pub kv: u32,
    pub out: u32,
    pub q_block: DataBlockId,
    pub kv_block: DataBlockId,
    pub o_block: DataBlockId,
    pub q_tokens: Span,
    pub kv_tokens: Span,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionItem {
    pub block: DataBlockId,
    pub dst: u32,
    pub srcs: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyItem {
    pub block: DataBlockId,
    /// Partial slot.
    pub src: u32,
    /// Output slot.
    pub dst: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLaunch {
    pub peer: usize,
    pub direction: Direction,
    pub kind: BufferKind,
    pub buffers: Vec<u32>,
    pub blocks: Vec<DataBlockId>,
    pub bytes: u64,
    pub tag: Tag,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Instruction {
    BlockwiseAttention {
        division: u32,
        items: Vec<AttentionItem>,
    },
    BlockwiseReduction {
        items: Vec<ReductionItem>,
    },
    BlockwiseCopy {
        items: Vec<CopyItem>,
    },
    CommLaunch(CommLaunch),
    CommWait {
        tag: Tag,
    },
}

impl Instruction {
    pub fn name(&self) -> &'static str {
        match self {
            Instruction::BlockwiseAttention { .. } => "BlockwiseAttention",
            Instruction::BlockwiseReduction { .. } => "BlockwiseReduction",
            Instruction::BlockwiseCopy { .. } => "BlockwiseCopy",
            Instruction::CommLaunch(_) => "CommLaunch",
            Instruction::CommWait { .. } => "CommWait",
        }
    }
}

/// Which block a slot holds between two instruction positions, inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub kind: BufferKind,
    pub index: u32,
    pub block: DataBlockId,
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferLayout {
    pub capacity: Capacities,
    pub slots: Vec<Slot>,
}

/// A locally owned input block loaded before the first instruction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputBlock {
    pub kind: BufferKind,
    pub index: u32,
    pub block: DataBlockId,
    pub seq: usize,
    /// Query head for Q, KV group for KV.
    pub head: usize,
    pub tokens: Span,
}

/// A final output block left in the output buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputBlock {
    pub index: u32,
    pub block: DataBlockId,
    pub seq: usize,
    pub head: usize,
    pub tokens: Span,
    /// Computation blocks contributing to it across all devices.
    pub partials: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanMask {
    pub seq: usize,
    pub seq_id: String,
    pub length: usize,
    pub mask: MaskDescriptor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub version: u32,
    pub device: usize,
    pub iteration: u64,
    pub num_divisions: usize,
    pub shape: AttentionShape,
    /// Masks of the sequences this device computes on.
    pub masks: Vec<PlanMask>,
    pub inputs: Vec<InputBlock>,
    pub outputs: Vec<OutputBlock>,
    pub buffers: BufferLayout,
    pub instructions: Vec<Instruction>,
}

impl ExecutionPlan {
    pub fn launches(&self) -> impl Iterator<Item = &CommLaunch> {
        self.instructions.iter().filter_map(|i| match i {
            Instruction::CommLaunch(l) => Some(l),
            _ => None,
        })
    }

    pub fn bytes_sent(&self) -> u64 {
        self.launches()
            .filter(|l| l.direction == Direction::Send)
            .map(|l| l.bytes)
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PlanError> {
        let v: serde_json::Value =
            serde_json::from_str(s).map_err(|e| PlanError::Json(e.to_string()))?;
        let version = v.get("version").and_then(|x| x.as_u64()).unwrap_or(0);
        if version != PLAN_VERSION as u64 {
            return Err(PlanError::Version(version));
        }
        serde_json::from_value(v).map_err(|e| PlanError::Json(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("device {device} needs {needed} {kind:?} slots, above the limit of {max}")]
    BufferOverflow {
        device: usize,
        kind: BufferKind,
        needed: u32,
        max: u32,
    },
    #[error("device {device}, instruction {instruction}: {reason}")]
    Invalid {
        device: usize,
        instruction: usize,
        reason: String,
    },
    #[error("unmatched communication tag {0:?}")]
    TagMismatch(Tag),
    #[error("plans deadlock; waiting devices: {0:?}")]
    Deadlock(Vec<(usize, Tag)>),
    #[error("unsupported plan version {0}")]
    Version(u64),
    #[error("plan json: {0}")]
    Json(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileOptions {
    pub iteration: u64,
    /// Largest slot count allowed in any buffer.
    pub max_buffers: Option<u32>,
}

struct Value {
    kind: BufferKind,
    block: DataBlockId,
    def: usize,
    last: usize,
}

struct Builder<'a> {
    g: &'a BlockGraph,
    s: &'a DivisionSchedule,
    device: usize,
    iteration: u64,
    values: Vec<Value>,
    instrs: Vec<Instruction>,
    resident: BTreeMap<DataBlockId, usize>,
    acc: BTreeMap<DataBlockId, usize>,
    /// Partials of owned outputs received from other devices.
    received: BTreeMap<DataBlockId, Vec<usize>>,
    pending: Vec<(Tag, Vec<usize>)>,
}

impl Builder<'_> {
    fn at(&self) -> usize {
        self.instrs.len()
    }

    fn define(&mut self, kind: BufferKind, block: DataBlockId) -> usize {
        let at = self.at();
        self.values.push(Value {
            kind,
            block,
            def: at,
            last: at,
        });
        self.values.len() - 1
    }

    fn touch(&mut self, v: usize) {
        let at = self.at();
        let val = &mut self.values[v];
        val.last = val.last.max(at);
    }

    fn invalid(&self, reason: String) -> PlanError {
        PlanError::Invalid {
            device: self.device,
            instruction: self.at(),
            reason,
        }
    }

    fn resident_value(&self, b: DataBlockId) -> Result<usize, PlanError> {
        self.resident
            .get(&b)
            .copied()
            .ok_or_else(|| self.invalid(format!("block {b} is not resident")))
    }

    /// Launch every transfer of one phase, grouped per peer and block kind.
    fn launch(
        &mut self,
        division: u32,
        recvs: &[Message],
        sends: &[Message],
    ) -> Result<(), PlanError> {
        let mut groups: BTreeMap<(usize, BufferKind, Direction), Vec<&Message>> = BTreeMap::new();
        for m in recvs {
            groups
                .entry((m.src, BufferKind::for_block(m.kind), Direction::Recv))
                .or_default()
                .push(m);
        }
        for m in sends {
            groups
                .entry((m.dst, BufferKind::for_block(m.kind), Direction::Send))
                .or_default()
                .push(m);
        }
        for ((peer, kind, direction), mut msgs) in groups {
            msgs.sort_by_key(|m| m.block);
            let (src, dst) = match direction {
                Direction::Send => (self.device, peer),
                Direction::Recv => (peer, self.device),
            };
            let tag = Tag {
                iteration: self.iteration,
                division,
                src: src as u32,
                dst: dst as u32,
                kind,
                seq: 0,
            };
            let mut ids = Vec::with_capacity(msgs.len());
            for m in &msgs {
                let id = match direction {
                    Direction::Recv => {
                        let id = self.define(kind, m.block);
                        if kind == BufferKind::Partial {
                            self.received.entry(m.block).or_default().push(id);
                        } else if self.resident.insert(m.block, id).is_some() {
                            return Err(self.invalid(format!("block {} fetched twice", m.block)));
                        }
                        id
                    }
                    Direction::Send => {
                        let id = if kind == BufferKind::Partial {
                            *self.acc.get(&m.block).ok_or_else(|| {
                                self.invalid(format!("no partial of {} to send", m.block))
                            })?
                        } else {
                            self.resident_value(m.block)?
                        };
                        self.touch(id);
                        id
                    }
                };
                ids.push(id);
            }
            self.instrs.push(Instruction::CommLaunch(CommLaunch {
                peer,
                direction,
                kind,
                buffers: ids.iter().map(|&i| i as u32).collect(),
                blocks: msgs.iter().map(|m| m.block).collect(),
                bytes: msgs.iter().map(|m| m.bytes).sum(),
                tag,
            }));
            self.pending.push((tag, ids));
        }
        Ok(())
    }

    fn wait_all(&mut self) {
        for (tag, ids) in std::mem::take(&mut self.pending) {
            for id in ids {
                self.touch(id);
            }
            self.instrs.push(Instruction::CommWait { tag });
        }
    }
}

fn compile_device(
    s: &DivisionSchedule,
    g: &BlockGraph,
    pl: &PlacementResult,
    partials: &[usize],
    device: usize,
    opts: &CompileOptions,
) -> Result<ExecutionPlan, PlanError> {
    let mut b = Builder {
        g,
        s,
        device,
        iteration: opts.iteration,
        values: Vec::new(),
        instrs: Vec::new(),
        resident: BTreeMap::new(),
        acc: BTreeMap::new(),
        received: BTreeMap::new(),
        pending: Vec::new(),
    };
    let mut input_ids = Vec::new();
    for d in &g.data_blocks {
        if d.kind != BlockKind::O && pl.device_of_data(d.id) == device {
            let id = b.define(BufferKind::for_block(d.kind), d.id);
            b.resident.insert(d.id, id);
            input_ids.push(id);
        }
    }

    let t_count = s.num_divisions;
    let first = &s.divisions[0][device];
    b.launch(0, &first.fetches, &first.sends)?;
    b.wait_all();
    for t in 0..t_count {
        if t + 1 < t_count {
            let next = &b.s.divisions[t + 1][device];
            b.launch((t + 1) as u32, &next.fetches, &next.sends)?;
        }
        b.attention(t)?;
        b.wait_all();
    }

    let recvs: Vec<Message> = s
        .output_transfers
        .iter()
        .filter(|m| m.dst == device)
        .copied()
        .collect();
    let sends: Vec<Message> = s
        .output_transfers
        .iter()
        .filter(|m| m.src == device)
        .copied()
        .collect();
    b.launch(t_count as u32, &recvs, &sends)?;
    b.wait_all();

    let owned: Vec<DataBlockId> = g
        .data_blocks
        .iter()
        .filter(|d| d.kind == BlockKind::O && pl.device_of_data(d.id) == device)
        .map(|d| d.id)
        .collect();
    let mut merged = Vec::new();
    let mut reductions = Vec::new();
    for &o in &owned {
        let mut parts: Vec<usize> = b.acc.get(&o).copied().into_iter().collect();
        parts.extend(b.received.remove(&o).unwrap_or_default());
        let Some(&dst) = parts.first() else { continue };
        for &p in &parts {
            b.touch(p);
        }
        if parts.len() > 1 {
            reductions.push(ReductionItem {
                block: o,
                dst: dst as u32,
                srcs: parts[1..].iter().map(|&p| p as u32).collect(),
            });
        }
        merged.push((o, dst));
    }
    if !reductions.is_empty() {
        b.instrs
            .push(Instruction::BlockwiseReduction { items: reductions });
    }
    let mut copies = Vec::new();
    let mut output_ids = Vec::new();
    for &(o, src) in &merged {
        b.touch(src);
        let dst = b.define(BufferKind::Output, o);
        output_ids.push(dst);
        copies.push(CopyItem {
            block: o,
            src: src as u32,
            dst: dst as u32,
        });
    }
    if !copies.is_empty() {
        b.instrs.push(Instruction::BlockwiseCopy { items: copies });
    }
    if let Some((tag, _)) = b.pending.first() {
        return Err(PlanError::TagMismatch(*tag));
    }

    let end = b.at();
    for &id in &output_ids {
        b.values[id].last = end;
    }
    let ranges: Vec<LiveRange> = b
        .values
        .iter()
        .map(|v| LiveRange {
            kind: v.kind,
            def: v.def,
            last: v.last,
        })
        .collect();
    let (index, capacity) = allocate_buffers(&ranges);
    if let Some(max) = opts.max_buffers {
        for kind in BufferKind::ALL {
            if capacity.get(kind) > max {
                return Err(PlanError::BufferOverflow {
                    device,
                    kind,
                    needed: capacity.get(kind),
                    max,
                });
            }
        }
    }
    let mut instructions = b.instrs;
    for ins in &mut instructions {
        remap(ins, &index);
    }

    let mut seqs: Vec<usize> = s
        .divisions
        .iter()
        .flat_map(|div| div[device].comps.iter().map(|&c| g.comp(c).seq))
        .collect();
    seqs.sort_unstable();
    seqs.dedup();
    let masks = seqs
        .into_iter()
        .map(|seq| PlanMask {
            seq,
            seq_id: g.sequences[seq].seq_id.clone(),
            length: g.sequences[seq].length,
            mask: g.sequences[seq].mask.clone(),
        })
        .collect();
    let inputs = input_ids
        .iter()
        .map(|&id| {
            let d = g.data(b.values[id].block);
            InputBlock {
                kind: b.values[id].kind,
                index: index[id],
                block: d.id,
                seq: d.seq,
                head: d.head,
                tokens: d.tokens,
            }
        })
        .collect();
    let outputs = output_ids
        .iter()
        .map(|&id| {
            let d = g.data(b.values[id].block);
            OutputBlock {
                index: index[id],
                block: d.id,
                seq: d.seq,
                head: d.head,
                tokens: d.tokens,
                partials: partials[d.id.index()],
            }
        })
        .collect();
    let slots = b
        .values
        .iter()
        .zip(&index)
        .map(|(v, &i)| Slot {
            kind: v.kind,
            index: i,
            block: v.block,
            from: v.def,
            to: v.last,
        })
        .collect();
    Ok(ExecutionPlan {
        version: PLAN_VERSION,
        device,
        iteration: opts.iteration,
        num_divisions: t_count,
        shape: g.shape,
        masks,
        inputs,
        outputs,
        buffers: BufferLayout { capacity, slots },
        instructions,
    })
}

impl Builder<'_> {
    /// Attention for one division, then reduction of the new partials into
    /// each output's running accumulator.
    fn attention(&mut self, t: usize) -> Result<(), PlanError> {
        let mut comps = self.s.divisions[t][self.device].comps.clone();
        if comps.is_empty() {
            return Ok(());
        }
        comps.sort_unstable();
        let mut items = Vec::with_capacity(comps.len());
        let mut temps: BTreeMap<DataBlockId, Vec<usize>> = BTreeMap::new();
        for c in comps {
            let cb = self.g.comp(c);
            let q = self.resident_value(cb.q_block)?;
            let kv = self.resident_value(cb.kv_block)?;
            self.touch(q);
            self.touch(kv);
            let out = self.define(BufferKind::Partial, cb.o_block);
            if self.acc.contains_key(&cb.o_block) {
                temps.entry(cb.o_block).or_default().push(out);
            } else {
                self.acc.insert(cb.o_block, out);
            }
            items.push(AttentionItem {
                comp: c,
                seq: cb.seq,
                head: cb.head,
                q: q as u32,
                kv: kv as u32,
                out: out as u32,
                q_block: cb.q_block,
                kv_block: cb.kv_block,
                o_block: cb.o_block,
                q_tokens: self.g.data(cb.q_block).tokens,
                kv_tokens: self.g.data(cb.kv_block).tokens,
                flops: cb.flops,
            });
        }
        self.instrs.push(Instruction::BlockwiseAttention {
            division: t as u32,
            items,
        });
        if temps.is_empty() {
            return Ok(());
        }
        let mut reductions = Vec::with_capacity(temps.len());
        for (o, srcs) in temps {
            let dst = self.acc[&o];
            self.touch(dst);
            for &s in &srcs {
                self.touch(s);
            }
            reductions.push(ReductionItem {
                block: o,
                dst: dst as u32,
                srcs: srcs.iter().map(|&s| s as u32).collect(),
            });
        }
        self.instrs
            .push(Instruction::BlockwiseReduction { items: reductions });
        Ok(())
    }
}

/// Replace value ids with buffer indices.
fn remap(ins: &mut Instruction, index: &[u32]) {
    let m = |v: &mut u32| *v = index[*v as usize];
    match ins {
        Instruction::BlockwiseAttention { items, .. } => {
            for it in items {
                m(&mut it.q);
                m(&mut it.kv);
                m(&mut it.out);
            }
        }
        Instruction::BlockwiseReduction { items } => {
            for it in items {
                m(&mut it.dst);
                it.srcs.iter_mut().for_each(m);
            }
        }
        Instruction::BlockwiseCopy { items } => {
            for it in items {
                m(&mut it.src);
                m(&mut it.dst);
            }
        }
        Instruction::CommLaunch(l) => l.buffers.iter_mut().for_each(m),
        Instruction::CommWait { .. } => {}
    }
}

/// Compile one plan per device.
///
/// Per division `t` a device launches the transfers feeding division `t + 1`,
/// runs the attention of division `t`, folds the new partials into their
/// accumulators and waits for the transfers. After the last division partial
/// outputs go to their owners, which merge them and copy the results into the
/// output buffer.
pub fn compile(
    s: &DivisionSchedule,
    g: &BlockGraph,
    pl: &PlacementResult,
    opts: &CompileOptions,
) -> Result<Vec<ExecutionPlan>, PlanError> {
    let partials: Vec<usize> = g.users().iter().map(Vec::len).collect();
    (0..pl.num_devices)
        .into_par_iter()
        .map(|d| compile_device(s, g, pl, &partials, d, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockgen::generate_blocks;
    use crate::model::{Batch, DeviceTopology, SequenceSpec};
    use crate::placement::PlacementStrategy;
    use crate::scheduler::schedule;

    fn setup(lengths: &[usize], groups: Vec<u32>, r: usize) -> (BlockGraph, PlacementResult) {
        let seqs = lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| SequenceSpec::new(format!("s{i}"), l, MaskDescriptor::Causal))
            .collect();
        let shape = AttentionShape {
            heads: 2,
            kv_groups: 1,
            head_dim: 2,
            bytes_per_element: 1,
        };
        let g = generate_blocks(&Batch::new(seqs, 1 << 20, shape).unwrap(), 1).unwrap();
        let comps = g
            .comp_blocks
            .iter()
            .map(|c| groups[g.data(c.kv_block).group.index()])
            .collect();
        let pl = PlacementResult::from_assignment(
            &g,
            &DeviceTopology::flat(r).unwrap(),
            PlacementStrategy::Manual,
            groups,
            comps,
        );
        (g, pl)
    }

    #[test]
    fn lone_block_needs_attention_and_copy_only() {
        let seqs = vec![SequenceSpec::new("a", 1, MaskDescriptor::Causal)];
        let g = generate_blocks(
            &Batch::new(seqs, 8, AttentionShape::GQA_DEFAULT).unwrap(),
            1,
        )
        .unwrap();
        let g = BlockGraph {
            comp_blocks: g.comp_blocks[..1].to_vec(),
            ..g
        };
        let topo = DeviceTopology::flat(1).unwrap();
        let pl = PlacementResult::from_assignment(
            &g,
            &topo,
            PlacementStrategy::Manual,
            vec![0],
            vec![0],
        );
        let s = schedule(&g, &pl, 4).unwrap();
        let plans = compile(&s, &g, &pl, &CompileOptions::default()).unwrap();
        let names: Vec<_> = plans[0]
            .instructions
            .iter()
            .map(Instruction::name)
            .collect();
        assert_eq!(names, ["BlockwiseAttention", "BlockwiseCopy"]);
    }

    #[test]
    fn one_kv_transfer_pairs_one_launch() {
        // comps run where their q lives, so only the kv of token 0 moves
        let (g, _) = setup(&[2], vec![0, 1], 2);
        let comps = g
            .comp_blocks
            .iter()
            .map(|c| g.data(c.q_block).group.0)
            .collect();
        let topo = DeviceTopology::flat(2).unwrap();
        let pl = PlacementResult::from_assignment(
            &g,
            &topo,
            PlacementStrategy::Manual,
            vec![0, 1],
            comps,
        );
        let s = schedule(&g, &pl, 2).unwrap();
        let plans = compile(&s, &g, &pl, &CompileOptions::default()).unwrap();
        verify_plans(&plans).unwrap();
        let sends: Vec<_> = plans[0]
            .launches()
            .filter(|l| l.direction == Direction::Send)
            .collect();
        assert_eq!(sends.len(), 1);
        assert_eq!(sends[0].kind, BufferKind::Kv);
        let waits = plans[1]
            .instructions
            .iter()
            .filter(|i| matches!(i, Instruction::CommWait { tag } if *tag == sends[0].tag))
            .count();
        assert_eq!(waits, 1);
        assert!(plans[1].launches().all(|l| l.direction == Direction::Recv));
    }

    #[test]
    fn partial_outputs_travel_to_owner() {
        let (g, pl) = setup(&[4, 3], vec![0, 1, 2, 0, 1, 2, 0], 3);
        let s = schedule(&g, &pl, 3).unwrap();
        let plans = compile(&s, &g, &pl, &CompileOptions::default()).unwrap();
        verify_plans(&plans).unwrap();
        let sent: u64 = plans.iter().map(ExecutionPlan::bytes_sent).sum();
        assert_eq!(sent, s.total_bytes());
        assert_eq!(sent, crate::placement::communication_volume(&g, &pl).total);
        let text = plans[1].to_json();
        assert_eq!(ExecutionPlan::from_json(&text).unwrap(), plans[1]);
    }

    #[test]
    fn overflow_is_reported() {
        let (g, pl) = setup(&[6], vec![0; 6], 1);
        let s = schedule(&g, &pl, 2).unwrap();
        let opts = CompileOptions {
            iteration: 0,
            max_buffers: Some(2),
        };
        assert!(matches!(
            compile(&s, &g, &pl, &opts),
            Err(PlanError::BufferOverflow { .. })
        ));
    }

    #[test]
    fn verifier_catches_missing_wait() {
        let (g, pl) = setup(&[4], vec![0, 1, 0, 1], 2);
        let s = schedule(&g, &pl, 2).unwrap();
        let mut plans = compile(&s, &g, &pl, &CompileOptions::default()).unwrap();
        let pos = plans[1]
            .instructions
            .iter()
            .position(|i| matches!(i, Instruction::CommWait { .. }))
            .unwrap();
        plans[1].instructions.remove(pos);
        assert!(verify_plans(&plans).is_err());
    }

    #[test]
    fn version_is_checked() {
        let (g, pl) = setup(&[2], vec![0, 0], 1);
        let s = schedule(&g, &pl, 2).unwrap();
        let mut plan = compile(&s, &g, &pl, &CompileOptions::default())
            .unwrap()
            .remove(0);
        plan.version = 99;
        assert_eq!(
            ExecutionPlan::from_json(&plan.to_json()),
            Err(PlanError::Version(99))
        );
    }
}
