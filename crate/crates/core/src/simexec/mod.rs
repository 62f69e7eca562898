//! Lockstep execution of per-device plans on a simulated cluster.
//!
//! In numeric mode the slots hold real double-precision blocks and the final
//! outputs are assembled per sequence; in cost mode only block identities move.
//! Both modes account bytes and modeled time the same way.

mod kernels;
mod payload;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blockgen::{BlockKind, DataBlockId};
use crate::mask::{gen_mask, AttendRanges, MaskError};
use crate::model::DeviceTopology;
use crate::plan::{BufferKind, CommLaunch, Direction, ExecutionPlan, Instruction, Tag};
use crate::scheduler::{comm_times, overlap_timeline, DivisionCost, Message};

pub use kernels::{exec_attention, exec_reduction, Mat, Partial};
pub use payload::{max_abs_error, Payload, SequencePayload};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("deadlock; blocked (device, awaited tag): {0:?}")]
    Deadlock(Vec<(usize, Tag)>),
    #[error("communication tag {0:?} has no matching counterpart")]
    TagMismatch(Tag),
    #[error("device {device}, instruction {instruction}: {reason}")]
    Malformed {
        device: usize,
        instruction: usize,
        reason: String,
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinkBytes {
    pub division: u32,
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub iteration: u64,
    pub num_devices: usize,
    pub numeric: bool,
    /// Bytes per link per division; the output phase uses the division count.
    pub link_bytes: Vec<LinkBytes>,
    pub total_bytes: u64,
    pub inter_machine_bytes: u64,
    pub messages: usize,
    pub per_device_flops: Vec<u64>,
    pub divisions: Vec<DivisionCost>,
    pub output_comm_time: f64,
    pub modeled_makespan: f64,
    pub max_abs_error: Option<f64>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per division: timings and bytes moved into it.
    pub fn division_csv(&self) -> String {
        let mut out = String::from("division,comp_time,comm_time,finish,bytes\n");
        for (t, d) in self.divisions.iter().enumerate() {
            let bytes: u64 = self
                .link_bytes
                .iter()
                .filter(|l| l.division as usize == t)
                .map(|l| l.bytes)
                .sum();
            writeln!(
                out,
                "{t},{:e},{:e},{:e},{bytes}",
                d.comp_time, d.comm_time, d.finish
            )
            .expect("write to string");
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub report: SimReport,
    /// Final outputs per sequence and query head, in numeric mode.
    pub outputs: Option<Vec<Vec<Mat>>>,
}

#[derive(Clone, Debug)]
enum Value {
    Id,
    Q(Mat),
    Kv(Mat, Mat),
    Partial(Partial),
    Output(Mat),
}

#[derive(Clone, Debug)]
struct SlotData {
    block: DataBlockId,
    value: Value,
}

struct Device<'a> {
    plan: &'a ExecutionPlan,
    pc: usize,
    slots: [Vec<Option<SlotData>>; 4],
    launched: BTreeMap<Tag, &'a CommLaunch>,
    flops: u64,
    division_flops: Vec<u64>,
}

impl<'a> Device<'a> {
    fn malformed(&self, reason: impl Into<String>) -> SimError {
        SimError::Malformed {
            device: self.plan.device,
            instruction: self.pc,
            reason: reason.into(),
        }
    }

    fn get(&self, kind: BufferKind, idx: u32, block: DataBlockId) -> Result<&SlotData, SimError> {
        match self.slots[kind as usize].get(idx as usize) {
            Some(Some(s)) if s.block == block => Ok(s),
            Some(Some(s)) => Err(self.malformed(format!(
                "{kind:?} slot {idx} holds {} instead of {block}",
                s.block
            ))),
            Some(None) => Err(self.malformed(format!("{kind:?} slot {idx} is empty"))),
            None => Err(self.malformed(format!("{kind:?} slot {idx} out of range"))),
        }
    }

    fn put(&mut self, kind: BufferKind, idx: u32, data: SlotData) -> Result<(), SimError> {
        let err = self.malformed(format!("{kind:?} slot {idx} out of range"));
        *self.slots[kind as usize].get_mut(idx as usize).ok_or(err)? = Some(data);
        Ok(())
    }
}

struct Sim<'a> {
    numeric: bool,
    ranges: &'a BTreeMap<usize, AttendRanges>,
    mailbox: BTreeMap<Tag, Vec<SlotData>>,
    link_bytes: BTreeMap<(u32, usize, usize), u64>,
    messages: usize,
}

impl<'a> Sim<'a> {
    /// Run one instruction; `Ok(false)` when blocked on an undelivered message.
    fn step(&mut self, dev: &mut Device<'a>) -> Result<bool, SimError> {
        let plan = dev.plan;
        match &plan.instructions[dev.pc] {
            Instruction::BlockwiseAttention { division, items } => {
                let mut results = Vec::with_capacity(items.len());
                for it in items {
                    let q = dev.get(BufferKind::Q, it.q, it.q_block)?;
                    let kv = dev.get(BufferKind::Kv, it.kv, it.kv_block)?;
                    let value = match (&q.value, &kv.value) {
                        (Value::Q(q), Value::Kv(k, v)) if self.numeric => {
                            let ranges = &self.ranges[&it.seq];
                            Value::Partial(exec_attention(
                                q,
                                k,
                                v,
                                it.q_tokens,
                                it.kv_tokens,
                                ranges,
                            ))
                        }
                        _ => Value::Id,
                    };
                    results.push((it.out, it.o_block, value));
                    dev.flops += it.flops;
                    dev.division_flops[*division as usize] += it.flops;
                }
                for (out, block, value) in results {
                    dev.put(BufferKind::Partial, out, SlotData { block, value })?;
                }
            }
            Instruction::BlockwiseReduction { items } => {
                for it in items {
                    let value = if self.numeric {
                        let mut parts = Vec::with_capacity(it.srcs.len() + 1);
                        for &i in std::iter::once(&it.dst).chain(&it.srcs) {
                            match &dev.get(BufferKind::Partial, i, it.block)?.value {
                                Value::Partial(p) => parts.push(p),
                                _ => return Err(dev.malformed("reduction over a non-partial")),
                            }
                        }
                        Value::Partial(exec_reduction(&parts))
                    } else {
                        for &i in std::iter::once(&it.dst).chain(&it.srcs) {
                            dev.get(BufferKind::Partial, i, it.block)?;
                        }
                        Value::Id
                    };
                    dev.put(
                        BufferKind::Partial,
                        it.dst,
                        SlotData {
                            block: it.block,
                            value,
                        },
                    )?;
                }
            }
            Instruction::BlockwiseCopy { items } => {
                for it in items {
                    let value = match &dev.get(BufferKind::Partial, it.src, it.block)?.value {
                        Value::Partial(p) => Value::Output(p.out.clone()),
                        _ => Value::Id,
                    };
                    dev.put(
                        BufferKind::Output,
                        it.dst,
                        SlotData {
                            block: it.block,
                            value,
                        },
                    )?;
                }
            }
            Instruction::CommLaunch(l) => {
                if dev.launched.insert(l.tag, l).is_some() {
                    return Err(dev.malformed(format!("tag {:?} launched twice", l.tag)));
                }
                if l.direction == Direction::Send {
                    let mut payload = Vec::with_capacity(l.blocks.len());
                    for (&idx, &b) in l.buffers.iter().zip(&l.blocks) {
                        payload.push(dev.get(l.kind, idx, b)?.clone());
                    }
                    self.mailbox.insert(l.tag, payload);
                    *self
                        .link_bytes
                        .entry((l.tag.division, plan.device, l.peer))
                        .or_default() += l.bytes;
                    self.messages += 1;
                }
            }
            Instruction::CommWait { tag } => {
                let Some(&l) = dev.launched.get(tag) else {
                    return Err(dev.malformed(format!("wait on unlaunched tag {tag:?}")));
                };
                if l.direction == Direction::Recv {
                    let Some(payload) = self.mailbox.remove(tag) else {
                        return Ok(false);
                    };
                    for ((&idx, &b), data) in l.buffers.iter().zip(&l.blocks).zip(payload) {
                        if data.block != b {
                            return Err(
                                dev.malformed(format!("received {} instead of {b}", data.block))
                            );
                        }
                        dev.put(l.kind, idx, data)?;
                    }
                }
            }
        }
        dev.pc += 1;
        Ok(true)
    }
}

fn check_pairing(plans: &[ExecutionPlan]) -> Result<(), SimError> {
    let mut sends = BTreeMap::new();
    let mut recvs = BTreeMap::new();
    for p in plans {
        for l in p.launches() {
            match l.direction {
                Direction::Send => sends.insert(l.tag, l.bytes),
                Direction::Recv => recvs.insert(l.tag, l.bytes),
            };
        }
    }
    for (tag, bytes) in &sends {
        if recvs.get(tag) != Some(bytes) {
            return Err(SimError::TagMismatch(*tag));
        }
    }
    match recvs.keys().find(|t| !sends.contains_key(t)) {
        Some(t) => Err(SimError::TagMismatch(*t)),
        None => Ok(()),
    }
}

fn block_kind(kind: BufferKind) -> BlockKind {
    match kind {
        BufferKind::Q => BlockKind::Q,
        BufferKind::Kv => BlockKind::Kv,
        BufferKind::Partial | BufferKind::Output => BlockKind::O,
    }
}

/// Execute `plans` (indexed by device). With a payload the run is numeric and
/// the final outputs are checked against the dense reference.
pub fn run(
    plans: &[ExecutionPlan],
    payload: Option<&Payload>,
    topo: &DeviceTopology,
) -> Result<SimOutcome, SimError> {
    check_pairing(plans)?;
    let numeric = payload.is_some();
    let num_divisions = plans.first().map_or(0, |p| p.num_divisions);

    let mut ranges = BTreeMap::new();
    for p in plans {
        for m in &p.masks {
            if !ranges.contains_key(&m.seq) {
                ranges.insert(m.seq, gen_mask(&m.mask, m.length)?);
            }
        }
    }

    let mut devices = Vec::with_capacity(plans.len());
    for p in plans {
        let cap = p.buffers.capacity;
        let mut dev = Device {
            plan: p,
            pc: 0,
            slots: BufferKind::ALL.map(|k| vec![None; cap.get(k) as usize]),
            launched: BTreeMap::new(),
            flops: 0,
            division_flops: vec![0; p.num_divisions],
        };
        for inp in &p.inputs {
            let value = match payload {
                Some(pl) => {
                    let s = &pl.sequences[inp.seq];
                    match inp.kind {
                        BufferKind::Q => Value::Q(s.q[inp.head].slice_rows(inp.tokens)),
                        BufferKind::Kv => Value::Kv(
                            s.k[inp.head].slice_rows(inp.tokens),
                            s.v[inp.head].slice_rows(inp.tokens),
                        ),
                        _ => return Err(dev.malformed("inputs must be Q or KV blocks")),
                    }
                }
                None => Value::Id,
            };
            dev.put(
                inp.kind,
                inp.index,
                SlotData {
                    block: inp.block,
                    value,
                },
            )?;
        }
        devices.push(dev);
    }

    let mut sim = Sim {
        numeric,
        ranges: &ranges,
        mailbox: BTreeMap::new(),
        link_bytes: BTreeMap::new(),
        messages: 0,
    };
    loop {
        let mut progress = false;
        for dev in devices.iter_mut() {
            while dev.pc < dev.plan.instructions.len() {
                if !sim.step(dev)? {
                    break;
                }
                progress = true;
            }
        }
        if devices.iter().all(|d| d.pc == d.plan.instructions.len()) {
            break;
        }
        if !progress {
            let waiting = devices
                .iter()
                .filter(|d| d.pc < d.plan.instructions.len())
                .filter_map(|d| match &d.plan.instructions[d.pc] {
                    Instruction::CommWait { tag } => Some((d.plan.device, *tag)),
                    _ => None,
                })
                .collect();
            return Err(SimError::Deadlock(waiting));
        }
    }
    if let Some(tag) = sim.mailbox.keys().next() {
        return Err(SimError::TagMismatch(*tag));
    }

    // timing from the launches, grouped as the schedule cost model does
    let mut msgs: Vec<Vec<Message>> = vec![Vec::new(); num_divisions + 1];
    for p in plans {
        for l in p.launches().filter(|l| l.direction == Direction::Send) {
            msgs[l.tag.division as usize].push(Message {
                block: l.blocks[0],
                kind: block_kind(l.kind),
                src: p.device,
                dst: l.peer,
                bytes: l.bytes,
            });
        }
    }
    let slowest = |m: &[Message]| comm_times(m, topo).into_iter().fold(0.0, f64::max);
    let comm: Vec<f64> = msgs[..num_divisions].iter().map(|m| slowest(m)).collect();
    let comp: Vec<f64> = (0..num_divisions)
        .map(|t| {
            devices
                .iter()
                .map(|d| d.division_flops[t] as f64 / topo.device_flops)
                .fold(0.0, f64::max)
        })
        .collect();
    let cost = overlap_timeline(&comp, &comm, slowest(&msgs[num_divisions]));

    let (outputs, max_err) = match payload {
        Some(pl) => {
            let d = pl.shape.head_dim;
            let mut out: Vec<Vec<Mat>> = pl
                .sequences
                .iter()
                .map(|s| {
                    (0..pl.shape.heads)
                        .map(|_| Mat::zeros(s.length, d))
                        .collect()
                })
                .collect();
            for dev in &devices {
                for o in &dev.plan.outputs {
                    let data = dev.get(BufferKind::Output, o.index, o.block)?;
                    let Value::Output(m) = &data.value else {
                        return Err(dev.malformed("output slot without data"));
                    };
                    let dst = &mut out[o.seq][o.head];
                    dst.data[o.tokens.start * d..o.tokens.end * d].copy_from_slice(&m.data);
                }
            }
            let err = max_abs_error(&out, &pl.reference());
            (Some(out), Some(err))
        }
        None => (None, None),
    };

    let link_bytes: Vec<LinkBytes> = sim
        .link_bytes
        .iter()
        .map(|(&(division, src, dst), &bytes)| LinkBytes {
            division,
            src,
            dst,
            bytes,
        })
        .collect();
    let total_bytes = link_bytes.iter().map(|l| l.bytes).sum();
    let inter_machine_bytes = link_bytes
        .iter()
        .filter(|l| !topo.same_machine(l.src, l.dst))
        .map(|l| l.bytes)
        .sum();
    let report = SimReport {
        iteration: plans.first().map_or(0, |p| p.iteration),
        num_devices: plans.len(),
        numeric,
        link_bytes,
        total_bytes,
        inter_machine_bytes,
        messages: sim.messages,
        per_device_flops: devices.iter().map(|d| d.flops).collect(),
        divisions: cost.divisions,
        output_comm_time: cost.output_comm_time,
        modeled_makespan: cost.modeled_makespan,
        max_abs_error: max_err,
    };
    Ok(SimOutcome { report, outputs })
}
