//! Symbolic replay of a set of plans.
//!
//! Slots carry block identities instead of numbers, and partial outputs carry
//! the set of computation blocks folded into them, so the replay can tell
//! whether each output ends up with every contribution exactly once.

use std::collections::{BTreeMap, BTreeSet};

use super::{BufferKind, CommLaunch, Direction, ExecutionPlan, Instruction, PlanError, Tag};
use crate::blockgen::{CompBlockId, DataBlockId};

#[derive(Clone, Debug)]
struct Content {
    block: DataBlockId,
    ready: bool,
    comps: Vec<CompBlockId>,
}

type SlotKey = (BufferKind, u32);

struct Device<'a> {
    plan: &'a ExecutionPlan,
    pc: usize,
    slots: BTreeMap<SlotKey, Content>,
    pinned: BTreeMap<SlotKey, u32>,
    launched: BTreeMap<Tag, &'a CommLaunch>,
    waited: BTreeSet<Tag>,
    sent_partials: BTreeSet<DataBlockId>,
    expected: BTreeMap<DataBlockId, usize>,
}

impl<'a> Device<'a> {
    fn err(&self, reason: impl Into<String>) -> PlanError {
        PlanError::Invalid {
            device: self.plan.device,
            instruction: self.pc,
            reason: reason.into(),
        }
    }

    fn check_index(&self, kind: BufferKind, index: u32) -> Result<(), PlanError> {
        if index >= self.plan.buffers.capacity.get(kind) {
            return Err(self.err(format!("{kind:?} slot {index} beyond capacity")));
        }
        Ok(())
    }

    fn read(
        &self,
        kind: BufferKind,
        index: u32,
        block: DataBlockId,
    ) -> Result<&Content, PlanError> {
        self.check_index(kind, index)?;
        match self.slots.get(&(kind, index)) {
            Some(c) if c.block == block && c.ready => Ok(c),
            Some(c) if c.block == block => Err(self.err(format!(
                "{block} read from {kind:?} slot {index} before arrival"
            ))),
            Some(c) => Err(self.err(format!(
                "{kind:?} slot {index} holds {} where {block} was expected",
                c.block
            ))),
            None => Err(self.err(format!("{kind:?} slot {index} read while empty"))),
        }
    }

    fn write(&mut self, kind: BufferKind, index: u32, content: Content) -> Result<(), PlanError> {
        self.check_index(kind, index)?;
        if self.pinned.get(&(kind, index)).copied().unwrap_or(0) > 0 {
            return Err(self.err(format!(
                "{kind:?} slot {index} overwritten while being sent"
            )));
        }
        self.slots.insert((kind, index), content);
        Ok(())
    }

    /// Execute one instruction; `Ok(false)` means blocked on a wait.
    fn step(&mut self, mailbox: &mut BTreeMap<Tag, Vec<Content>>) -> Result<bool, PlanError> {
        let plan = self.plan;
        match &plan.instructions[self.pc] {
            Instruction::BlockwiseAttention { items, .. } => {
                for it in items {
                    self.read(BufferKind::Q, it.q, it.q_block)?;
                    self.read(BufferKind::Kv, it.kv, it.kv_block)?;
                    if self.sent_partials.contains(&it.o_block) {
                        return Err(self.err(format!(
                            "{} produced after its partial was sent",
                            it.o_block
                        )));
                    }
                }
                for it in items {
                    let c = Content {
                        block: it.o_block,
                        ready: true,
                        comps: vec![it.comp],
                    };
                    self.write(BufferKind::Partial, it.out, c)?;
                }
            }
            Instruction::BlockwiseReduction { items } => {
                for it in items {
                    let mut comps = self
                        .read(BufferKind::Partial, it.dst, it.block)?
                        .comps
                        .clone();
                    for &src in &it.srcs {
                        if src == it.dst {
                            return Err(self.err("reduction reads its destination as a source"));
                        }
                        comps.extend(self.read(BufferKind::Partial, src, it.block)?.comps.iter());
                    }
                    let n = comps.len();
                    comps.sort_unstable();
                    comps.dedup();
                    if comps.len() != n {
                        return Err(self.err(format!("{} reduces a contribution twice", it.block)));
                    }
                    self.write(
                        BufferKind::Partial,
                        it.dst,
                        Content {
                            block: it.block,
                            ready: true,
                            comps,
                        },
                    )?;
                }
            }
            Instruction::BlockwiseCopy { items } => {
                for it in items {
                    let c = self.read(BufferKind::Partial, it.src, it.block)?.clone();
                    let want = self.expected.get(&it.block).copied().unwrap_or(usize::MAX);
                    if c.comps.len() != want {
                        return Err(self.err(format!(
                            "{} copied with {} of {want} contributions",
                            it.block,
                            c.comps.len()
                        )));
                    }
                    self.write(BufferKind::Output, it.dst, c)?;
                }
            }
            Instruction::CommLaunch(l) => {
                let (src, dst) = match l.direction {
                    Direction::Send => (plan.device, l.peer),
                    Direction::Recv => (l.peer, plan.device),
                };
                if l.tag.src as usize != src || l.tag.dst as usize != dst || l.tag.kind != l.kind {
                    return Err(self.err(format!("tag {:?} does not match the launch", l.tag)));
                }
                if l.buffers.len() != l.blocks.len() {
                    return Err(self.err("launch lists differ in length"));
                }
                if self.launched.insert(l.tag, l).is_some() {
                    return Err(self.err(format!("tag {:?} launched twice", l.tag)));
                }
                match l.direction {
                    Direction::Send => {
                        let mut payload = Vec::with_capacity(l.blocks.len());
                        for (&idx, &b) in l.buffers.iter().zip(&l.blocks) {
                            payload.push(self.read(l.kind, idx, b)?.clone());
                            *self.pinned.entry((l.kind, idx)).or_default() += 1;
                            if l.kind == BufferKind::Partial {
                                self.sent_partials.insert(b);
                            }
                        }
                        mailbox.insert(l.tag, payload);
                    }
                    Direction::Recv => {
                        for (&idx, &b) in l.buffers.iter().zip(&l.blocks) {
                            let c = Content {
                                block: b,
                                ready: false,
                                comps: Vec::new(),
                            };
                            self.write(l.kind, idx, c)?;
                        }
                    }
                }
            }
            Instruction::CommWait { tag } => {
                let Some(&l) = self.launched.get(tag) else {
                    return Err(self.err(format!("wait on unlaunched tag {tag:?}")));
                };
                if self.waited.contains(tag) {
                    return Err(self.err(format!("tag {tag:?} waited twice")));
                }
                match l.direction {
                    Direction::Send => {
                        for &idx in &l.buffers {
                            *self
                                .pinned
                                .get_mut(&(l.kind, idx))
                                .expect("pinned at launch") -= 1;
                        }
                    }
                    Direction::Recv => {
                        let Some(payload) = mailbox.remove(tag) else {
                            return Ok(false);
                        };
                        for ((&idx, &b), c) in l.buffers.iter().zip(&l.blocks).zip(payload) {
                            if c.block != b {
                                return Err(self
                                    .err(format!("received {} where {b} was expected", c.block)));
                            }
                            let slot = self.slots.get_mut(&(l.kind, idx));
                            match slot {
                                Some(s) if s.block == b && !s.ready => *s = c,
                                _ => {
                                    return Err(self.err(format!(
                                        "receive slot for {b} was reused before arrival"
                                    )))
                                }
                            }
                        }
                    }
                }
                self.waited.insert(*tag);
            }
        }
        self.pc += 1;
        Ok(true)
    }
}

fn static_pairing(plans: &[ExecutionPlan]) -> Result<(), PlanError> {
    let mut sends: BTreeMap<Tag, &CommLaunch> = BTreeMap::new();
    let mut recvs: BTreeMap<Tag, &CommLaunch> = BTreeMap::new();
    for p in plans {
        for l in p.launches() {
            let map = match l.direction {
                Direction::Send => &mut sends,
                Direction::Recv => &mut recvs,
            };
            map.insert(l.tag, l);
        }
    }
    for (tag, s) in &sends {
        match recvs.get(tag) {
            Some(r) if r.blocks == s.blocks && r.bytes == s.bytes => {}
            _ => return Err(PlanError::TagMismatch(*tag)),
        }
    }
    if let Some(tag) = recvs.keys().find(|t| !sends.contains_key(t)) {
        return Err(PlanError::TagMismatch(*tag));
    }
    Ok(())
}

/// Check that `plans` (one per device, indexed by device) execute to
/// completion with every input resident when read, every transfer matched
/// and every output holding all of its contributions exactly once.
pub fn verify_plans(plans: &[ExecutionPlan]) -> Result<(), PlanError> {
    for (i, p) in plans.iter().enumerate() {
        if p.device != i {
            return Err(PlanError::Invalid {
                device: i,
                instruction: 0,
                reason: format!("plan for device {} in position {i}", p.device),
            });
        }
    }
    static_pairing(plans)?;
    let mut devices: Vec<Device> = Vec::with_capacity(plans.len());
    for p in plans {
        let mut d = Device {
            plan: p,
            pc: 0,
            slots: BTreeMap::new(),
            pinned: BTreeMap::new(),
            launched: BTreeMap::new(),
            waited: BTreeSet::new(),
            sent_partials: BTreeSet::new(),
            expected: p.outputs.iter().map(|o| (o.block, o.partials)).collect(),
        };
        for inp in &p.inputs {
            d.check_index(inp.kind, inp.index)?;
            let c = Content {
                block: inp.block,
                ready: true,
                comps: Vec::new(),
            };
            if d.slots.insert((inp.kind, inp.index), c).is_some() {
                return Err(d.err(format!(
                    "two inputs share {:?} slot {}",
                    inp.kind, inp.index
                )));
            }
        }
        devices.push(d);
    }

    let mut mailbox: BTreeMap<Tag, Vec<Content>> = BTreeMap::new();
    loop {
        let mut progress = false;
        for d in devices.iter_mut() {
            while d.pc < d.plan.instructions.len() {
                if !d.step(&mut mailbox)? {
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
            return Err(PlanError::Deadlock(waiting));
        }
    }

    for d in &devices {
        if let Some(tag) = d.launched.keys().find(|t| !d.waited.contains(t)) {
            return Err(PlanError::TagMismatch(*tag));
        }
        for o in &d.plan.outputs {
            match d.slots.get(&(BufferKind::Output, o.index)) {
                Some(c) if c.block == o.block && c.comps.len() == o.partials => {}
                _ => return Err(d.err(format!("output {} missing or incomplete", o.block))),
            }
        }
    }
    if let Some(tag) = mailbox.keys().next() {
        return Err(PlanError::TagMismatch(*tag));
    }
    Ok(())
}
