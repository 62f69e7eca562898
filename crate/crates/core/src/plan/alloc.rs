//! Buffer index assignment with first-fit reuse.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::BufferKind;

/// Index allocator for one buffer kind; always hands out the lowest free index.
#[derive(Clone, Debug, Default)]
pub struct BufferAllocator {
    free: BTreeSet<u32>,
    next: u32,
}

impl BufferAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self) -> u32 {
        match self.free.pop_first() {
            Some(i) => i,
            None => {
                self.next += 1;
                self.next - 1
            }
        }
    }

    pub fn free(&mut self, index: u32) {
        assert!(index < self.next, "freeing unallocated index {index}");
        let fresh = self.free.insert(index);
        assert!(fresh, "double free of index {index}");
    }

    /// Number of distinct indices ever handed out.
    pub fn capacity(&self) -> u32 {
        self.next
    }
}

/// A value occupying one buffer slot from its defining instruction through
/// its last use, both inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveRange {
    pub kind: BufferKind,
    pub def: usize,
    pub last: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capacities {
    pub q: u32,
    pub kv: u32,
    pub partial: u32,
    pub output: u32,
}

impl Capacities {
    pub fn get(&self, kind: BufferKind) -> u32 {
        match kind {
            BufferKind::Q => self.q,
            BufferKind::Kv => self.kv,
            BufferKind::Partial => self.partial,
            BufferKind::Output => self.output,
        }
    }

    fn set(&mut self, kind: BufferKind, v: u32) {
        match kind {
            BufferKind::Q => self.q = v,
            BufferKind::Kv => self.kv = v,
            BufferKind::Partial => self.partial = v,
            BufferKind::Output => self.output = v,
        }
    }

    pub fn max(&self) -> u32 {
        self.q.max(self.kv).max(self.partial).max(self.output)
    }
}

/// Assign an index to every range, reusing an index once the range holding
/// it has ended before the new range starts.
pub fn allocate_buffers(ranges: &[LiveRange]) -> (Vec<u32>, Capacities) {
    let mut order: Vec<usize> = (0..ranges.len()).collect();
    order.sort_by_key(|&i| (ranges[i].def, i));
    let mut pools: [BufferAllocator; 4] = Default::default();
    let mut active: BinaryHeap<Reverse<(usize, usize, u32)>> = BinaryHeap::new();
    let mut index = vec![0u32; ranges.len()];
    for i in order {
        let r = ranges[i];
        debug_assert!(r.def <= r.last);
        while let Some(&Reverse((last, kind, idx))) = active.peek() {
            if last >= r.def {
                break;
            }
            active.pop();
            pools[kind].free(idx);
        }
        let k = r.kind as usize;
        let idx = pools[k].alloc();
        index[i] = idx;
        active.push(Reverse((r.last, k, idx)));
    }
    let mut caps = Capacities::default();
    for kind in BufferKind::ALL {
        caps.set(kind, pools[kind as usize].capacity());
    }
    (index, caps)
}
