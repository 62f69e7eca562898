//! Decomposition of a batch into data blocks and computation blocks.
//!
//! Each sequence is cut into tiles of `block_size` tokens (the last tile may
//! be shorter). Per tile there is one Q and one O block per query head and one
//! KV block per KV group; together they form the tile's co-location group.
//! A computation block is the attention of one Q block against one KV block
//! and exists only when the mask keeps at least one pair in that tile.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::mask::{gen_mask, AttendRanges, MaskDescriptor, MaskError, Span};
use crate::model::{AttentionShape, Batch};

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(
            Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(DataBlockId, "d");
id_type!(CompBlockId, "c");
id_type!(GroupId, "g");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    Q,
    Kv,
    O,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataBlock {
    pub id: DataBlockId,
    pub kind: BlockKind,
    /// Index of the sequence in the batch.
    pub seq: usize,
    /// Query head for Q/O blocks, KV group for KV blocks.
    pub head: usize,
    pub tile: usize,
    pub tokens: Span,
    pub size_bytes: u64,
    pub group: GroupId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputationBlock {
    pub id: CompBlockId,
    pub seq: usize,
    pub head: usize,
    pub q_tile: usize,
    pub kv_tile: usize,
    pub q_block: DataBlockId,
    pub kv_block: DataBlockId,
    pub o_block: DataBlockId,
    pub attended_pairs: u64,
    pub flops: u64,
}

impl ComputationBlock {
    pub fn inputs(&self) -> [DataBlockId; 2] {
        [self.q_block, self.kv_block]
    }
}

/// All data blocks of one `(sequence, tile)`; the atomic unit of data placement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColocationGroup {
    pub id: GroupId,
    pub seq: usize,
    pub tile: usize,
    pub tokens: Span,
    /// Q blocks for every head, then KV blocks per group, then O blocks per head.
    pub members: Vec<DataBlockId>,
    pub size_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceBlocks {
    pub seq_id: String,
    pub length: usize,
    pub mask: MaskDescriptor,
    pub block_size: usize,
    pub first_group: GroupId,
    pub tiles: usize,
    #[serde(skip)]
    pub ranges: AttendRanges,
}

impl SequenceBlocks {
    pub fn tile_span(&self, tile: usize) -> Span {
        let start = tile * self.block_size;
        Span::new(start, (start + self.block_size).min(self.length))
    }

    pub fn group(&self, tile: usize) -> GroupId {
        GroupId(self.first_group.0 + tile as u32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGraph {
    pub shape: AttentionShape,
    pub sequences: Vec<SequenceBlocks>,
    pub data_blocks: Vec<DataBlock>,
    pub comp_blocks: Vec<ComputationBlock>,
    pub groups: Vec<ColocationGroup>,
}

impl BlockGraph {
    pub fn data(&self, id: DataBlockId) -> &DataBlock {
        &self.data_blocks[id.index()]
    }

    pub fn comp(&self, id: CompBlockId) -> &ComputationBlock {
        &self.comp_blocks[id.index()]
    }

    pub fn group(&self, id: GroupId) -> &ColocationGroup {
        &self.groups[id.index()]
    }

    pub fn group_of(&self, id: DataBlockId) -> GroupId {
        self.data(id).group
    }

    /// The block of `kind` and `head` inside a co-location group.
    pub fn block_in_group(&self, group: GroupId, kind: BlockKind, head: usize) -> DataBlockId {
        let s = &self.shape;
        let offset = match kind {
            BlockKind::Q => head,
            BlockKind::Kv => s.heads + head,
            BlockKind::O => s.heads + s.kv_groups + head,
        };
        self.group(group).members[offset]
    }

    pub fn total_flops(&self) -> u64 {
        self.comp_blocks.iter().map(|c| c.flops).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.groups.iter().map(|g| g.size_bytes).sum()
    }

    /// For every data block, the computation blocks reading or writing it.
    pub fn users(&self) -> Vec<Vec<CompBlockId>> {
        let mut users = vec![Vec::new(); self.data_blocks.len()];
        for c in &self.comp_blocks {
            users[c.q_block.index()].push(c.id);
            users[c.kv_block.index()].push(c.id);
            users[c.o_block.index()].push(c.id);
        }
        users
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("block graph serializes")
    }
}

/// Sparse per-tile pair counts: `rows[q_tile]` lists `(kv_tile, pairs)` with pairs > 0.
fn tile_pair_counts(ranges: &AttendRanges, seq: &SequenceBlocks) -> Vec<Vec<(usize, u64)>> {
    let t = seq.tiles;
    let b = seq.block_size;
    let mut out = Vec::with_capacity(t);
    let mut full = vec![0i64; t + 1];
    let mut partial = vec![0u64; t];
    for qt in 0..t {
        full.iter_mut().for_each(|x| *x = 0);
        partial.iter_mut().for_each(|x| *x = 0);
        for row in &ranges.rows()[seq.tile_span(qt).start..seq.tile_span(qt).end] {
            for s in row.iter() {
                let first = s.start / b;
                let last = (s.end - 1) / b;
                if first == last {
                    partial[first] += s.len() as u64;
                    continue;
                }
                partial[first] += (seq.tile_span(first).end - s.start) as u64;
                partial[last] += (s.end - seq.tile_span(last).start) as u64;
                full[first + 1] += 1;
                full[last] -= 1;
            }
        }
        let mut covering = 0i64;
        let mut row = Vec::new();
        for kt in 0..t {
            covering += full[kt];
            let pairs = partial[kt] + covering as u64 * seq.tile_span(kt).len() as u64;
            if pairs > 0 {
                row.push((kt, pairs));
            }
        }
        out.push(row);
    }
    out
}

/// Blocks with one block size for every sequence.
pub fn generate_blocks(batch: &Batch, block_size: usize) -> Result<BlockGraph, MaskError> {
    let sizes = vec![block_size; batch.sequences.len()];
    generate_blocks_with_sizes(batch, &sizes)
}

/// Blocks with a per-sequence block size.
pub fn generate_blocks_with_sizes(
    batch: &Batch,
    block_sizes: &[usize],
) -> Result<BlockGraph, MaskError> {
    assert_eq!(block_sizes.len(), batch.sequences.len());
    assert!(
        block_sizes.iter().all(|&b| b >= 1),
        "block size must be >= 1"
    );
    let shape = batch.shape;
    let elem = (shape.head_dim * shape.bytes_per_element) as u64;
    let mut sequences = Vec::with_capacity(batch.sequences.len());
    let mut data_blocks = Vec::new();
    let mut comp_blocks = Vec::new();
    let mut groups = Vec::new();

    for (seq_idx, (spec, &b)) in batch.sequences.iter().zip(block_sizes).enumerate() {
        let ranges = gen_mask(&spec.mask, spec.length)?;
        let seq = SequenceBlocks {
            seq_id: spec.seq_id.clone(),
            length: spec.length,
            mask: spec.mask.clone(),
            block_size: b,
            first_group: GroupId(groups.len() as u32),
            tiles: spec.length.div_ceil(b),
            ranges,
        };
        for tile in 0..seq.tiles {
            let gid = GroupId(groups.len() as u32);
            let tokens = seq.tile_span(tile);
            let n = tokens.len() as u64;
            let mut members = Vec::with_capacity(2 * shape.heads + shape.kv_groups);
            let mut size_bytes = 0;
            let kinds = [
                (BlockKind::Q, shape.heads, 1),
                (BlockKind::Kv, shape.kv_groups, 2),
                (BlockKind::O, shape.heads, 1),
            ];
            for (kind, count, factor) in kinds {
                for head in 0..count {
                    let id = DataBlockId(data_blocks.len() as u32);
                    let bytes = n * elem * factor;
                    data_blocks.push(DataBlock {
                        id,
                        kind,
                        seq: seq_idx,
                        head,
                        tile,
                        tokens,
                        size_bytes: bytes,
                        group: gid,
                    });
                    members.push(id);
                    size_bytes += bytes;
                }
            }
            groups.push(ColocationGroup {
                id: gid,
                seq: seq_idx,
                tile,
                tokens,
                members,
                size_bytes,
            });
        }

        let pairs = tile_pair_counts(&seq.ranges, &seq);
        let member = |tile: usize, offset: usize| groups[seq.group(tile).index()].members[offset];
        for head in 0..shape.heads {
            let group = shape.kv_group_of(head);
            for (qt, row) in pairs.iter().enumerate() {
                for &(kt, attended_pairs) in row {
                    comp_blocks.push(ComputationBlock {
                        id: CompBlockId(comp_blocks.len() as u32),
                        seq: seq_idx,
                        head,
                        q_tile: qt,
                        kv_tile: kt,
                        q_block: member(qt, head),
                        kv_block: member(kt, shape.heads + group),
                        o_block: member(qt, shape.heads + shape.kv_groups + head),
                        attended_pairs,
                        flops: 4 * attended_pairs * shape.head_dim as u64,
                    });
                }
            }
        }
        sequences.push(seq);
    }

    Ok(BlockGraph {
        shape,
        sequences,
        data_blocks,
        comp_blocks,
        groups,
    })
}

/// The co-location groups of `g` as lists of data blocks.
pub fn colocation_groups(g: &BlockGraph) -> Vec<Vec<DataBlockId>> {
    g.groups.iter().map(|grp| grp.members.clone()).collect()
}
