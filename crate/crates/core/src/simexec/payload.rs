//! Seeded input tensors and the dense reference output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::Mat;
use crate::mask::MaskDescriptor;
use crate::model::{AttentionShape, Batch};
use crate::reference::{dense_attention, dense_mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequencePayload {
    pub seq_id: String,
    pub length: usize,
    pub mask: MaskDescriptor,
    /// One `[length, head_dim]` matrix per query head.
    pub q: Vec<Mat>,
    /// One matrix per KV group.
    pub k: Vec<Mat>,
    pub v: Vec<Mat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub shape: AttentionShape,
    pub sequences: Vec<SequencePayload>,
}

impl Payload {
    /// Entries drawn uniformly from `[-1, 1)`, sequence by sequence, Q then K then V.
    pub fn random(batch: &Batch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = batch.shape;
        let d = shape.head_dim;
        let mut mat = |rows: usize| {
            Mat::from_vec(
                rows,
                d,
                (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        };
        let sequences = batch
            .sequences
            .iter()
            .map(|s| {
                let q = (0..shape.heads).map(|_| mat(s.length)).collect();
                let k = (0..shape.kv_groups).map(|_| mat(s.length)).collect();
                let v = (0..shape.kv_groups).map(|_| mat(s.length)).collect();
                SequencePayload {
                    seq_id: s.seq_id.clone(),
                    length: s.length,
                    mask: s.mask.clone(),
                    q,
                    k,
                    v,
                }
            })
            .collect();
        Payload { shape, sequences }
    }

    /// Dense masked attention per sequence and query head.
    pub fn reference(&self) -> Vec<Vec<Mat>> {
        let d = self.shape.head_dim;
        self.sequences
            .iter()
            .map(|s| {
                let mask = dense_mask(&s.mask, s.length);
                (0..self.shape.heads)
                    .map(|h| {
                        let g = self.shape.kv_group_of(h);
                        let out = dense_attention(
                            &s.q[h].data,
                            &s.k[g].data,
                            &s.v[g].data,
                            s.length,
                            d,
                            &mask,
                        );
                        Mat::from_vec(s.length, d, out)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Largest entrywise difference between two per-sequence, per-head outputs.
pub fn max_abs_error(a: &[Vec<Mat>], b: &[Vec<Mat>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y))
        .flat_map(|(x, y)| x.data.iter().zip(&y.data))
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}
