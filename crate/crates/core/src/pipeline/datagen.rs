//! Synthetic sequence-length streams shaped like long-context training sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Pareto};
use serde::{Deserialize, Serialize};

use crate::mask::MaskDescriptor;
use crate::model::{AttentionShape, BatchHeader, SequenceSpec, SequenceStream};

/// Length distribution: a lognormal body plus a Pareto tail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthDist {
    /// Long instruction data: median around 8k tokens, heavy tail to the budget.
    LongAlign,
    /// Long-document QA: mostly short with a thin very long tail.
    Ldc,
}

impl LengthDist {
    /// (body median, body sigma, tail probability, tail scale, tail shape)
    fn params(self) -> (f64, f64, f64, f64, f64) {
        match self {
            LengthDist::LongAlign => (8000.0, 0.9, 0.10, 16384.0, 1.2),
            LengthDist::Ldc => (1500.0, 1.2, 0.08, 8192.0, 1.1),
        }
    }
}

impl std::str::FromStr for LengthDist {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "longalign" => Ok(LengthDist::LongAlign),
            "ldc" => Ok(LengthDist::Ldc),
            other => Err(format!("unknown distribution {other:?}")),
        }
    }
}

/// Mask family attached to generated sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskChoice {
    Causal,
    Lambda,
    CausalBlockwise,
    SharedQuestion,
    /// One of the four per sequence, uniformly.
    Mixed,
}

impl std::str::FromStr for MaskChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "causal" => Ok(MaskChoice::Causal),
            "lambda" => Ok(MaskChoice::Lambda),
            "causal_blockwise" => Ok(MaskChoice::CausalBlockwise),
            "shared_question" => Ok(MaskChoice::SharedQuestion),
            "mixed" => Ok(MaskChoice::Mixed),
            other => Err(format!("unknown mask {other:?}")),
        }
    }
}

impl MaskChoice {
    fn descriptor(self, length: usize, rng: &mut impl Rng) -> MaskDescriptor {
        match self {
            MaskChoice::Causal => MaskDescriptor::Causal,
            MaskChoice::Lambda => MaskDescriptor::lambda_default(),
            MaskChoice::CausalBlockwise => MaskDescriptor::causal_blockwise_default(),
            MaskChoice::SharedQuestion => MaskDescriptor::shared_question_for(length, 4, 0.2),
            MaskChoice::Mixed => {
                let pick = [
                    MaskChoice::Causal,
                    MaskChoice::Lambda,
                    MaskChoice::CausalBlockwise,
                    MaskChoice::SharedQuestion,
                ][rng.random_range(0..4)];
                pick.descriptor(length, rng)
            }
        }
    }
}

/// `count` lengths in `[16, max_len]`, multiplied by `scale` before clamping.
pub fn generate_lengths(
    dist: LengthDist,
    count: usize,
    scale: f64,
    max_len: usize,
    seed: u64,
) -> Vec<usize> {
    let (median, sigma, p_tail, tail_scale, shape) = dist.params();
    let body = LogNormal::new(median.ln(), sigma).expect("valid lognormal");
    let tail = Pareto::new(tail_scale, shape).expect("valid pareto");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = 16.min(max_len);
    (0..count)
        .map(|_| {
            let x = if rng.random::<f64>() < p_tail {
                tail.sample(&mut rng)
            } else {
                body.sample(&mut rng)
            };
            ((x * scale).round() as usize).clamp(lo, max_len)
        })
        .collect()
}

/// A JSONL-ready stream of generated sequences.
pub fn generate_stream(
    dist: LengthDist,
    count: usize,
    scale: f64,
    masks: MaskChoice,
    shape: AttentionShape,
    token_budget: usize,
    seed: u64,
) -> SequenceStream {
    let lengths = generate_lengths(dist, count, scale, token_budget, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let sequences = lengths
        .into_iter()
        .enumerate()
        .map(|(i, len)| {
            SequenceSpec::new(format!("seq{i:05}"), len, masks.descriptor(len, &mut rng))
        })
        .collect();
    SequenceStream {
        header: BatchHeader {
            heads: shape.heads,
            kv_groups: shape.kv_groups,
            head_dim: shape.head_dim,
            token_budget,
            bytes_per_element: shape.bytes_per_element,
        },
        sequences,
    }
}
