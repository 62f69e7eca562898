//! Attention mask families and their per-token range representation.
//!
//! Masks are never materialized densely. Every token carries at most two
//! half-open key ranges; this is also the format consumed by the attention
//! executor.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::Batch;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MaskError {
    #[error("token {token} would attend {count} disjoint ranges (at most 2 supported)")]
    TooManyRanges { token: usize, count: usize },
    #[error("token {token} attends nothing")]
    EmptyRow { token: usize },
    #[error("invalid {kind} mask for length {length}: {reason}")]
    InvalidParams {
        kind: &'static str,
        length: usize,
        reason: String,
    },
}

/// One of the supported mask families with its parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskDescriptor {
    Causal,
    /// Attention sink prefix plus a sliding window (window includes the token itself).
    Lambda {
        sink_tokens: usize,
        window: usize,
    },
    /// Sink and sliding window applied at the granularity of `block` tokens.
    /// The trailing `test_blocks` blocks attend everything before them.
    CausalBlockwise {
        block: usize,
        window_blocks: usize,
        sink_blocks: usize,
        test_blocks: usize,
    },
    /// A question prefix followed by answers that each see the question and
    /// themselves, never each other.
    SharedQuestion {
        question_len: usize,
        answer_lens: Vec<usize>,
    },
}

impl MaskDescriptor {
    pub const DEFAULT_LAMBDA_SINK: usize = 64;
    pub const DEFAULT_LAMBDA_WINDOW: usize = 4096;

    pub fn name(&self) -> &'static str {
        match self {
            MaskDescriptor::Causal => "causal",
            MaskDescriptor::Lambda { .. } => "lambda",
            MaskDescriptor::CausalBlockwise { .. } => "causal_blockwise",
            MaskDescriptor::SharedQuestion { .. } => "shared_question",
        }
    }

    pub fn lambda_default() -> Self {
        MaskDescriptor::Lambda {
            sink_tokens: Self::DEFAULT_LAMBDA_SINK,
            window: Self::DEFAULT_LAMBDA_WINDOW,
        }
    }

    /// 256-token blocks, a two-block window, one sink block and one test block.
    pub fn causal_blockwise_default() -> Self {
        MaskDescriptor::CausalBlockwise {
            block: 256,
            window_blocks: 2,
            sink_blocks: 1,
            test_blocks: 1,
        }
    }

    /// Shared question with `answers` answers of `fraction * length` tokens each;
    /// the question takes whatever is left. Answers that would be empty are dropped.
    pub fn shared_question_for(length: usize, answers: usize, fraction: f64) -> Self {
        let each = ((length as f64) * fraction).floor() as usize;
        let answer_lens: Vec<usize> = if each == 0 {
            Vec::new()
        } else {
            vec![each; answers.min(length / each.max(1))]
        };
        let used: usize = answer_lens.iter().sum();
        let (question_len, answer_lens) = if used >= length {
            // keep at least one question token
            let mut a = answer_lens;
            a.pop();
            (length - a.iter().sum::<usize>(), a)
        } else {
            (length - used, answer_lens)
        };
        MaskDescriptor::SharedQuestion {
            question_len,
            answer_lens,
        }
    }

    pub fn validate(&self, length: usize) -> Result<(), MaskError> {
        let invalid = |reason: &str| MaskError::InvalidParams {
            kind: self.name(),
            length,
            reason: reason.to_string(),
        };
        match self {
            MaskDescriptor::Causal => Ok(()),
            MaskDescriptor::Lambda { window, .. } => {
                if *window == 0 {
                    return Err(invalid("window must be at least 1"));
                }
                Ok(())
            }
            MaskDescriptor::CausalBlockwise {
                block,
                window_blocks,
                ..
            } => {
                if *block == 0 {
                    return Err(invalid("block must be at least 1"));
                }
                if *window_blocks == 0 {
                    return Err(invalid("window_blocks must be at least 1"));
                }
                Ok(())
            }
            MaskDescriptor::SharedQuestion {
                question_len,
                answer_lens,
            } => {
                if answer_lens.contains(&0) {
                    return Err(invalid("answers must be non-empty"));
                }
                let total = question_len + answer_lens.iter().sum::<usize>();
                if total != length {
                    return Err(invalid(&format!(
                        "question plus answers cover {total} tokens"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Half-open interval `[start, end)` of token indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    pub fn intersect(&self, other: Span) -> Span {
        let start = self.start.max(other.start);
        let end = self.end.min(other.end);
        Span::new(start, end.max(start))
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

/// The key ranges one query token attends: one or two sorted, disjoint spans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Span>", into = "Vec<Span>")]
pub struct TokenSpans {
    spans: [Span; 2],
    len: u8,
}

impl TokenSpans {
    pub fn one(s: Span) -> Self {
        TokenSpans {
            spans: [s, Span::new(0, 0)],
            len: 1,
        }
    }

    pub fn two(a: Span, b: Span) -> Self {
        TokenSpans {
            spans: [a, b],
            len: 2,
        }
    }

    pub fn as_slice(&self) -> &[Span] {
        &self.spans[..self.len as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = Span> + '_ {
        self.as_slice().iter().copied()
    }

    pub fn count(&self) -> usize {
        self.iter().map(|s| s.len()).sum()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.iter().any(|s| s.contains(j))
    }

    /// Number of attended keys inside `keys`.
    pub fn count_within(&self, keys: Span) -> usize {
        self.iter().map(|s| s.intersect(keys).len()).sum()
    }
}

impl TryFrom<Vec<Span>> for TokenSpans {
    type Error = String;

    fn try_from(v: Vec<Span>) -> Result<Self, Self::Error> {
        match v.as_slice() {
            [a] => Ok(TokenSpans::one(*a)),
            [a, b] => Ok(TokenSpans::two(*a, *b)),
            _ => Err(format!("expected 1 or 2 spans, got {}", v.len())),
        }
    }
}

impl From<TokenSpans> for Vec<Span> {
    fn from(t: TokenSpans) -> Self {
        t.as_slice().to_vec()
    }
}

/// Per-token attend ranges for one sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttendRanges {
    rows: Vec<TokenSpans>,
}

impl AttendRanges {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &TokenSpans {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[TokenSpans] {
        &self.rows
    }

    pub fn attends(&self, i: usize, j: usize) -> bool {
        self.rows[i].contains(j)
    }

    /// Total number of `(query, key)` pairs the mask keeps.
    pub fn attended_pairs(&self) -> u64 {
        self.rows.iter().map(|r| r.count() as u64).sum()
    }

    /// Kept pairs with the query in `queries` and the key in `keys`.
    pub fn pairs_in_tile(&self, queries: Span, keys: Span) -> u64 {
        self.rows[queries.start..queries.end]
            .iter()
            .map(|r| r.count_within(keys) as u64)
            .sum()
    }
}

/// Merge raw candidate spans for token `i` into the canonical form.
fn normalize(token: usize, mut raw: Vec<Span>) -> Result<TokenSpans, MaskError> {
    let limit = token + 1;
    raw.retain_mut(|s| {
        s.end = s.end.min(limit);
        !s.is_empty()
    });
    raw.sort();
    let mut merged: Vec<Span> = Vec::with_capacity(2);
    for s in raw {
        match merged.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => merged.push(s),
        }
    }
    match merged.len() {
        0 => Err(MaskError::EmptyRow { token }),
        1 => Ok(TokenSpans::one(merged[0])),
        2 => Ok(TokenSpans::two(merged[0], merged[1])),
        count => Err(MaskError::TooManyRanges { token, count }),
    }
}

/// Generate the attend ranges of a sequence of `length` tokens.
pub fn gen_mask(mask: &MaskDescriptor, length: usize) -> Result<AttendRanges, MaskError> {
    mask.validate(length)?;
    let mut rows = Vec::with_capacity(length);
    match mask {
        MaskDescriptor::Causal => {
            rows.extend((0..length).map(|i| TokenSpans::one(Span::new(0, i + 1))));
        }
        MaskDescriptor::Lambda {
            sink_tokens,
            window,
        } => {
            for i in 0..length {
                let lo = (i + 1).saturating_sub(*window);
                rows.push(normalize(
                    i,
                    vec![Span::new(0, *sink_tokens), Span::new(lo, i + 1)],
                )?);
            }
        }
        MaskDescriptor::CausalBlockwise {
            block,
            window_blocks,
            sink_blocks,
            test_blocks,
        } => {
            let nblocks = length.div_ceil(*block);
            let first_test = nblocks.saturating_sub(*test_blocks);
            for i in 0..length {
                let k = i / block;
                if k >= first_test || k < *sink_blocks {
                    rows.push(TokenSpans::one(Span::new(0, i + 1)));
                    continue;
                }
                let lo = (k + 1).saturating_sub(*window_blocks) * block;
                rows.push(normalize(
                    i,
                    vec![Span::new(0, sink_blocks * block), Span::new(lo, i + 1)],
                )?);
            }
        }
        MaskDescriptor::SharedQuestion {
            question_len,
            answer_lens,
        } => {
            rows.extend((0..*question_len).map(|i| TokenSpans::one(Span::new(0, i + 1))));
            let mut start = *question_len;
            for &a in answer_lens {
                for i in start..start + a {
                    rows.push(normalize(
                        i,
                        vec![Span::new(0, *question_len), Span::new(start, i + 1)],
                    )?);
                }
                start += a;
            }
        }
    }
    Ok(AttendRanges { rows })
}

/// Masked pairs over causal pairs, summed across the batch.
///
/// Every sequence shares `H` and `D`, so the pair ratio is also the FLOP ratio.
pub fn mask_sparsity(batch: &Batch) -> Result<f64, MaskError> {
    let mut kept = 0u64;
    let mut causal = 0u64;
    for seq in &batch.sequences {
        let ranges = gen_mask(&seq.mask, seq.length)?;
        kept += ranges.attended_pairs();
        let l = seq.length as u64;
        causal += l * (l + 1) / 2;
    }
    if causal == 0 {
        return Ok(1.0);
    }
    Ok(kept as f64 / causal as f64)
}
