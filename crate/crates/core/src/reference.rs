//! Dense reference implementations used to check the block pipeline.
//!
//! Nothing here goes through the range representation or the block
//! decomposition: masks are evaluated pointwise from their definitions and
//! attention is a plain row softmax over the full score matrix.

use crate::mask::MaskDescriptor;

/// Whether query token `i` may attend key token `j` under `mask`.
pub fn dense_attends(mask: &MaskDescriptor, length: usize, i: usize, j: usize) -> bool {
    if j > i {
        return false;
    }
    match mask {
        MaskDescriptor::Causal => true,
        MaskDescriptor::Lambda {
            sink_tokens,
            window,
        } => j < *sink_tokens || i - j < *window,
        MaskDescriptor::CausalBlockwise {
            block,
            window_blocks,
            sink_blocks,
            test_blocks,
        } => {
            let nblocks = length.div_ceil(*block);
            let (bi, bj) = (i / block, j / block);
            let is_test = bi + test_blocks >= nblocks;
            is_test || bi < *sink_blocks || bj < *sink_blocks || bi - bj < *window_blocks
        }
        MaskDescriptor::SharedQuestion {
            question_len,
            answer_lens,
        } => {
            if j < *question_len {
                return true;
            }
            // both in the same answer (or both in the question, handled above)
            let segment = |t: usize| {
                if t < *question_len {
                    return 0;
                }
                let mut end = *question_len;
                for (a, len) in answer_lens.iter().enumerate() {
                    end += len;
                    if t < end {
                        return a + 1;
                    }
                }
                usize::MAX
            };
            segment(i) == segment(j)
        }
    }
}

/// Row-major `length x length` boolean mask.
pub fn dense_mask(mask: &MaskDescriptor, length: usize) -> Vec<Vec<bool>> {
    (0..length)
        .map(|i| {
            (0..length)
                .map(|j| dense_attends(mask, length, i, j))
                .collect()
        })
        .collect()
}

pub fn popcount(mask: &[Vec<bool>]) -> u64 {
    mask.iter()
        .map(|r| r.iter().filter(|&&b| b).count() as u64)
        .sum()
}

/// Masked softmax attention on row-major `[L, D]` matrices.
///
/// Rows with no attended key produce zeros.
pub fn dense_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    length: usize,
    dim: usize,
    mask: &[Vec<bool>],
) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    let mut out = vec![0.0; length * dim];
    let mut scores = vec![0.0; length];
    for i in 0..length {
        let mut max = f64::NEG_INFINITY;
        for j in 0..length {
            if mask[i][j] {
                let s: f64 = (0..dim)
                    .map(|d| q[i * dim + d] * k[j * dim + d])
                    .sum::<f64>()
                    * scale;
                scores[j] = s;
                max = max.max(s);
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut denom = 0.0;
        for j in 0..length {
            if mask[i][j] {
                scores[j] = (scores[j] - max).exp();
                denom += scores[j];
            }
        }
        for j in 0..length {
            if mask[i][j] {
                let p = scores[j] / denom;
                for d in 0..dim {
                    out[i * dim + d] += p * v[j * dim + d];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::gen_mask;

    #[test]
    fn self_only_attention_returns_values() {
        let l = 3;
        let mask: Vec<Vec<bool>> = (0..l).map(|i| (0..l).map(|j| i == j).collect()).collect();
        let q = vec![0.3, -1.0, 2.0];
        let k = vec![1.0, 5.0, -2.0];
        let v = vec![7.0, 8.0, 9.0];
        assert_eq!(dense_attention(&q, &k, &v, l, 1, &mask), v);
    }

    #[test]
    fn shared_question_dense_matches_ranges_on_fixture() {
        let m = MaskDescriptor::SharedQuestion {
            question_len: 2,
            answer_lens: vec![2, 2],
        };
        let dense = dense_mask(&m, 6);
        let ranges = gen_mask(&m, 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(dense[i][j], ranges.attends(i, j), "({i},{j})");
            }
        }
        // token 4 attends the question and itself
        assert_eq!(dense[4], vec![true, true, false, false, true, false]);
    }
}
