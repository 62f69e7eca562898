//! Blockwise attention and the rescale-and-sum merge of partial results.

use serde::{Deserialize, Serialize};

use crate::mask::{AttendRanges, Span};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows `span` of `self` as a new matrix.
    pub fn slice_rows(&self, span: Span) -> Mat {
        Mat::from_vec(
            span.len(),
            self.cols,
            self.data[span.start * self.cols..span.end * self.cols].to_vec(),
        )
    }
}

/// Attention output of one block normalized within the block, with per-row
/// score maximum `m` and sum of exponentials `l` relative to `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partial {
    pub out: Mat,
    pub m: Vec<f64>,
    pub l: Vec<f64>,
}

impl Partial {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Partial {
            out: Mat::zeros(rows, cols),
            m: vec![f64::NEG_INFINITY; rows],
            l: vec![0.0; rows],
        }
    }
}

/// Masked attention of the queries at `q_tokens` against the keys at
/// `kv_tokens`; `ranges` is the mask of the whole sequence.
pub fn exec_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    q_tokens: Span,
    kv_tokens: Span,
    ranges: &AttendRanges,
) -> Partial {
    assert_eq!(q.rows, q_tokens.len());
    assert_eq!(k.rows, kv_tokens.len());
    assert_eq!((k.rows, k.cols), (v.rows, v.cols));
    assert_eq!(q.cols, k.cols);
    let dim = q.cols;
    let scale = 1.0 / (dim as f64).sqrt();
    let mut p = Partial::empty(q.rows, dim);
    let mut scores: Vec<(usize, f64)> = Vec::with_capacity(k.rows);
    for i in 0..q.rows {
        scores.clear();
        let qi = q.row(i);
        for span in ranges.row(q_tokens.start + i).iter() {
            let keys = span.intersect(kv_tokens);
            for j in keys.start..keys.end {
                let jj = j - kv_tokens.start;
                let s: f64 = qi.iter().zip(k.row(jj)).map(|(a, b)| a * b).sum::<f64>() * scale;
                scores.push((jj, s));
            }
        }
        if scores.is_empty() {
            continue;
        }
        let m = scores
            .iter()
            .map(|&(_, s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut l = 0.0;
        let row = p.out.row_mut(i);
        for &(jj, s) in &scores {
            let w = (s - m).exp();
            l += w;
            for (o, x) in row.iter_mut().zip(v.row(jj)) {
                *o += w * x;
            }
        }
        for o in row.iter_mut() {
            *o /= l;
        }
        p.m[i] = m;
        p.l[i] = l;
    }
    p
}

/// Merge partial results over disjoint key sets of the same queries.
pub fn exec_reduction(parts: &[&Partial]) -> Partial {
    let first = parts.first().expect("at least one partial");
    let (rows, cols) = (first.out.rows, first.out.cols);
    assert!(parts
        .iter()
        .all(|p| p.out.rows == rows && p.out.cols == cols));
    let mut r = Partial::empty(rows, cols);
    for i in 0..rows {
        let m = parts
            .iter()
            .filter(|p| p.l[i] > 0.0)
            .map(|p| p.m[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            continue;
        }
        let mut l = 0.0;
        let row = r.out.row_mut(i);
        for p in parts.iter().filter(|p| p.l[i] > 0.0) {
            let w = p.l[i] * (p.m[i] - m).exp();
            l += w;
            for (o, x) in row.iter_mut().zip(p.out.row(i)) {
                *o += w * x;
            }
        }
        for o in row.iter_mut() {
            *o /= l;
        }
        r.m[i] = m;
        r.l[i] = l;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{gen_mask, MaskDescriptor};
    use crate::reference::{dense_attention, dense_mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    #[test]
    fn self_only_mask_returns_own_value() {
        let mask = MaskDescriptor::Lambda {
            sink_tokens: 0,
            window: 1,
        };
        let ranges = gen_mask(&mask, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (
            random(3, 2, &mut rng),
            random(3, 2, &mut rng),
            random(3, 2, &mut rng),
        );
        let all = Span::new(0, 3);
        let p = exec_attention(&q, &k, &v, all, all, &ranges);
        assert_eq!(p.out, v);
    }

    #[test]
    fn equal_scores_average_values() {
        let ranges = gen_mask(&MaskDescriptor::Causal, 2).unwrap();
        let z = Mat::zeros(2, 1);
        let all = Span::new(0, 2);
        let p = exec_attention(&z, &z, &z, all, all, &ranges);
        assert_eq!(p.out.data, vec![0.0, 0.0]);
        assert_eq!(p.l, vec![1.0, 2.0]);
    }

    #[test]
    fn whole_tile_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (l, d) = (7, 3);
        let (q, k, v) = (
            random(l, d, &mut rng),
            random(l, d, &mut rng),
            random(l, d, &mut rng),
        );
        let mask = MaskDescriptor::Lambda {
            sink_tokens: 1,
            window: 3,
        };
        let all = Span::new(0, l);
        let p = exec_attention(&q, &k, &v, all, all, &gen_mask(&mask, l).unwrap());
        let want = dense_attention(&q.data, &k.data, &v.data, l, d, &dense_mask(&mask, l));
        let err = p
            .out
            .data
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn split_keys_then_reduce_matches_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, d) = (9, 4);
        let (q, k, v) = (
            random(l, d, &mut rng),
            random(l, d, &mut rng),
            random(l, d, &mut rng),
        );
        let ranges = gen_mask(&MaskDescriptor::Causal, l).unwrap();
        let all = Span::new(0, l);
        let joint = exec_attention(&q, &k, &v, all, all, &ranges);
        let (a, b) = (Span::new(0, 4), Span::new(4, l));
        let pa = exec_attention(&q, &k.slice_rows(a), &v.slice_rows(a), all, a, &ranges);
        let pb = exec_attention(&q, &k.slice_rows(b), &v.slice_rows(b), all, b, &ranges);
        let merged = exec_reduction(&[&pa, &pb]);
        let err = merged
            .out
            .data
            .iter()
            .zip(&joint.out.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn empty_partial_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Partial {
            out: random(2, 2, &mut rng),
            m: vec![0.3, -0.2],
            l: vec![1.5, 2.0],
        };
        let e = Partial::empty(2, 2);
        for r in [exec_reduction(&[&e, &x]), exec_reduction(&[&x])] {
            assert_eq!((&r.m, &r.l), (&x.m, &x.l));
            let err = r
                .out
                .data
                .iter()
                .zip(&x.out.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-15);
        }
    }
}
