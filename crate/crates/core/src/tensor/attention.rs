use rayon::prelude::*;

use super::gemm::{gemm, MatMut, MatRef};
use super::{dot, lane_max, lane_sum, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Max-shifted softmax of a score vector.
pub fn softmax<S: Scalar>(scores: &[S]) -> Vec<S> {
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = lane_max(row);
    row.iter_mut().for_each(|v| *v -= max);
    S::exp_in_place(row);
    let total = lane_sum(row);
    let inv = S::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Output of the attention operation.
pub struct AttentionOutput<S> {
    pub output: Var,
    /// Row-stochastic scores `[sequences, heads, T, T]` when requested.
    pub scores: Option<Vec<S>>,
}

impl<S: Scalar> Tape<S> {
    /// Scaled dot-product self-attention over each sequence of `seq_len` rows.
    ///
    /// `qkv` packs queries, keys and values along the last axis
    /// (`[.., 3H]`); head `h` reads columns `h*H/heads .. (h+1)*H/heads` of
    /// each part. No positional information is involved, so the operation is
    /// equivariant to permutations of the frames within a sequence.
    pub fn self_attention(
        &mut self,
        qkv: Var,
        seq_len: usize,
        heads: usize,
        keep_scores: bool,
    ) -> Result<AttentionOutput<S>> {
        let qv = self.value(qkv);
        let width3 = qv.last_dim();
        if width3 % 3 != 0 || heads == 0 || (width3 / 3) % heads != 0 || seq_len == 0 || qv.rows() % seq_len != 0 {
            return Err(Error::shape(
                "self_attention",
                format!("qkv {:?} with T={seq_len}, heads={heads}", qv.shape()),
            ));
        }
        let hidden = width3 / 3;
        let dh = hidden / heads;
        let t = seq_len;
        let seqs = qv.rows() / t;
        let scale = S::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let need_grad = self.requires_grad(qkv);

        let mut out = vec![S::zero(); seqs * t * hidden];
        let mut probs = vec![S::zero(); seqs * heads * t * t];
        let src = qv.data();
        out.par_chunks_mut(t * hidden)
            .zip(probs.par_chunks_mut(heads * t * t))
            .enumerate()
            .for_each(|(s, (o, p))| {
                let block = &src[s * t * width3..(s + 1) * t * width3];
                for h in 0..heads {
                    let ph = &mut p[h * t * t..(h + 1) * t * t];
                    let q = MatRef { data: &block[h * dh..], rows: t, cols: dh, row_stride: width3, col_stride: 1 };
                    let k = MatRef {
                        data: &block[hidden + h * dh..],
                        rows: t,
                        cols: dh,
                        row_stride: width3,
                        col_stride: 1,
                    };
                    gemm(scale, q, k.t(), S::zero(), MatMut::rm(ph, t, t, t));
                    for row in ph.chunks_exact_mut(t) {
                        softmax_in_place(row);
                    }
                    let v = MatRef {
                        data: &block[2 * hidden + h * dh..],
                        rows: t,
                        cols: dh,
                        row_stride: width3,
                        col_stride: 1,
                    };
                    gemm(
                        S::one(),
                        MatRef::rm(ph, t, t, t),
                        v,
                        S::zero(),
                        MatMut { data: &mut o[h * dh..], rows: t, cols: dh, row_stride: hidden, col_stride: 1 },
                    );
                }
            });

        let mut shape = qv.shape().to_vec();
        *shape.last_mut().expect("non-empty") = hidden;
        let value = Tensor::new(shape, out)?;
        let scores = keep_scores.then(|| probs.clone());
        if !need_grad {
            drop(probs);
            let output = self.push_op(value, &[qkv], Box::new(|_, _, _| {}));
            return Ok(AttentionOutput { output, scores });
        }

        let output = self.push_op(
            value,
            &[qkv],
            Box::new(move |g, vals, grads| {
                let src = vals.value(qkv).data();
                let Some(dqkv) = grads.slot(qkv) else { return };
                dqkv.par_chunks_mut(t * width3).enumerate().for_each(|(s, dblock)| {
                    let block = &src[s * t * width3..(s + 1) * t * width3];
                    let gblock = &g[s * t * hidden..(s + 1) * t * hidden];
                    let mut dp = vec![S::zero(); t * t];
                    for h in 0..heads {
                        let ph = &probs[(s * heads + h) * t * t..][..t * t];
                        let view = |off: usize| MatRef {
                            data: &block[off + h * dh..],
                            rows: t,
                            cols: dh,
                            row_stride: width3,
                            col_stride: 1,
                        };
                        let go = MatRef { data: &gblock[h * dh..], rows: t, cols: dh, row_stride: hidden, col_stride: 1 };
                        // dP = dO V^T
                        gemm(S::one(), go, view(2 * hidden).t(), S::zero(), MatMut::rm(&mut dp, t, t, t));
                        // dV += P^T dO
                        gemm(
                            S::one(),
                            MatRef::rm(ph, t, t, t).t(),
                            go,
                            S::one(),
                            MatMut {
                                data: &mut dblock[2 * hidden + h * dh..],
                                rows: t,
                                cols: dh,
                                row_stride: width3,
                                col_stride: 1,
                            },
                        );
                        // dS = P * (dP - rowsum(dP * P))
                        for (dprow, prow) in dp.chunks_exact_mut(t).zip(ph.chunks_exact(t)) {
                            let dot = dot(dprow, prow);
                            for (d, p) in dprow.iter_mut().zip(prow) {
                                *d = *p * (*d - dot);
                            }
                        }
                        // dQ += scale dS K ; dK += scale dS^T Q
                        gemm(
                            scale,
                            MatRef::rm(&dp, t, t, t),
                            view(hidden),
                            S::one(),
                            MatMut { data: &mut dblock[h * dh..], rows: t, cols: dh, row_stride: width3, col_stride: 1 },
                        );
                        gemm(
                            scale,
                            MatRef::rm(&dp, t, t, t).t(),
                            view(0),
                            S::one(),
                            MatMut {
                                data: &mut dblock[hidden + h * dh..],
                                rows: t,
                                cols: dh,
                                row_stride: width3,
                                col_stride: 1,
                            },
                        );
                    }
                });
            }),
        );
        Ok(AttentionOutput { output, scores })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_reference_cases() {
        assert_eq!(softmax(&[0.0f64; 4]), vec![0.25; 4]);
        let p = softmax(&[0.0f64, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let a = softmax(&[1.5f64, 2.5]);
        let b = softmax(&[101.5f64, 102.5]);
        assert!((a[0] - b[0]).abs() < 1e-14);
        let big = softmax(&[1000.0f64, 0.0, -1000.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 5 * 12).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let qkv = tape.constant(Tensor::new(vec![10, 12], data).unwrap());
        let out = tape.self_attention(qkv, 5, 2, true).unwrap();
        let scores = out.scores.unwrap();
        assert_eq!(scores.len(), 2 * 2 * 25);
        for row in scores.chunks_exact(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(tape.value(out.output).shape(), &[10, 4]);
    }
}
