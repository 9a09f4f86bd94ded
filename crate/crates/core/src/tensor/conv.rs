use super::gemm::{gemm, MatMut, MatRef};
use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct ConvDims {
    rows: usize,
    seq_len: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    groups: usize,
}

impl ConvDims {
    fn cig(&self) -> usize {
        self.cin / self.groups
    }
    fn cog(&self) -> usize {
        self.cout / self.groups
    }
    fn pad(&self) -> usize {
        self.kernel / 2
    }
}

fn check_dims<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    seq_len: usize,
    groups: usize,
) -> Result<ConvDims> {
    let ws = w.shape();
    let cin = x.last_dim();
    let err = |msg: &str| {
        Error::shape(
            "grouped_conv1d",
            format!("{msg}: input {:?}, kernel {ws:?}, bias {:?}, T={seq_len}, G={groups}", x.shape(), b.shape()),
        )
    };
    if ws.len() != 3 || groups == 0 || seq_len == 0 {
        return Err(err("kernel must be [Cout, Cin/G, K] with G, T >= 1"));
    }
    let (cout, kernel) = (ws[0], ws[2]);
    if cin % groups != 0 || cout % groups != 0 {
        return Err(err("channels not divisible by groups"));
    }
    if ws[1] != cin / groups {
        return Err(err("kernel input width differs from Cin/G"));
    }
    if kernel % 2 == 0 {
        return Err(err("kernel length must be odd"));
    }
    if b.len() != cout {
        return Err(err("bias length differs from Cout"));
    }
    if x.rows() % seq_len != 0 {
        return Err(err("rows are not a whole number of sequences"));
    }
    Ok(ConvDims { rows: x.rows(), seq_len, cin, cout, kernel, groups })
}

/// Kernel rearranged to `[G][K * Cin/G][Cout/G]`, the right-hand operand
/// of one group's product with its unfolded input.
fn group_kernels<S: Scalar>(w: &[S], d: ConvDims) -> Vec<S> {
    let (cig, cog, k_len) = (d.cig(), d.cog(), d.kernel);
    let mut out = vec![S::zero(); w.len()];
    for g in 0..d.groups {
        for o in 0..cog {
            for i in 0..cig {
                for k in 0..k_len {
                    out[((g * k_len + k) * cig + i) * cog + o] = w[((g * cog + o) * cig + i) * k_len + k];
                }
            }
        }
    }
    out
}

/// Calls `f(out_row, in_row, tap)` for every pair of rows linked by a kernel
/// tap, never crossing a sequence boundary.
#[inline(always)]
fn for_each_tap(d: ConvDims, mut f: impl FnMut(usize, usize, usize)) {
    let (pad, t_len) = (d.pad(), d.seq_len);
    for s in 0..d.rows / t_len {
        let base = s * t_len;
        for t in 0..t_len {
            let lo = pad.saturating_sub(t);
            let hi = d.kernel.min(t_len + pad - t);
            for k in lo..hi {
                f(base + t, base + t + k - pad, k);
            }
        }
    }
}

/// Unfolded input, `[rows][G][K][Cin/G]`, zero where a tap leaves the sequence.
fn unfold<S: Scalar>(x: &[S], d: ConvDims) -> Vec<S> {
    let (cig, width) = (d.cig(), d.kernel * d.cin);
    let mut col = vec![S::zero(); d.rows * width];
    for_each_tap(d, |r, src, k| {
        let xrow = &x[src * d.cin..(src + 1) * d.cin];
        let crow = &mut col[r * width..(r + 1) * width];
        for g in 0..d.groups {
            let dst = (g * d.kernel + k) * cig;
            crow[dst..dst + cig].copy_from_slice(&xrow[g * cig..(g + 1) * cig]);
        }
    });
    col
}

fn forward<S: Scalar>(x: &[S], w: &[S], b: &[S], d: ConvDims) -> Vec<S> {
    let (cog, kc) = (d.cog(), d.kernel * d.cig());
    let width = d.kernel * d.cin;
    let col = unfold(x, d);
    let wg = group_kernels(w, d);
    let mut y = Vec::with_capacity(d.rows * d.cout);
    for _ in 0..d.rows {
        y.extend_from_slice(b);
    }
    for g in 0..d.groups {
        gemm(
            S::one(),
            MatRef::rm(&col[g * kc..], d.rows, kc, width),
            MatRef::rm(&wg[g * kc * cog..], kc, cog, cog),
            S::one(),
            MatMut::rm(&mut y[g * cog..], d.rows, cog, d.cout),
        );
    }
    y
}

/// Grouped 1-D convolution along time with zero "same" padding.
///
/// `x` is viewed as `[rows, Cin]` where consecutive blocks of `seq_len`
/// rows form one sequence; the kernel is `[Cout, Cin/G, K]` with odd `K`.
pub fn conv1d_output<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    seq_len: usize,
    groups: usize,
) -> Result<Tensor<S>> {
    let d = check_dims(x, w, b, seq_len, groups)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty") = d.cout;
    Tensor::new(shape, forward(x.data(), w.data(), b.data(), d))
}

impl<S: Scalar> Tape<S> {
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, seq_len: usize, groups: usize) -> Result<Var> {
        let value = conv1d_output(self.value(x), self.value(w), self.value(b), seq_len, groups)?;
        let d = check_dims(self.value(x), self.value(w), self.value(b), seq_len, groups)?;
        Ok(self.push_op(
            value,
            &[x, w, b],
            Box::new(move |gy, vals, grads| {
                let (cig, cog, k_len) = (d.cig(), d.cog(), d.kernel);
                if let Some(db) = grads.slot(b) {
                    for row in gy.chunks_exact(d.cout) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += *v;
                        }
                    }
                }
                let width = k_len * d.cin;
                let kc = k_len * cig;
                let wg = group_kernels(vals.value(w).data(), d);
                if let Some(dx) = grads.slot(x) {
                    let mut dcol = vec![S::zero(); d.rows * width];
                    for g in 0..d.groups {
                        gemm(
                            S::one(),
                            MatRef::rm(&gy[g * cog..], d.rows, cog, d.cout),
                            MatRef::rm(&wg[g * kc * cog..], kc, cog, cog).t(),
                            S::zero(),
                            MatMut::rm(&mut dcol[g * kc..], d.rows, kc, width),
                        );
                    }
                    for_each_tap(d, |r, src, k| {
                        let crow = &dcol[r * width..(r + 1) * width];
                        let drow = &mut dx[src * d.cin..(src + 1) * d.cin];
                        for g in 0..d.groups {
                            let from = &crow[(g * k_len + k) * cig..][..cig];
                            for (acc, v) in drow[g * cig..(g + 1) * cig].iter_mut().zip(from) {
                                *acc += *v;
                            }
                        }
                    });
                }
                if let Some(dw) = grads.slot(w) {
                    let col = unfold(vals.value(x).data(), d);
                    let mut dwg = vec![S::zero(); dw.len()];
                    for g in 0..d.groups {
                        gemm(
                            S::one(),
                            MatRef::rm(&col[g * kc..], d.rows, kc, width).t(),
                            MatRef::rm(&gy[g * cog..], d.rows, cog, d.cout),
                            S::zero(),
                            MatMut::rm(&mut dwg[g * kc * cog..], kc, cog, cog),
                        );
                    }
                    for g in 0..d.groups {
                        for o in 0..cog {
                            for i in 0..cig {
                                for k in 0..k_len {
                                    dw[((g * cog + o) * cig + i) * k_len + k] += dwg[((g * k_len + k) * cig + i) * cog + o];
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn pointwise_identity_kernel() {
        let x = t(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = t(&[2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], vec![0.0, 0.0]);
        assert_eq!(conv1d_output(&x, &w, &b, 3, 1).unwrap(), x);
    }

    #[test]
    fn edge_zero_padding() {
        let x = t(&[4, 1], vec![1.0; 4]);
        let w = t(&[1, 1, 3], vec![1.0; 3]);
        let b = t(&[1], vec![0.0]);
        assert_eq!(conv1d_output(&x, &w, &b, 4, 1).unwrap().data(), &[2.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn sequences_do_not_leak_into_each_other() {
        // two sequences of length 2 stacked: [1,1 | 0,0]
        let x = t(&[4, 1], vec![1.0, 1.0, 0.0, 0.0]);
        let w = t(&[1, 1, 3], vec![1.0; 3]);
        let b = t(&[1], vec![0.0]);
        assert_eq!(conv1d_output(&x, &w, &b, 2, 1).unwrap().data(), &[2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn grouped_equals_split_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rows, seq, cin, cout, k) = (12, 6, 4, 6, 3);
        let mut rnd = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let x = t(&[rows, cin], rnd(rows * cin));
        let w = t(&[cout, cin / 2, k], rnd(cout * cin / 2 * k));
        let b = t(&[cout], rnd(cout));
        let grouped = conv1d_output(&x, &w, &b, seq, 2).unwrap();
        // brute force: direct summation over each half independently
        for g in 0..2 {
            for r in 0..rows {
                let (s, tt) = (r / seq, r % seq);
                for o in 0..cout / 2 {
                    let oc = g * cout / 2 + o;
                    let mut acc = b.data()[oc];
                    for i in 0..cin / 2 {
                        for kk in 0..k {
                            let src = tt as isize + kk as isize - 1;
                            if src < 0 || src >= seq as isize {
                                continue;
                            }
                            let xr = s * seq + src as usize;
                            acc += w.data()[(oc * (cin / 2) + i) * k + kk] * x.data()[xr * cin + g * cin / 2 + i];
                        }
                    }
                    assert!((grouped.data()[r * cout + oc] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = t(&[4, 3], vec![0.0; 12]);
        let w = t(&[4, 3, 3], vec![0.0; 36]);
        let b = t(&[4], vec![0.0; 4]);
        assert!(conv1d_output(&x, &w, &b, 4, 2).is_err());
        let w2 = t(&[3, 3, 2], vec![0.0; 18]);
        assert!(conv1d_output(&x, &w2, &t(&[3], vec![0.0; 3]), 4, 1).is_err());
        assert!(conv1d_output(&x, &t(&[3, 3, 3], vec![0.0; 27]), &t(&[3], vec![0.0; 3]), 3, 1).is_err());
    }
}
