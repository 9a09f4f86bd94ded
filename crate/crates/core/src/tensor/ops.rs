use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::{gemm, MatMut, MatRef};
use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

impl<S: Scalar> Tape<S> {
    /// `y = x W + b` over the last axis; `W` is `[in, out]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let ws = wv.shape();
        if ws.len() != 2 || ws[0] != xv.last_dim() || bv.len() != ws[1] {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, W {:?}, b {:?}", xv.shape(), ws, bv.shape()),
            ));
        }
        let (rows, fan_in, fan_out) = (xv.rows(), ws[0], ws[1]);
        let mut out = vec![S::zero(); rows * fan_out];
        for r in 0..rows {
            out[r * fan_out..(r + 1) * fan_out].copy_from_slice(bv.data());
        }
        gemm(
            S::one(),
            MatRef::rm(xv.data(), rows, fan_in, fan_in),
            MatRef::rm(wv.data(), fan_in, fan_out, fan_out),
            S::one(),
            MatMut::rm(&mut out, rows, fan_out, fan_out),
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = fan_out;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(
            value,
            &[x, w, b],
            Box::new(move |g, vals, grads| {
                if let Some(dx) = grads.slot(x) {
                    gemm(
                        S::one(),
                        MatRef::rm(g, rows, fan_out, fan_out),
                        MatRef::rm(vals.value(w).data(), fan_in, fan_out, fan_out).t(),
                        S::one(),
                        MatMut::rm(dx, rows, fan_in, fan_in),
                    );
                }
                if let Some(dw) = grads.slot(w) {
                    gemm(
                        S::one(),
                        MatRef::rm(vals.value(x).data(), rows, fan_in, fan_in).t(),
                        MatRef::rm(g, rows, fan_out, fan_out),
                        S::one(),
                        MatMut::rm(dw, fan_in, fan_out, fan_out),
                    );
                }
                if let Some(db) = grads.slot(b) {
                    for row in g.chunks_exact(fan_out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                }
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(
            value,
            &[a, b],
            Box::new(move |g, _, grads| {
                grads.accumulate(a, g);
                grads.accumulate(b, g);
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push_op(
            value,
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(dx) = grads.slot(x) {
                    for (d, v) in dx.iter_mut().zip(g) {
                        *d += *v * c;
                    }
                }
            }),
        )
    }

    /// Elementwise `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        // sigmoid from exp(-|x|), which never overflows
        let mut sig: Vec<S> = xv.data().iter().map(|v| -v.abs()).collect();
        S::exp_in_place(&mut sig);
        for (s, &v) in sig.iter_mut().zip(xv.data()) {
            let e = *s;
            *s = if v >= S::zero() { S::one() / (S::one() + e) } else { e / (S::one() + e) };
        }
        let data = xv.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push_op(
            value,
            &[x],
            Box::new(move |g, vals, grads| {
                let xv = vals.value(x).data();
                if let Some(dx) = grads.slot(x) {
                    for (((d, &v), &gy), &s) in dx.iter_mut().zip(xv).zip(g).zip(&sig) {
                        *d += gy * s * (S::one() + v * (S::one() - s));
                    }
                }
            }),
        )
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`. With
    /// `p == 0` the input handle is returned unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64_lossy(1.0 / (1.0 - p));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xv = self.value(x);
        let mask: Vec<S> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(dx) = grads.slot(x) {
                    for ((d, gy), m) in dx.iter_mut().zip(g).zip(&mask) {
                        *d += *gy * *m;
                    }
                }
            }),
        ))
    }

    /// `sum_i x_i * weights_i`, a scalar probe used to test Jacobians.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<S>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} values vs {} weights", xv.len(), weights.len()),
            ));
        }
        let total = xv.data().iter().zip(&weights).map(|(a, b)| *a * *b).sum();
        Ok(self.push_op(
            Tensor::scalar(total),
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(dx) = grads.slot(x) {
                    for (d, w) in dx.iter_mut().zip(&weights) {
                        *d += g[0] * *w;
                    }
                }
            }),
        ))
    }
}
