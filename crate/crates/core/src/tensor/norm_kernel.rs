use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which elements share one mean/variance pair. Rows of the input are
/// ordered `(utterance, frequency, frame)` and the last axis holds the
/// hidden units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatAxes {
    /// One statistic per row over all hidden units.
    Row,
    /// One statistic per row and contiguous block of hidden units.
    RowGroups(usize),
    /// One statistic per (utterance, frame) over all frequencies and units.
    UtteranceFrame { utterances: usize, freqs: usize, frames: usize },
    /// One statistic per hidden unit over every row.
    Feature,
}

impl StatAxes {
    fn validate(&self, rows: usize, width: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::shape("normalize", msg));
        match *self {
            StatAxes::Row | StatAxes::Feature => Ok(()),
            StatAxes::RowGroups(g) => {
                if g == 0 || width % g != 0 {
                    bad(format!("{width} hidden units not divisible into {g} groups"))
                } else {
                    Ok(())
                }
            }
            StatAxes::UtteranceFrame { utterances, freqs, frames } => {
                if utterances * freqs * frames != rows {
                    bad(format!("{rows} rows do not match U={utterances} F={freqs} T={frames}"))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn group_count(&self, rows: usize, width: usize) -> usize {
        match *self {
            StatAxes::Row => rows,
            StatAxes::RowGroups(g) => rows * g,
            StatAxes::UtteranceFrame { utterances, frames, .. } => utterances * frames,
            StatAxes::Feature => width,
        }
    }

    /// Calls `f(group, start, end)` for every run of hidden units of row `r`
    /// that share one statistic.
    #[inline(always)]
    fn runs(&self, r: usize, width: usize, mut f: impl FnMut(usize, usize, usize)) {
        match *self {
            StatAxes::Row => f(r, 0, width),
            StatAxes::RowGroups(g) => {
                let size = width / g;
                for j in 0..g {
                    f(r * g + j, j * size, (j + 1) * size);
                }
            }
            StatAxes::UtteranceFrame { freqs, frames, .. } => f((r / (freqs * frames)) * frames + r % frames, 0, width),
            StatAxes::Feature => (0..width).for_each(|i| f(i, i, i + 1)),
        }
    }
}

/// Per-group statistics of one normalization call.
#[derive(Clone, Debug)]
pub struct GroupStats<S> {
    pub mean: Vec<S>,
    /// Biased variance.
    pub var: Vec<S>,
}

pub(crate) fn group_stats<S: Scalar>(x: &[S], width: usize, axes: StatAxes) -> Result<GroupStats<S>> {
    let rows = if width == 0 { 0 } else { x.len() / width };
    axes.validate(rows, width)?;
    let groups = axes.group_count(rows, width);
    if groups == 0 {
        return Ok(GroupStats { mean: vec![], var: vec![] });
    }
    let m = S::from_usize(rows * width / groups).expect("group size");
    let mut mean = vec![S::zero(); groups];
    for (r, row) in x.chunks_exact(width).enumerate() {
        axes.runs(r, width, |g, a, b| mean[g] += row[a..b].iter().copied().sum::<S>());
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![S::zero(); groups];
    for (r, row) in x.chunks_exact(width).enumerate() {
        axes.runs(r, width, |g, a, b| {
            let mu = mean[g];
            var[g] += row[a..b].iter().map(|v| (*v - mu) * (*v - mu)).sum::<S>();
        });
    }
    var.iter_mut().for_each(|v| *v /= m);
    Ok(GroupStats { mean, var })
}

impl<S: Scalar> Tape<S> {
    /// `(x - mean) / sqrt(var + eps) * gamma + beta` with statistics taken
    /// over `axes` from the current input. Returns the statistics as well.
    pub fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axes: StatAxes,
        eps: S,
    ) -> Result<(Var, GroupStats<S>)> {
        let xv = self.value(x);
        let width = xv.last_dim();
        if self.value(gamma).len() != width || self.value(beta).len() != width {
            return Err(Error::shape(
                "normalize",
                format!("affine parameters must have {width} entries"),
            ));
        }
        let rows = xv.rows();
        let stats = group_stats(xv.data(), width, axes)?;
        let groups = stats.mean.len();
        if groups > 0 && rows * width / groups < 2 {
            return Err(Error::shape("normalize", "each statistic needs at least two elements".to_string()));
        }
        let inv: Vec<S> = stats.var.iter().map(|v| S::one() / (*v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let base = r * width;
            axes.runs(r, width, |g, a, b| {
                let (mu, iv) = (stats.mean[g], inv[g]);
                for i in a..b {
                    let h = (xv.data()[base + i] - mu) * iv;
                    xhat[base + i] = h;
                    out[base + i] = h * gv[i] + bv[i];
                }
            });
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let var = self.push_op(
            value,
            &[x, gamma, beta],
            Box::new(move |g, vals, grads| {
                let gamma_v = vals.value(gamma).data();
                if let Some(dg) = grads.slot(gamma) {
                    for (r, row) in g.chunks_exact(width).enumerate() {
                        for i in 0..width {
                            dg[i] += row[i] * xhat[r * width + i];
                        }
                    }
                }
                if let Some(db) = grads.slot(beta) {
                    for row in g.chunks_exact(width) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                }
                let Some(dx) = grads.slot(x) else { return };
                let m = S::from_usize(rows * width / groups).expect("group size");
                let mut sum_d = vec![S::zero(); groups];
                let mut sum_dh = vec![S::zero(); groups];
                for r in 0..rows {
                    let base = r * width;
                    axes.runs(r, width, |grp, a, b| {
                        for i in a..b {
                            let d = g[base + i] * gamma_v[i];
                            sum_d[grp] += d;
                            sum_dh[grp] += d * xhat[base + i];
                        }
                    });
                }
                for r in 0..rows {
                    let base = r * width;
                    axes.runs(r, width, |grp, a, b| {
                        let (c0, c1, iv) = (sum_d[grp] / m, sum_dh[grp] / m, inv[grp]);
                        for i in a..b {
                            let d = g[base + i] * gamma_v[i];
                            dx[base + i] += iv * (d - c0 - xhat[base + i] * c1);
                        }
                    });
                }
            }),
        );
        Ok((var, stats))
    }

    /// Per-unit affine normalization with fixed statistics (inference-mode
    /// batch normalization).
    pub fn normalize_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        var: &[S],
        eps: S,
    ) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.last_dim();
        if [self.value(gamma).len(), self.value(beta).len(), mean.len(), var.len()]
            .iter()
            .any(|&n| n != width)
        {
            return Err(Error::shape("normalize_fixed", format!("expected {width} statistics")));
        }
        let inv: Vec<S> = var.iter().map(|v| S::one() / (*v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(width) {
            for i in 0..width {
                out.push((row[i] - mean[i]) * inv[i] * gv[i] + bv[i]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_op(
            value,
            &[x, gamma, beta],
            Box::new(move |g, vals, grads| {
                let gamma_v = vals.value(gamma).data().to_vec();
                let xs = vals.value(x).data();
                if let Some(dg) = grads.slot(gamma) {
                    for (row, xr) in g.chunks_exact(width).zip(xs.chunks_exact(width)) {
                        for i in 0..width {
                            dg[i] += row[i] * (xr[i] - mean[i]) * inv[i];
                        }
                    }
                }
                if let Some(db) = grads.slot(beta) {
                    for row in g.chunks_exact(width) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                }
                if let Some(dx) = grads.slot(x) {
                    for (drow, row) in dx.chunks_exact_mut(width).zip(g.chunks_exact(width)) {
                        for i in 0..width {
                            drow[i] += row[i] * inv[i] * gamma_v[i];
                        }
                    }
                }
            }),
        ))
    }
}
