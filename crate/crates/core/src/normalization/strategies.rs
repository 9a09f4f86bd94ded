use super::{stat_axes, Mode, NormContext, NormKind, NormOutput, Normalization, RunningStats};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

fn check_rows<S: Scalar>(tape: &Tape<S>, x: Var, ctx: &NormContext<'_, S>, kind: NormKind) -> Result<()> {
    let rows = tape.value(x).rows();
    if rows != ctx.layout.rows() {
        return Err(Error::shape(
            "normalization",
            format!("{kind}: {rows} rows do not match layout {:?}", ctx.layout),
        ));
    }
    Ok(())
}

/// One statistic per `(utterance, frame)` over all frequencies and units.
/// Training and inference are identical.
#[derive(Clone, Debug)]
pub struct GroupBatchNorm {
    eps: f64,
}

impl GroupBatchNorm {
    pub fn new(eps: f64) -> Self {
        Self { eps }
    }
}

impl<S: Scalar> Normalization<S> for GroupBatchNorm {
    fn kind(&self) -> NormKind {
        NormKind::Gbn
    }

    fn apply(&self, tape: &mut Tape<S>, x: Var, gamma: Var, beta: Var, ctx: &NormContext<'_, S>) -> Result<NormOutput<S>> {
        check_rows(tape, x, ctx, NormKind::Gbn)?;
        let axes = stat_axes(NormKind::Gbn, ctx.layout, 0);
        let (output, _) = tape.normalize(x, gamma, beta, axes, S::from_f64_lossy(self.eps))?;
        Ok(NormOutput { output, running: None })
    }
}

/// Per-unit statistics over the whole batch in training; running averages
/// at inference.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(eps: f64, momentum: f64) -> Self {
        Self { eps, momentum }
    }
}

impl<S: Scalar> Normalization<S> for BatchNorm {
    fn kind(&self) -> NormKind {
        NormKind::Bn
    }

    fn uses_running_stats(&self) -> bool {
        true
    }

    fn apply(&self, tape: &mut Tape<S>, x: Var, gamma: Var, beta: Var, ctx: &NormContext<'_, S>) -> Result<NormOutput<S>> {
        check_rows(tape, x, ctx, NormKind::Bn)?;
        let eps = S::from_f64_lossy(self.eps);
        let running = ctx
            .running
            .ok_or_else(|| Error::InvalidArgument("batch normalization needs running statistics".into()))?;
        match ctx.mode {
            Mode::Train => {
                let (output, stats) = tape.normalize(x, gamma, beta, crate::tensor::StatAxes::Feature, eps)?;
                let m = S::from_f64_lossy(self.momentum);
                let keep = S::one() - m;
                let blend = |old: &[S], new: &[S]| -> Vec<S> { old.iter().zip(new).map(|(o, n)| keep * *o + m * *n).collect() };
                if running.mean.len() != stats.mean.len() {
                    return Err(Error::shape(
                        "normalization",
                        format!("bn: {} running entries for width {}", running.mean.len(), stats.mean.len()),
                    ));
                }
                let updated = RunningStats {
                    mean: blend(&running.mean, &stats.mean),
                    var: blend(&running.var, &stats.var),
                    updates: running.updates + 1,
                };
                Ok(NormOutput { output, running: Some(updated) })
            }
            Mode::Eval => {
                if running.updates == 0 {
                    return Err(Error::InvalidArgument(
                        "batch normalization in inference mode before any training step".into(),
                    ));
                }
                let output = tape.normalize_fixed(x, gamma, beta, &running.mean, &running.var, eps)?;
                Ok(NormOutput { output, running: None })
            }
        }
    }
}

/// One statistic per row over all units.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    eps: f64,
}

impl LayerNorm {
    pub fn new(eps: f64) -> Self {
        Self { eps }
    }
}

impl<S: Scalar> Normalization<S> for LayerNorm {
    fn kind(&self) -> NormKind {
        NormKind::Ln
    }

    fn apply(&self, tape: &mut Tape<S>, x: Var, gamma: Var, beta: Var, ctx: &NormContext<'_, S>) -> Result<NormOutput<S>> {
        check_rows(tape, x, ctx, NormKind::Ln)?;
        let axes = stat_axes(NormKind::Ln, ctx.layout, 0);
        let (output, _) = tape.normalize(x, gamma, beta, axes, S::from_f64_lossy(self.eps))?;
        Ok(NormOutput { output, running: None })
    }
}

/// One statistic per row and contiguous block of units.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    eps: f64,
    groups: usize,
}

impl GroupNorm {
    pub fn new(eps: f64, groups: usize) -> Self {
        Self { eps, groups }
    }
}

impl<S: Scalar> Normalization<S> for GroupNorm {
    fn kind(&self) -> NormKind {
        NormKind::Gn
    }

    fn apply(&self, tape: &mut Tape<S>, x: Var, gamma: Var, beta: Var, ctx: &NormContext<'_, S>) -> Result<NormOutput<S>> {
        check_rows(tape, x, ctx, NormKind::Gn)?;
        let axes = stat_axes(NormKind::Gn, ctx.layout, self.groups);
        let (output, _) = tape.normalize(x, gamma, beta, axes, S::from_f64_lossy(self.eps))?;
        Ok(NormOutput { output, running: None })
    }
}
