//! Hidden-layer normalization strategies.
//!
//! Group batch normalization (GBN) shares one mean and variance per
//! `(utterance, frame)` across every frequency and hidden unit of the layer,
//! and behaves identically in training and inference. Batch, layer and group
//! normalization are provided for comparison. All four sit behind the
//! [`Normalization`] trait and are created by name from a [`NormRegistry`].

mod strategies;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, SeqLayout, StatAxes, Tape, Tensor, Var};

pub use strategies::{BatchNorm, GroupBatchNorm, GroupNorm, LayerNorm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormKind {
    Gbn,
    Bn,
    Ln,
    Gn,
}

impl NormKind {
    pub const ALL: [NormKind; 4] = [NormKind::Gbn, NormKind::Bn, NormKind::Ln, NormKind::Gn];

    pub fn name(&self) -> &'static str {
        match self {
            NormKind::Gbn => "gbn",
            NormKind::Bn => "bn",
            NormKind::Ln => "ln",
            NormKind::Gn => "gn",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown normalization '{s}' (expected gbn, bn, ln or gn)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormSettings {
    pub eps: f64,
    /// Running-statistics momentum (batch normalization only).
    pub momentum: f64,
    /// Number of groups for group normalization.
    pub groups: usize,
}

impl Default for NormSettings {
    fn default() -> Self {
        Self { eps: 1e-5, momentum: 0.1, groups: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential moving averages kept by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub updates: u64,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(width: usize) -> Self {
        Self { mean: vec![S::zero(); width], var: vec![S::one(); width], updates: 0 }
    }
}

pub struct NormContext<'a, S> {
    pub layout: SeqLayout,
    pub mode: Mode,
    pub running: Option<&'a RunningStats<S>>,
}

pub struct NormOutput<S> {
    pub output: Var,
    /// Updated running statistics produced by a training-mode batch
    /// normalization step.
    pub running: Option<RunningStats<S>>,
}

/// One interchangeable normalization method.
pub trait Normalization<S: Scalar>: Send + Sync {
    fn kind(&self) -> NormKind;

    fn uses_running_stats(&self) -> bool {
        false
    }

    /// Normalizes `x` (`[rows, H]`, rows ordered by `ctx.layout`) and applies
    /// the per-unit affine `gamma`, `beta`.
    fn apply(&self, tape: &mut Tape<S>, x: Var, gamma: Var, beta: Var, ctx: &NormContext<'_, S>) -> Result<NormOutput<S>>;
}

pub type NormFactory<S> = fn(&NormSettings) -> Box<dyn Normalization<S>>;

/// Name-indexed constructors for normalization strategies.
pub struct NormRegistry<S: Scalar> {
    entries: BTreeMap<String, NormFactory<S>>,
}

impl<S: Scalar> Default for NormRegistry<S> {
    fn default() -> Self {
        Self::with_builtin()
    }
}

impl<S: Scalar> NormRegistry<S> {
    pub fn empty() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register("gbn", |s| Box::new(GroupBatchNorm::new(s.eps)));
        r.register("bn", |s| Box::new(BatchNorm::new(s.eps, s.momentum)));
        r.register("ln", |s| Box::new(LayerNorm::new(s.eps)));
        r.register("gn", |s| Box::new(GroupNorm::new(s.eps, s.groups)));
        r
    }

    pub fn register(&mut self, name: &str, factory: NormFactory<S>) {
        self.entries.insert(name.to_ascii_lowercase(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn create(&self, name: &str, settings: &NormSettings) -> Result<Box<dyn Normalization<S>>> {
        self.entries
            .get(&name.to_ascii_lowercase())
            .map(|f| f(settings))
            .ok_or_else(|| Error::Config(format!("no normalization registered as '{name}'")))
    }
}

/// Affine parameters, settings and (for batch normalization) running
/// statistics of one normalization layer.
#[derive(Clone, Debug)]
pub struct NormParams<S> {
    pub kind: NormKind,
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub settings: NormSettings,
    pub running: Option<RunningStats<S>>,
}

impl<S: Scalar> NormParams<S> {
    /// `gamma = 1`, `beta = 0`.
    pub fn new(kind: NormKind, width: usize, settings: NormSettings) -> Result<Self> {
        if settings.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be positive, got {}", settings.eps)));
        }
        Ok(Self {
            kind,
            gamma: vec![S::one(); width],
            beta: vec![S::zero(); width],
            settings,
            running: (kind == NormKind::Bn).then(|| RunningStats::new(width)),
        })
    }
}

fn apply_standalone<S: Scalar>(
    h: &Tensor<S>,
    params: &NormParams<S>,
    layout: SeqLayout,
    mode: Mode,
) -> Result<(Tensor<S>, Option<RunningStats<S>>)> {
    if params.gamma.len() != h.last_dim() {
        return Err(Error::shape(
            "normalization",
            format!("{} affine entries for hidden width {}", params.gamma.len(), h.last_dim()),
        ));
    }
    let strategy = NormRegistry::<S>::with_builtin().create(params.kind.name(), &params.settings)?;
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let g = tape.constant(Tensor::new(vec![params.gamma.len()], params.gamma.clone())?);
    let b = tape.constant(Tensor::new(vec![params.beta.len()], params.beta.clone())?);
    let ctx = NormContext { layout, mode, running: params.running.as_ref() };
    let out = strategy.apply(&mut tape, x, g, b, &ctx)?;
    Ok((tape.value(out.output).clone(), out.running))
}

fn layout_of<S: Scalar>(h: &Tensor<S>) -> Result<SeqLayout> {
    match *h.shape() {
        [u, f, t, _] => Ok(SeqLayout { utterances: u, freqs: f, frames: t }),
        _ => Err(Error::shape("normalization", format!("expected [U, F, T, H], got {:?}", h.shape()))),
    }
}

/// Group batch normalization of a `[U, F, T, H]` tensor.
pub fn gbn<S: Scalar>(h: &Tensor<S>, params: &NormParams<S>) -> Result<Tensor<S>> {
    let p = NormParams { kind: NormKind::Gbn, ..params.clone() };
    apply_standalone(h, &p, layout_of(h)?, Mode::Eval).map(|(t, _)| t)
}

/// Batch normalization of a `[U, F, T, H]` tensor. In training mode the
/// running statistics in `params` are updated.
pub fn batch_norm<S: Scalar>(h: &Tensor<S>, params: &mut NormParams<S>, mode: Mode) -> Result<Tensor<S>> {
    if params.running.is_none() {
        params.running = Some(RunningStats::new(h.last_dim()));
    }
    let p = NormParams { kind: NormKind::Bn, ..params.clone() };
    let (out, running) = apply_standalone(h, &p, layout_of(h)?, mode)?;
    if let Some(r) = running {
        params.running = Some(r);
    }
    Ok(out)
}

/// Layer normalization over the last axis of any tensor.
pub fn layer_norm<S: Scalar>(h: &Tensor<S>, params: &NormParams<S>) -> Result<Tensor<S>> {
    let p = NormParams { kind: NormKind::Ln, ..params.clone() };
    let layout = SeqLayout { utterances: 1, freqs: 1, frames: h.rows() };
    apply_standalone(h, &p, layout, Mode::Eval).map(|(t, _)| t)
}

/// Group normalization over contiguous blocks of the last axis.
pub fn group_norm<S: Scalar>(h: &Tensor<S>, params: &NormParams<S>, groups: usize) -> Result<Tensor<S>> {
    let p = NormParams {
        kind: NormKind::Gn,
        settings: NormSettings { groups, ..params.settings },
        ..params.clone()
    };
    let layout = SeqLayout { utterances: 1, freqs: 1, frames: h.rows() };
    apply_standalone(h, &p, layout, Mode::Eval).map(|(t, _)| t)
}

/// The statistic axes a normalization kind uses for a given layout.
pub fn stat_axes(kind: NormKind, layout: SeqLayout, groups: usize) -> StatAxes {
    match kind {
        NormKind::Gbn => StatAxes::UtteranceFrame {
            utterances: layout.utterances,
            freqs: layout.freqs,
            frames: layout.frames,
        },
        NormKind::Bn => StatAxes::Feature,
        NormKind::Ln => StatAxes::Row,
        NormKind::Gn => StatAxes::RowGroups(groups),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients_multi, random_tensor};

    fn params(kind: NormKind, width: usize) -> NormParams<f64> {
        NormParams::new(kind, width, NormSettings::default()).unwrap()
    }

    #[test]
    fn names_round_trip_and_unknown_rejected() {
        for k in NormKind::ALL {
            assert_eq!(k.name().parse::<NormKind>().unwrap(), k);
        }
        assert!("batchnorm".parse::<NormKind>().is_err());
        let reg = NormRegistry::<f32>::with_builtin();
        assert_eq!(reg.names().collect::<Vec<_>>(), ["bn", "gbn", "gn", "ln"]);
        assert!(reg.create("xx", &NormSettings::default()).is_err());
    }

    #[test]
    fn gbn_groups_are_zero_mean_unit_variance() {
        let h = random_tensor(&[2, 3, 4, 5], 11).map(|v| 3.0 * v + 1.0);
        let out = gbn(&h, &params(NormKind::Gbn, 5)).unwrap();
        for u in 0..2 {
            for t in 0..4 {
                let vals: Vec<f64> = (0..3)
                    .flat_map(|f| {
                        let base = ((u * 3 + f) * 4 + t) * 5;
                        out.data()[base..base + 5].to_vec()
                    })
                    .collect();
                let mean = vals.iter().sum::<f64>() / 15.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 15.0;
                assert!(mean.abs() < 1e-9);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn gbn_frame_statistics_do_not_mix_utterances() {
        let h = random_tensor(&[2, 3, 4, 5], 3);
        let p = params(NormKind::Gbn, 5);
        let full = gbn(&h, &p).unwrap();
        let half = 3 * 4 * 5;
        let first = Tensor::new(vec![1, 3, 4, 5], h.data()[..half].to_vec()).unwrap();
        let alone = gbn(&first, &p).unwrap();
        assert!(alone.data().iter().zip(&full.data()[..half]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn bn_eval_before_training_is_an_error() {
        let h = random_tensor(&[1, 2, 3, 4], 1);
        let mut p = params(NormKind::Bn, 4);
        assert!(batch_norm(&h, &mut p, Mode::Eval).is_err());
        batch_norm(&h, &mut p, Mode::Train).unwrap();
        let r = p.running.as_ref().unwrap();
        assert_eq!(r.updates, 1);
        batch_norm(&h, &mut p, Mode::Eval).unwrap();
    }

    #[test]
    fn bn_running_mean_follows_momentum() {
        let h = Tensor::new(vec![1, 1, 2, 1], vec![1.0, 3.0]).unwrap();
        let mut p = params(NormKind::Bn, 1);
        batch_norm(&h, &mut p, Mode::Train).unwrap();
        let r = p.running.unwrap();
        assert!((r.mean[0] - 0.2).abs() < 1e-12);
        assert!((r.var[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn group_norm_rejects_indivisible_width() {
        let h = random_tensor(&[4, 6], 1);
        assert!(group_norm(&h, &params(NormKind::Gn, 6), 4).is_err());
        assert!(group_norm(&h, &params(NormKind::Gn, 6), 3).is_ok());
    }

    #[test]
    fn every_kind_passes_gradcheck_in_training_mode() {
        let layout = SeqLayout { utterances: 2, freqs: 2, frames: 3 };
        let settings = NormSettings { groups: 2, ..NormSettings::default() };
        for kind in NormKind::ALL {
            let strategy = NormRegistry::<f64>::with_builtin().create(kind.name(), &settings).unwrap();
            let running = RunningStats::<f64>::new(4);
            let inputs = [random_tensor(&[12, 4], 5), random_tensor(&[4], 6).map(|v| v + 1.5), random_tensor(&[4], 7)];
            let report = check_gradients_multi(
                |tape, v| {
                    let ctx = NormContext { layout, mode: Mode::Train, running: Some(&running) };
                    Ok(strategy.apply(tape, v[0], v[1], v[2], &ctx)?.output)
                },
                &inputs,
                9,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{kind}: {report:?}");
        }
    }
}
