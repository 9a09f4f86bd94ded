//! SI-SDR, full-band permutation-invariant loss and separation metrics.
//!
//! Every SI-SDR value is floored by [`DELTA`] in both numerator and
//! denominator, so a perfect estimate of a unit-energy target reads 100 dB
//! and an orthogonal one reads about -100 dB instead of +/- infinity.

use std::fmt::Write as _;

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::narrowband::BoundPrediction;
use crate::stft::{StftConfig, StftEngine};
use crate::tensor::{Scalar, SeqLayout, Tape, Tensor, Var};

/// Energy floor added to numerator and denominator of every SI-SDR.
pub const DELTA: f64 = 1e-10;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

struct Projection {
    /// `|alpha y|^2`
    signal: f64,
    /// `|alpha y - yhat|^2`
    residual: f64,
    alpha: f64,
}

fn project(target: &[f64], estimate: &[f64]) -> Result<Projection> {
    if target.len() != estimate.len() {
        return Err(Error::shape("si_sdr", format!("target {} vs estimate {} samples", target.len(), estimate.len())));
    }
    let energy: f64 = target.iter().map(|v| v * v).sum();
    if energy <= 0.0 || !energy.is_finite() {
        return Err(Error::SilentTarget(format!("target energy is {energy}")));
    }
    let cross: f64 = target.iter().zip(estimate).map(|(y, e)| y * e).sum();
    let alpha = cross / energy;
    let signal = alpha * alpha * energy;
    let residual: f64 = target.iter().zip(estimate).map(|(y, e)| (alpha * y - e).powi(2)).sum();
    Ok(Projection { signal, residual, alpha })
}

/// Scale-invariant signal-to-distortion ratio of `estimate` against `target`, in dB.
pub fn si_sdr(target: &[f64], estimate: &[f64]) -> Result<f64> {
    let p = project(target, estimate)?;
    Ok(DB * ((p.signal + DELTA) / (p.residual + DELTA)).ln())
}

/// SI-SDR and its gradient with respect to `estimate`.
fn si_sdr_with_grad(target: &[f64], estimate: &[f64]) -> Result<(f64, Vec<f64>)> {
    let p = project(target, estimate)?;
    let value = DB * ((p.signal + DELTA) / (p.residual + DELTA)).ln();
    // d signal = 2 alpha y, d residual = 2 (yhat - alpha y)
    let (a, b) = (DB / (p.signal + DELTA), DB / (p.residual + DELTA));
    let grad = target
        .iter()
        .zip(estimate)
        .map(|(y, e)| a * 2.0 * p.alpha * y - b * 2.0 * (e - p.alpha * y))
        .collect();
    Ok((value, grad))
}

/// All orderings of `N` speaker labels in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationSet {
    speakers: usize,
    orders: Vec<Vec<usize>>,
}

impl PermutationSet {
    /// Exhaustive enumeration; `N` is limited to 8 (40320 orderings).
    pub fn new(speakers: usize) -> Result<Self> {
        if speakers == 0 || speakers > 8 {
            return Err(Error::InvalidArgument(format!("permutation search supports 1..=8 speakers, got {speakers}")));
        }
        let mut current: Vec<usize> = (0..speakers).collect();
        let mut orders = vec![current.clone()];
        // classic next-permutation
        loop {
            let Some(i) = (0..speakers - 1).rev().find(|&i| current[i] < current[i + 1]) else {
                break;
            };
            let j = (i + 1..speakers).rev().find(|&j| current[j] > current[i]).expect("successor exists");
            current.swap(i, j);
            current[i + 1..].reverse();
            orders.push(current.clone());
        }
        Ok(Self { speakers, orders })
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.orders.iter().map(Vec::as_slice)
    }

    pub fn is_bijection(p: &[usize]) -> bool {
        let mut seen = vec![false; p.len()];
        p.iter().all(|&v| v < p.len() && !std::mem::replace(&mut seen[v], true))
    }
}

/// Outcome of the permutation search for one utterance.
///
/// `permutation[n]` is the output position matched to target speaker `n`;
/// `si_sdr[n]` is `None` for silent targets, which are left out of `loss`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub permutation: Vec<usize>,
    pub si_sdr: Vec<Option<f64>>,
    pub silent: Vec<usize>,
}

/// Pairwise SI-SDR of every target (rows) against every estimate (columns);
/// rows of silent targets are `None`.
fn pair_matrix(estimates: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Vec<Option<Vec<f64>>>> {
    if estimates.len() != targets.len() || targets.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} estimates for {} targets",
            estimates.len(),
            targets.len()
        )));
    }
    targets
        .iter()
        .map(|y| {
            let row: Result<Vec<f64>> = estimates.iter().map(|e| si_sdr(y, e)).collect();
            match row {
                Ok(r) => Ok(Some(r)),
                Err(Error::SilentTarget(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

fn choose(matrix: &[Option<Vec<f64>>]) -> Result<LossReport> {
    let n = matrix.len();
    let silent: Vec<usize> = (0..n).filter(|&i| matrix[i].is_none()).collect();
    if silent.len() == n {
        return Err(Error::SilentTarget("every target speaker is silent".into()));
    }
    if !silent.is_empty() {
        log::warn!("silent target speaker(s) {silent:?} excluded from the loss");
    }
    let active = (n - silent.len()) as f64;
    let mut best: Option<(f64, &[usize])> = None;
    let perms = PermutationSet::new(n)?;
    for p in perms.iter() {
        let total: f64 = (0..n).filter_map(|i| matrix[i].as_ref().map(|row| row[p[i]])).sum();
        let loss = -total / active;
        if best.is_none_or(|(b, _)| loss < b) {
            best = Some((loss, p));
        }
    }
    let (loss, p) = best.expect("at least one ordering");
    Ok(LossReport {
        loss,
        permutation: p.to_vec(),
        si_sdr: (0..n).map(|i| matrix[i].as_ref().map(|row| row[p[i]])).collect(),
        silent,
    })
}

/// Permutation-invariant negative SI-SDR over time-domain signals.
pub fn fpit(estimates: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<LossReport> {
    choose(&pair_matrix(estimates, targets)?)
}

/// Time-domain signal of every `(utterance, position)` of a bound spectrum.
pub fn bound_to_time(pred: &BoundPrediction, config: StftConfig, samples: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    if pred.freqs != config.freqs() {
        return Err(Error::Config(format!("{} frequencies cannot be inverted with window {}", pred.freqs, config.window_length())));
    }
    let engine = StftEngine::<f64>::new(config);
    let mut bins = vec![Complex::new(0.0, 0.0); pred.frames * pred.freqs];
    let mut out = Vec::with_capacity(pred.utterances);
    for u in 0..pred.utterances {
        let mut speakers = Vec::with_capacity(pred.speakers);
        for n in 0..pred.speakers {
            for f in 0..pred.freqs {
                for t in 0..pred.frames {
                    bins[t * pred.freqs + f] = pred.get(u, n, f, t);
                }
            }
            let mut x = engine.synthesize(&bins, pred.frames);
            x.resize(samples, 0.0);
            speakers.push(x);
        }
        out.push(speakers);
    }
    Ok(out)
}

/// Full-band PIT on spectra: both sides go through the inverse STFT and are
/// trimmed to `samples`; one report per utterance.
pub fn fpit_loss(
    pred: &BoundPrediction,
    targets: &BoundPrediction,
    config: StftConfig,
    samples: usize,
) -> Result<Vec<LossReport>> {
    if (pred.utterances, pred.speakers, pred.freqs, pred.frames)
        != (targets.utterances, targets.speakers, targets.freqs, targets.frames)
    {
        return Err(Error::shape("fpit_loss", "prediction and target spectra differ in shape"));
    }
    let est = bound_to_time(pred, config, samples)?;
    let tgt = bound_to_time(targets, config, samples)?;
    est.iter().zip(&tgt).map(|(e, t)| fpit(e, t)).collect()
}

/// Full-band PIT recorded on the tape.
///
/// `out` holds network outputs `[U*F*T, 2N]` in the packing of
/// [`crate::narrowband`]; `scales` are the `U x F` magnitude scales and
/// `targets[u][n]` the reference-channel target waveforms. The loss is the
/// mean of the per-utterance losses.
pub fn fpit_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    out: Var,
    layout: SeqLayout,
    scales: &[f64],
    targets: &[Vec<Vec<f64>>],
    config: StftConfig,
) -> Result<(Var, Vec<LossReport>)> {
    let value = tape.value(out);
    let (nu, nf, nt) = (layout.utterances, layout.freqs, layout.frames);
    let width = value.last_dim();
    let speakers = width / 2;
    if value.rows() != layout.rows() || width % 2 != 0 || scales.len() != nu * nf || targets.len() != nu {
        return Err(Error::shape(
            "fpit_on_tape",
            format!("output {:?}, {} scales, {} target sets for {layout:?}", value.shape(), scales.len(), targets.len()),
        ));
    }
    if nf != config.freqs() {
        return Err(Error::Config(format!("{nf} frequencies cannot be inverted with window {}", config.window_length())));
    }
    let net: Vec<f64> = value.data().iter().map(|v| v.as_f64()).collect();
    let pred = crate::narrowband::inverse_normalize_and_bind(&net, scales, nu, nf, nt, speakers)?;
    let engine = StftEngine::<f64>::new(config);
    let mut reports = Vec::with_capacity(nu);
    // d loss / d output, accumulated in f64
    let mut grad = vec![0.0; net.len()];
    for (u, tgt) in targets.iter().enumerate() {
        if tgt.len() != speakers {
            return Err(Error::shape("fpit_on_tape", format!("{} targets for {speakers} outputs", tgt.len())));
        }
        let samples = tgt[0].len();
        let est = bound_to_time(
            &BoundPrediction {
                utterances: 1,
                speakers,
                freqs: nf,
                frames: nt,
                data: pred.data[u * speakers * nf * nt..(u + 1) * speakers * nf * nt].to_vec(),
            },
            config,
            samples,
        )?
        .remove(0);
        let report = fpit(&est, tgt)?;
        let active = (speakers - report.silent.len()) as f64;
        for (n, y) in tgt.iter().enumerate() {
            if report.silent.contains(&n) {
                continue;
            }
            let m = report.permutation[n];
            let (_, g) = si_sdr_with_grad(y, &est[m])?;
            let g: Vec<f64> = g.iter().map(|v| -v / (active * nu as f64)).collect();
            let coeffs = engine.synthesize_adjoint(&g, nt);
            for f in 0..nf {
                let scale = scales[u * nf + f];
                for t in 0..nt {
                    let c = coeffs[t * nf + f];
                    let row = ((u * nf + f) * nt + t) * width;
                    grad[row + 2 * m] += c.re * scale;
                    grad[row + 2 * m + 1] += c.im * scale;
                }
            }
        }
        reports.push(report);
    }
    let loss = reports.iter().map(|r| r.loss).sum::<f64>() / nu as f64;
    let grad: Vec<S> = grad.into_iter().map(S::from_f64_lossy).collect();
    let var = tape.push_op(
        Tensor::scalar(S::from_f64_lossy(loss)),
        &[out],
        Box::new(move |g, _, grads| {
            if let Some(dx) = grads.slot(out) {
                for (d, v) in dx.iter_mut().zip(&grad) {
                    *d += g[0] * *v;
                }
            }
        }),
    );
    Ok((var, reports))
}

/// Metrics of one matched speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerMetrics {
    pub speaker: usize,
    pub position: usize,
    pub si_sdr: f64,
    /// SI-SDR of the unprocessed reference-channel mixture.
    pub mixture_si_sdr: f64,
}

impl SpeakerMetrics {
    pub fn si_sdri(&self) -> f64 {
        self.si_sdr - self.mixture_si_sdr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceMetrics {
    pub id: String,
    pub permutation: Vec<usize>,
    pub speakers: Vec<SpeakerMetrics>,
    pub silent: Vec<usize>,
}

/// Scores separated signals against targets, with the SI-SDR of `mixture`
/// (the reference channel) as the improvement baseline. The permutation
/// that maximizes the mean SI-SDR is used for both numbers.
pub fn evaluate(id: &str, estimates: &[Vec<f64>], targets: &[Vec<f64>], mixture: &[f64]) -> Result<UtteranceMetrics> {
    let report = fpit(estimates, targets)?;
    let mut speakers = Vec::new();
    for (n, y) in targets.iter().enumerate() {
        if let Some(value) = report.si_sdr[n] {
            speakers.push(SpeakerMetrics {
                speaker: n,
                position: report.permutation[n],
                si_sdr: value,
                mixture_si_sdr: si_sdr(y, mixture)?,
            });
        }
    }
    Ok(UtteranceMetrics { id: id.to_string(), permutation: report.permutation, speakers, silent: report.silent })
}

/// Per-speaker rows of many utterances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<UtteranceMetrics>,
}

impl MetricsTable {
    fn speakers(&self) -> impl Iterator<Item = &SpeakerMetrics> {
        self.rows.iter().flat_map(|r| &r.speakers)
    }

    pub fn mean_si_sdr(&self) -> f64 {
        mean(self.speakers().map(|s| s.si_sdr))
    }

    pub fn mean_si_sdri(&self) -> f64 {
        mean(self.speakers().map(SpeakerMetrics::si_sdri))
    }

    /// Tab-separated table with a closing aggregate line.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# si-sdr floor delta={DELTA:e}; a perfect unit-energy estimate reads 100 dB\n");
        s.push_str("utterance\tspeaker\tsi_sdr_db\tsi_sdri_db\tpermutation\n");
        for r in &self.rows {
            let perm = r.permutation.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
            for m in &r.speakers {
                let _ = writeln!(s, "{}\t{}\t{:.4}\t{:.4}\t{perm}", r.id, m.speaker, m.si_sdr, m.si_sdri());
            }
            for n in &r.silent {
                let _ = writeln!(s, "{}\t{n}\tsilent\tsilent\t{perm}", r.id);
            }
        }
        let _ = writeln!(s, "mean\t-\t{:.4}\t{:.4}\t-", self.mean_si_sdr(), self.mean_si_sdri());
        s
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
