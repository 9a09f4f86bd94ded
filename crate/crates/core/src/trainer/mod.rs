//! Mini-batch training, evaluation and checkpointed resumption.

mod adam;
mod checkpoint;

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::Settings;
use crate::error::{Error, Result};
use crate::loss::{bound_to_time, evaluate, fpit_on_tape, LossReport, MetricsTable};
use crate::narrowband::{extract_and_normalize, inverse_normalize_and_bind, NarrowbandBatch};
use crate::network::{mix_seed, ForwardOptions, Network};
use crate::normalization::RunningStats;
use crate::simulator::{MixtureExample, MixtureSource};
use crate::stft::{stft, StftConfig, Wave};
use crate::tensor::{Scalar, SeqLayout, Tape, Tensor};

pub use adam::Adam;
pub use checkpoint::{Checkpoint, Progress, FORMAT_VERSION};

pub const LOG_NAME: &str = "log.tsv";
pub const VALIDATION_NAME: &str = "validation.tsv";
pub const LAST_NAME: &str = "last.ckpt";
pub const BEST_NAME: &str = "best.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub decay: f64,
    /// Global gradient-norm threshold.
    pub clip_norm: f64,
    pub utterances_per_batch: usize,
    pub epochs: u64,
    pub seed: u64,
    pub precision: Precision,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            decay: 0.99,
            clip_norm: 5.0,
            utterances_per_batch: 2,
            epochs: 100,
            seed: 0,
            precision: Precision::F32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("train: {what}")));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        if self.utterances_per_batch == 0 {
            return bad("utterances per batch must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and epsilon must be positive");
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: u64) -> f64 {
        self.lr0 * self.decay.powi(i32::try_from(epoch).unwrap_or(i32::MAX))
    }
}

/// Scales `grads` so that their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = S::from_f64_lossy(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// Network input, targets and reference mixture of one utterance.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub batch: NarrowbandBatch,
    pub targets: Vec<Vec<f64>>,
    pub mixture: Vec<f64>,
}

pub fn prepare(example: &MixtureExample, config: StftConfig) -> Result<Prepared> {
    let spec = stft(&example.mixture, config)?;
    Ok(Prepared {
        batch: extract_and_normalize(&spec, example.reference_channel)?,
        targets: example.targets.clone(),
        mixture: example.mixture.channels[example.reference_channel].clone(),
    })
}

pub fn prepare_all(source: &dyn MixtureSource, indices: &[usize], config: StftConfig) -> Result<Vec<Prepared>> {
    indices.par_iter().map(|&i| source.get(i).and_then(|ex| prepare(&ex, config))).collect()
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Set when the loss or gradient was not finite; nothing was updated.
    pub skipped: bool,
    pub reports: Vec<LossReport>,
}

/// Training-mode loss and parameter gradients on the utterances in `items`.
pub struct LossGradients<S> {
    pub loss: f64,
    pub reports: Vec<LossReport>,
    /// One gradient per parameter tensor, in parameter order.
    pub grads: Vec<Vec<S>>,
    /// Batch normalization statistics of this batch, by block.
    pub running: Vec<(usize, RunningStats<S>)>,
}

pub fn loss_and_gradients<S: Scalar>(
    net: &Network<S>,
    items: &[Prepared],
    config: StftConfig,
    dropout_seed: u64,
) -> Result<LossGradients<S>> {
    let batch = NarrowbandBatch::concat(&items.iter().map(|p| p.batch.clone()).collect::<Vec<_>>())?;
    let layout = SeqLayout { utterances: batch.utterances, freqs: batch.freqs, frames: batch.frames };
    let mut tape = Tape::new();
    let params = net.params().bind(&mut tape, true);
    let x = Tensor::new(vec![batch.rows(), batch.width()], batch.data.iter().map(|&v| S::from_f64_lossy(v)).collect())?;
    let input = tape.constant(x);
    let fwd = net.forward_on_tape(&mut tape, &params, input, layout, ForwardOptions::train(dropout_seed))?;
    let targets: Vec<Vec<Vec<f64>>> = items.iter().map(|p| p.targets.clone()).collect();
    let (loss_var, reports) = fpit_on_tape(&mut tape, fwd.output, layout, &batch.scales, &targets, config)?;
    let loss = tape.value(loss_var).data()[0].as_f64();
    let grads = tape.backward(loss_var)?;
    let grads = params.iter().map(|&p| grads.get_or_zeros(p)).collect();
    Ok(LossGradients { loss, reports, grads, running: fwd.running })
}

/// One optimization step on the utterances in `items`.
pub fn train_step<S: Scalar>(
    net: &mut Network<S>,
    adam: &mut Adam<S>,
    items: &[Prepared],
    config: StftConfig,
    train: &TrainConfig,
    lr: f64,
    dropout_seed: u64,
) -> Result<StepReport> {
    let LossGradients { loss, reports, mut grads, running } = loss_and_gradients(net, items, config, dropout_seed)?;
    let grad_norm = clip_global_norm(&mut grads, train.clip_norm);
    if !loss.is_finite() || !grad_norm.is_finite() {
        log::warn!("non-finite loss {loss} or gradient norm {grad_norm}; step skipped");
        return Ok(StepReport { loss, grad_norm, skipped: true, reports });
    }
    adam.update(net.params_mut().tensors_mut(), &grads, lr)?;
    net.apply_running_updates(running);
    Ok(StepReport { loss, grad_norm, skipped: false, reports })
}

/// Separated reference-channel waveforms `[N][L]` of one mixture.
pub fn separate<S: Scalar>(net: &Network<S>, mixture: &Wave, reference_channel: usize, config: StftConfig) -> Result<Vec<Vec<f64>>> {
    let spec = stft(mixture, config)?;
    let batch = extract_and_normalize(&spec, reference_channel)?;
    let (out, _) = net.forward(&batch, ForwardOptions::eval())?;
    let out: Vec<f64> = out.data().iter().map(|v| v.as_f64()).collect();
    let pred = inverse_normalize_and_bind(&out, &batch.scales, 1, batch.freqs, batch.frames, net.config().num_speakers)?;
    Ok(bound_to_time(&pred, config, mixture.len())?.remove(0))
}

/// Separates every mixture of `source` and scores it against its targets.
pub fn evaluate_source<S: Scalar>(net: &Network<S>, source: &dyn MixtureSource, config: StftConfig) -> Result<MetricsTable> {
    let rows = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let ex = source.get(i)?;
            let est = separate(net, &ex.mixture, ex.reference_channel, config)?;
            evaluate(&source.id(i), &est, &ex.targets, &ex.mixture.channels[ex.reference_channel])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsTable { rows })
}

/// Where a run writes and whether it continues an earlier one.
#[derive(Clone, Debug)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    /// Continue from `last.ckpt` in `out_dir` when present.
    pub resume: bool,
    /// Stop after this many epochs of the current invocation.
    pub max_epochs_this_run: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub progress: Progress,
    /// Mean validation SI-SDRi of each epoch run in this invocation.
    pub validation: Vec<f64>,
    pub last: PathBuf,
    pub best: PathBuf,
}

fn append(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let text = if fresh { format!("{header}\n{line}\n") } else { format!("{line}\n") };
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains `settings.model` on `train`, validating on `val` after every
/// epoch. Writes `last.ckpt` every epoch and `best.ckpt` whenever the
/// validation SI-SDRi improves; a resumed run reproduces the uninterrupted
/// one exactly.
pub fn fit<S: Scalar>(
    settings: &Settings,
    train: &dyn MixtureSource,
    val: &dyn MixtureSource,
    opts: &FitOptions,
) -> Result<FitSummary> {
    let tc = &settings.train;
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::Data("the training set is empty".into()));
    }
    if train.channels() != settings.model.channels_in {
        return Err(Error::Data(format!(
            "training data has {} channels, the model expects {}",
            train.channels(),
            settings.model.channels_in
        )));
    }
    let config = settings.stft()?;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let last = opts.out_dir.join(LAST_NAME);
    let best = opts.out_dir.join(BEST_NAME);
    let (mut net, mut adam, mut progress) = if opts.resume && last.exists() {
        let ck = Checkpoint::<S>::load(&last)?;
        let stored = ck.settings()?;
        if stored.model != settings.model || stored.train.seed != tc.seed {
            return Err(Error::Checkpoint(format!(
                "{} was written for a different model or seed",
                last.display()
            )));
        }
        let net = ck.network()?;
        let adam = ck.optimizer.clone().ok_or_else(|| Error::Checkpoint("no optimizer state to resume".into()))?;
        log::info!("resuming at epoch {} step {}", ck.progress.epoch, ck.progress.step);
        (net, adam, ck.progress)
    } else {
        let net = Network::<S>::new(settings.model.clone(), mix_seed(tc.seed, 0x1417))?;
        let adam = Adam::new(net.params().tensors(), tc.beta1, tc.beta2, tc.adam_eps);
        (net, adam, Progress { seed: tc.seed, ..Progress::default() })
    };
    let batch = tc.utterances_per_batch;
    let steps = train.len().div_ceil(batch);
    let log_path = opts.out_dir.join(LOG_NAME);
    let val_path = opts.out_dir.join(VALIDATION_NAME);
    let mut validation = Vec::new();
    let stop = opts.max_epochs_this_run.map_or(tc.epochs, |m| (progress.epoch + m).min(tc.epochs));
    while progress.epoch < stop {
        let epoch = progress.epoch;
        let lr = tc.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, epoch)));
        let started = Instant::now();
        for (s, chunk) in order.chunks(batch).enumerate() {
            let items = prepare_all(train, chunk, config)?;
            let dropout_seed = mix_seed(mix_seed(tc.seed, epoch + 1), s as u64);
            let report = train_step(&mut net, &mut adam, &items, config, tc, lr, dropout_seed)?;
            progress.step += 1;
            append(
                &log_path,
                "epoch\tstep\tloss\tlr\tgrad_norm\twall_seconds\tstatus",
                &format!(
                    "{epoch}\t{}\t{:.6}\t{lr:.6e}\t{:.6}\t{:.3}\t{}",
                    progress.step,
                    report.loss,
                    report.grad_norm,
                    started.elapsed().as_secs_f64(),
                    if report.skipped { "skipped" } else { "ok" }
                ),
            )?;
            if (s + 1) % 50 == 0 || s + 1 == steps {
                log::info!("epoch {epoch} step {}/{steps} loss {:.3}", s + 1, report.loss);
            }
        }
        progress.epoch += 1;
        let metric = if val.is_empty() { f64::NAN } else { evaluate_source(&net, val, config)?.mean_si_sdri() };
        append(&val_path, "epoch\tmean_si_sdri_db", &format!("{epoch}\t{metric:.4}"))?;
        log::info!("epoch {epoch}: validation SI-SDRi {metric:.3} dB");
        validation.push(metric);
        let improved = progress.best_metric.is_nan() || metric > progress.best_metric || val.is_empty();
        if improved {
            progress.best_metric = metric;
            progress.best_epoch = epoch;
            Checkpoint::from_network(settings, &net, None, progress).save(&best)?;
        }
        Checkpoint::from_network(settings, &net, Some(&adam), progress).save(&last)?;
    }
    Ok(FitSummary { progress, validation, last, best })
}
